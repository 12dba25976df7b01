"""Small shared helpers: percentiles, address parsing."""

from __future__ import annotations


def percentile(sorted_samples, fraction: float):
    """Nearest-rank percentile of an already sorted sequence."""
    if not sorted_samples:
        raise ValueError("no samples")
    idx = min(len(sorted_samples) - 1, int(fraction * len(sorted_samples)))
    return sorted_samples[idx]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def ip_to_bytes(ip: str) -> bytes:
    parts = ip.split(".")
    if len(parts) != 4:
        raise ValueError(f"not a dotted quad: {ip!r}")
    return bytes(int(p) for p in parts)


def mac_to_bytes(mac: str) -> bytes:
    parts = mac.split(":")
    if len(parts) != 6:
        raise ValueError(f"not a MAC address: {mac!r}")
    return bytes(int(p, 16) for p in parts)
