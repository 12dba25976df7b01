"""Event-driven descriptor transport: per-delivery wakeups with batch drain.

Each endpoint pairs a descriptor inbox with a local stream socket that plays
the kernel notification path: every delivery writes one byte, and the
receiver blocks in ``recv`` until something arrives. That keeps a receiving
context strictly load-proportional (no busy CPU at zero traffic) and makes
each hop carry a real kernel crossing, which is exactly the cost profile this
transport emulates.

Batching falls out of the wire discipline: one ``recv`` call picks up as many
notification bytes as are pending, up to the batch limit, and drains that
many descriptors in one go.
"""

from __future__ import annotations

import socket
import threading
from collections import deque
from dataclasses import dataclass

from .errors import (
    DuplicateFunction,
    EndpointClosed,
    InboxFull,
    InvalidConfig,
    UnknownDestination,
)

DEFAULT_INBOX_CAPACITY = 4096
MAX_INBOX_CAPACITY = 32768  # must stay below the notification socket buffer


@dataclass(frozen=True)
class BatchPolicy:
    """Upper bound on descriptors drained per wakeup."""

    max_batch: int = 32

    def __post_init__(self):
        if self.max_batch < 1:
            raise InvalidConfig("max_batch must be >= 1")


class EventEndpoint:
    """Inbox + wakeup channel owned by exactly one receiving context.

    Invariant: the notification socket holds one readable byte per queued
    descriptor (bytes are written after the descriptor is appended, so the
    byte count never exceeds the queue length). A blocked receiver therefore
    wakes iff a delivery happened, and leftover descriptors keep the channel
    readable, so no wakeup is ever lost.
    """

    def __init__(self, fn_id: str, capacity: int = DEFAULT_INBOX_CAPACITY):
        if not 1 <= capacity <= MAX_INBOX_CAPACITY:
            raise InvalidConfig(
                f"inbox capacity must be in [1, {MAX_INBOX_CAPACITY}], got {capacity}"
            )
        self.fn_id = fn_id
        self.capacity = capacity
        self._rd, self._wr = socket.socketpair()
        self._wr.setblocking(False)
        buf = max(capacity + 1024, 65536)
        self._wr.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, buf)
        self._rd.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, buf)
        self._inbox: deque = deque()
        self._lock = threading.Lock()
        self._closed = False
        # transport statistics (distinct from the audit ledger)
        self.delivered = 0
        self.wakeups = 0   # recv_batch calls that found the inbox empty and waited
        self.drains = 0    # recv_batch calls that returned descriptors

    def deliver(self, desc) -> None:
        """Append one descriptor and signal the receiver. Senders call this
        through a :class:`SocketMap`; safe from any context."""
        with self._lock:
            if self._closed:
                raise UnknownDestination(f"{self.fn_id}: endpoint closed")
            if len(self._inbox) >= self.capacity:
                raise InboxFull(self.fn_id)
            self._inbox.append(desc)
            self.delivered += 1
        try:
            self._wr.send(b"\x01")
        except OSError:
            # closed under our feet during shutdown; receiver drains via EOF
            pass

    def recv_batch(self, policy: BatchPolicy | int = 32) -> list:
        """Block until at least one descriptor is queued, then drain up to the
        batch limit in arrival order."""
        max_batch = policy.max_batch if isinstance(policy, BatchPolicy) else int(policy)
        if max_batch < 1:
            raise InvalidConfig("max_batch must be >= 1")
        with self._lock:
            waiting = not self._inbox
            if waiting and self._closed:
                raise EndpointClosed(self.fn_id)
        try:
            data = self._rd.recv(max_batch)
        except OSError:
            raise EndpointClosed(self.fn_id) from None
        if waiting:
            self.wakeups += 1
        with self._lock:
            if not data:
                # writer closed; everything signalled was already drained
                if self._inbox:
                    batch = self._pop_locked(max_batch)
                    self.drains += 1
                    return batch
                raise EndpointClosed(self.fn_id)
            batch = self._pop_locked(min(len(data), max_batch))
        self.drains += 1
        return batch

    def _pop_locked(self, n: int) -> list:
        inbox = self._inbox
        return [inbox.popleft() for _ in range(min(n, len(inbox)))]

    def pending(self) -> int:
        with self._lock:
            return len(self._inbox)

    def drain_remaining(self) -> list:
        """Non-blocking removal of everything still queued; shutdown hygiene."""
        with self._lock:
            out = list(self._inbox)
            self._inbox.clear()
        return out

    def close(self) -> None:
        """Stop accepting deliveries and wake the receiver.

        Bytes already written stay readable, so a blocked receiver drains the
        remaining inbox before seeing EndpointClosed.
        """
        with self._lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._wr.close()
        except OSError:
            pass

    def dispose(self) -> None:
        self.close()
        try:
            self._rd.close()
        except OSError:
            pass


class SocketMap:
    """Function-id routing for event deliveries, with send-site filtering.

    When constructed with a pool, undeliverable descriptors (unknown or
    filtered destination, inbox full) have their frame returned to that pool
    before the error propagates, and the drop is counted.
    """

    def __init__(self, pool=None):
        self._entries: dict[str, EventEndpoint] = {}
        self._lock = threading.Lock()
        self._filter = None
        self._pool = pool
        self.dropped = 0

    def register(self, fn_id: str,
                 capacity: int = DEFAULT_INBOX_CAPACITY) -> EventEndpoint:
        with self._lock:
            if fn_id in self._entries:
                raise DuplicateFunction(fn_id)
            endpoint = EventEndpoint(fn_id, capacity)
            self._entries[fn_id] = endpoint
            return endpoint

    def deregister(self, fn_id: str) -> None:
        with self._lock:
            endpoint = self._entries.pop(fn_id, None)
        if endpoint is not None:
            endpoint.close()

    def lookup(self, fn_id: str) -> EventEndpoint | None:
        with self._lock:
            return self._entries.get(fn_id)

    def set_filter(self, hook) -> None:
        """hook(src_fn, dst_fn) -> bool; False blocks the delivery."""
        self._filter = hook

    def send(self, desc) -> None:
        """Deliver ``desc`` to its destination's inbox and set its wakeup.

        Frame ownership transfers on success; on failure the frame is freed
        (when a pool is attached) and the drop counted.
        """
        endpoint = self.lookup(desc.dst_fn)
        if endpoint is None:
            self._drop(desc)
            raise UnknownDestination(desc.dst_fn)
        hook = self._filter
        if hook is not None and not hook(desc.src_fn, desc.dst_fn):
            self._drop(desc)
            raise UnknownDestination(
                f"{desc.src_fn}->{desc.dst_fn}: denied by filter"
            )
        try:
            endpoint.deliver(desc)
        except (InboxFull, UnknownDestination):
            self._drop(desc)
            raise

    def _drop(self, desc) -> None:
        self.dropped += 1
        if self._pool is not None:
            try:
                self._pool.free_frame(desc.frame)
            except Exception:
                pass

    def close_all(self) -> None:
        with self._lock:
            endpoints = list(self._entries.values())
            self._entries.clear()
        for endpoint in endpoints:
            endpoint.close()


def send_audited(sockmap: SocketMap, desc, ledger, step: int) -> None:
    """Send plus per-hop cost accounting: one interrupt (receiver wakeup) and
    one context switch (its blocking receive returning) on the audited path."""
    sockmap.send(desc)
    if ledger is not None:
        ledger.record_hop(desc.trace_id, step)
