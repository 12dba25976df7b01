"""Message-broker plane: terminates real TCP connections, parses HTTP/1.1
requests, carries each message body through shared memory while middlebox
functions work on the parsed metadata, and egresses via pooled upstream
connections.

Per message the broker pays exactly two copies at ingest (socket read into
the broker buffer, buffer into the frame) and two at egress (frame out,
socket write), plus one protocol pass and one parse/serialize on each side.
Chain hops between those points move only descriptors: free on the polling
path, one interrupt plus one context switch per hop on the event path.
"""

from __future__ import annotations

import itertools
import queue
import selectors
import socket
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

from .audit import AuditLedger, CostVector
from .descriptors import (
    EGRESS,
    INGRESS_ID,
    FlowKey,
    HttpExchangeMeta,
    PacketDescriptor,
)
from .errors import (
    DuplicateFunction,
    EndpointClosed,
    InboxFull,
    InvalidConfig,
    ModeChangeAfterStart,
    ParseError,
    PlaneFrozen,
    PlaneUnavailable,
    PoolExhausted,
    UnknownDestination,
    UnknownFunction,
    UpstreamUnavailable,
)
from .events import BatchPolicy, SocketMap, send_audited
from .handlers import HandlerContext
from .http11 import (
    read_response,
    serialize_request,
    simple_response,
    try_parse_request,
)
from .packet_plane import Mode
from .pool import FramePool
from .rings import DescriptorRing, RingPair
from .routing import DENY, FilterTable, RoutingTable

RELAY_ID = "__relay__"

INGEST_COST = CostVector(copies=2, interrupts=2, context_switches=1,
                         protocol_tasks=1, serde_tasks=1)
EGRESS_COST = CostVector(copies=2, interrupts=1, context_switches=1,
                         protocol_tasks=1, serde_tasks=1)

_STOP = object()


@dataclass
class BrokerConfig:
    listen: tuple[str, int] = ("127.0.0.1", 0)
    upstreams: list[tuple[str, int]] = field(default_factory=list)
    mode: Mode = Mode.EVENT
    batch: BatchPolicy = field(default_factory=BatchPolicy)
    ring_capacity: int = 1024
    egress_workers: int = 2
    upstream_timeout: float = 5.0
    burst: int = 64

    def validate(self) -> None:
        if not self.upstreams:
            raise InvalidConfig("broker needs at least one upstream")
        if self.egress_workers < 1:
            raise InvalidConfig("egress_workers must be >= 1")


@dataclass
class MfRegistration:
    fn_id: str
    handler: object
    context: HandlerContext
    rings: RingPair | None = None
    endpoint: object = None


class _ClientConn:
    __slots__ = ("sock", "conn_id", "buffer", "in_flight", "lock", "closed", "flow")

    def __init__(self, sock, conn_id, flow):
        self.sock = sock
        self.conn_id = conn_id
        self.buffer = bytearray()
        self.in_flight = False
        self.lock = threading.Lock()
        self.closed = False
        self.flow = flow


class UpstreamPool:
    """Keep-alive connection pool, one idle list per backend."""

    def __init__(self, backends, timeout=5.0):
        self._backends = list(backends)
        self._timeout = timeout
        self._idle = {i: [] for i in range(len(backends))}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._backends)

    def _checkout(self, idx):
        with self._lock:
            if self._idle[idx]:
                return self._idle[idx].pop(), True
        try:
            sock = socket.create_connection(self._backends[idx], timeout=self._timeout)
        except OSError as exc:
            raise UpstreamUnavailable(f"backend {idx}: {exc}") from None
        sock.settimeout(self._timeout)
        return sock, False

    def roundtrip(self, idx, data: bytes) -> bytes:
        if not 0 <= idx < len(self._backends):
            raise UpstreamUnavailable(f"backend index {idx} out of range")
        for attempt in (0, 1):
            sock, pooled = self._checkout(idx)
            try:
                sock.sendall(data)
                raw, _status, _body, reusable = read_response(sock)
            except (OSError, ParseError) as exc:
                sock.close()
                if pooled and attempt == 0:
                    continue  # stale keep-alive connection; retry fresh
                raise UpstreamUnavailable(f"backend {idx}: {exc}") from None
            if reusable:
                with self._lock:
                    self._idle[idx].append(sock)
            else:
                sock.close()
            return raw
        raise UpstreamUnavailable(f"backend {idx}")

    def close_all(self):
        with self._lock:
            socks = [s for lst in self._idle.values() for s in lst]
            for lst in self._idle.values():
                lst.clear()
        for sock in socks:
            sock.close()


class ProxyPlane:
    """One middlebox chain behind a listening broker."""

    def __init__(self, pool: FramePool, config: BrokerConfig,
                 ledger: AuditLedger | None = None, *, name: str = "proxy"):
        config.validate()
        self.pool = pool
        self.BURST = config.burst
        self.config = config
        self.ledger = ledger
        self.name = name
        self.routes = RoutingTable()
        self.filters = FilterTable(default=DENY)
        self._regs: dict[str, MfRegistration] = {}
        self._entry: str | None = None
        self._trace_ids = itertools.count()
        self._conn_ids = itertools.count()
        self._threads: dict[str, threading.Thread] = {}
        self._tids: dict[str, int] = {}
        self._stop = threading.Event()
        self._started = False
        self.drops: Counter = Counter()
        self.ingest_count = 0
        self.egress_count = 0
        self.parse_errors = 0
        self.upstream_errors = 0
        self.latency_records: list[dict] = []
        self._latency_lock = threading.Lock()
        self._t_ingress: dict[int, int] = {}
        self._conns: dict[int, _ClientConn] = {}
        self._parked: deque = deque()
        self._recheck: deque = deque()
        self._sockmap: SocketMap | None = None
        self._upstreams = UpstreamPool(config.upstreams, config.upstream_timeout)
        self._egress_ring = DescriptorRing(config.ring_capacity)
        self._egress_q: queue.Queue = queue.Queue()
        self._listener: socket.socket | None = None
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_w.setblocking(False)

    # -- topology ----------------------------------------------------------

    @property
    def mode(self) -> Mode:
        return self.config.mode

    def set_mode(self, mode: Mode) -> None:
        if self._started:
            raise ModeChangeAfterStart(self.name)
        self.config.mode = Mode(mode)

    def register_mf(self, fn_id: str, handler) -> MfRegistration:
        if self._started:
            raise PlaneFrozen(self.name)
        if fn_id in self._regs or fn_id in (RELAY_ID, INGRESS_ID, EGRESS):
            raise DuplicateFunction(fn_id)
        reg = MfRegistration(fn_id, handler, HandlerContext(self.pool, fn_id))
        self._regs[fn_id] = reg
        return reg

    def set_entry(self, fn_id: str) -> None:
        if fn_id not in self._regs:
            raise UnknownFunction(fn_id)
        self._entry = fn_id
        self.filters.allow(INGRESS_ID, fn_id)

    def set_route(self, from_fn: str, to: str) -> None:
        if from_fn not in self._regs:
            raise UnknownFunction(from_fn)
        if to != EGRESS and to not in self._regs:
            raise UnknownFunction(to)
        self.routes.set_route(from_fn, to)
        self.filters.allow(from_fn, to)

    def set_filter(self, src_fn: str, dst_fn: str, verdict: str) -> None:
        for fn in (src_fn, dst_fn):
            if fn not in self._regs and fn not in (EGRESS, INGRESS_ID):
                raise UnknownFunction(fn)
        self.filters.set(src_fn, dst_fn, verdict)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        if self._entry is None:
            raise PlaneUnavailable(f"{self.name}: no entry function")
        self._stop.clear()
        self._started = True
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(self.config.listen)
        self._listener.listen(256)
        self._listener.setblocking(False)
        if self.mode is Mode.POLLING:
            for reg in self._regs.values():
                reg.rings = RingPair.new(self.config.ring_capacity)
                self._spawn(f"mf.{reg.fn_id}", self._mf_loop_polling, reg)
            self._spawn("router", self._router_loop_polling)
            self._spawn("egress", self._egress_loop_polling)
        else:
            self._sockmap = SocketMap(pool=self.pool)
            self._sockmap.set_filter(self._event_filter)
            self._relay_ep = self._sockmap.register(RELAY_ID,
                                                    capacity=self.config.ring_capacity)
            for reg in self._regs.values():
                reg.endpoint = self._sockmap.register(
                    reg.fn_id, capacity=self.config.ring_capacity)
            for reg in self._regs.values():
                self._spawn(f"mf.{reg.fn_id}", self._mf_loop_event, reg)
            self._spawn("relay", self._relay_loop)
            for i in range(self.config.egress_workers):
                self._spawn(f"egress.{i}", self._egress_worker)
        self._spawn("io", self._io_loop)

    def stop(self) -> None:
        if not self._started:
            return
        self._stop.set()
        self._wake()
        if self._sockmap is not None:
            endpoints = [self._relay_ep] + [r.endpoint for r in self._regs.values()]
            self._sockmap.close_all()
        else:
            endpoints = []
        for _ in range(self.config.egress_workers):
            self._egress_q.put(_STOP)
        for thread in self._threads.values():
            thread.join(timeout=5)
        self._threads.clear()
        for endpoint in endpoints:
            for desc in endpoint.drain_remaining():
                self._release_frame(desc)
        self._drain_rings()
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for conn in list(self._conns.values()):
            conn.sock.close()
        self._conns.clear()
        self._upstreams.close_all()
        self._sockmap = None
        self._started = False

    def close(self) -> None:
        self.stop()
        self._wake_r.close()
        self._wake_w.close()

    def _drain_rings(self) -> None:
        rings = [self._egress_ring]
        for reg in self._regs.values():
            if reg.rings is not None:
                rings.extend((reg.rings.rx, reg.rings.tx))
        for ring in rings:
            while True:
                desc = ring.dequeue()
                if desc is None:
                    break
                self._release_frame(desc)
        while True:
            try:
                desc = self._egress_q.get_nowait()
            except queue.Empty:
                break
            if desc is not _STOP:
                self._release_frame(desc)

    def _release_frame(self, desc) -> None:
        try:
            self.pool.free_frame(desc.frame)
        except Exception:
            pass

    @property
    def running(self) -> bool:
        return self._started

    @property
    def listen_address(self) -> tuple[str, int]:
        if self._listener is None:
            raise PlaneUnavailable(self.name)
        return self._listener.getsockname()

    def _spawn(self, label: str, target, *args) -> None:
        def wrapper():
            self._tids[label] = threading.get_native_id()
            target(*args)

        thread = threading.Thread(target=wrapper, name=f"{self.name}.{label}",
                                  daemon=True)
        self._threads[label] = thread
        thread.start()

    def thread_ids(self) -> dict[str, int]:
        return dict(self._tids)

    def _wake(self) -> None:
        try:
            self._wake_w.send(b"\x01")
        except OSError:
            pass

    # -- connection handling ----------------------------------------------------

    def _io_loop(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self._listener, selectors.EVENT_READ, ("accept", None))
        sel.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        while not self._stop.is_set():
            timeout = 0.005 if self._parked else None
            events = sel.select(timeout)
            for key, _mask in events:
                kind, conn = key.data
                if kind == "accept":
                    self._accept_all(sel)
                elif kind == "wake":
                    try:
                        self._wake_r.recv(4096)
                    except OSError:
                        pass
                    self._process_rechecks(sel)
                else:
                    self._on_readable(sel, conn)
            if self._parked:
                self._retry_parked()
        sel.close()

    def _accept_all(self, sel) -> None:
        while True:
            try:
                sock, addr = self._listener.accept()
            except (BlockingIOError, OSError):
                return
            sock.setblocking(True)
            local = sock.getsockname()
            flow = FlowKey(addr[0], local[0], addr[1], local[1], "TCP")
            conn = _ClientConn(sock, next(self._conn_ids), flow)
            self._conns[conn.conn_id] = conn
            sock.setblocking(False)
            sel.register(sock, selectors.EVENT_READ, ("client", conn))

    def _close_conn(self, sel, conn) -> None:
        conn.closed = True
        try:
            sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()
        self._conns.pop(conn.conn_id, None)

    def _on_readable(self, sel, conn) -> None:
        try:
            data = conn.sock.recv(65536)
        except BlockingIOError:
            return
        except OSError:
            self._close_conn(sel, conn)
            return
        if not data:
            self._close_conn(sel, conn)
            return
        conn.buffer += data
        self._pump(sel, conn)

    def _pump(self, sel, conn) -> None:
        # one request in flight per connection keeps responses ordered
        while not conn.in_flight and not conn.closed:
            try:
                request, consumed = try_parse_request(conn.buffer)
            except ParseError:
                self.parse_errors += 1
                self._send_raw(conn, simple_response(400, "Bad Request"))
                self._close_conn(sel, conn)
                return
            if request is None:
                return
            del conn.buffer[:consumed]
            conn.in_flight = True
            self._ingest(conn, request)

    def _process_rechecks(self, sel) -> None:
        while True:
            try:
                conn = self._recheck.popleft()
            except IndexError:
                return
            if not conn.closed:
                self._pump(sel, conn)

    def _retry_parked(self) -> None:
        for _ in range(len(self._parked)):
            conn, request = self._parked.popleft()
            if conn.closed:
                continue
            self._ingest(conn, request)

    # -- broker ingest ------------------------------------------------------------

    def _ingest(self, conn, request) -> None:
        """Move one parsed message into shared memory and start its trace.

        Socket read into the broker buffer and buffer into the frame are the
        two audited ingest copies; pool pressure parks the request instead of
        dropping it (stream semantics).
        """
        body = request.body
        if len(body) > self.pool.config.frame_size:
            self._send_raw(conn, simple_response(413, "Payload Too Large"))
            conn.in_flight = False
            return
        try:
            ref = self.pool.alloc_frame()
        except PoolExhausted:
            self._parked.append((conn, request))
            return
        self.pool.write_frame(ref, 0, body)
        trace_id = next(self._trace_ids)
        meta = HttpExchangeMeta(
            method=request.method, path=request.target, version=request.version,
            headers=request.headers, host=request.header("host"),
            connection_id=conn.conn_id,
        )
        desc = PacketDescriptor(ref, 0, len(body), INGRESS_ID, self._entry,
                                trace_id, flow=conn.flow, meta=meta)
        ledger = self.ledger
        if ledger is not None:
            ledger.record_vector(trace_id, 0, INGEST_COST)
        with self._latency_lock:
            self._t_ingress[trace_id] = time.monotonic_ns()
        self.ingest_count += 1
        if self.mode is Mode.POLLING:
            desc.chain_hops = 1
            if not self._regs[self._entry].rings.rx.enqueue(desc):
                self._fail_request(desc, conn, 503, "Service Unavailable", "ring_full")
        else:
            try:
                send_audited(self._sockmap, desc, ledger, step=1)
                desc.chain_hops = 1
            except (UnknownDestination, InboxFull):
                # socket map already freed the frame
                self._finish_drop(desc, "inbox_full", respond=(conn, 503))

    def _fail_request(self, desc, conn, status, reason, drop_reason) -> None:
        self._release_frame(desc)
        self._finish_drop(desc, drop_reason, respond=(conn, status, reason))

    def _finish_drop(self, desc, reason, respond=None) -> None:
        self.drops[reason] += 1
        if self.ledger is not None:
            self.ledger.complete(desc.trace_id, "drop")
        with self._latency_lock:
            self._t_ingress.pop(desc.trace_id, None)
        conn = self._conns.get(desc.meta.connection_id) if desc.meta else None
        if respond is not None and conn is not None:
            status = respond[1]
            reason_text = respond[2] if len(respond) > 2 else "Service Unavailable"
            self._send_raw(conn, simple_response(status, reason_text))
        if conn is not None:
            conn.in_flight = False
            self._recheck.append(conn)
            self._wake()

    # -- chain movement --------------------------------------------------------------

    def _mf_loop_polling(self, reg: MfRegistration) -> None:
        # hot spin with cooperative handoff on empty polls (see packet plane)
        rx, tx = reg.rings.rx, reg.rings.tx
        stop = self._stop
        idle = time.sleep
        while not stop.is_set():
            batch = rx.burst_dequeue(self.BURST)
            if not batch:
                idle(0)
                continue
            for desc in batch:
                out = self._run_handler(reg, desc)
                if out is None:
                    continue
                out.chain_hops += 1
                if not tx.enqueue(out):
                    self._release_frame(out)
                    self._finish_drop(out, "ring_full")

    def _router_loop_polling(self) -> None:
        stop = self._stop
        idle = time.sleep
        while not stop.is_set():
            if not self.route_step():
                idle(0)

    def route_step(self) -> int:
        moved = 0
        for reg in self._regs.values():
            for desc in reg.rings.tx.burst_dequeue(self.BURST * 2):
                moved += self._route_one_polling(desc)
        return moved

    def _route_one_polling(self, desc) -> int:
        nxt = self.routes.next_hop(desc.src_fn)
        if nxt is None:
            self._release_frame(desc)
            self._finish_drop(desc, "no_route")
            return 0
        if not self.filters.check(desc.src_fn, nxt):
            self._release_frame(desc)
            self._finish_drop(desc, "filtered")
            return 0
        if nxt == EGRESS:
            if not self._egress_ring.enqueue(desc):
                self._release_frame(desc)
                self._finish_drop(desc, "ring_full")
                return 0
            return 1
        desc.chain_hops += 1
        desc.dst_fn = nxt
        if not self._regs[nxt].rings.rx.enqueue(desc):
            self._release_frame(desc)
            self._finish_drop(desc, "ring_full")
            return 0
        return 1

    def _run_handler(self, reg, desc):
        try:
            out = reg.handler(reg.context, desc)
        except Exception:
            out = None
        if out is None:
            self._release_frame(desc)
            self._finish_drop(desc, "handler")
            return None
        out.src_fn = reg.fn_id
        return out

    def _mf_loop_event(self, reg: MfRegistration) -> None:
        endpoint = reg.endpoint
        while True:
            try:
                batch = endpoint.recv_batch(self.config.batch)
            except EndpointClosed:
                return
            for desc in batch:
                out = self._run_handler(reg, desc)
                if out is None:
                    continue
                out.dst_fn = RELAY_ID
                self._send_chain_hop(out)

    def _relay_loop(self) -> None:
        endpoint = self._relay_ep
        while True:
            try:
                batch = endpoint.recv_batch(self.config.batch)
            except EndpointClosed:
                return
            for desc in batch:
                self._route_one_event(desc)

    def _route_one_event(self, desc) -> None:
        nxt = self.routes.next_hop(desc.src_fn)
        if nxt is None:
            self._release_frame(desc)
            self._finish_drop(desc, "no_route")
            return
        if nxt == EGRESS:
            if not self.filters.check(desc.src_fn, EGRESS):
                self._release_frame(desc)
                self._finish_drop(desc, "filtered")
                return
            self._egress_q.put(desc)
            return
        desc.dst_fn = nxt
        self._send_chain_hop(desc)

    def _event_filter(self, src_fn: str, dst_fn: str) -> bool:
        if dst_fn == RELAY_ID:
            return True
        return self.filters.check(src_fn, dst_fn)

    def _send_chain_hop(self, desc) -> None:
        step = desc.chain_hops + 1
        try:
            send_audited(self._sockmap, desc, self.ledger, step)
            desc.chain_hops = step
        except UnknownDestination:
            self._finish_drop(desc, "filtered")
        except InboxFull:
            self._finish_drop(desc, "inbox_full")

    # -- broker egress ------------------------------------------------------------------

    def _egress_loop_polling(self) -> None:
        stop = self._stop
        idle = time.sleep
        while not stop.is_set():
            batch = self._egress_ring.burst_dequeue(self.BURST)
            if not batch:
                idle(0)
                continue
            for desc in batch:
                self._egress_one(desc)

    def _egress_worker(self) -> None:
        while True:
            desc = self._egress_q.get()
            if desc is _STOP:
                return
            self._egress_one(desc)

    def _egress_one(self, desc) -> None:
        """Serialize the (possibly rewritten) message, relay it upstream, and
        answer the client with the upstream's bytes."""
        meta = desc.meta
        body = self.pool.read_frame(desc.frame, desc.offset, desc.length)
        backend = meta.backend_choice if meta.backend_choice is not None else 0
        data = serialize_request(meta.method, meta.path, meta.headers, body)
        try:
            response = self._upstreams.roundtrip(backend, data)
        except UpstreamUnavailable:
            self.upstream_errors += 1
            response = simple_response(502, "Bad Gateway")
        if self.ledger is not None:
            self.ledger.record_vector(desc.trace_id, desc.chain_hops + 1, EGRESS_COST)
        self.pool.free_frame(desc.frame)
        t_egress = time.monotonic_ns()
        conn = self._conns.get(meta.connection_id)
        if conn is not None and not conn.closed:
            self._send_raw(conn, response)
            conn.in_flight = False
            self._recheck.append(conn)
            self._wake()
        self.egress_count += 1
        if self.ledger is not None:
            self.ledger.complete(desc.trace_id, "egress")
        with self._latency_lock:
            t_ingress = self._t_ingress.pop(desc.trace_id, None)
            if t_ingress is not None:
                self.latency_records.append({
                    "trace_id": desc.trace_id,
                    "t_ingress": t_ingress,
                    "t_egress": t_egress,
                    "mode": self.mode.value,
                })

    def _send_raw(self, conn, data: bytes) -> None:
        # the socket stays non-blocking (the IO thread may be selecting on it);
        # spin on writability with a hard deadline instead
        import select as _select
        deadline = time.monotonic() + 10.0
        view = memoryview(data)
        offset = 0
        with conn.lock:
            if conn.closed:
                return
            while offset < len(view):
                try:
                    offset += conn.sock.send(view[offset:])
                except BlockingIOError:
                    if time.monotonic() > deadline:
                        conn.closed = True
                        return
                    _select.select([], [conn.sock], [], 0.5)
                except OSError:
                    conn.closed = True
                    return

    # -- client helper --------------------------------------------------------------------

    def http_roundtrip(self, method="GET", path="/", headers=(), body=b"",
                       timeout=5.0):
        """One blocking request against this broker; returns (status, body, raw)."""
        request = serialize_request(method, path, list(headers), body)
        with socket.create_connection(self.listen_address, timeout=timeout) as sock:
            sock.sendall(request)
            raw, status, resp_body, _ = read_response(sock)
        return status, resp_body, raw

    def write_latency_jsonl(self, path) -> None:
        import json
        with self._latency_lock:
            records = list(self.latency_records)
        with open(path, "w") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")

    def stats(self) -> dict:
        return {
            "mode": self.mode.value,
            "ingest": self.ingest_count,
            "egress": self.egress_count,
            "drops": dict(self.drops),
            "parse_errors": self.parse_errors,
            "upstream_errors": self.upstream_errors,
            "pool_free": self.pool.free_count,
        }
