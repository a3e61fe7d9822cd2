"""Network-facing PIR server: multi-client batching and cluster mode.

Requests entering within one waiting window are executed as a batch that
shares a single database scan.  In cluster mode the grid is partitioned
along the row dimension; each worker answers with one partially-folded
ciphertext and the coordinator runs the remaining tournament levels.

Transport is length-prefixed binary frames over TCP; see FRAME_* constants.
"""

from __future__ import annotations

import hashlib
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .lattice import RgswCiphertext
from .modring import ring_context
from .params import PirParams
from .pir import (DatabaseImage, PirQuery, PirResponse, batch_row_sel,
                  col_tor, expand_query, row_sel)

PROTOCOL_VERSION = 0x0001

FRAME_HELLO = 0x01
FRAME_KEY_UPLOAD = 0x02
FRAME_QUERY = 0x03
FRAME_RESPONSE = 0x04
FRAME_PARTIAL = 0x05
FRAME_FINALIZE = 0x06
FRAME_ERROR = 0x7F

ERR_DIGEST = 3
ERR_PROTOCOL = 4
ERR_UNKNOWN_KEY = 5

_MAX_FRAME = 1 << 31


class ProtocolError(RuntimeError):
    """Malformed frame or unexpected message type."""


class DigestMismatch(ProtocolError):
    """Peer runs a different parameter set."""


# ------------------------------------------------------------------ framing


def send_frame(sock: socket.socket, ftype: int, payload: bytes) -> None:
    sock.sendall(bytes([ftype]) + struct.pack("<Q", len(payload)) + payload)


def recv_frame(sock: socket.socket):
    head = _recv_exact(sock, 9)
    if head is None:
        return None, None
    ftype = head[0]
    (length,) = struct.unpack("<Q", head[1:])
    if length > _MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return ftype, payload


def _recv_exact(sock: socket.socket, n: int):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else None
        buf.extend(chunk)
    return bytes(buf)


def hello_payload(params: PirParams) -> bytes:
    return struct.pack("<H", PROTOCOL_VERSION) + params.digest()


def check_hello(payload: bytes, params: PirParams) -> None:
    if len(payload) != 34:
        raise ProtocolError("bad HELLO length")
    (ver,) = struct.unpack_from("<H", payload, 0)
    if ver != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version {ver} unsupported")
    if payload[2:] != params.digest():
        raise DigestMismatch("parameter digest mismatch")


def error_payload(code: int, message: str) -> bytes:
    msg = message.encode()
    return struct.pack("<H", code) + msg


# ------------------------------------------------------------ configuration


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 = pick a free port
    window: float | str = "auto"
    max_batch: int = 32
    role: str = "standalone"  # standalone | coordinator | worker
    peers: list = field(default_factory=list)  # (host, port) of workers
    max_query_bytes: int = 1 << 26


@dataclass
class ClusterPlan:
    """Row partition of the grid across W workers."""

    W: int
    d_local: int
    ranges: list  # (row_lo, row_hi) per worker


@dataclass
class WorkerSlice:
    params: PirParams
    row_lo: int
    row_hi: int
    d_local: int
    polys_eval: np.ndarray  # (rows_local, D0, K, N)


def rlp_partition(db: DatabaseImage, W: int) -> ClusterPlan:
    params = db.params
    R = params.rows
    if W < 1 or W & (W - 1):
        raise ValueError(f"worker count {W} must be a power of two")
    if W > R:
        raise ValueError(f"worker count {W} exceeds grid rows {R}")
    if R % W:
        raise ValueError("grid rows not divisible by worker count")
    per = R // W
    ranges = [(w * per, (w + 1) * per) for w in range(W)]
    return ClusterPlan(W, params.d - (W.bit_length() - 1), ranges)


def make_slice(db: DatabaseImage, plan: ClusterPlan, widx: int) -> WorkerSlice:
    lo, hi = plan.ranges[widx]
    return WorkerSlice(db.params, lo, hi, plan.d_local,
                       db.polys_eval[lo:hi])


def worker_answer_partial(sl: WorkerSlice, query: PirQuery, evks: dict,
                          rgsw_s: RgswCiphertext):
    """Local RowSel over the slice plus the first d_local tournament levels.

    Returns one ciphertext as an (a, b) array pair.
    """
    params = sl.params
    ctx = ring_context(params)
    col_a, col_b, selectors = expand_query(params, query, evks, rgsw_s)
    rows = sl.polys_eval.shape[0]
    part_a = np.zeros((rows, params.K, params.N), dtype=np.uint64)
    part_b = np.zeros((rows, params.K, params.N), dtype=np.uint64)
    chunk = 64
    for lo in range(0, params.D0, chunk):
        hi = min(lo + chunk, params.D0)
        blk = sl.polys_eval[:, lo:hi]
        part_a = (part_a + np.einsum("rikn,ikn->rkn", blk, col_a[lo:hi])) % ctx.qc
        part_b = (part_b + np.einsum("rikn,ikn->rkn", blk, col_b[lo:hi])) % ctx.qc
    A, B = part_a, part_b
    for g in selectors[: sl.d_local]:
        da = (A[1::2] + (ctx.qc - A[0::2])) % ctx.qc
        db_ = (B[1::2] + (ctx.qc - B[0::2])) % ctx.qc
        from .lattice import external_product_batch

        ma, mb = external_product_batch(g, da, db_, params)
        A = (A[0::2] + ma) % ctx.qc
        B = (B[0::2] + mb) % ctx.qc
    assert A.shape[0] == 1
    return A[0], B[0]


def coordinator_finalize(params: PirParams, partials: list, selectors: list,
                         d_local: int) -> PirResponse:
    """Run the top log2(W) tournament levels over ordered worker partials."""
    part_a = np.stack([p[0] for p in partials])
    part_b = np.stack([p[1] for p in partials])
    return PirResponse(col_tor(params, part_a, part_b, selectors[d_local:]))


# ------------------------------------------------------------------- server


def window_duration(config: ServerConfig, db: DatabaseImage) -> float:
    """Waiting-window length: configured value, or the measured wall time of
    one RowSel scan (the batch-shareable stage)."""
    if config.window != "auto":
        return float(config.window)
    params = db.params
    zero = np.zeros((params.D0, params.K, params.N), dtype=np.uint64)
    t0 = time.monotonic()
    row_sel(db, zero, zero)
    return time.monotonic() - t0


@dataclass
class _Request:
    client_id: str
    request_id: int
    query: PirQuery
    reply: object  # callable(frame_type, payload)
    arrival: float
    nbytes: int
    dispatch: float = 0.0
    done: float = 0.0


class PirServer:
    """Threaded batch server; start() returns once the socket is listening."""

    def __init__(self, config: ServerConfig, db: DatabaseImage):
        self.config = config
        self.db = db
        self.params = db.params
        self.key_cache = {}
        self.window = window_duration(config, db)
        self.stats = []         # one dict per executed batch
        self.request_log = []   # completed _Request objects
        self._lock = threading.Lock()
        self._pending = []
        self._deadline = None
        self._batches = queue.Queue()
        self._stop = threading.Event()
        self._threads = []
        self._plan = None
        self._worker_socks = []
        if config.role == "coordinator":
            self._plan = rlp_partition(db, len(config.peers))
        self._slice = None
        if config.role == "worker":
            # a worker serves whatever slice it was handed as its "db"
            self._slice = WorkerSlice(db.params, 0, db.polys_eval.shape[0],
                                      0, db.polys_eval.reshape(
                                          -1, db.params.D0, db.params.K,
                                          db.params.N))

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self.config.host, self.config.port))
        self._sock.listen(64)
        self.addr = self._sock.getsockname()
        if self.config.role == "coordinator":
            self._connect_workers()
        for fn in (self._accept_loop, self._window_loop, self._executor_loop):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for s, _ in self._worker_socks:
            try:
                s.close()
            except OSError:
                pass
        self._batches.put(None)

    def _connect_workers(self):
        for host, port in self.config.peers:
            s = socket.create_connection((host, port))
            send_frame(s, FRAME_HELLO, hello_payload(self.params))
            ftype, payload = recv_frame(s)
            if ftype != FRAME_HELLO:
                raise ProtocolError("worker did not complete handshake")
            check_hello(payload, self.params)
            self._worker_socks.append((s, threading.Lock()))

    # -- intake -------------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,),
                                 daemon=True)
            t.start()

    def _serve_conn(self, conn: socket.socket):
        wlock = threading.Lock()

        def reply(ftype, payload):
            with wlock:
                try:
                    send_frame(conn, ftype, payload)
                except OSError:
                    pass

        try:
            ftype, payload = recv_frame(conn)
            if ftype != FRAME_HELLO:
                reply(FRAME_ERROR, error_payload(ERR_PROTOCOL, "expected HELLO"))
                return
            try:
                check_hello(payload, self.params)
            except DigestMismatch:
                reply(FRAME_ERROR, error_payload(ERR_DIGEST, "params digest mismatch"))
                return
            reply(FRAME_HELLO, hello_payload(self.params))
            while not self._stop.is_set():
                ftype, payload = recv_frame(conn)
                if ftype is None:
                    return
                self._handle_frame(ftype, payload, reply)
        except (ProtocolError, OSError) as exc:
            reply(FRAME_ERROR, error_payload(ERR_PROTOCOL, str(exc)))
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _handle_frame(self, ftype: int, payload: bytes, reply) -> None:
        if ftype == FRAME_KEY_UPLOAD:
            cid, evks, rgsw_s = fileio.decode_key_bundle(self.params, payload)
            digest = hashlib.sha256(payload).digest()
            self.key_cache[cid] = (evks, rgsw_s, digest)
            if self.config.role == "coordinator":
                for s, lk in self._worker_socks:
                    with lk:
                        send_frame(s, FRAME_KEY_UPLOAD, payload)
                        recv_frame(s)  # ack
            reply(FRAME_KEY_UPLOAD, digest)
        elif ftype == FRAME_QUERY:
            if len(payload) > self.config.max_query_bytes:
                reply(FRAME_ERROR, error_payload(ERR_PROTOCOL, "query too large"))
                return
            (cid_len,) = struct.unpack_from("<H", payload, 0)
            cid = payload[2: 2 + cid_len].decode()
            (rid,) = struct.unpack_from("<Q", payload, 2 + cid_len)
            ct = fileio.decode_ciphertext(self.params, payload[10 + cid_len:])
            if cid not in self.key_cache:
                reply(FRAME_ERROR, error_payload(ERR_UNKNOWN_KEY,
                                                 f"no keys for client {cid!r}"))
                return
            req = _Request(cid, rid, PirQuery(ct), reply, time.monotonic(),
                           len(payload))
            self._enqueue(req)
        else:
            reply(FRAME_ERROR, error_payload(ERR_PROTOCOL,
                                             f"unexpected frame {ftype:#x}"))

    def _enqueue(self, req: _Request) -> None:
        if self.config.role == "worker":
            # workers answer immediately; batching happens upstream
            self._batches.put([req])
            return
        with self._lock:
            self._pending.append(req)
            if self._deadline is None:
                self._deadline = req.arrival + self.window
            if len(self._pending) >= self.config.max_batch:
                self._dispatch_locked()

    def _dispatch_locked(self):
        batch, self._pending = self._pending, []
        self._deadline = None
        now = time.monotonic()
        for r in batch:
            r.dispatch = now
        self._batches.put(batch)

    def _window_loop(self):
        while not self._stop.is_set():
            with self._lock:
                if self._deadline is not None and time.monotonic() >= self._deadline:
                    self._dispatch_locked()
            time.sleep(min(0.005, max(self.window / 20, 0.0005)))

    # -- execution ----------------------------------------------------------

    def _executor_loop(self):
        while True:
            batch = self._batches.get()
            if batch is None or self._stop.is_set():
                return
            try:
                if self.config.role == "worker":
                    self._execute_worker(batch[0])
                elif self.config.role == "coordinator":
                    self._execute_cluster_batch(batch)
                else:
                    self._execute_batch(batch)
            except Exception as exc:  # keep serving on per-batch failure
                for r in batch:
                    r.reply(FRAME_ERROR, error_payload(ERR_PROTOCOL, str(exc)))

    def _execute_batch(self, batch: list) -> None:
        counters = {}
        expanded = []
        for r in batch:
            ca, cb, sel = expand_query(self.params, r.query,
                                       *self.key_cache[r.client_id][:2])
            expanded.append((ca, cb, sel))
        parts = batch_row_sel(self.db, [(e[0], e[1]) for e in expanded],
                              counters)
        client_bytes = []
        for r, (pa, pb), (_, _, sel) in zip(batch, parts, expanded):
            resp = col_tor(self.params, pa, pb, sel)
            body = fileio.encode_ciphertext(resp)
            r.reply(FRAME_RESPONSE, struct.pack("<Q", r.request_id) + body)
            r.done = time.monotonic()
            client_bytes.append(r.nbytes + len(body))
            self.request_log.append(r)
        self.stats.append({
            "batch": len(batch),
            "db_bytes": counters.get("db_bytes", 0),
            "client_bytes": client_bytes,
        })

    def _execute_worker(self, r: _Request) -> None:
        evks, rgsw_s, _ = self.key_cache[r.client_id]
        sl = self._slice
        # d_local is how many levels this worker folds; the coordinator told
        # us implicitly via slice height: fold down to exactly one ct.
        rows = sl.polys_eval.shape[0]
        sl.d_local = rows.bit_length() - 1
        a, b = worker_answer_partial(sl, r.query, evks, rgsw_s)
        from .lattice import BfvCiphertext
        from .modring import Domain, RnsPoly

        body = fileio.encode_ciphertext(
            BfvCiphertext(RnsPoly(a, Domain.EVAL), RnsPoly(b, Domain.EVAL)))
        r.reply(FRAME_PARTIAL, struct.pack("<Q", r.request_id) + body)
        r.done = time.monotonic()
        self.request_log.append(r)

    def _execute_cluster_batch(self, batch: list) -> None:
        plan = self._plan
        for r in batch:
            evks, rgsw_s, _ = self.key_cache[r.client_id]
            _, _, selectors = expand_query(self.params, r.query, evks, rgsw_s)
            qbody = fileio.encode_ciphertext(r.query.ct)
            cid = r.client_id.encode()
            frame = struct.pack("<H", len(cid)) + cid + \
                struct.pack("<Q", r.request_id) + qbody
            partials = []
            for s, lk in self._worker_socks:
                with lk:
                    send_frame(s, FRAME_QUERY, frame)
            for s, lk in self._worker_socks:
                with lk:
                    ftype, payload = recv_frame(s)
                if ftype != FRAME_PARTIAL:
                    raise ProtocolError("worker returned no partial")
                ct = fileio.decode_ciphertext(self.params, payload[8:])
                partials.append((ct.a.residues, ct.b.residues))
            resp = coordinator_finalize(self.params, partials, selectors,
                                        plan.d_local)
            body = fileio.encode_ciphertext(resp.ct)
            r.reply(FRAME_RESPONSE, struct.pack("<Q", r.request_id) + body)
            r.done = time.monotonic()
            self.request_log.append(r)
        self.stats.append({"batch": len(batch), "db_bytes": 0,
                           "client_bytes": []})


# ------------------------------------------------------------------- client


class PirClient:
    """Blocking single-connection client used by the CLI and the tests."""

    def __init__(self, host: str, port: int, params: PirParams):
        self.params = params
        self.sock = socket.create_connection((host, port))
        send_frame(self.sock, FRAME_HELLO, hello_payload(params))
        ftype, payload = recv_frame(self.sock)
        if ftype == FRAME_ERROR:
            raise DigestMismatch(self._err(payload))
        if ftype != FRAME_HELLO:
            raise ProtocolError("no HELLO from server")
        check_hello(payload, params)
        self._lock = threading.Lock()

    @staticmethod
    def _err(payload: bytes) -> str:
        (code,) = struct.unpack_from("<H", payload, 0)
        return f"[{code}] {payload[2:].decode(errors='replace')}"

    def upload_keys(self, client_id: str, evks: dict,
                    rgsw_s: RgswCiphertext) -> bytes:
        payload = fileio.encode_key_bundle(self.params, client_id, evks, rgsw_s)
        with self._lock:
            send_frame(self.sock, FRAME_KEY_UPLOAD, payload)
            ftype, resp = recv_frame(self.sock)
        if ftype == FRAME_ERROR:
            raise ProtocolError(self._err(resp))
        return resp

    def query(self, client_id: str, request_id: int, q: PirQuery) -> PirResponse:
        cid = client_id.encode()
        payload = struct.pack("<H", len(cid)) + cid + \
            struct.pack("<Q", request_id) + fileio.encode_ciphertext(q.ct)
        with self._lock:
            send_frame(self.sock, FRAME_QUERY, payload)
            ftype, resp = recv_frame(self.sock)
        if ftype == FRAME_ERROR:
            raise ProtocolError(self._err(resp))
        if ftype != FRAME_RESPONSE:
            raise ProtocolError(f"unexpected frame {ftype:#x}")
        (rid,) = struct.unpack_from("<Q", resp, 0)
        if rid != request_id:
            raise ProtocolError("response id mismatch")
        return PirResponse(fileio.decode_ciphertext(self.params, resp[8:]))

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# --------------------------------------------------------------- load model


def poisson_load(make_request, rate: float, n_requests: int, seed: int):
    """Drive Poisson arrivals against ``make_request() -> None`` and time them.

    Returns (latency samples in seconds, summary dict).  Each arrival runs
    in its own thread so in-flight requests overlap like real clients.
    """
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate, n_requests)
    latencies = [None] * n_requests
    threads = []

    def one(i):
        t0 = time.monotonic()
        make_request()
        latencies[i] = time.monotonic() - t0

    t_start = time.monotonic()
    for i in range(n_requests):
        time.sleep(gaps[i])
        t = threading.Thread(target=one, args=(i,))
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    wall = time.monotonic() - t_start
    lat = np.array(latencies, dtype=float)
    summary = {
        "n": n_requests,
        "mean": float(lat.mean()),
        "p50": float(np.percentile(lat, 50)),
        "p99": float(np.percentile(lat, 99)),
        "throughput_qps": n_requests / wall,
    }
    return lat, summary
