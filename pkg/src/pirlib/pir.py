"""The retrieval pipeline: database encoding, query build/expand, RowSel,
ColTor, and response decoding.

The database is a D0 x 2^d grid of plaintext polynomials.  A query is a
single ciphertext whose coefficients carry (a) a one-hot column selector at
scale delta and (b) the gadget-scaled bits of the row index.  The server
expands it into D0 column ciphertexts plus d RGSW row selectors, scans the
grid once (RowSel), then folds the 2^d partial results with a mux tree
(ColTor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lattice
from .lattice import (BfvCiphertext, EvalKey, RgswCiphertext, SecretKey,
                      encrypt_raw, expansion_exponents, external_product_batch,
                      rgsw_from_rows, substitute_batch)
from .modring import Domain, RnsPoly, ring_context
from .params import PirParams

_U64 = np.uint64


class QueryError(ValueError):
    """Malformed or out-of-range query input."""


def grid_digest(params: PirParams, n_records: int, record_size: int,
                polys_eval: np.ndarray) -> bytes:
    """Content hash over the preprocessed grid, row-major.

    Concatenating row slices of a grid reproduces the full grid's digest
    input stream, which is what the cluster partition check relies on.
    """
    import hashlib
    import struct

    h = hashlib.sha256()
    h.update(params.digest())
    h.update(struct.pack("<QQ", n_records, record_size))
    flat = polys_eval.reshape(-1, params.K, params.N)
    step = max(1, (1 << 24) // (params.K * params.N))
    for lo in range(0, flat.shape[0], step):
        h.update(np.ascontiguousarray(flat[lo: lo + step]).tobytes())
    return h.digest()


@dataclass
class DatabaseImage:
    """Preprocessed database: Eval-domain plaintext grid (2^d, D0, K, N)."""

    params: PirParams
    n_records: int
    record_size: int
    polys_eval: np.ndarray
    digest: bytes = b""

    @property
    def records_per_poly(self) -> int:
        return max(1, self.params.poly_payload_bytes // self.record_size)

    def locate(self, index: int):
        """Map a record index to (row, col, byte offset in the poly)."""
        if not 0 <= index < self.n_records:
            raise QueryError(f"record index {index} out of range")
        poly = index // self.records_per_poly
        off = (index % self.records_per_poly) * self.record_size
        return poly // self.params.D0, poly % self.params.D0, off


@dataclass
class PirQuery:
    """One ciphertext; the target coordinates never leave the client."""

    ct: BfvCiphertext


@dataclass
class PirResponse:
    ct: BfvCiphertext


@dataclass
class TraceRecorder:
    """Logs the shape of every server-side access for obliviousness checks.

    Entries carry operation names and batch geometry only; any dependence on
    the queried index would show up as a trace difference.
    """

    events: list = field(default_factory=list)

    def log(self, op: str, *meta) -> None:
        self.events.append((op,) + meta)


# ------------------------------------------------------------- DB encoding


def encode_poly(params: PirParams, buf: bytes) -> np.ndarray:
    """Pack bytes into plaintext coefficients (little-endian groups)."""
    bpc = params.bytes_per_coeff
    cap = params.poly_payload_bytes
    if len(buf) > cap:
        raise ValueError(f"buffer of {len(buf)} bytes exceeds capacity {cap}")
    raw = np.zeros(cap, dtype=np.uint8)
    raw[: len(buf)] = np.frombuffer(buf, dtype=np.uint8)
    groups = raw.reshape(params.N, bpc).astype(np.uint64)
    shifts = _U64(8) * np.arange(bpc, dtype=_U64)
    return (groups << shifts).sum(axis=1, dtype=np.uint64)


def decode_poly(params: PirParams, coeffs: np.ndarray) -> bytes:
    """Inverse of :func:`encode_poly`."""
    bpc = params.bytes_per_coeff
    shifts = _U64(8) * np.arange(bpc, dtype=_U64)
    groups = (coeffs[:, None] >> shifts) & _U64(0xFF)
    return groups.astype(np.uint8).tobytes()


def preprocess_db(params: PirParams, records: np.ndarray) -> DatabaseImage:
    """Encode records into the Eval-domain plaintext grid.

    ``records`` is a (n_records, record_size) uint8 array.  Records are laid
    out poly-major (several per polynomial when they fit); the grid is padded
    with zero polynomials.
    """
    records = np.asarray(records, dtype=np.uint8)
    if records.ndim != 2:
        raise ValueError("records must be a (n_records, record_size) array")
    n_records, record_size = records.shape
    if record_size > params.poly_payload_bytes:
        raise ValueError(
            f"record size {record_size} exceeds polynomial capacity "
            f"{params.poly_payload_bytes}")
    rpp = max(1, params.poly_payload_bytes // record_size)
    n_polys = -(-n_records // rpp)
    if n_polys > params.D:
        raise ValueError(
            f"database needs {n_polys} polynomials but the grid holds {params.D}")

    ctx = ring_context(params)
    R, D0 = params.rows, params.D0
    bpc = params.bytes_per_coeff
    used = rpp * record_size  # payload bytes actually used per polynomial
    raw = np.zeros((R * D0, params.poly_payload_bytes), dtype=np.uint8)
    flat = records.reshape(-1)
    full, rem = divmod(flat.size, used)
    raw[:full, :used] = flat[: full * used].reshape(full, used)
    if rem:
        raw[full, :rem] = flat[full * used:]
    groups = raw.reshape(R * D0, params.N, bpc).astype(np.uint64)
    shifts = _U64(8) * np.arange(bpc, dtype=_U64)
    coeffs = (groups << shifts).sum(axis=2, dtype=np.uint64)
    del raw, groups
    # NTT in row chunks to bound peak memory on large grids.
    polys_eval = np.empty((R * D0, params.K, params.N), dtype=_U64)
    step = max(1, (1 << 26) // (params.K * params.N))
    for lo in range(0, R * D0, step):
        hi = min(lo + step, R * D0)
        res = coeffs[lo:hi, None, :] % ctx.qc
        polys_eval[lo:hi] = ctx.ntt_fwd_arr(res)
    polys_eval = polys_eval.reshape(R, D0, params.K, params.N)
    dg = grid_digest(params, n_records, record_size, polys_eval)
    return DatabaseImage(params, n_records, record_size, polys_eval, dg)


# ------------------------------------------------------------- query build


def preprocess_db_stream(params: PirParams, path: str, record_block,
                         n_records: int, record_size: int,
                         rows_per_chunk: int = 8) -> DatabaseImage:
    """Preprocess a database larger than RAM into a disk-backed grid.

    ``record_block(lo, hi)`` returns records[lo:hi] as a (hi-lo, record_size)
    uint8 array; the grid is written to ``path`` as a numpy memmap and the
    returned image streams from it.
    """
    from numpy.lib.format import open_memmap

    if record_size > params.poly_payload_bytes:
        raise ValueError("record larger than one polynomial")
    rpp = max(1, params.poly_payload_bytes // record_size)
    R, D0 = params.rows, params.D0
    if -(-n_records // rpp) > R * D0:
        raise ValueError("database does not fit the grid")
    ctx = ring_context(params)
    grid = open_memmap(path, mode="w+", dtype=np.uint64,
                       shape=(R, D0, params.K, params.N))
    bpc = params.bytes_per_coeff
    shifts = _U64(8) * np.arange(bpc, dtype=_U64)
    used = rpp * record_size
    for r0 in range(0, R, rows_per_chunk):
        r1 = min(r0 + rows_per_chunk, R)
        p0, p1 = r0 * D0, r1 * D0
        lo, hi = min(p0 * rpp, n_records), min(p1 * rpp, n_records)
        raw = np.zeros((p1 - p0, params.poly_payload_bytes), dtype=np.uint8)
        if hi > lo:
            flat = np.asarray(record_block(lo, hi), dtype=np.uint8).reshape(-1)
            full, rem = divmod(flat.size, used)
            raw[:full, :used] = flat[: full * used].reshape(full, used)
            if rem:
                raw[full, :rem] = flat[full * used:]
        groups = raw.reshape(p1 - p0, params.N, bpc).astype(np.uint64)
        coeffs = (groups << shifts).sum(axis=2, dtype=np.uint64)
        res = coeffs[:, None, :] % ctx.qc
        grid[r0:r1] = ctx.ntt_fwd_arr(res).reshape(
            r1 - r0, D0, params.K, params.N)
    grid.flush()
    dg = grid_digest(params, n_records, record_size, grid)
    return DatabaseImage(params, n_records, record_size, grid, dg)


def build_query(params: PirParams, sk: SecretKey, index: int,
                db_layout: DatabaseImage | tuple, rng) -> PirQuery:
    """Encode the target coordinates into one ciphertext.

    ``db_layout`` is either the DatabaseImage or a (row, col) pair.  The
    expansion tree scales every leaf by 2^m, so each slot is pre-multiplied
    by inv(2^m) mod Q here.
    """
    if isinstance(db_layout, DatabaseImage):
        row, col, _ = db_layout.locate(index)
    else:
        row, col = db_layout
    if not (0 <= col < params.D0 and 0 <= row < params.rows):
        raise QueryError(f"target ({row}, {col}) outside the database grid")

    Q = params.Q
    inv2m = pow(1 << params.m, -1, Q)
    slots = [0] * params.N
    slots[col] = params.delta * inv2m % Q
    for t in range(params.d):
        bit = (row >> t) & 1
        if bit:
            for j in range(params.ell):
                slots[params.D0 + t * params.ell + j] = (
                    pow(params.z, j, Q) * inv2m % Q)

    raw = np.empty((params.K, params.N), dtype=_U64)
    for i, q in enumerate(params.moduli):
        raw[i] = np.array([c % q for c in slots], dtype=_U64)
    return PirQuery(encrypt_raw(sk, raw, rng))


# ---------------------------------------------------------- query expansion


def expand_query(params: PirParams, query: PirQuery, evks: dict,
                 rgsw_s: RgswCiphertext, trace: TraceRecorder | None = None):
    """Obliviously fan the query out into column and row selectors.

    Returns (col_a, col_b, row_selectors): the first two are (D0, K, N)
    arrays holding the column ciphertext halves, the third is a list of d
    RGSW ciphertexts, one per folded dimension.
    """
    ctx = ring_context(params)
    A = query.ct.a.residues[None]
    B = query.ct.b.residues[None]
    for j, r in enumerate(expansion_exponents(params)):
        sa, sb = substitute_batch(evks[r], r, A, B, params)
        shift = ctx.monomial_eval_factor(2 * params.N - (1 << j))  # X^(-2^j)
        odd_a = ((A + (ctx.qc - sa)) % ctx.qc) * shift % ctx.qc
        odd_b = ((B + (ctx.qc - sb)) % ctx.qc) * shift % ctx.qc
        A = np.concatenate([(A + sa) % ctx.qc, odd_a])
        B = np.concatenate([(B + sb) % ctx.qc, odd_b])
        if trace is not None:
            trace.log("expand_level", j, r, A.shape[0])

    col_a, col_b = A[: params.D0], B[: params.D0]

    # Leaves D0 + t*ell + j encrypt b_t * z^j; they become the "z rows" of
    # RGSW(b_t).  The "s rows" (encrypting -b_t * z^j * s) come from an
    # external product with the assembly key RGSW(-s).
    selectors = []
    for t in range(params.d):
        lo = params.D0 + t * params.ell
        za = A[lo: lo + params.ell]
        zb = B[lo: lo + params.ell]
        sa, sb = external_product_batch(rgsw_s, za, zb, params)
        selectors.append(rgsw_from_rows(za, zb, sa, sb))
        if trace is not None:
            trace.log("assemble_rgsw", t, params.ell)
    return col_a, col_b, selectors


# ------------------------------------------------------------------ RowSel


_ROWSEL_CHUNK = 64  # keeps 2^56-sized products safely inside uint64 sums


def row_sel(db: DatabaseImage, col_a: np.ndarray, col_b: np.ndarray,
            trace: TraceRecorder | None = None):
    """Scan the grid: out[r] = sum_i db[r, i] * col_ct[i].

    Returns (R, K, N) ciphertext-half arrays.  The database is streamed in
    fixed column chunks so the access pattern is index-independent.
    """
    parts = batch_row_sel(db, [(col_a, col_b)], trace=trace)
    return parts[0]


_ROWSEL_ROW_BLOCK = 16


def batch_row_sel(db: DatabaseImage, cols: list,
                  counters: dict | None = None,
                  trace: TraceRecorder | None = None):
    """Shared scan for a batch: the grid is streamed once for all queries.

    ``cols`` is a list of (col_a, col_b) pairs; returns a list of
    (part_a, part_b).  The grid is walked row-block outer (one sequential
    pass, memmap friendly), column-chunk inner.  ``counters`` (if given)
    accumulates 'db_bytes' once per block regardless of batch size.
    """
    params = db.params
    ctx = ring_context(params)
    B = len(cols)
    R = db.polys_eval.shape[0]
    out_a = np.zeros((B, R, params.K, params.N), dtype=_U64)
    out_b = np.zeros((B, R, params.K, params.N), dtype=_U64)
    for r0 in range(0, R, _ROWSEL_ROW_BLOCK):
        r1 = min(r0 + _ROWSEL_ROW_BLOCK, R)
        rows = np.asarray(db.polys_eval[r0:r1])
        if counters is not None:
            counters["db_bytes"] = counters.get("db_bytes", 0) + rows.nbytes
        for lo in range(0, params.D0, _ROWSEL_CHUNK):
            hi = min(lo + _ROWSEL_CHUNK, params.D0)
            blk = rows[:, lo:hi]
            for qi, (ca, cb) in enumerate(cols):
                out_a[qi, r0:r1] = (out_a[qi, r0:r1] + np.einsum(
                    "rikn,ikn->rkn", blk, ca[lo:hi])) % ctx.qc
                out_b[qi, r0:r1] = (out_b[qi, r0:r1] + np.einsum(
                    "rikn,ikn->rkn", blk, cb[lo:hi])) % ctx.qc
            if trace is not None:
                trace.log("row_sel_chunk", r0, r1, lo, hi)
    return [(out_a[i], out_b[i]) for i in range(B)]


def row_sel_naive(db: DatabaseImage, col_a: np.ndarray, col_b: np.ndarray):
    """Reference scan, one column ciphertext at a time.

    Exact arithmetic makes this bit-identical to :func:`row_sel`.
    """
    params = db.params
    ctx = ring_context(params)
    out_a = np.zeros((params.rows, params.K, params.N), dtype=_U64)
    out_b = np.zeros((params.rows, params.K, params.N), dtype=_U64)
    for i in range(params.D0):
        out_a = (out_a + db.polys_eval[:, i] * col_a[i]) % ctx.qc
        out_b = (out_b + db.polys_eval[:, i] * col_b[i]) % ctx.qc
    return out_a, out_b


# ------------------------------------------------------------------ ColTor


def col_tor(params: PirParams, part_a: np.ndarray, part_b: np.ndarray,
            selectors: list, trace: TraceRecorder | None = None) -> BfvCiphertext:
    """Fold 2^d partial ciphertexts down to one with a mux tree.

    Level t keeps out[k] = in[2k] + G_t (x) (in[2k+1] - in[2k]); selector
    bit t therefore picks the odd branch.
    """
    if part_a.shape[0] != 1 << len(selectors):
        raise ValueError("input count must be 2^(number of selectors)")
    ctx = ring_context(params)
    A, B = part_a, part_b
    for t, g in enumerate(selectors):
        da = (A[1::2] + (ctx.qc - A[0::2])) % ctx.qc
        db_ = (B[1::2] + (ctx.qc - B[0::2])) % ctx.qc
        ma, mb = external_product_batch(g, da, db_, params)
        A = (A[0::2] + ma) % ctx.qc
        B = (B[0::2] + mb) % ctx.qc
        if trace is not None:
            trace.log("col_tor_level", t, A.shape[0])
    return BfvCiphertext(RnsPoly(A[0], Domain.EVAL), RnsPoly(B[0], Domain.EVAL))


# --------------------------------------------------------------- end to end


def answer_query(db: DatabaseImage, query: PirQuery, evks: dict,
                 rgsw_s: RgswCiphertext,
                 trace: TraceRecorder | None = None) -> PirResponse:
    """Full server pipeline: expand, scan, fold."""
    params = db.params
    col_a, col_b, selectors = expand_query(params, query, evks, rgsw_s, trace)
    part_a, part_b = row_sel(db, col_a, col_b, trace)
    return PirResponse(col_tor(params, part_a, part_b, selectors, trace))


def decode_response(db_meta, sk: SecretKey, resp: PirResponse,
                    index: int) -> bytes:
    """Decrypt and slice out the requested record.

    ``db_meta`` carries the layout: any object with params / n_records /
    record_size / records_per_poly / locate (a DatabaseImage works).
    """
    coeffs = lattice.decrypt_bfv(sk, resp.ct)
    _, _, off = db_meta.locate(index)
    buf = decode_poly(db_meta.params, coeffs)
    return buf[off: off + db_meta.record_size]
