"""On-disk formats: the lattice object container and the DB image file.

Container layout: 8-byte magic, 32-byte parameter digest, 1 kind byte,
u32 params-JSON length + JSON, then the kind-specific payload.  The DB
image stores the preprocessed Eval-domain grid with residues bit-packed
pairwise (two residues share ceil(log2(q_i*q_j)) bits) to keep the disk
expansion factor under 3.5x.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .lattice import (BfvCiphertext, EvalKey, RgswCiphertext, SecretKey,
                      expansion_exponents, keygen)
from .modring import Domain, RnsPoly, ring_context
from .params import PirParams
from .pir import DatabaseImage, grid_digest

_U64 = np.uint64

CONTAINER_MAGIC = b"IVELC\x00\x00\x01"
DB_MAGIC = b"IVEDB01"

KIND_SECRET_KEY = 0x01
KIND_KEY_BUNDLE = 0x02
KIND_QUERY = 0x03
KIND_RESPONSE = 0x04


class FileFormatError(ValueError):
    """Corrupt or foreign file contents."""


class DigestMismatchError(FileFormatError):
    """File was produced under a different parameter set."""


# ----------------------------------------------------------------- container


def write_container(path: str, params: PirParams, kind: int, payload: bytes) -> None:
    pj = json.dumps(params.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(params.digest())
        f.write(bytes([kind]))
        f.write(struct.pack("<I", len(pj)))
        f.write(pj)
        f.write(payload)


def read_container(path: str, expect_params: PirParams | None = None,
                   expect_kind: int | None = None):
    """Returns (params, kind, payload); verifies magic, digest, kind."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CONTAINER_MAGIC:
        raise FileFormatError(f"{path}: not a lattice container")
    digest = data[8:40]
    kind = data[40]
    (pj_len,) = struct.unpack_from("<I", data, 41)
    params = PirParams.from_dict(json.loads(data[45: 45 + pj_len]))
    if params.digest() != digest:
        raise DigestMismatchError(f"{path}: stored digest disagrees with params")
    if expect_params is not None and expect_params.digest() != digest:
        raise DigestMismatchError(f"{path}: parameter set does not match")
    if expect_kind is not None and kind != expect_kind:
        raise FileFormatError(
            f"{path}: expected object kind {expect_kind}, found {kind}")
    return params, kind, data[45 + pj_len:]


def _poly_bytes(arr: np.ndarray) -> bytes:
    return arr.astype("<u4").tobytes()


def _polys_from(buf: memoryview, offset: int, shape: tuple):
    count = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<u4", count=count, offset=offset)
    return arr.astype(_U64).reshape(shape), offset + 4 * count


# --------------------------------------------------------------- secret keys


def save_secret_key(path: str, sk: SecretKey) -> None:
    payload = struct.pack("<q", sk.seed) + (sk.s_small.astype(np.int8)).tobytes()
    write_container(path, sk.params, KIND_SECRET_KEY, payload)


def load_secret_key(path: str, expect_params: PirParams | None = None) -> SecretKey:
    params, _, payload = read_container(path, expect_params, KIND_SECRET_KEY)
    (seed,) = struct.unpack_from("<q", payload, 0)
    s_small = np.frombuffer(payload, dtype=np.int8, count=params.N, offset=8)
    s_small = s_small.astype(np.int64)
    ctx = ring_context(params)
    q = ctx.q.astype(np.int64)
    s_eval = ctx.ntt_fwd_arr(((s_small[None, :] % q[:, None])).astype(_U64))
    return SecretKey(params, s_small, s_eval, seed)


# --------------------------------------------------------------- key bundles


def save_key_bundle(path: str, params: PirParams, client_id: str,
                    evks: dict, rgsw_s: RgswCiphertext) -> None:
    payload = encode_key_bundle(params, client_id, evks, rgsw_s)
    write_container(path, params, KIND_KEY_BUNDLE, payload)


def load_key_bundle(path: str, expect_params: PirParams | None = None):
    """Returns (params, client_id, evks, rgsw_s)."""
    params, _, payload = read_container(path, expect_params, KIND_KEY_BUNDLE)
    return params, *decode_key_bundle(params, payload)


def decode_key_bundle(params: PirParams, payload: bytes):
    """Parse the bundle payload (also used verbatim on the wire)."""
    mv = memoryview(payload)
    (cid_len,) = struct.unpack_from("<H", mv, 0)
    client_id = bytes(mv[2: 2 + cid_len]).decode()
    off = 2 + cid_len
    (n_evk,) = struct.unpack_from("<H", mv, off)
    off += 2
    shape = (params.ell, params.K, params.N)
    evks = {}
    for _ in range(n_evk):
        (r,) = struct.unpack_from("<I", mv, off)
        off += 4
        a_rows, off = _polys_from(mv, off, shape)
        b_rows, off = _polys_from(mv, off, shape)
        evks[r] = EvalKey(r, a_rows, b_rows)
    gshape = (2, params.ell, params.K, params.N)
    ga, off = _polys_from(mv, off, gshape)
    gb, off = _polys_from(mv, off, gshape)
    return client_id, evks, RgswCiphertext(ga, gb)


def encode_key_bundle(params: PirParams, client_id: str, evks: dict,
                      rgsw_s: RgswCiphertext) -> bytes:
    cid = client_id.encode()
    parts = [struct.pack("<H", len(cid)), cid, struct.pack("<H", len(evks))]
    for r in expansion_exponents(params):
        evk = evks[r]
        parts.append(struct.pack("<I", r))
        parts.append(_poly_bytes(evk.a_rows))
        parts.append(_poly_bytes(evk.b_rows))
    parts.append(_poly_bytes(rgsw_s.a_rows))
    parts.append(_poly_bytes(rgsw_s.b_rows))
    return b"".join(parts)


# ------------------------------------------------------- query/response cts


def encode_ciphertext(ct: BfvCiphertext) -> bytes:
    return _poly_bytes(ct.a.residues) + _poly_bytes(ct.b.residues)


def decode_ciphertext(params: PirParams, payload: bytes) -> BfvCiphertext:
    mv = memoryview(payload)
    shape = (params.K, params.N)
    a, off = _polys_from(mv, 0, shape)
    b, _ = _polys_from(mv, off, shape)
    return BfvCiphertext(RnsPoly(a, Domain.EVAL), RnsPoly(b, Domain.EVAL))


def ciphertext_nbytes(params: PirParams) -> int:
    return 2 * 4 * params.K * params.N


def save_ciphertext(path: str, params: PirParams, ct: BfvCiphertext,
                    kind: int) -> None:
    write_container(path, params, kind, encode_ciphertext(ct))


def load_ciphertext(path: str, expect_params: PirParams | None = None,
                    expect_kind: int | None = None):
    params, _, payload = read_container(path, expect_params, expect_kind)
    return params, decode_ciphertext(params, payload)


# ------------------------------------------------------------- bit packing


def pack_bits(vals: np.ndarray, nbits: int) -> bytes:
    """Pack uint64 values into a dense little-endian bit stream."""
    shifts = np.arange(nbits, dtype=_U64)
    bits = ((vals[:, None] >> shifts) & _U64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_bits(buf: bytes, nbits: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8),
                         bitorder="little", count=count * nbits)
    shifts = np.arange(nbits, dtype=_U64)
    return (bits.reshape(count, nbits).astype(_U64) << shifts).sum(
        axis=1, dtype=_U64)


def _pair_layout(params: PirParams):
    """[(indices, nbits)]: modulus pairs packed jointly, odd leftover alone."""
    out = []
    i = 0
    while i + 1 < params.K:
        q0, q1 = params.moduli[i], params.moduli[i + 1]
        out.append(((i, i + 1), (q0 * q1 - 1).bit_length()))
        i += 2
    if i < params.K:
        out.append(((i,), (params.moduli[i] - 1).bit_length()))
    return out


def packed_poly_bits(params: PirParams) -> int:
    return sum(nb for _, nb in _pair_layout(params)) * params.N


# ------------------------------------------------------------ DB image file


def save_db_image(path: str, db: DatabaseImage) -> None:
    params = db.params
    layout = _pair_layout(params)
    header = json.dumps(
        {
            "params": params.to_dict(),
            "n_records": db.n_records,
            "record_size": db.record_size,
            "D": params.D,
            "records_per_poly": db.records_per_poly,
        },
        sort_keys=True,
    ).encode()
    flat = db.polys_eval.reshape(-1, params.K, params.N)
    n_polys = flat.shape[0]
    with open(path, "wb") as f:
        f.write(DB_MAGIC)
        f.write(params.digest())
        f.write(db.digest)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        step = max(1, (1 << 23) // (params.K * params.N))
        for lo in range(0, n_polys, step):
            blk = flat[lo: lo + step]
            for idx, nbits in layout:
                if len(idx) == 2:
                    i, j = idx
                    vals = blk[:, i, :] * _U64(params.moduli[j]) + blk[:, j, :]
                else:
                    vals = blk[:, idx[0], :]
                f.write(pack_bits(vals.ravel(), nbits))


def load_db_image(path: str, expect_params: PirParams | None = None) -> DatabaseImage:
    with open(path, "rb") as f:
        head = f.read(7 + 32 + 32 + 4)
        if head[:7] != DB_MAGIC:
            raise FileFormatError(f"{path}: not a DB image")
        pdigest = head[7:39]
        content_digest = head[39:71]
        (hlen,) = struct.unpack("<I", head[71:75])
        meta = json.loads(f.read(hlen))
        params = PirParams.from_dict(meta["params"])
        if params.digest() != pdigest:
            raise DigestMismatchError(f"{path}: header params digest mismatch")
        if expect_params is not None and expect_params.digest() != pdigest:
            raise DigestMismatchError(f"{path}: parameter set does not match")
        layout = _pair_layout(params)
        n_polys = params.D
        flat = np.empty((n_polys, params.K, params.N), dtype=_U64)
        step = max(1, (1 << 23) // (params.K * params.N))
        for lo in range(0, n_polys, step):
            hi = min(lo + step, n_polys)
            cnt = (hi - lo) * params.N
            for idx, nbits in layout:
                buf = f.read((cnt * nbits + 7) // 8)
                vals = unpack_bits(buf, nbits, cnt).reshape(hi - lo, params.N)
                if len(idx) == 2:
                    i, j = idx
                    qj = _U64(params.moduli[j])
                    flat[lo:hi, i, :] = vals // qj
                    flat[lo:hi, j, :] = vals % qj
                else:
                    flat[lo:hi, idx[0], :] = vals
    polys = flat.reshape(params.rows, params.D0, params.K, params.N)
    db = DatabaseImage(params, meta["n_records"], meta["record_size"], polys,
                       content_digest)
    check = grid_digest(params, db.n_records, db.record_size, polys)
    if check != content_digest:
        raise FileFormatError(f"{path}: content digest mismatch (corrupt image)")
    return db


def db_file_expansion(db: DatabaseImage, path_size: int) -> float:
    """On-disk bytes divided by raw record bytes."""
    return path_size / float(db.n_records * db.record_size)
