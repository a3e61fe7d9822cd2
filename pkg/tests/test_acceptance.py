"""Acceptance criteria, one test per criterion.

Each test registers a single ``[PASS]``/``[FAIL]`` line, replayed in the
terminal summary (see conftest) so the verdicts survive output capture.
The heavy fixtures (the disk-backed grid for criterion 8, the 64MB raw
corpus for criterion 10) are built inside their tests and live in pytest
temp dirs.
"""

import functools
import math
import os
import sys
import threading
import time

import numpy as np
import pytest

from pirlib import fileio, sched
from pirlib.lattice import (BfvCiphertext, decrypt_bfv, encrypt_bfv,
                            encrypt_rgsw, encrypt_raw, keygen, noise_budget,
                            phase_ints)
from pirlib.modring import (BigCoeffPoly, Domain, RnsPoly, crt_decompose,
                            icrt_reconstruct, ntt_forward, ntt_inverse,
                            poly_pointwise_mul)
from pirlib.params import table1_params
from pirlib.params import test_params as ci_params
from pirlib.pir import (DatabaseImage, PirQuery, answer_query, batch_row_sel,
                        build_query, col_tor, decode_response, expand_query,
                        preprocess_db, preprocess_db_stream, row_sel)
from pirlib.service import (PirClient, PirServer, ServerConfig, make_slice,
                            poisson_load, rlp_partition, worker_answer_partial)


def criterion(num, summary):
    """Record the one-line verdict for an acceptance criterion."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                _verdict(f"[FAIL] criterion {num}: {summary}")
                raise
            _verdict(f"[PASS] criterion {num}: {summary}")

        return wrapper

    return deco


def _verdict(line):
    print(line, file=sys.stderr, flush=True)
    try:
        from conftest import VERDICTS
    except ImportError:       # running outside pytest's rootdir insertion
        return
    VERDICTS.append(line)


def schoolbook_negacyclic(a, b, q):
    """O(N^2) reference product, int64-exact via a 14-bit split of b."""
    N = a.shape[0]
    a = a.astype(np.int64) % q
    b = b.astype(np.int64) % q
    bl, bh = b & 0x3FFF, b >> 14
    conv = (np.convolve(a, bh) % q << 14) + np.convolve(a, bl) % q
    full = np.zeros(2 * N, dtype=np.int64)
    full[: 2 * N - 1] = conv % q
    return (full[:N] - full[N:]) % q


def random_rns(params, rng, domain):
    res = np.empty((params.K, params.N), dtype=np.uint64)
    for i, q in enumerate(params.moduli):
        res[i] = rng.integers(0, q, params.N, dtype=np.uint64)
    return RnsPoly(res, domain)


def one_record_per_poly_db(params, rng):
    recs = rng.integers(0, 256, (params.D, params.poly_payload_bytes),
                        dtype=np.uint8).astype(np.uint8)
    return recs, preprocess_db(params, recs)


@criterion(1, "NTT products match the schoolbook oracle; CRT/iCRT "
              "round-trips are bit-exact")
def test_criterion_01_ring_math_oracles():
    params = ci_params(D0=8, d=2)  # N = 2^10
    rng = np.random.default_rng(1001)
    for _ in range(100):
        pa = random_rns(params, rng, Domain.COEFF)
        pb = random_rns(params, rng, Domain.COEFF)
        got = ntt_inverse(
            poly_pointwise_mul(ntt_forward(pa, params),
                               ntt_forward(pb, params), params), params)
        for i, q in enumerate(params.moduli):
            want = schoolbook_negacyclic(pa.residues[i], pb.residues[i], q)
            assert np.array_equal(got.residues[i], want.astype(np.uint64))
    Q = params.Q
    for _ in range(10):  # 10 polynomials x N = 10,240 coefficients
        coeffs = [int.from_bytes(rng.bytes(16), "little") % Q
                  for _ in range(params.N)]
        back = icrt_reconstruct(
            crt_decompose(BigCoeffPoly(coeffs), params), params)
        assert back.coeffs == coeffs


@criterion(2, "100/100 exact record recoveries at D0=256, d=4 with "
              "positive noise budget")
def test_criterion_02_end_to_end_retrieval():
    params = ci_params(D0=256, d=4)
    rng = np.random.default_rng(1002)
    recs, db = one_record_per_poly_db(params, rng)
    sk, evks, rgsw_s = keygen(params, 2002)
    indices = rng.integers(0, db.n_records, 100)
    ok = 0
    for idx in indices:
        idx = int(idx)
        q = build_query(params, sk, idx, db, rng)
        resp = answer_query(db, q, evks, rgsw_s)
        assert noise_budget(sk, resp.ct).bits > 0
        if decode_response(db, sk, resp, idx) == recs[idx].tobytes():
            ok += 1
    assert ok == 100


def _rms_error(sk, ct, params):
    """Root-mean-square of the centered phase residual e = phase - delta*m."""
    Q, P, delta = params.Q, params.P, params.delta
    total = 0
    for x in phase_ints(sk, ct):
        m = ((x * P + Q // 2) // Q) % P
        e = (x - delta * m) % Q
        if e > Q // 2:
            e -= Q
        total += e * e
    return math.sqrt(total / params.N)


@criterion(3, "response noise across d=2..10 stays under an affine-in-d "
              "upper envelope with no superlinear growth")
def test_criterion_03_noise_scaling():
    ds = list(range(2, 11))
    errs = []
    for d in ds:
        params = ci_params(D0=16, d=d)
        rng = np.random.default_rng(3000 + d)
        _, db = one_record_per_poly_db(params, rng)
        # individual keys dominate the spread, so average across several
        trial = []
        for ks in range(4):
            sk, evks, rgsw_s = keygen(params, 4000 + 17 * d + ks)
            idx = int(rng.integers(db.n_records))
            q = build_query(params, sk, idx, db, rng)
            resp = answer_query(db, q, evks, rgsw_s)
            assert noise_budget(sk, resp.ct).bits > 0
            trial.append(_rms_error(sk, resp.ct, params))
        errs.append(np.mean(trial))
    errs = np.array(errs)

    # affine upper envelope: least-squares line shifted up to cover every
    # point; the residual check demands it stay within a bounded band
    A = np.stack([np.ones(len(ds)), np.array(ds, float)], axis=1)
    coef, *_ = np.linalg.lstsq(A, errs, rcond=None)
    fit = A @ coef
    envelope = fit + (errs - fit).max()
    assert np.all(envelope >= errs)
    slack = (envelope - errs) / errs.mean()
    assert slack.max() <= 2.5, f"envelope too loose: {slack.max():.2f}"

    # no superlinear growth: errors grow slower than d^1.5 from the base
    for d, e in zip(ds, errs):
        assert e <= errs[0] * (d / ds[0]) ** 1.5, f"superlinear at d={d}"


@criterion(4, "expansion leaves are exact on noiseless vectors and within "
              "budget under noise for D0 in {4, 16, 256}")
def test_criterion_04_expand_query():
    for D0 in (4, 16, 256):
        params = ci_params(D0=D0, d=2)
        rng = np.random.default_rng(1004)
        row, col = 2, D0 // 3

        # noiseless: every leaf phase is exact
        sk, evks, rgsw_s = keygen(params, 5004, error_free=True)
        q = PirQuery(_query_ct(params, sk, row, col, rng, error_free=True))
        col_a, col_b, selectors = expand_query(params, q, evks, rgsw_s)
        for i in range(D0):
            ph = _phase(sk, col_a[i], col_b[i])
            want = [0] * params.N
            if i == col:
                want[0] = params.delta
            assert ph == want
        for t, g in enumerate(selectors):
            bit = (row >> t) & 1
            for j in range(params.ell):
                ph = _phase(sk, g.a_rows[1, j], g.b_rows[1, j])
                want = [0] * params.N
                want[0] = bit * pow(params.z, j, params.Q)
                assert ph == want

        # noisy: every column leaf decrypts to the indicator within budget
        sk, evks, rgsw_s = keygen(params, 6004)
        q = build_query(params, sk, 0, (row, col), rng)
        col_a, col_b, _ = expand_query(params, q, evks, rgsw_s)
        for i in range(D0):
            ct = BfvCiphertext(RnsPoly(col_a[i], Domain.EVAL),
                               RnsPoly(col_b[i], Domain.EVAL))
            assert noise_budget(sk, ct).bits > 0
            msg = decrypt_bfv(sk, ct)
            want = np.zeros(params.N, dtype=np.uint64)
            if i == col:
                want[0] = 1
            assert np.array_equal(msg, want)


def _query_ct(params, sk, row, col, rng, error_free=False):
    Q = params.Q
    inv2m = pow(1 << params.m, -1, Q)
    slots = [0] * params.N
    slots[col] = params.delta * inv2m % Q
    for t in range(params.d):
        if (row >> t) & 1:
            for j in range(params.ell):
                slots[params.D0 + t * params.ell + j] = \
                    pow(params.z, j, Q) * inv2m % Q
    raw = np.empty((params.K, params.N), dtype=np.uint64)
    for i, q in enumerate(params.moduli):
        raw[i] = np.array([c % q for c in slots], dtype=np.uint64)
    return encrypt_raw(sk, raw, rng, error_free=error_free)


def _phase(sk, a_eval, b_eval):
    ct = BfvCiphertext(RnsPoly(a_eval, Domain.EVAL),
                       RnsPoly(b_eval, Domain.EVAL))
    return phase_ints(sk, ct)


@criterion(5, "all 8 selector patterns at d=3 pick the right payload")
def test_criterion_05_coltor_exhaustive():
    params = ci_params(D0=4, d=3)
    sk, _, _ = keygen(params, 1005)
    rng = np.random.default_rng(1005)
    parts_a, parts_b = [], []
    for k in range(8):
        msg = np.zeros(params.N, dtype=np.uint64)
        msg[0] = 5000 + k
        ct = encrypt_bfv(sk, msg, rng)
        parts_a.append(ct.a.residues)
        parts_b.append(ct.b.residues)
    part_a, part_b = np.stack(parts_a), np.stack(parts_b)
    for row in range(8):
        sel = [encrypt_rgsw(sk, (row >> t) & 1, rng) for t in range(3)]
        got = decrypt_bfv(sk, col_tor(params, part_a, part_b, sel))
        assert got[0] == 5000 + row and got.sum() == 5000 + row


@criterion(6, "fold-traffic closed form exact for depth 1..5; production "
              "reductions vs BFS within 15% of 1.87x / 2.24x")
def test_criterion_06_scheduler_closed_forms():
    for depth in range(1, 6):
        p = ci_params(D0=4, d=2 * depth)
        _, coltor, _ = sched.build_graphs(p)
        mem = sched.MemModel(1 << 40, p)
        bfs = sched.simulate_traffic(coltor, sched.SchedulePolicy("BFS"), mem)
        hs = sched.simulate_traffic(
            coltor, sched.SchedulePolicy("HS_DFS", depth=depth), mem)
        got = hs.category_bytes("ct_bfv") / bfs.category_bytes("ct_bfv")
        assert got == (2**depth + 1) / (3 * 2**depth - 3)

    params = table1_params(z=2**22, ell=5, d=11)
    per_query_capacity = (160 << 20) // 32
    mem = sched.MemModel(per_query_capacity, params)
    expand, coltor, _ = sched.build_graphs(params)
    for graph, target in ((expand, 1.87), (coltor, 2.24)):
        bfs = sched.simulate_traffic(graph, sched.SchedulePolicy("BFS"), mem)
        hs = sched.simulate_traffic(
            graph, sched.SchedulePolicy("HS_DFS_RO"), mem)
        reduction = bfs.total_bytes / hs.total_bytes
        assert abs(reduction - target) / target <= 0.15, graph.stage


@criterion(7, "per-query DB-scan bytes equal total/B for B in {1, 8, 64}; "
              "client bytes constant")
def test_criterion_07_batch_amortization():
    params = ci_params(D0=8, d=2)
    rng = np.random.default_rng(1007)
    recs, db = one_record_per_poly_db(params, rng)
    sk, evks, rgsw_s = keygen(params, 1007)
    base = []
    for idx in (1, 9, 23):
        q = build_query(params, sk, idx, db, rng)
        ca, cb, sel = expand_query(params, q, evks, rgsw_s)
        base.append((q, ca, cb, sel))
    scan_totals, client_bytes = {}, []
    for B in (1, 8, 64):
        cols = [(base[i % 3][1], base[i % 3][2]) for i in range(B)]
        counters = {}
        parts = batch_row_sel(db, cols, counters)
        scan_totals[B] = counters["db_bytes"]
        q, _, _, sel = base[0]
        resp = col_tor(params, parts[0][0], parts[0][1], sel)
        client_bytes.append(len(fileio.encode_ciphertext(q.ct)) +
                            len(fileio.encode_ciphertext(resp)))
    total = scan_totals[1]
    for B in (1, 8, 64):
        assert scan_totals[B] == total  # shared scan: per-query = total / B
    spread = max(client_bytes) - min(client_bytes)
    assert spread <= 0.01 * min(client_bytes)


@criterion(8, "with a disk-resident DB and auto window, mean latency stays "
              "below 2x single-query latency and queueing delay below the "
              "window")
def test_criterion_08_latency_bound(tmp_path):
    # scan-bound sizing: a wide, deep grid (~11GB) exceeds RAM, so RowSel
    # streams from disk and dominates the single-query wall time
    params = ci_params(D0=448, d=10, z=2**17, ell=5)
    grid_path = str(tmp_path / "big-grid.npy")
    record_size = params.poly_payload_bytes
    n_records = params.D

    def record_block(lo, hi):
        rng = np.random.default_rng(8800 + lo)
        return rng.integers(0, 256, (hi - lo, record_size), dtype=np.uint8)

    db = preprocess_db_stream(params, grid_path, record_block, n_records,
                              record_size)
    sk, evks, rgsw_s = keygen(params, 1008)
    rng = np.random.default_rng(1008)

    # single-query reference latency and the RowSel share
    t0 = time.monotonic()
    q = build_query(params, sk, 123, db, rng)
    ca, cb, sel = expand_query(params, q, evks, rgsw_s)
    t1 = time.monotonic()
    pa, pb = row_sel(db, ca, cb)
    t2 = time.monotonic()
    col_tor(params, pa, pb, sel)
    t3 = time.monotonic()
    t_single = t3 - t0
    rowsel_share = (t2 - t1) / t_single
    assert rowsel_share >= 0.5, f"RowSel share {rowsel_share:.2f}"

    server = PirServer(ServerConfig(window="auto"), db).start()
    key_client = PirClient(*server.addr, params)
    try:
        key_client.upload_keys("alice", evks, rgsw_s)
        lock = threading.Lock()
        counter = [0]
        # queries are pre-built so client-side work stays out of the latency
        prebuilt = {}
        for rid in range(1, 6):
            idx = int(np.random.default_rng(rid).integers(n_records))
            prebuilt[rid] = build_query(params, sk, idx, db,
                                        np.random.default_rng(rid))

        def make_request():
            with lock:
                counter[0] += 1
                rid = counter[0]
            c = PirClient(*server.addr, params)  # own socket per arrival
            try:
                c.query("alice", rid, prebuilt[rid])
            finally:
                c.close()

        rate = 1.0 / (2.0 * t_single)
        _, summary = poisson_load(make_request, rate, n_requests=5, seed=8)
        assert summary["mean"] <= 2.0 * t_single, (summary, t_single)
        for req in server.request_log:
            assert req.dispatch - req.arrival <= server.window + 0.1
    finally:
        key_client.close()
        server.stop()
    os.unlink(grid_path)


@criterion(9, "cluster responses byte-identical to standalone for W in "
              "{1, 2, 4}; gather payload is one ciphertext")
def test_criterion_09_rlp_bit_identity():
    params = ci_params(D0=8, d=2)
    rng = np.random.default_rng(1009)
    recs, db = one_record_per_poly_db(params, rng)
    sk, evks, rgsw_s = keygen(params, 1009)
    q = build_query(params, sk, 27, db, rng)
    want = fileio.encode_ciphertext(answer_query(db, q, evks, rgsw_s).ct)
    for W in (1, 2, 4):
        plan = rlp_partition(db, W)
        workers, coord, client = [], None, None
        try:
            for w in range(W):
                sl = make_slice(db, plan, w)
                wdb = DatabaseImage(params, db.n_records, db.record_size,
                                    sl.polys_eval, db.digest)
                cfg = ServerConfig(window=0.0, role="worker")
                workers.append(PirServer(cfg, wdb).start())
            coord = PirServer(
                ServerConfig(window=0.0, role="coordinator",
                             peers=[srv.addr for srv in workers]), db).start()
            client = PirClient(*coord.addr, params)
            client.upload_keys("alice", evks, rgsw_s)
            got = client.query("alice", 1, q)
            assert fileio.encode_ciphertext(got.ct) == want, f"W={W}"
        finally:
            if client:
                client.close()
            if coord:
                coord.stop()
            for srv in workers:
                srv.stop()
    # per-worker uplink: exactly one serialized ciphertext
    sl = make_slice(db, rlp_partition(db, 2), 1)
    a, b = worker_answer_partial(sl, q, evks, rgsw_s)
    blob = fileio.encode_ciphertext(
        BfvCiphertext(RnsPoly(a, Domain.EVAL), RnsPoly(b, Domain.EVAL)))
    assert len(blob) == fileio.ciphertext_nbytes(params)


@criterion(10, "preprocessing expansion factor below 3.5x on a 64MB raw DB")
def test_criterion_10_db_expansion(tmp_path):
    params = table1_params(d=4)  # 256 x 16 grid of 16KB polynomials
    rng = np.random.default_rng(1010)
    n_records = params.D
    record_size = params.poly_payload_bytes
    assert n_records * record_size == 64 << 20
    recs = rng.integers(0, 256, (n_records, record_size),
                        dtype=np.uint8).astype(np.uint8)
    db = preprocess_db(params, recs)
    path = str(tmp_path / "table1.img")
    fileio.save_db_image(path, db)
    factor = fileio.db_file_expansion(db, os.path.getsize(path))
    assert factor < 3.5, factor
    os.unlink(path)
