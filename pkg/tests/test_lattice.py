"""BFV/RGSW encryption, external products, and Subs key switching."""

import numpy as np
import pytest

from pirlib.lattice import (KeyMismatchError, ct_add, ct_plain_mul, ct_sub,
                            decrypt_bfv, encrypt_bfv, encrypt_raw,
                            encrypt_rgsw, expansion_exponents,
                            external_product, keygen, noise_budget, phase_ints,
                            substitute)
from pirlib.modring import Domain, RnsPoly, automorphism_map, ring_context
from pirlib.params import table1_params
from pirlib.params import test_params as ci_params

PARAMS = ci_params(D0=8, d=2)


@pytest.fixture(scope="module")
def keys():
    return keygen(PARAMS, rng_seed=100)


@pytest.fixture(scope="module")
def keys_clean():
    return keygen(PARAMS, rng_seed=100, error_free=True)


def random_msg(params, rng):
    return rng.integers(0, params.P, params.N, dtype=np.uint64)


# ----------------------------------------------------------------- BFV basics


def test_encrypt_decrypt_round_trip(keys):
    sk, _, _ = keys
    rng = np.random.default_rng(0)
    for _ in range(3):
        msg = random_msg(PARAMS, rng)
        ct = encrypt_bfv(sk, msg, rng)
        assert np.array_equal(decrypt_bfv(sk, ct), msg)
        assert noise_budget(sk, ct).bits > 0


def test_encrypt_decrypt_table1_profile():
    params = table1_params(d=2)
    sk, _, _ = keygen(params, rng_seed=7)
    rng = np.random.default_rng(1)
    msg = rng.integers(0, params.P, params.N, dtype=np.uint64)
    ct = encrypt_bfv(sk, msg, rng)
    assert np.array_equal(decrypt_bfv(sk, ct), msg)
    # fresh budget: log2(delta) - 1 - log2(e) with e a few sigma wide
    assert noise_budget(sk, ct).bits > 50


def test_error_free_encryption_has_exact_phase(keys_clean):
    sk, _, _ = keys_clean
    rng = np.random.default_rng(2)
    msg = random_msg(PARAMS, rng)
    ct = encrypt_bfv(sk, msg, rng, error_free=True)
    want = [PARAMS.delta * int(v) % PARAMS.Q for v in msg]
    assert phase_ints(sk, ct) == want


def test_homomorphic_add_sub(keys):
    sk, _, _ = keys
    rng = np.random.default_rng(3)
    m1, m2 = random_msg(PARAMS, rng), random_msg(PARAMS, rng)
    c1 = encrypt_bfv(sk, m1, rng)
    c2 = encrypt_bfv(sk, m2, rng)
    assert np.array_equal(decrypt_bfv(sk, ct_add(c1, c2, PARAMS)),
                          (m1 + m2) % PARAMS.P)
    assert np.array_equal(decrypt_bfv(sk, ct_sub(c1, c2, PARAMS)),
                          (m1 - m2) % PARAMS.P)


def test_plaintext_multiplication_by_monomial(keys):
    sk, _, _ = keys
    ctx = ring_context(PARAMS)
    rng = np.random.default_rng(4)
    msg = np.zeros(PARAMS.N, dtype=np.uint64)
    msg[0] = 7
    ct = encrypt_bfv(sk, msg, rng)
    shifted = ct_plain_mul(
        RnsPoly(ctx.monomial_eval_factor(5), Domain.EVAL), ct, PARAMS)
    got = decrypt_bfv(sk, shifted)
    assert got[5] == 7 and got.sum() == 7


def test_message_validation(keys):
    sk, _, _ = keys
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        encrypt_bfv(sk, np.zeros(PARAMS.N - 1, dtype=np.uint64), rng)
    bad = np.zeros(PARAMS.N, dtype=np.uint64)
    bad[0] = PARAMS.P
    with pytest.raises(ValueError):
        encrypt_bfv(sk, bad, rng)


def test_keygen_determinism():
    a = keygen(PARAMS, rng_seed=42)
    b = keygen(PARAMS, rng_seed=42)
    assert np.array_equal(a[0].s_small, b[0].s_small)
    for r in a[1]:
        assert np.array_equal(a[1][r].b_rows, b[1][r].b_rows)
    assert np.array_equal(a[2].a_rows, b[2].a_rows)
    c = keygen(PARAMS, rng_seed=43)
    assert not np.array_equal(a[0].s_small, c[0].s_small)


def test_expansion_exponents_shape():
    assert expansion_exponents(PARAMS) == \
        [PARAMS.N // (1 << t) + 1 for t in range(PARAMS.m)]


# ------------------------------------------------------------ external product


def test_external_product_by_one_and_zero(keys):
    sk, _, _ = keys
    rng = np.random.default_rng(6)
    msg = random_msg(PARAMS, rng)
    ct = encrypt_bfv(sk, msg, rng)
    g1 = encrypt_rgsw(sk, 1, rng)
    g0 = encrypt_rgsw(sk, 0, rng)
    assert np.array_equal(decrypt_bfv(sk, external_product(g1, ct, PARAMS)), msg)
    assert np.array_equal(decrypt_bfv(sk, external_product(g0, ct, PARAMS)),
                          np.zeros(PARAMS.N, dtype=np.uint64))


def test_external_product_by_monomial_exact(keys_clean):
    sk, _, _ = keys_clean
    rng = np.random.default_rng(7)
    msg = np.zeros(PARAMS.N, dtype=np.uint64)
    msg[3] = 9
    ct = encrypt_bfv(sk, msg, rng, error_free=True)
    g = encrypt_rgsw(sk, ("X", 4), rng, error_free=True)
    got = decrypt_bfv(sk, external_product(g, ct, PARAMS))
    want = np.zeros(PARAMS.N, dtype=np.uint64)
    want[7] = 9
    assert np.array_equal(got, want)


def test_external_product_noise_is_additive(keys):
    """A chain of 16 selector products keeps a positive budget (the folding
    depth used by the largest tournament we model)."""
    params = table1_params(D0=4, d=2)
    sk, _, _ = keygen(params, rng_seed=9)
    rng = np.random.default_rng(9)
    msg = np.zeros(params.N, dtype=np.uint64)
    msg[1] = 12345
    ct = encrypt_bfv(sk, msg, rng)
    budgets = [noise_budget(sk, ct).bits]
    g = encrypt_rgsw(sk, 1, rng)
    for _ in range(16):
        ct = external_product(g, ct, params)
        budgets.append(noise_budget(sk, ct).bits)
    assert np.array_equal(decrypt_bfv(sk, ct), msg)
    assert budgets[-1] > 0
    # additive error growth: the per-step budget loss shrinks, it does not
    # compound multiplicatively
    first_loss = budgets[0] - budgets[1]
    last_loss = budgets[-2] - budgets[-1]
    assert last_loss < max(first_loss, 1.0)


def test_mux_identity(keys):
    """c0 + G(b) (x) (c1 - c0) selects branch b."""
    sk, _, _ = keys
    rng = np.random.default_rng(10)
    m0, m1 = random_msg(PARAMS, rng), random_msg(PARAMS, rng)
    c0 = encrypt_bfv(sk, m0, rng)
    c1 = encrypt_bfv(sk, m1, rng)
    for bit, want in ((0, m0), (1, m1)):
        g = encrypt_rgsw(sk, bit, rng)
        out = ct_add(c0, external_product(g, ct_sub(c1, c0, PARAMS), PARAMS),
                     PARAMS)
        assert np.array_equal(decrypt_bfv(sk, out), want)


def test_encrypt_rgsw_rejects_garbage(keys):
    sk, _, _ = keys
    with pytest.raises(ValueError):
        encrypt_rgsw(sk, 2, np.random.default_rng(0))


# ------------------------------------------------------------------- Subs


def test_substitute_exact_on_clean_vectors(keys_clean):
    sk, evks, _ = keys_clean
    ctx = ring_context(PARAMS)
    rng = np.random.default_rng(11)
    raw = np.zeros((PARAMS.K, PARAMS.N), dtype=np.uint64)
    payload = rng.integers(0, 2**63, PARAMS.N // 4, dtype=np.uint64)
    for i, q in enumerate(PARAMS.moduli):
        raw[i, : payload.size] = payload % q
    ct = encrypt_raw(sk, raw, rng, error_free=True)
    for r in expansion_exponents(PARAMS):
        out = substitute(ct, r, evks[r], PARAMS)
        want = automorphism_map(
            RnsPoly(ctx.ntt_fwd_arr(raw), Domain.EVAL), r, PARAMS)
        got = (out.b.residues +
               (ctx.qc - out.a.residues * sk.s_eval % ctx.qc)) % ctx.qc
        assert np.array_equal(got, want.residues)


def test_substitute_with_noise_decrypts_to_automorphism(keys):
    sk, evks, _ = keys
    rng = np.random.default_rng(12)
    msg = random_msg(PARAMS, rng)
    ct = encrypt_bfv(sk, msg, rng)
    r = expansion_exponents(PARAMS)[0]  # N + 1
    out = substitute(ct, r, evks[r], PARAMS)
    # plaintext-level oracle: apply the automorphism over Z_P directly
    e = (np.arange(PARAMS.N) * r) % (2 * PARAMS.N)
    want = np.zeros(PARAMS.N, dtype=np.int64)
    want[e % PARAMS.N] = np.where(e >= PARAMS.N, -msg.astype(np.int64),
                                  msg.astype(np.int64))
    assert np.array_equal(decrypt_bfv(sk, out),
                          (want % PARAMS.P).astype(np.uint64))
    assert noise_budget(sk, out).bits > 0


def test_substitute_wrong_exponent_rejected(keys):
    sk, evks, _ = keys
    rng = np.random.default_rng(13)
    ct = encrypt_bfv(sk, random_msg(PARAMS, rng), rng)
    rs = expansion_exponents(PARAMS)
    with pytest.raises(KeyMismatchError):
        substitute(ct, rs[0], evks[rs[1]], PARAMS)
