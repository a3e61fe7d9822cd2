"""BFV and RGSW encryption, evaluation keys, external product, Subs.

Conventions: a ciphertext is (a, b) with decryption phase b - a*s; all
ciphertext components live in the Eval (NTT) domain.  Error terms use a
centered discrete Gaussian (sigma 3.2, truncated at 6 sigma) and ternary
secrets.  RNG state is always explicit; nothing here reads global
randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modring import Domain, RnsPoly, RingContext, ring_context
from .params import PirParams

_U64 = np.uint64

SIGMA = 3.2
_TAIL = int(6 * SIGMA)


class KeyMismatchError(ValueError):
    """Key object used with the wrong exponent or parameter set."""


@dataclass
class SecretKey:
    params: PirParams
    s_small: np.ndarray  # (N,) int64 entries in {-1, 0, 1}
    s_eval: np.ndarray   # (K, N) uint64, NTT domain
    seed: int


@dataclass
class BfvCiphertext:
    """RLWE pair; phase b - a*s = delta*msg + e with delta = floor(Q/P)."""

    a: RnsPoly
    b: RnsPoly

    def stack(self) -> np.ndarray:
        return np.stack([self.a.residues, self.b.residues])


@dataclass
class RgswCiphertext:
    """2 x 2*ell gadget rows; rows[0][j] encrypts -mu*z^j*s, rows[1][j]
    encrypts mu*z^j (both as RLWE pairs)."""

    a_rows: np.ndarray  # (2, ell, K, N)
    b_rows: np.ndarray  # (2, ell, K, N)


@dataclass
class EvalKey:
    """Key-switching key for the automorphism exponent r."""

    r: int
    a_rows: np.ndarray  # (ell, K, N)
    b_rows: np.ndarray  # (ell, K, N)


@dataclass
class NoiseBudget:
    bits: float


def _small_to_res(ctx: RingContext, vals: np.ndarray) -> np.ndarray:
    """Map (..., N) signed small integers to (..., K, N) residues."""
    q = ctx.q.astype(np.int64)
    v = vals[..., None, :].astype(np.int64) % q[:, None]
    return v.astype(_U64)


def _sample_error(rng, N: int) -> np.ndarray:
    e = np.rint(rng.normal(0.0, SIGMA, size=N)).astype(np.int64)
    return np.clip(e, -_TAIL, _TAIL)


def _sample_ternary(rng, N: int) -> np.ndarray:
    return rng.integers(-1, 2, size=N).astype(np.int64)


def _uniform_eval(ctx: RingContext, rng) -> np.ndarray:
    out = np.empty((ctx.K, ctx.N), dtype=_U64)
    for i, q in enumerate(ctx.params.moduli):
        out[i] = rng.integers(0, q, size=ctx.N, dtype=np.uint64)
    return out


def _error_eval(ctx: RingContext, rng, error_free: bool) -> np.ndarray:
    if error_free:
        return np.zeros((ctx.K, ctx.N), dtype=_U64)
    e = _sample_error(rng, ctx.N)
    return ctx.ntt_fwd_arr(_small_to_res(ctx, e))


def _delta_res(params: PirParams) -> np.ndarray:
    return np.array([params.delta % q for q in params.moduli], dtype=_U64)


def expansion_exponents(params: PirParams) -> list:
    """Automorphism exponents used by query expansion, one per tree depth."""
    return [params.N // (1 << t) + 1 for t in range(params.m)]


# ------------------------------------------------------------------- keygen


def keygen(params: PirParams, rng_seed: int, error_free: bool = False):
    """Generate the secret key, per-depth EvalKeys, and the RGSW assembly key.

    Returns (SecretKey, {r: EvalKey}, RgswCiphertext encrypting -s).  The
    assembly key lets the server lift expansion leaves into full RGSW
    selectors via external products.
    """
    ctx = ring_context(params)
    rng = np.random.default_rng(rng_seed)
    s_small = _sample_ternary(rng, params.N)
    s_eval = ctx.ntt_fwd_arr(_small_to_res(ctx, s_small))
    sk = SecretKey(params, s_small, s_eval, rng_seed)

    evks = {}
    for r in expansion_exponents(params):
        evks[r] = _gen_evk(ctx, sk, r, rng, error_free)

    neg_s_eval = (ctx.qc - s_eval) % ctx.qc
    rgsw_s = _encrypt_rgsw_eval(ctx, sk, neg_s_eval, rng, error_free)
    return sk, evks, rgsw_s


def _gen_evk(ctx: RingContext, sk: SecretKey, r: int, rng, error_free: bool) -> EvalKey:
    p = ctx.params
    aut_idx = ((r * (2 * np.arange(p.N) + 1)) % (2 * p.N) - 1) // 2
    s_aut = sk.s_eval[:, aut_idx]
    a_rows = np.empty((p.ell, p.K, p.N), dtype=_U64)
    b_rows = np.empty((p.ell, p.K, p.N), dtype=_U64)
    for j in range(p.ell):
        a = _uniform_eval(ctx, rng)
        e = _error_eval(ctx, rng, error_free)
        zj = ctx.zpow_res[j][:, None]
        body = (ctx.qc - (s_aut * zj) % ctx.qc) % ctx.qc  # -z^j * aut_r(s)
        a_rows[j] = a
        b_rows[j] = (a * sk.s_eval % ctx.qc + e + body) % ctx.qc
    return EvalKey(r, a_rows, b_rows)


# ---------------------------------------------------------------- BFV layer


def encrypt_bfv(sk: SecretKey, msg: np.ndarray, rng, error_free: bool = False) -> BfvCiphertext:
    """Encrypt a plaintext polynomial over Z_P (coefficients < P)."""
    p = sk.params
    msg = np.asarray(msg, dtype=np.uint64)
    if msg.shape != (p.N,):
        raise ValueError(f"message must have shape ({p.N},)")
    if np.any(msg >= p.P):
        raise ValueError("message coefficient out of range [0, P)")
    ctx = ring_context(p)
    dres = _delta_res(p)[:, None]
    raw = (dres * (msg[None, :] % ctx.qc)) % ctx.qc
    return encrypt_raw(sk, raw, rng, error_free)


def encrypt_raw(sk: SecretKey, raw_coeff_res: np.ndarray, rng, error_free: bool = False) -> BfvCiphertext:
    """Encrypt an arbitrary R_Q payload given as Coeff-domain residues."""
    ctx = ring_context(sk.params)
    payload = ctx.ntt_fwd_arr(raw_coeff_res % ctx.qc)
    a = _uniform_eval(ctx, rng)
    e = _error_eval(ctx, rng, error_free)
    b = (a * sk.s_eval % ctx.qc + payload + e) % ctx.qc
    return BfvCiphertext(RnsPoly(a, Domain.EVAL), RnsPoly(b, Domain.EVAL))


def phase_ints(sk: SecretKey, ct: BfvCiphertext) -> list:
    """b - a*s reconstructed to python ints in [0, Q)."""
    ctx = ring_context(sk.params)
    ph = (ct.b.residues + (ctx.qc - ct.a.residues * sk.s_eval % ctx.qc)) % ctx.qc
    limbs = ctx.icrt_limbs(ctx.ntt_inv_arr(ph))
    return ctx.limbs_to_ints(limbs)


def decrypt_bfv(sk: SecretKey, ct: BfvCiphertext) -> np.ndarray:
    """Best-effort decryption; query noise_budget to detect exhaustion."""
    p = sk.params
    Q, P = p.Q, p.P
    xs = phase_ints(sk, ct)
    out = np.empty(p.N, dtype=np.uint64)
    for j, x in enumerate(xs):
        out[j] = ((x * P + Q // 2) // Q) % P
    return out


def noise_budget(sk: SecretKey, ct: BfvCiphertext) -> NoiseBudget:
    """Remaining headroom log2(delta/2) - log2(|e|_inf), in bits."""
    p = sk.params
    Q, P, delta = p.Q, p.P, p.delta
    xs = phase_ints(sk, ct)
    worst = 0
    for x in xs:
        m = ((x * P + Q // 2) // Q) % P
        e = (x - delta * m) % Q
        if e > Q // 2:
            e -= Q
        worst = max(worst, abs(e))
    import math

    bits = math.log2(delta) - 1.0 - (math.log2(worst) if worst else 0.0)
    return NoiseBudget(bits)


# --------------------------------------------------------------- RGSW layer


def encrypt_rgsw(sk: SecretKey, mu, rng, error_free: bool = False) -> RgswCiphertext:
    """Encrypt a small plaintext: 0, 1, or a monomial ('X', k) / X^k."""
    ctx = ring_context(sk.params)
    p = sk.params
    if isinstance(mu, RnsPoly):
        mu_eval = mu.residues if mu.domain == Domain.EVAL else ctx.ntt_fwd_arr(mu.residues)
    elif isinstance(mu, tuple) and mu[0] == "X":
        coeff = np.zeros((p.K, p.N), dtype=_U64)
        k = mu[1] % (2 * p.N)
        if k < p.N:
            coeff[:, k] = 1
        else:
            coeff[:, k - p.N] = (ctx.q - _U64(1))
        mu_eval = ctx.ntt_fwd_arr(coeff)
    elif mu in (0, 1):
        coeff = np.zeros((p.K, p.N), dtype=_U64)
        coeff[:, 0] = _U64(mu)
        mu_eval = ctx.ntt_fwd_arr(coeff)
    else:
        raise ValueError("mu must be 0, 1, a monomial ('X', k), or an RnsPoly")
    return _encrypt_rgsw_eval(ctx, sk, mu_eval, rng, error_free)


def _encrypt_rgsw_eval(ctx: RingContext, sk: SecretKey, mu_eval: np.ndarray, rng, error_free: bool) -> RgswCiphertext:
    p = ctx.params
    a_rows = np.empty((2, p.ell, p.K, p.N), dtype=_U64)
    b_rows = np.empty((2, p.ell, p.K, p.N), dtype=_U64)
    mu_s = (mu_eval * sk.s_eval) % ctx.qc
    for j in range(p.ell):
        zj = ctx.zpow_res[j][:, None]
        for part, body in ((0, (ctx.qc - (mu_s * zj) % ctx.qc) % ctx.qc),
                           (1, (mu_eval * zj) % ctx.qc)):
            a = _uniform_eval(ctx, rng)
            e = _error_eval(ctx, rng, error_free)
            a_rows[part, j] = a
            b_rows[part, j] = (a * sk.s_eval % ctx.qc + e + body) % ctx.qc
    return RgswCiphertext(a_rows, b_rows)


def rgsw_from_rows(z_rows_a: np.ndarray, z_rows_b: np.ndarray,
                   s_rows_a: np.ndarray, s_rows_b: np.ndarray) -> RgswCiphertext:
    """Assemble an RGSW ciphertext from precomputed row pairs."""
    a_rows = np.stack([s_rows_a, z_rows_a])
    b_rows = np.stack([s_rows_b, z_rows_b])
    return RgswCiphertext(a_rows, b_rows)


# ------------------------------------------------------- homomorphic ops


def ct_add(x: BfvCiphertext, y: BfvCiphertext, params: PirParams) -> BfvCiphertext:
    ctx = ring_context(params)
    return BfvCiphertext(
        RnsPoly((x.a.residues + y.a.residues) % ctx.qc, Domain.EVAL),
        RnsPoly((x.b.residues + y.b.residues) % ctx.qc, Domain.EVAL),
    )


def ct_sub(x: BfvCiphertext, y: BfvCiphertext, params: PirParams) -> BfvCiphertext:
    ctx = ring_context(params)
    return BfvCiphertext(
        RnsPoly((x.a.residues + (ctx.qc - y.a.residues)) % ctx.qc, Domain.EVAL),
        RnsPoly((x.b.residues + (ctx.qc - y.b.residues)) % ctx.qc, Domain.EVAL),
    )


def ct_plain_mul(pt_eval: RnsPoly, x: BfvCiphertext, params: PirParams) -> BfvCiphertext:
    """p * ct for an Eval-domain plaintext polynomial p."""
    if pt_eval.domain != Domain.EVAL:
        raise ValueError("plaintext must be in the Eval domain")
    ctx = ring_context(params)
    return BfvCiphertext(
        RnsPoly(pt_eval.residues * x.a.residues % ctx.qc, Domain.EVAL),
        RnsPoly(pt_eval.residues * x.b.residues % ctx.qc, Domain.EVAL),
    )


def external_product_batch(g: RgswCiphertext, ct_a: np.ndarray, ct_b: np.ndarray,
                           params: PirParams):
    """RGSW (x) BFV over a batch: ct_a/ct_b have shape (..., K, N).

    Returns (out_a, out_b) of the same shape.  This is the 2 x 2ell
    matrix-vector product with the vector (Dcp(a), Dcp(b)).
    """
    ctx = ring_context(params)
    da = ctx.dcp_arr(ct_a)  # (..., ell, K, N)
    db = ctx.dcp_arr(ct_b)
    # ell <= 8 and products < 2^56, so the digit-sum fits in uint64.
    out_a = (np.einsum("...jkn,jkn->...kn", da, g.a_rows[0]) +
             np.einsum("...jkn,jkn->...kn", db, g.a_rows[1])) % ctx.qc
    out_b = (np.einsum("...jkn,jkn->...kn", da, g.b_rows[0]) +
             np.einsum("...jkn,jkn->...kn", db, g.b_rows[1])) % ctx.qc
    return out_a, out_b


def external_product(g: RgswCiphertext, c: BfvCiphertext, params: PirParams) -> BfvCiphertext:
    out_a, out_b = external_product_batch(g, c.a.residues, c.b.residues, params)
    return BfvCiphertext(RnsPoly(out_a, Domain.EVAL), RnsPoly(out_b, Domain.EVAL))


def substitute_batch(evk: EvalKey, r: int, ct_a: np.ndarray, ct_b: np.ndarray,
                     params: PirParams):
    """Subs(ct, r) over a batch of ciphertext component arrays (..., K, N)."""
    if evk.r != r:
        raise KeyMismatchError(f"evk is for exponent {evk.r}, not {r}")
    idx = eval_aut_index(params, r)
    a_aut = ct_a[..., idx]
    b_aut = ct_b[..., idx]
    ctx = ring_context(params)
    da = ctx.dcp_arr(a_aut)  # (..., ell, K, N)
    out_a = np.einsum("...jkn,jkn->...kn", da, evk.a_rows) % ctx.qc
    out_b = (np.einsum("...jkn,jkn->...kn", da, evk.b_rows) + b_aut) % ctx.qc
    return out_a, out_b


def substitute(c: BfvCiphertext, r: int, evk: EvalKey, params: PirParams) -> BfvCiphertext:
    """Key-switched automorphism: output decrypts to m(X^r)."""
    out_a, out_b = substitute_batch(evk, r, c.a.residues, c.b.residues, params)
    return BfvCiphertext(RnsPoly(out_a, Domain.EVAL), RnsPoly(out_b, Domain.EVAL))


def eval_aut_index(params: PirParams, r: int) -> np.ndarray:
    from .modring import eval_automorphism_index

    return eval_automorphism_index(params, r)
