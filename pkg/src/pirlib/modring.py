"""Exact modular arithmetic over the residue number system.

Everything here is deterministic, pure, and vectorized with numpy.  The
universal object is a residue matrix of shape ``(..., K, N)`` (dtype uint64,
entries strictly below their modulus); leading axes batch independent
polynomials so callers can push whole tree levels through one call.

The public wrapper type is :class:`RnsPoly` (a single polynomial plus a
domain flag); hot paths inside the crypto layer work on the raw arrays via
the ``*_arr`` functions and share a cached :class:`RingContext` per parameter
set.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .params import ParameterError, PirParams

_U64 = np.uint64
_MASK32 = _U64(0xFFFFFFFF)


class Domain(Enum):
    COEFF = 0
    EVAL = 1


class DomainError(ValueError):
    """Operation applied to a polynomial in the wrong domain."""


@dataclass
class RnsPoly:
    """A polynomial of R_Q in residue form.

    ``residues`` has shape (K, N) with residues[i][j] in [0, q_i);
    ``domain`` records whether the NTT has been applied.
    """

    residues: np.ndarray
    domain: Domain

    def copy(self) -> "RnsPoly":
        return RnsPoly(self.residues.copy(), self.domain)

    def __eq__(self, other):
        return (
            isinstance(other, RnsPoly)
            and self.domain == other.domain
            and np.array_equal(self.residues, other.residues)
        )


@dataclass
class BigCoeffPoly:
    """N multi-precision coefficients in [0, Q)."""

    coeffs: list


def _find_psi(q: int, N: int) -> int:
    """Smallest-generator primitive 2N-th root of unity mod q."""
    order = 2 * N
    assert (q - 1) % order == 0
    for g in range(2, q):
        psi = pow(g, (q - 1) // order, q)
        if pow(psi, N, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive 2N-th root of unity mod {q}")


def _bit_reverse_indices(N: int) -> np.ndarray:
    bits = N.bit_length() - 1
    idx = np.arange(N)
    rev = np.zeros(N, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


class RingContext:
    """Precomputed tables (roots, CRT constants) for one parameter set.

    Built once and read-only thereafter; safe to share across threads.
    """

    def __init__(self, params: PirParams):
        self.params = params
        N, K = params.N, params.K
        self.N, self.K = N, K
        self.q = np.array(params.moduli, dtype=_U64)
        self.qc = self.q[:, None]  # broadcast against (K, N)
        self.Q = params.Q

        self.brev = _bit_reverse_indices(N)
        psis = [_find_psi(q, N) for q in params.moduli]
        self.psi = psis

        # Full power tables psi^e for e in [0, 2N): used by the negacyclic
        # twist, monomial multiplication and Eval-domain constants.
        self.psi_pows = np.zeros((K, 2 * N), dtype=_U64)
        self.ipsi_pows = np.zeros((K, 2 * N), dtype=_U64)
        for i, (q, psi) in enumerate(zip(params.moduli, psis)):
            ipsi = pow(psi, -1, q)
            acc_f, acc_i = 1, 1
            for e in range(2 * N):
                self.psi_pows[i, e] = acc_f
                self.ipsi_pows[i, e] = acc_i
                acc_f = acc_f * psi % q
                acc_i = acc_i * ipsi % q

        self.twist = self.psi_pows[:, :N].copy()
        ninv = np.array([pow(N, -1, q) for q in params.moduli], dtype=_U64)
        self.untwist = (self.ipsi_pows[:, :N] * ninv[:, None]) % self.qc

        # Per-stage butterfly twiddles, natural CT order after bit reversal.
        stages = N.bit_length() - 1
        self.fwd_tw, self.inv_tw = [], []
        for s in range(stages):
            half = 1 << s
            fw = np.zeros((K, half), dtype=_U64)
            iw = np.zeros((K, half), dtype=_U64)
            for i, (q, psi) in enumerate(zip(params.moduli, psis)):
                omega = psi * psi % q
                wm = pow(omega, N // (2 * half), q)
                iwm = pow(wm, -1, q)
                af, ai = 1, 1
                for j in range(half):
                    fw[i, j] = af
                    iw[i, j] = ai
                    af = af * wm % q
                    ai = ai * iwm % q
            self.fwd_tw.append(fw)
            self.inv_tw.append(iw)

        # CRT / iCRT constants.  Reconstruction works in 32-bit limbs:
        # S = sum_i ((r_i * inv_i) mod q_i) * M_i with M_i = Q / q_i,
        # then S is reduced mod Q by at most K-1 subtractions.
        self.n_limbs = (self.Q.bit_length() + 31) // 32 + 1
        self.M_limbs = np.zeros((K, self.n_limbs), dtype=_U64)
        self.Q_limbs = np.zeros(self.n_limbs, dtype=_U64)
        self.crt_inv = np.zeros(K, dtype=_U64)
        for i, q in enumerate(params.moduli):
            Mi = self.Q // q
            self.crt_inv[i] = pow(Mi % q, -1, q)
            for l in range(self.n_limbs):
                self.M_limbs[i, l] = (Mi >> (32 * l)) & 0xFFFFFFFF
        for l in range(self.n_limbs):
            self.Q_limbs[l] = (self.Q >> (32 * l)) & 0xFFFFFFFF

        # Gadget digit layout.
        self.z = params.z
        self.zbits = params.zbits
        self.ell = params.ell
        self.zpow_res = np.zeros((params.ell, K), dtype=_U64)
        for j in range(params.ell):
            zj = pow(params.z, j, self.Q)
            for i, q in enumerate(params.moduli):
                self.zpow_res[j, i] = zj % q

    # ------------------------------------------------------------------ NTT

    def ntt_fwd_arr(self, a: np.ndarray) -> np.ndarray:
        """Forward negacyclic NTT over the trailing (K, N) axes.

        Butterfly sums are reduced lazily: only the twiddle product takes a
        modulo, so intermediates stay below (stage+1)*2^28 < 2^32 and every
        product fits in uint64.
        """
        q2 = self.q[:, None, None]
        a = (a * self.twist) % self.qc
        a = a[..., self.brev]
        N = self.N
        lead = a.shape[:-1]
        for s, w in enumerate(self.fwd_tw):
            half = 1 << s
            a = a.reshape(*lead, N // (2 * half), 2, half)
            lo = a[..., 0, :]
            hi = (a[..., 1, :] * w[:, None, :]) % q2
            out = np.empty_like(a)
            out[..., 0, :] = lo + hi
            out[..., 1, :] = lo + (q2 - hi)
            a = out.reshape(*lead, N)
        return a % self.qc

    def ntt_inv_arr(self, a: np.ndarray) -> np.ndarray:
        """Inverse negacyclic NTT over the trailing (K, N) axes.

        Same lazy reduction as the forward transform; the final untwist
        multiply performs the full reduction.
        """
        q2 = self.q[:, None, None]
        a = a[..., self.brev]
        N = self.N
        lead = a.shape[:-1]
        for s, w in enumerate(self.inv_tw):
            half = 1 << s
            a = a.reshape(*lead, N // (2 * half), 2, half)
            lo = a[..., 0, :]
            hi = (a[..., 1, :] * w[:, None, :]) % q2
            out = np.empty_like(a)
            out[..., 0, :] = lo + hi
            out[..., 1, :] = lo + (q2 - hi)
            a = out.reshape(*lead, N)
        return (a % self.qc * self.untwist) % self.qc

    # ----------------------------------------------------------- CRT / iCRT

    def icrt_limbs(self, coeff_arr: np.ndarray) -> np.ndarray:
        """Reconstruct big coefficients from residues.

        Input shape (..., K, N); output shape (..., n_limbs, N) of 32-bit
        limbs (little-endian), each reconstructed value in [0, Q).
        """
        t = (coeff_arr * self.crt_inv[:, None]) % self.qc
        # sum_i t_i * M_i, accumulated limb-wise (products < 2^60, K <= 4).
        S = np.einsum("...kn,kl->...ln", t, self.M_limbs)
        for l in range(self.n_limbs - 1):
            carry = S[..., l, :] >> _U64(32)
            S[..., l, :] &= _MASK32
            S[..., l + 1, :] += carry
        S[..., -1, :] &= _MASK32
        for _ in range(self.K - 1):
            self._sub_q_where(S, self._geq_q(S))
        return S

    def _geq_q(self, S: np.ndarray) -> np.ndarray:
        res = np.zeros(S.shape[:-2] + S.shape[-1:], dtype=bool)
        decided = np.zeros_like(res)
        for l in range(self.n_limbs - 1, -1, -1):
            gt = S[..., l, :] > self.Q_limbs[l]
            lt = S[..., l, :] < self.Q_limbs[l]
            res |= ~decided & gt
            decided |= gt | lt
        res |= ~decided  # equality counts as >=
        return res

    def _sub_q_where(self, S: np.ndarray, mask: np.ndarray) -> None:
        borrow = np.zeros(mask.shape, dtype=np.int64)
        for l in range(self.n_limbs):
            diff = S[..., l, :].astype(np.int64) - np.int64(self.Q_limbs[l]) - borrow
            borrow = (diff < 0).astype(np.int64)
            diff = diff + (borrow << 32)
            S[..., l, :] = np.where(mask, diff.astype(_U64), S[..., l, :])

    def limbs_to_ints(self, S: np.ndarray) -> list:
        """Convert a (n_limbs, N) limb array to N python ints."""
        out = [0] * S.shape[-1]
        for l in range(self.n_limbs - 1, -1, -1):
            row = S[l]
            for j in range(S.shape[-1]):
                out[j] = (out[j] << 32) | int(row[j])
        return out

    def digits_from_limbs(self, S: np.ndarray, ndigits: int) -> np.ndarray:
        """Extract base-z digits; output shape (..., ndigits, N)."""
        zb = self.zbits
        zmask = _U64(self.z - 1) if self.z > 1 else _U64(0)
        digs = np.zeros(S.shape[:-2] + (ndigits,) + S.shape[-1:], dtype=_U64)
        for j in range(ndigits):
            bitpos = j * zb
            l0, sh = bitpos // 32, bitpos % 32
            if l0 >= self.n_limbs:
                continue
            v = S[..., l0, :] >> _U64(sh)
            if sh and l0 + 1 < self.n_limbs:
                v = v | (S[..., l0 + 1, :] << _U64(32 - sh))
            digs[..., j, :] = v & zmask
        return digs

    def dcp_arr(self, eval_arr: np.ndarray, ndigits: int | None = None) -> np.ndarray:
        """Gadget decomposition: Eval input (..., K, N) -> (..., ell, K, N).

        Pipeline: iNTT -> iCRT -> base-z digit extraction -> CRT -> NTT.
        Digits are unsigned in [0, z); since z < q_i the CRT step is a
        broadcast.
        """
        if ndigits is None:
            ndigits = self.ell
        coeff = self.ntt_inv_arr(eval_arr)
        limbs = self.icrt_limbs(coeff)
        digs = self.digits_from_limbs(limbs, ndigits)  # (..., ndigits, N)
        digs = np.broadcast_to(
            digs[..., :, None, :], digs.shape[:-1] + (self.K, digs.shape[-1])
        ).copy()
        return self.ntt_fwd_arr(digs)

    def monomial_eval_factor(self, t: int) -> np.ndarray:
        """(K, N) Eval-domain values of X^t, for batched monomial products."""
        exps = (t * (2 * np.arange(self.N) + 1)) % (2 * self.N)
        return self.psi_pows[:, exps]


_CTX_CACHE: dict = {}


def ring_context(params: PirParams) -> RingContext:
    key = params.digest()
    ctx = _CTX_CACHE.get(key)
    if ctx is None:
        ctx = RingContext(params)
        _CTX_CACHE[key] = ctx
    return ctx


# --------------------------------------------------------------- public ops


def _check_same_domain(p: RnsPoly, q: RnsPoly) -> None:
    if p.domain != q.domain:
        raise DomainError("operands are in different domains")


def crt_decompose(p: BigCoeffPoly, params: PirParams) -> RnsPoly:
    """Replace each big coefficient with its per-modulus residues."""
    Q = params.Q
    res = np.zeros((params.K, params.N), dtype=_U64)
    for j, c in enumerate(p.coeffs):
        if not 0 <= c < Q:
            raise ValueError(f"coefficient {j} out of range [0, Q)")
        for i, q in enumerate(params.moduli):
            res[i, j] = c % q
    return RnsPoly(res, Domain.COEFF)


def icrt_reconstruct(p: RnsPoly, params: PirParams) -> BigCoeffPoly:
    """Inverse CRT: exact big-coefficient reconstruction."""
    if p.domain != Domain.COEFF:
        raise DomainError("iCRT requires the Coeff domain")
    ctx = ring_context(params)
    limbs = ctx.icrt_limbs(p.residues)
    return BigCoeffPoly(ctx.limbs_to_ints(limbs))


def ntt_forward(p: RnsPoly, params: PirParams) -> RnsPoly:
    if p.domain != Domain.COEFF:
        raise DomainError("forward NTT requires the Coeff domain")
    return RnsPoly(ring_context(params).ntt_fwd_arr(p.residues), Domain.EVAL)


def ntt_inverse(p: RnsPoly, params: PirParams) -> RnsPoly:
    if p.domain != Domain.EVAL:
        raise DomainError("inverse NTT requires the Eval domain")
    return RnsPoly(ring_context(params).ntt_inv_arr(p.residues), Domain.COEFF)


def poly_add(p: RnsPoly, q: RnsPoly, params: PirParams) -> RnsPoly:
    _check_same_domain(p, q)
    ctx = ring_context(params)
    return RnsPoly((p.residues + q.residues) % ctx.qc, p.domain)


def poly_sub(p: RnsPoly, q: RnsPoly, params: PirParams) -> RnsPoly:
    _check_same_domain(p, q)
    ctx = ring_context(params)
    return RnsPoly((p.residues + (ctx.qc - q.residues)) % ctx.qc, p.domain)


def poly_pointwise_mul(p: RnsPoly, q: RnsPoly, params: PirParams) -> RnsPoly:
    if p.domain != Domain.EVAL or q.domain != Domain.EVAL:
        raise DomainError("pointwise multiplication requires the Eval domain")
    ctx = ring_context(params)
    return RnsPoly((p.residues * q.residues) % ctx.qc, Domain.EVAL)


def poly_scalar_mul(p: RnsPoly, scalar: int, params: PirParams) -> RnsPoly:
    ctx = ring_context(params)
    s = np.array([scalar % q for q in params.moduli], dtype=_U64)[:, None]
    return RnsPoly((p.residues * s) % ctx.qc, p.domain)


def monomial_mul(p: RnsPoly, t: int, params: PirParams) -> RnsPoly:
    """Multiply by X^t in R_Q; t may be negative (X^-1 = -X^(N-1))."""
    ctx = ring_context(params)
    N = params.N
    t = t % (2 * N)
    if p.domain == Domain.EVAL:
        # eval point k sits at psi^(2k+1); X^t evaluates to psi^(t(2k+1)).
        exps = (t * (2 * np.arange(N) + 1)) % (2 * N)
        mono = ctx.psi_pows[:, exps]
        return RnsPoly((p.residues * mono) % ctx.qc, Domain.EVAL)
    e = (np.arange(N) + t) % (2 * N)
    pos = e % N
    neg = e >= N
    vals = np.where(neg, (ctx.qc - p.residues) % ctx.qc, p.residues)
    out = np.zeros_like(p.residues)
    out[:, pos] = vals
    return RnsPoly(out, Domain.COEFF)


def eval_automorphism_index(params: PirParams, r: int) -> np.ndarray:
    """Gather indices realizing p(X^r) on the Eval-domain point order."""
    N = params.N
    k = np.arange(N)
    src = ((r * (2 * k + 1)) % (2 * N) - 1) // 2
    return src


def automorphism_map(p: RnsPoly, r: int, params: PirParams) -> RnsPoly:
    """Map p(X) to p(X^r) for odd r (gcd(r, 2N) = 1)."""
    if r % 2 == 0:
        raise ValueError(f"automorphism exponent r={r} must be odd")
    ctx = ring_context(params)
    N = params.N
    if p.domain == Domain.EVAL:
        return RnsPoly(p.residues[:, eval_automorphism_index(params, r)], Domain.EVAL)
    e = (np.arange(N) * r) % (2 * N)
    pos = e % N
    neg = e >= N
    vals = np.where(neg, (ctx.qc - p.residues) % ctx.qc, p.residues)
    out = np.zeros_like(p.residues)
    out[:, pos] = vals
    return RnsPoly(out, Domain.COEFF)


def gadget_decompose(p: RnsPoly, params: PirParams) -> list:
    """Base-z digit expansion of an Eval-domain polynomial.

    Returns ell Eval-domain polynomials x_i with sum_i x_i * z^i = p in R_Q.
    """
    if p.domain != Domain.EVAL:
        raise DomainError("gadget decomposition takes Eval-domain input")
    ctx = ring_context(params)
    digs = ctx.dcp_arr(p.residues)
    return [RnsPoly(digs[j], Domain.EVAL) for j in range(params.ell)]


# ------------------------------------------------------------ serialization


def serialize_rns_poly(p: RnsPoly) -> bytes:
    """Domain byte, then per-residue-row uint32 little-endian words."""
    head = bytes([p.domain.value])
    return head + p.residues.astype("<u4").tobytes()


def deserialize_rns_poly(data: bytes, params: PirParams) -> RnsPoly:
    K, N = params.K, params.N
    need = 1 + 4 * K * N
    if len(data) < need:
        raise ValueError("truncated RnsPoly payload")
    domain = Domain(data[0])
    res = np.frombuffer(data[1:need], dtype="<u4").astype(_U64).reshape(K, N)
    return RnsPoly(res, domain)


def rns_poly_nbytes(params: PirParams) -> int:
    return 1 + 4 * params.K * params.N
