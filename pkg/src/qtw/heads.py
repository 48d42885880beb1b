"""Output heads: the Kraus-structured CPTP update and direct state regression.

Kraus head, per time step:

1. ``out = h W + b`` gives 16 reals; ``out[:8]`` and ``out[8:]`` are the
   real and imaginary parts of ``V`` (4x2, row-major).
2. Thin QR of ``V`` by modified Gram-Schmidt with one re-orthogonalisation
   pass; ``R`` has a real positive diagonal, so ``Q`` is unique.
3. ``K1 = Q[0:2]``, ``K2 = Q[2:4]``. Then ``K1^+ K1 + K2^+ K2 = Q^+ Q = I``.
4. ``rho' = sum_i K_i rho K_i^+``, Hermitised, divided by ``Tr + 1e-8`` and
   renormalised to unit trace.

Complex values travel as ``(re, im)`` pairs of real arrays so that every
step is an ordinary differentiable primitive. Alignment with the data: the
hidden state computed from ``y[0..t]`` drives the update that produces the
estimate compared with ``states[t]``.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from . import qcore
from .ad import NumpyOps, cmatmul

N_KRAUS_OUT = 16
N_DIRECT_OUT = 8
JITTER_STD = 1e-6
TRACE_EPS = 1e-8
FALLBACK_TRACE = 1e-12
SINGULAR_TOL = 1e-13

_EYE2 = np.eye(2)


class SingularityError(ArithmeticError):
    """``V`` is rank deficient and QR cannot define a Kraus family."""


class KrausPair(NamedTuple):
    K1: np.ndarray
    K2: np.ndarray

    def completeness_error(self) -> float:
        return float(qcore.kraus_completeness_error(self.K1, self.K2))


def head_shapes(head: str, hidden_dim: int) -> list[tuple[str, tuple]]:
    n_out = {"kraus": N_KRAUS_OUT, "direct": N_DIRECT_OUT}[head]
    return [("head.w", (hidden_dim, n_out)), ("head.b", (n_out,))]


# ---------------------------------------------------------------- Kraus head


def build_V(h, w, b, F=NumpyOps, jitter_rng: Optional[np.random.Generator] = None):
    """Project hidden states ``(..., H)`` to ``(Vr, Vi)`` of shape ``(..., 4, 2)``."""
    out = F.add(F.matmul(h, w), b)
    lead = tuple(F.value(out).shape[:-1])
    vr = F.reshape(out[..., :8], lead + (4, 2))
    vi = F.reshape(out[..., 8:], lead + (4, 2))
    if jitter_rng is not None:
        vr = F.add(vr, jitter_rng.normal(0.0, JITTER_STD, lead + (4, 2)))
        vi = F.add(vi, jitter_rng.normal(0.0, JITTER_STD, lead + (4, 2)))
    return vr, vi


def _cinner(F, ar, ai, br, bi):
    """``a^H b`` along the last axis, kept as a length-1 axis."""
    re = F.sum(F.add(F.mul(ar, br), F.mul(ai, bi)), axis=-1, keepdims=True)
    im = F.sum(F.sub(F.mul(ar, bi), F.mul(ai, br)), axis=-1, keepdims=True)
    return re, im


def _cnorm(F, ar, ai):
    return F.sqrt(F.sum(F.add(F.square(ar), F.square(ai)), axis=-1, keepdims=True))


def _project_out(F, qr, qi, wr, wi):
    pr, pi = _cinner(F, qr, qi, wr, wi)
    wr = F.sub(wr, F.sub(F.mul(qr, pr), F.mul(qi, pi)))
    wi = F.sub(wi, F.add(F.mul(qr, pi), F.mul(qi, pr)))
    return wr, wi


def thin_qr_pairs(vr, vi, F=NumpyOps, check: bool = False):
    """Thin QR of ``(..., 4, 2)`` complex matrices given as real pairs; returns ``(Qr, Qi)``.

    With ``check`` a column whose norm falls below ``SINGULAR_TOL`` relative
    to ``|V|_F`` raises :class:`SingularityError`.
    """
    v1r, v1i = vr[..., :, 0], vi[..., :, 0]
    v2r, v2i = vr[..., :, 1], vi[..., :, 1]
    n1 = _cnorm(F, v1r, v1i)
    if check:
        scale = np.sqrt(np.sum(F.value(vr) ** 2 + F.value(vi) ** 2, axis=(-2, -1)))[..., None]
        if np.any(F.value(n1) <= SINGULAR_TOL * scale) or np.any(scale == 0):
            raise SingularityError("first column of V is numerically zero")
    inv1 = F.reciprocal(n1)
    q1r, q1i = F.mul(v1r, inv1), F.mul(v1i, inv1)
    wr, wi = _project_out(F, q1r, q1i, v2r, v2i)
    wr, wi = _project_out(F, q1r, q1i, wr, wi)
    n2 = _cnorm(F, wr, wi)
    if check and np.any(F.value(n2) <= SINGULAR_TOL * scale):
        raise SingularityError("columns of V are numerically dependent")
    inv2 = F.reciprocal(n2)
    q2r, q2i = F.mul(wr, inv2), F.mul(wi, inv2)
    lead = tuple(F.value(q1r).shape[:-1])
    qr = F.concat([F.reshape(q1r, lead + (4, 1)), F.reshape(q2r, lead + (4, 1))], axis=-1)
    qi = F.concat([F.reshape(q1i, lead + (4, 1)), F.reshape(q2i, lead + (4, 1))], axis=-1)
    return qr, qi


def thin_qr(V: np.ndarray) -> np.ndarray:
    """Complex convenience wrapper: ``V`` ``(..., 4, 2)`` to ``Q`` with ``Q^+ Q = I``."""
    V = np.asarray(V, dtype=complex)
    qr, qi = thin_qr_pairs(V.real.copy(), V.imag.copy(), check=True)
    return qr + 1j * qi


def kraus_from_q(Q: np.ndarray) -> KrausPair:
    Q = np.asarray(Q, dtype=complex)
    return KrausPair(Q[..., 0:2, :], Q[..., 2:4, :])


def _trace_pairs(F, mr):
    return F.sum(F.mul(mr, _EYE2), axis=(-2, -1), keepdims=True)


def kraus_map_pairs(rr, ri, kr, ki, F=NumpyOps):
    """``sum_i K_i rho K_i^+`` with ``K = (kr, ki)`` of shape ``(..., 4, 2)`` (two
    row-blocks) and ``rho`` of shape ``(..., 2, 2)``."""
    lead = tuple(F.value(kr).shape[:-2])
    kr2 = F.reshape(kr, lead + (2, 2, 2))
    ki2 = F.reshape(ki, lead + (2, 2, 2))
    rr_b = F.reshape(rr, lead + (1, 2, 2))
    ri_b = F.reshape(ri, lead + (1, 2, 2))
    ar, ai = cmatmul(F, kr2, ki2, rr_b, ri_b)
    kdr, kdi = F.transpose(kr2), F.scale(F.transpose(ki2), -1.0)
    mr, mi = cmatmul(F, ar, ai, kdr, kdi)
    return F.sum(mr, axis=-3), F.sum(mi, axis=-3)


def kraus_update_pairs(rr, ri, kr, ki, F=NumpyOps, eps: float = TRACE_EPS, stabilize: bool = True):
    """Apply the Kraus pair and the numerical stabilisers to ``rho`` (real pairs)."""
    mr, mi = kraus_map_pairs(rr, ri, kr, ki, F)
    if not stabilize:
        return mr, mi
    mr = F.scale(F.add(mr, F.transpose(mr)), 0.5)
    mi = F.scale(F.sub(mi, F.transpose(mi)), 0.5)
    inv = F.reciprocal(F.add(_trace_pairs(F, mr), eps))
    mr, mi = F.mul(mr, inv), F.mul(mi, inv)
    inv = F.reciprocal(_trace_pairs(F, mr))
    return F.mul(mr, inv), F.mul(mi, inv)


def kraus_update(rho, k: KrausPair, eps: float = TRACE_EPS, stabilize: bool = True) -> np.ndarray:
    """Complex convenience wrapper around :func:`kraus_update_pairs`."""
    rho = np.asarray(getattr(rho, "mat", rho), dtype=complex)
    Q = np.concatenate([np.asarray(k.K1, dtype=complex), np.asarray(k.K2, dtype=complex)], axis=-2)
    lead = np.broadcast_shapes(rho.shape[:-2], Q.shape[:-2])
    rho = np.broadcast_to(rho, lead + (2, 2))
    Q = np.broadcast_to(Q, lead + (4, 2))
    mr, mi = kraus_update_pairs(rho.real, rho.imag, Q.real, Q.imag, eps=eps, stabilize=stabilize)
    return mr + 1j * mi


# --------------------------------------------------------------- direct head


def direct_pairs(h, w, b, F=NumpyOps):
    """Linear map to 8 reals, read as a 2x2 complex matrix and divided by its trace.

    Layout: ``out[:4]`` real part, ``out[4:]`` imaginary part, both row-major.
    The real trace gets a sign-matched ``1e-8`` guard; where ``|Tr| <= 1e-12``
    the output is replaced by ``I/2`` and flagged. Returns ``(re, im, flags)``.
    """
    out = F.add(F.matmul(h, w), b)
    lead = tuple(F.value(out).shape[:-1])
    mr = F.reshape(out[..., :4], lead + (2, 2))
    mi = F.reshape(out[..., 4:], lead + (2, 2))
    tr = _trace_pairs(F, mr)
    trv = F.value(tr)
    fallback = np.abs(trv) <= FALLBACK_TRACE
    guard = np.where(fallback, 1.0 - trv, np.where(trv >= 0, TRACE_EPS, -TRACE_EPS))
    inv = F.reciprocal(F.add(tr, guard))
    pr, pi = F.mul(mr, inv), F.mul(mi, inv)
    if np.any(fallback):
        keep = (~fallback).astype(float)
        pr = F.add(F.mul(pr, keep), (1.0 - keep) * 0.5 * _EYE2)
        pi = F.mul(pi, keep)
    return pr, pi, fallback[..., 0, 0]


def direct_predict(h, w, b) -> qcore.RawPrediction:
    pr, pi, _ = direct_pairs(np.asarray(h, dtype=float), w, b)
    return qcore.RawPrediction(pr + 1j * pi)


# ------------------------------------------------------------------ rollout


def stack_time(hs, F=NumpyOps):
    """List of ``T`` arrays ``(batch, H)`` to one ``(batch, T, H)`` array."""
    B, H = F.value(hs[0]).shape
    return F.concat([F.reshape(h, (B, 1, H)) for h in hs], axis=1)


def rollout(head: str, hs, w, b, rho0=qcore.KET0, F=NumpyOps, jitter_rng=None, tbptt: int = 0):
    """Turn hidden states into a state sequence.

    ``hs`` is a list of ``T`` hidden states ``(batch, H)`` or one stacked
    ``(batch, T, H)`` array. Kraus mode evolves ``rho`` recursively from
    ``rho0``; the projection and QR do not depend on ``rho`` and run over all
    steps at once. Direct mode maps each ``h_t`` independently. Returns
    ``(re, im, flags)``: ``(batch, T, 2, 2)`` arrays and a ``(batch, T)``
    fallback mask (all False for the Kraus head).
    """
    H_all = stack_time(hs, F) if isinstance(hs, (list, tuple)) else hs
    B, T = F.value(H_all).shape[:2]
    if head == "direct":
        pr, pi, flags = direct_pairs(H_all, w, b, F)
        return pr, pi, flags
    if head != "kraus":
        raise ValueError(f"unknown head {head!r}")
    vr, vi = build_V(H_all, w, b, F, jitter_rng)
    qr, qi = thin_qr_pairs(vr, vi, F, check=jitter_rng is None and F is NumpyOps)
    kr = F.reshape(qr, (B, T, 2, 2, 2))
    ki = F.reshape(qi, (B, T, 2, 2, 2))
    kdr, kdi = F.transpose(kr), F.scale(F.transpose(ki), -1.0)
    rho0 = np.asarray(rho0, dtype=complex)
    rr = np.broadcast_to(rho0.real, (B, 1, 2, 2)).copy()
    ri = np.broadcast_to(rho0.imag, (B, 1, 2, 2)).copy()
    res, ims = [], []
    for t in range(T):
        if tbptt and t > 0 and t % tbptt == 0 and not isinstance(rr, np.ndarray):
            rr, ri = F.stop_gradient(rr), F.stop_gradient(ri)
        k = (kr[:, t], ki[:, t], kdr[:, t], kdi[:, t])
        rr, ri = _kraus_step(F, rr, ri, *k)
        res.append(rr)
        ims.append(ri)
    pr = F.concat(res, axis=1)
    pi = F.concat(ims, axis=1)
    return pr, pi, np.zeros((B, T), dtype=bool)


def _kraus_step(F, rr, ri, kr, ki, kdr, kdi):
    """One stabilised update; ``rho`` is ``(B, 1, 2, 2)``, ``K`` is ``(B, 2, 2, 2)``."""
    ar, ai = cmatmul(F, kr, ki, rr, ri)
    mr, mi = cmatmul(F, ar, ai, kdr, kdi)
    mr = F.sum(mr, axis=-3, keepdims=True)
    mi = F.sum(mi, axis=-3, keepdims=True)
    mr = F.scale(F.add(mr, F.transpose(mr)), 0.5)
    mi = F.scale(F.sub(mi, F.transpose(mi)), 0.5)
    inv = F.reciprocal(F.add(_trace_pairs(F, mr), TRACE_EPS))
    mr, mi = F.mul(mr, inv), F.mul(mi, inv)
    inv = F.reciprocal(_trace_pairs(F, mr))
    return F.mul(mr, inv), F.mul(mi, inv)
