"""Single-qubit linear algebra, state representations and distance metrics.

Matrices are numpy ``complex128`` arrays of shape ``(..., 2, 2)``; every
function broadcasts over leading axes so whole trajectories can be scored in
one call. The 2x2 algebra is written out entry by entry rather than going
through ``numpy.linalg``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERM_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-10
BLOCH_TOL = 1e-9
DET_CLAMP = 1e-12
DET_ZERO = 1e-14  # |det| below this is rounding residue of a rank-one matrix

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
KET0 = np.array([[1, 0], [0, 0]], dtype=complex)
KET1 = np.array([[0, 0], [0, 1]], dtype=complex)
MAX_MIXED = 0.5 * I2


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class StateError(ValueError):
    """A matrix failed density-matrix validation."""


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def trace(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] + m[..., 1, 1]


def det(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def frob(m: np.ndarray) -> np.ndarray:
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(m.real**2 + m.imag**2, axis=(-2, -1)))


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unrolled 2x2 complex product, broadcasting over leading axes."""
    a00, a01, a10, a11 = a[..., 0, 0], a[..., 0, 1], a[..., 1, 0], a[..., 1, 1]
    b00, b01, b10, b11 = b[..., 0, 0], b[..., 0, 1], b[..., 1, 0], b[..., 1, 1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=complex)
    out[..., 0, 0] = a00 * b00 + a01 * b10
    out[..., 0, 1] = a00 * b01 + a01 * b11
    out[..., 1, 0] = a10 * b00 + a11 * b10
    out[..., 1, 1] = a10 * b01 + a11 * b11
    return out


def eigvals_hermitian_2x2(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenvalues ``(lam_min, lam_max)`` of the Hermitian part of ``m``."""
    h = hermitize(np.asarray(m, dtype=complex))
    a = h[..., 0, 0].real
    d = h[..., 1, 1].real
    c = h[..., 0, 1]
    mean = 0.5 * (a + d)
    half = 0.5 * (a - d)
    rad = np.sqrt(half * half + c.real**2 + c.imag**2)
    return mean - rad, mean + rad


@dataclass(frozen=True)
class BlochVector:
    rx: float
    ry: float
    rz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])

    def norm(self) -> float:
        return float(np.sqrt(self.rx**2 + self.ry**2 + self.rz**2))


@dataclass(frozen=True)
class DensityMatrix:
    """A validated single-qubit state. Construction raises :class:`StateError`."""

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=complex)
        if m.shape != (2, 2):
            raise StateError(f"expected a 2x2 matrix, got shape {m.shape}")
        herm = float(frob(m - dagger(m)))
        if herm > HERM_TOL:
            raise StateError(f"not Hermitian: |m - m^+|_F = {herm:.3e}")
        tr_err = abs(complex(trace(m)) - 1.0)
        if tr_err > TRACE_TOL:
            raise StateError(f"trace deviates from one by {tr_err:.3e}")
        lam_min = float(eigvals_hermitian_2x2(m)[0])
        if lam_min < -PSD_TOL:
            raise StateError(f"negative eigenvalue {lam_min:.3e}")
        object.__setattr__(self, "mat", m)


@dataclass(frozen=True)
class RawPrediction:
    """Unconstrained 2x2 output of a regression head; nothing is enforced."""

    mat: np.ndarray


def _mat(x) -> np.ndarray:
    if isinstance(x, (DensityMatrix, RawPrediction)):
        return x.mat
    return np.asarray(x, dtype=complex)


def is_density(m, herm_tol=HERM_TOL, trace_tol=TRACE_TOL, psd_tol=PSD_TOL) -> np.ndarray:
    """Vectorised validity check; returns a boolean per matrix."""
    m = _mat(m)
    ok = frob(m - dagger(m)) <= herm_tol
    ok &= np.abs(trace(m) - 1.0) <= trace_tol
    ok &= eigvals_hermitian_2x2(m)[0] >= -psd_tol
    return ok


def bloch_to_rho(b) -> np.ndarray:
    """Reconstruct ``(I + r.sigma)/2`` from Bloch components.

    Accepts a :class:`BlochVector` or an array whose last axis has length 3.
    Raises :class:`DomainError` when any vector is longer than ``1 + 1e-9``.
    """
    r = b.as_array() if isinstance(b, BlochVector) else np.asarray(b, dtype=float)
    if r.shape[-1] != 3:
        raise ValueError("Bloch vectors need three components")
    norm2 = np.sum(r * r, axis=-1)
    if np.any(norm2 > (1.0 + BLOCH_TOL) ** 2):
        raise DomainError(f"Bloch vector outside the unit ball (|r| = {np.sqrt(norm2.max()):.12f})")
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]
    out = np.empty(r.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = 0.5 * (1.0 + rz)
    out[..., 1, 1] = 0.5 * (1.0 - rz)
    out[..., 0, 1] = 0.5 * (rx - 1j * ry)
    out[..., 1, 0] = 0.5 * (rx + 1j * ry)
    return out


def rho_to_bloch(rho) -> np.ndarray:
    """``r_k = Re Tr(sigma_k rho)`` as an array with trailing axis of length 3.

    The real part is taken so that non-Hermitian predictions still map to a
    point in R^3.
    """
    m = _mat(rho)
    rx = m[..., 0, 1].real + m[..., 1, 0].real
    ry = m[..., 1, 0].imag - m[..., 0, 1].imag
    rz = (m[..., 0, 0] - m[..., 1, 1]).real
    return np.stack([rx, ry, rz], axis=-1)


def fidelity_proxy(rho, sigma) -> np.ndarray:
    """Product-trace fidelity ``Re Tr(rho sigma)``; exact when either state is pure."""
    a, b = _mat(rho), _mat(sigma)
    return np.real(
        a[..., 0, 0] * b[..., 0, 0]
        + a[..., 0, 1] * b[..., 1, 0]
        + a[..., 1, 0] * b[..., 0, 1]
        + a[..., 1, 1] * b[..., 1, 1]
    )


def fidelity_full(rho, sigma, strict: bool = True) -> np.ndarray:
    """Uhlmann fidelity via the qubit identity ``Tr(rho sigma) + 2 sqrt(det rho det sigma)``.

    Determinants down to ``-1e-12`` are clamped to zero. With ``strict`` a more
    negative determinant raises :class:`DomainError`; otherwise it is clamped
    too, which is how unconstrained predictions get scored. Determinants with
    magnitude below ``DET_ZERO`` are treated as exactly zero so that pure
    states reproduce the product-trace value.
    """
    a, b = _mat(rho), _mat(sigma)
    da = det(a).real
    db = det(b).real
    if strict and (np.any(da < -DET_CLAMP) or np.any(db < -DET_CLAMP)):
        raise DomainError("negative determinant: argument is not positive semi-definite")
    da = np.where(da < DET_ZERO, 0.0, da)
    db = np.where(db < DET_ZERO, 0.0, db)
    return fidelity_proxy(a, b) + 2.0 * np.sqrt(da * db)


def fidelity(rho, sigma, form: str = "proxy", strict: bool = True) -> np.ndarray:
    if form == "proxy":
        return fidelity_proxy(rho, sigma)
    if form == "full":
        return fidelity_full(rho, sigma, strict=strict)
    raise ValueError(f"unknown fidelity form {form!r}")


def bures_from_fidelity(f) -> np.ndarray:
    f = np.clip(np.asarray(f, dtype=float), 0.0, 1.0)
    return np.sqrt(np.maximum(2.0 * (1.0 - np.sqrt(f)), 0.0))


def bures_distance(rho, sigma, form: str = "proxy", strict: bool = True) -> np.ndarray:
    """``sqrt(2 (1 - sqrt F))``; fidelity is clipped into ``[0, 1]`` first."""
    return bures_from_fidelity(fidelity(rho, sigma, form=form, strict=strict))


def physicality_metrics(p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(V_tr, V_psd, V_herm)`` for a raw prediction (or a stack of them)."""
    m = _mat(p)
    v_tr = np.abs(trace(m) - 1.0)
    v_psd = np.maximum(0.0, -eigvals_hermitian_2x2(m)[0])
    v_herm = frob(m - dagger(m))
    return v_tr, v_psd, v_herm


def kraus_completeness_error(k1, k2=None) -> np.ndarray:
    """``|K1^+ K1 + K2^+ K2 - I|_F``. Accepts a pair or a sequence of two operators."""
    if k2 is None:
        k1, k2 = k1
    k1, k2 = _mat(k1), _mat(k2)
    s = mul(dagger(k1), k1) + mul(dagger(k2), k2)
    return frob(s - I2)
