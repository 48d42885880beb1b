"""Diffusive SME simulation of a continuously monitored qubit with a Hamiltonian switch.

The monitored observable is ``L = sigma_z``. Before the switch step ``tau``
the qubit precesses under ``omega1 * sigma_x``; from ``tau`` on under
``omega2 * sigma_y``. Each step draws ``dW ~ N(0, dt)``, emits the record
increment

    dy_t = sqrt(gamma * eta) * Tr[(L + L^+) rho_t] dt + dW_t

and advances ``rho_t -> rho_{t+1}`` with one Euler-Maruyama step. ``states[t]``
is the state *after* consuming ``dy_t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import qcore
from .qcore import SX, SY, SZ, dagger, mul, trace
from .rng import SplitMix64, mix64

log = logging.getLogger(__name__)

# Sub-stream indices below a trajectory seed.
NOISE_STREAM = 0
PARAM_STREAM = 1

PSD_REPORT_THRESHOLD = -1e-8


class IntegrationError(RuntimeError):
    """The Euler update produced a state with (near-)zero trace."""


def dissipator(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator ``L rho L^+ - {L^+ L, rho}/2``."""
    Ld = dagger(L)
    LdL = mul(Ld, L)
    return mul(mul(L, rho), Ld) - 0.5 * (mul(LdL, rho) + mul(rho, LdL))


def backaction(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Measurement back-action ``L rho + rho L^+ - Tr(L rho + rho L^+) rho``."""
    m = mul(L, rho) + mul(rho, dagger(L))
    return m - trace(m)[..., None, None] * rho


def _commutator(h, rho):
    return mul(h, rho) - mul(rho, h)


def expect_LpLd(rho: np.ndarray, L: np.ndarray = SZ) -> np.ndarray:
    """``Tr[(L + L^+) rho]`` (real part)."""
    return trace(mul(L + dagger(L), rho)).real


def em_step(rho, H, gamma, eta, dt, dW, L=SZ):
    """One Euler-Maruyama step of the diffusive SME.

    All arguments broadcast: ``rho`` and ``H`` are ``(..., 2, 2)``, the scalars
    may be arrays matching the leading shape. Returns ``(rho_next, dy)``. The
    updated state is Hermitised and divided by its trace; no positivity
    projection happens here (see :func:`psd_guard`).
    """
    rho = np.asarray(rho, dtype=complex)
    gamma = np.asarray(gamma, dtype=float)
    eta = np.asarray(eta, dtype=float)
    dW = np.asarray(dW, dtype=float)
    amp = np.sqrt(gamma * eta)
    dy = amp * expect_LpLd(rho, L) * dt + dW
    drift = -1j * _commutator(H, rho) + gamma[..., None, None] * dissipator(L, rho)
    new = rho + drift * dt + (amp * dW)[..., None, None] * backaction(L, rho)
    new = qcore.hermitize(new)
    tr = trace(new).real
    if np.any(tr <= 1e-12):
        raise IntegrationError(f"post-step trace collapsed to {tr.min():.3e}")
    new = new / tr[..., None, None]
    return new, dy


def psd_guard(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip a negative eigenvalue to zero and renormalise.

    For a unit-trace qubit state a negative eigenvalue means the Bloch vector
    left the unit ball; clipping and renormalising maps it to the pure state
    along the same direction. Returns ``(rho, lam_min_before, projected_mask)``.
    """
    lam_min, _ = qcore.eigvals_hermitian_2x2(rho)
    bad = lam_min < 0.0
    if not np.any(bad):
        return rho, lam_min, bad
    r = qcore.rho_to_bloch(rho[bad])
    r = r / np.linalg.norm(r, axis=-1, keepdims=True)
    out = rho.copy()
    out[bad] = qcore.bloch_to_rho(r)
    return out, lam_min, bad


@dataclass(frozen=True)
class SimParams:
    gamma: float
    omega1: float
    omega2: float
    tau: int
    eta: float = 1.0
    dt: float = 0.005
    T: int = 2000
    seed: int = 0
    # Phase-2 measurement strength; None keeps gamma constant across the switch.
    gamma2: Optional[float] = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.gamma2 is not None and not self.gamma2 > 0:
            raise ValueError("gamma2 must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not 0 < self.tau <= self.T:
            raise ValueError("tau must satisfy 0 < tau <= T")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class Trajectory:
    params: SimParams
    record: np.ndarray  # (T,) raw dy
    bloch: np.ndarray  # (T, 3) state after each step
    psd_projections: int = 0
    psd_significant: int = 0

    @property
    def states(self) -> np.ndarray:
        return qcore.bloch_to_rho(self.bloch)


def hamiltonians(omega1, omega2, tau, t: int) -> np.ndarray:
    """Per-trajectory Hamiltonian at step ``t`` (batched over the parameter arrays)."""
    omega1 = np.atleast_1d(np.asarray(omega1, dtype=float))
    omega2 = np.atleast_1d(np.asarray(omega2, dtype=float))
    phase2 = (t >= np.atleast_1d(tau))[:, None, None]
    return np.where(phase2, omega2[:, None, None] * SY, omega1[:, None, None] * SX)


def noise_for(p: SimParams) -> np.ndarray:
    """The Wiener increments of trajectory ``p``: ``sqrt(dt) * N(0, 1)`` of length ``T``."""
    return np.sqrt(p.dt) * SplitMix64(mix64(p.seed, NOISE_STREAM)).normal(p.T)


def simulate_batch(params: list[SimParams], guard: bool = True) -> list[Trajectory]:
    """Simulate several trajectories in lockstep.

    All members must share ``T``, ``dt`` and ``eta``. Only elementwise
    arithmetic couples the batch, so each result is bit-identical to
    simulating that trajectory alone.
    """
    if not params:
        return []
    T, dt, eta = params[0].T, params[0].dt, params[0].eta
    if any(p.T != T or p.dt != dt or p.eta != eta for p in params):
        raise ValueError("batched trajectories must share T, dt and eta")
    n = len(params)
    g1 = np.array([p.gamma for p in params])
    g2 = np.array([p.gamma if p.gamma2 is None else p.gamma2 for p in params])
    w1 = np.array([p.omega1 for p in params])
    w2 = np.array([p.omega2 for p in params])
    tau = np.array([p.tau for p in params])
    dW = np.stack([noise_for(p) for p in params])
    etas = np.full(n, eta)

    rho = np.broadcast_to(qcore.KET0, (n, 2, 2)).copy()
    record = np.empty((n, T))
    bloch = np.empty((n, T, 3))
    n_proj = np.zeros(n, dtype=np.int64)
    n_sig = np.zeros(n, dtype=np.int64)
    for t in range(T):
        H = hamiltonians(w1, w2, tau, t)
        gamma = np.where(t >= tau, g2, g1)
        try:
            rho, record[:, t] = em_step(rho, H, gamma, etas, dt, dW[:, t])
        except IntegrationError as exc:
            raise IntegrationError(f"step {t}: {exc}") from exc
        if guard:
            rho, lam, bad = psd_guard(rho)
            n_proj += bad
            n_sig += lam < PSD_REPORT_THRESHOLD
        bloch[:, t] = qcore.rho_to_bloch(rho)
    return [
        Trajectory(p, record[i], bloch[i], int(n_proj[i]), int(n_sig[i]))
        for i, p in enumerate(params)
    ]


def simulate_trajectory(p: SimParams, guard: bool = True) -> Trajectory:
    return simulate_batch([p], guard=guard)[0]


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2000
    n_test: int = 300
    gamma_range: tuple[float, float] = (0.3, 0.8)
    omega_range: tuple[float, float] = (0.5, 4.0)
    # None scales the default [400, 1600] window of a 2000-step run to T.
    tau_range: Optional[tuple[int, int]] = None
    dt: float = 0.005
    T: int = 2000
    eta: float = 1.0
    base_seed_train: int = 45
    base_seed_test: int = 9999
    resample_gamma: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need at least one training trajectory")
        if self.base_seed_train == self.base_seed_test:
            raise ValueError("train and test base seeds must differ")
        lo, hi = self.resolved_tau_range()
        if not 0 < lo <= hi < self.T:
            raise ValueError(f"tau range {lo}..{hi} incompatible with T={self.T}")
        for name in ("gamma_range", "omega_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValueError(f"bad {name}: {a}..{b}")

    def resolved_tau_range(self) -> tuple[int, int]:
        if self.tau_range is not None:
            return int(self.tau_range[0]), int(self.tau_range[1])
        return self.T // 5, (4 * self.T) // 5

    def base_seed(self, split: str) -> int:
        return {"train": self.base_seed_train, "test": self.base_seed_test}[split]

    def count(self, split: str) -> int:
        return {"train": self.n_train, "test": self.n_test}[split]


def draw_params(spec: DatasetSpec, split: str, index: int) -> SimParams:
    """Parameters of trajectory ``index`` of ``split``; depends on nothing else."""
    seed = mix64(spec.base_seed(split), index)
    rng = SplitMix64(mix64(seed, PARAM_STREAM))
    gamma, w1, w2 = rng.uniform(3)
    g_lo, g_hi = spec.gamma_range
    w_lo, w_hi = spec.omega_range
    tau_lo, tau_hi = spec.resolved_tau_range()
    tau = int(rng.integers(tau_lo, tau_hi, 1)[0])
    gamma2 = None
    if spec.resample_gamma:
        gamma2 = float(g_lo + (g_hi - g_lo) * rng.uniform(1)[0])
    return SimParams(
        gamma=float(g_lo + (g_hi - g_lo) * gamma),
        omega1=float(w_lo + (w_hi - w_lo) * w1),
        omega2=float(w_lo + (w_hi - w_lo) * w2),
        tau=tau,
        eta=spec.eta,
        dt=spec.dt,
        T=spec.T,
        seed=seed,
        gamma2=gamma2,
    )


@dataclass(frozen=True)
class StandardizationStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def from_records(cls, records: np.ndarray) -> "StandardizationStats":
        records = np.asarray(records, dtype=float)
        return cls(float(records.mean()), float(records.std()))


def standardize(record, stats: StandardizationStats) -> np.ndarray:
    return (np.asarray(record, dtype=float) - stats.mu) / (stats.sigma + 1e-8)


def lindblad_rk4(H_of_t, gamma: float, dt: float, T: int, substeps: int = 10, rho0=None, L=SZ):
    """Deterministic Lindblad evolution (no back-action) with classical RK4.

    ``H_of_t(step)`` returns the Hamiltonian for a step. Returns ``(T, 2, 2)``
    states sampled after each step. Used as an averaging oracle and as the
    no-measurement reference filter.
    """
    rho = qcore.KET0.copy() if rho0 is None else np.array(rho0, dtype=complex)
    h = dt / substeps
    out = np.empty((T, 2, 2), dtype=complex)
    for t in range(T):
        H = H_of_t(t)

        def f(r):
            return -1j * _commutator(H, r) + gamma * dissipator(L, r)

        for _ in range(substeps):
            k1 = f(rho)
            k2 = f(rho + 0.5 * h * k1)
            k3 = f(rho + 0.5 * h * k2)
            k4 = f(rho + h * k3)
            rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[t] = rho
    return out


def with_seed(p: SimParams, seed: int) -> SimParams:
    return replace(p, seed=seed)
