"""Physics-based SME filters.

``exact_filter`` re-integrates the SME with the true parameters, recovering
each Wiener increment from the record as
``dW = dy - sqrt(gamma eta) Tr[(L + L^+) rho_hat] dt``.

``adaptive_filter`` runs the same update with online estimates instead:

* omega from the peak of a zero-padded FFT over the last ``window`` record
  samples (``<sigma_z>`` oscillates at angular frequency ``2 omega``, so a
  spectral peak at ``f`` Hz maps to ``omega = pi f``);
* gamma from the excess variance of block sums of the record;
* a switch detector on the squared innovation that, when it fires, resets
  the estimation window and rotates the Hamiltonian axis from x to y.

The filter knows the protocol family (x then y axis, constant gamma,
``rho_0 = |0><0|``) but no parameter values and not the switch time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import qcore
from .sim import SimParams, em_step, expect_LpLd, hamiltonians, lindblad_rk4, psd_guard


@dataclass(frozen=True)
class FilterConfig:
    window: int = 100
    zero_pad: int = 8
    f_cut: float = 4.0  # Hz; spectrum above this is discarded before the peak search
    peak_ratio: float = 2.0
    gamma_block: int = 20
    gamma_clip: tuple[float, float] = (0.1, 2.0)
    ema_decay: float = 0.98
    level: float = 2.5
    dwell: int = 25
    refractory: int = 50
    omega_prior: float = 2.25
    gamma_prior: float = 0.55
    axis_policy: str = "protocol-toggle-x-to-y"


@dataclass
class FilterState:
    rho: np.ndarray
    omega: float
    gamma: float
    axis: str = "x"
    window: list = field(default_factory=list)
    ema: float = 1.0
    above: int = 0
    steps_since_reset: int = 0


# ------------------------------------------------------------------ exact


def exact_filter(record: np.ndarray, params: SimParams, rho0=qcore.KET0, guard: bool = True) -> np.ndarray:
    """Known-parameter SME filter driven by the recorded ``dy``; returns ``(T, 2, 2)``."""
    record = np.asarray(record, dtype=float)
    dt, eta = params.dt, params.eta
    rho = np.array(rho0, dtype=complex)[None]
    out = np.empty((record.size, 2, 2), dtype=complex)
    w1, w2, tau = np.array([params.omega1]), np.array([params.omega2]), np.array([params.tau])
    g2 = params.gamma if params.gamma2 is None else params.gamma2
    for t, dy in enumerate(record):
        gamma = np.array([params.gamma if t < params.tau else g2])
        dW = dy - np.sqrt(gamma * eta) * expect_LpLd(rho) * dt
        rho, _ = em_step(rho, hamiltonians(w1, w2, tau, t), gamma, np.array([eta]), dt, dW)
        if guard:
            rho, _, _ = psd_guard(rho)
        out[t] = rho[0]
    return out


def lindblad_only_filter(params: SimParams, T: int) -> np.ndarray:
    """No-measurement reference: averaged dynamics with the true parameters."""
    w1, w2, tau = np.array([params.omega1]), np.array([params.omega2]), np.array([params.tau])
    return lindblad_rk4(lambda t: hamiltonians(w1, w2, tau, t)[0], params.gamma, params.dt, T, substeps=2)


def lindblad_prior_filter(T: int, dt: float, cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """No-measurement reference with the adaptive filter's knowledge: priors, x axis, no switch."""
    H = cfg.omega_prior * qcore.SX
    return lindblad_rk4(lambda t: H, cfg.gamma_prior, dt, T, substeps=2)


# -------------------------------------------------------------- estimators


def estimate_omega(window, dt: float, previous: float, cfg: FilterConfig = FilterConfig()) -> float:
    """Rabi frequency from the dominant low-frequency line of the record window.

    Returns ``previous`` when the window is constant or the spectrum has no
    peak above ``peak_ratio`` times its median.
    """
    x = np.asarray(window, dtype=float)
    x = x - x.mean()
    if not np.any(np.abs(x) > 0):
        return previous
    n = cfg.zero_pad * x.size
    spec = np.abs(np.fft.rfft(x, n))
    freqs = np.fft.rfftfreq(n, dt)
    band = (freqs > 0) & (freqs <= cfg.f_cut)
    idx = np.flatnonzero(band)
    if idx.size < 3:
        return previous
    mags = spec[idx]
    k = int(np.argmax(mags))
    if mags[k] <= cfg.peak_ratio * np.median(mags):
        return previous
    j = idx[k]
    f = freqs[j]
    if 0 < j < spec.size - 1:
        a, b, c = spec[j - 1], spec[j], spec[j + 1]
        denom = a - 2 * b + c
        if denom < 0:
            f = f + 0.5 * (a - c) / denom * (freqs[1] - freqs[0])
    return float(np.pi * max(f, freqs[1]))


def gamma_excess(samples, dt: float, block: int = 20) -> tuple[float, int]:
    """Unclipped excess-variance statistic of block sums and the number of blocks used."""
    x = np.asarray(samples, dtype=float)
    nb = x.size // block
    if nb < 2:
        return 0.0, nb
    sums = x[: nb * block].reshape(nb, block).sum(axis=1)
    return float(np.var(sums) - block * dt), nb


def estimate_gamma(samples, dt: float, cfg: FilterConfig = FilterConfig()) -> float:
    """Measurement strength from block-sum excess variance, clipped to ``gamma_clip``.

    A block of ``W`` increments sums to ``2 sqrt(gamma) W dt <z> + N(0, W dt)``;
    with a mean-square signal of ``1/2`` for Rabi oscillation,
    ``Var(S) - W dt ~= 4 gamma W^2 dt^2 / 2``.
    """
    W = cfg.gamma_block
    excess, _ = gamma_excess(samples, dt, W)
    lo, hi = cfg.gamma_clip
    g = max(0.0, excess) / (4.0 * W * W * dt * dt * 0.5)
    return float(min(max(g, lo), hi))


def innovation(dy: float, rho: np.ndarray, gamma: float, eta: float, dt: float) -> float:
    """Normalised innovation; unit normal when the filter's model is right."""
    e = float(np.ravel(expect_LpLd(rho))[0])
    return float((dy - np.sqrt(gamma * eta) * e * dt) / np.sqrt(dt))


def detect_switch(state: FilterState, nu: float, cfg: FilterConfig = FilterConfig()) -> bool:
    """Update the innovation EMA and report whether a regime switch is declared.

    The caller resets the window and toggles the axis on detection.
    """
    state.ema = cfg.ema_decay * state.ema + (1.0 - cfg.ema_decay) * nu * nu
    state.above = state.above + 1 if state.ema > cfg.level else 0
    return state.above >= cfg.dwell and state.steps_since_reset > cfg.refractory


# --------------------------------------------------------------- adaptive


def adaptive_filter(record: np.ndarray, dt: float, eta: float = 1.0, cfg: FilterConfig = FilterConfig(),
                    rho0=qcore.KET0, oracle: SimParams | None = None):
    """Run the adaptive SME filter over a raw record.

    Returns ``(states (T, 2, 2), events)`` where ``events`` holds per-step
    estimates and detections. ``oracle`` bypasses every estimator with the
    true parameters and switch time.
    """
    record = np.asarray(record, dtype=float)
    T = record.size
    st = FilterState(np.array(rho0, dtype=complex)[None], cfg.omega_prior, cfg.gamma_prior)
    out = np.empty((T, 2, 2), dtype=complex)
    events = {"step": [], "omega": [], "gamma": [], "ema": [], "detected": []}
    # gamma is constant across the switch, so its statistic accumulates over the whole record
    blocks: list[float] = []
    acc: list[float] = []
    eta_arr = np.array([eta])
    for t, dy in enumerate(record):
        if oracle is not None:
            st.axis = "x" if t < oracle.tau else "y"
            st.omega = oracle.omega1 if st.axis == "x" else oracle.omega2
            st.gamma = oracle.gamma if (st.axis == "x" or oracle.gamma2 is None) else oracle.gamma2
        detected = False
        if oracle is None:
            nu = innovation(dy, st.rho, st.gamma, eta, dt)
            detected = detect_switch(st, nu, cfg)
            if detected:
                st.window.clear()
                st.ema = 1.0
                st.above = 0
                st.steps_since_reset = 0
                if st.axis == "x":
                    st.axis = "y"
        gamma = np.array([st.gamma])
        dW = dy - np.sqrt(gamma * eta) * expect_LpLd(st.rho) * dt
        H = (st.omega * (qcore.SX if st.axis == "x" else qcore.SY))[None]
        st.rho, _ = em_step(st.rho, H, gamma, eta_arr, dt, dW)
        st.rho, _, _ = psd_guard(st.rho)
        out[t] = st.rho[0]
        st.steps_since_reset += 1
        if oracle is None:
            st.window.append(dy)
            if len(st.window) > cfg.window:
                st.window.pop(0)
            if len(st.window) == cfg.window:
                st.omega = estimate_omega(st.window, dt, st.omega, cfg)
            acc.append(dy)
            if len(acc) == cfg.gamma_block:
                blocks.append(sum(acc))
                acc.clear()
                if len(blocks) >= 2:
                    W = cfg.gamma_block
                    excess = float(np.var(blocks) - W * dt)
                    lo, hi = cfg.gamma_clip
                    st.gamma = float(min(max(max(excess, 0.0) / (2.0 * W * W * dt * dt), lo), hi))
        events["step"].append(t)
        events["omega"].append(st.omega)
        events["gamma"].append(st.gamma)
        events["ema"].append(st.ema)
        events["detected"].append(detected)
    return out, events


def write_event_log(path, per_traj_events: list[dict], cfg: FilterConfig) -> None:
    """One JSON line per step: trajectory, step, omega, gamma, EMA, detected flag."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"filter_config": asdict(cfg)}, sort_keys=True) + "\n")
        for i, ev in enumerate(per_traj_events):
            for k in range(len(ev["step"])):
                fh.write(json.dumps({
                    "traj": i,
                    "step": ev["step"][k],
                    "omega": ev["omega"][k],
                    "gamma": ev["gamma"][k],
                    "ema": ev["ema"][k],
                    "detected": bool(ev["detected"][k]),
                }, sort_keys=True) + "\n")


def read_event_log(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    rows = [json.loads(l) for l in lines[1:]]
    return header, rows
