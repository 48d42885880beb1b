"""Fast invariant checks behind ``qtw check``.

Each check returns a dict ``{name, passed, detail, value}``. They are small
versions of the acceptance properties, meant to run in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import heads, qcore
from .ad import grad_check
from .backbones import KINDS, ModelConfig
from .model import Model
from .rng import SplitMix64, mix64
from .sim import SimParams, lindblad_rk4, simulate_trajectory
from .train import frobenius_loss_pairs


def random_states(rng, n: int) -> np.ndarray:
    """Valid density matrices with Bloch vectors uniform in direction and radius in [0, 1]."""
    r = rng.normal(size=(n, 3))
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    r *= rng.uniform(0, 1, size=(n, 1))
    return qcore.bloch_to_rho(r)


def check_stiefel(n: int = 2000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    H = 16
    h = np.tanh(rng.normal(size=(n, H)))
    w = rng.uniform(-1, 1, (H, heads.N_KRAUS_OUT)) / np.sqrt(H)
    b = rng.uniform(-1, 1, heads.N_KRAUS_OUT) / np.sqrt(H)
    vr, vi = heads.build_V(h, w, b)
    Q = heads.thin_qr(vr + 1j * vi)
    orth = qcore.frob(qcore.dagger(Q) @ Q - qcore.I2).max()
    k = heads.kraus_from_q(Q)
    comp = qcore.kraus_completeness_error(k).max()
    out = heads.kraus_update(random_states(rng, n), k)
    v_tr, v_psd, v_herm = qcore.physicality_metrics(out)
    worst = max(orth, comp, v_tr.max(), v_psd.max())
    passed = worst <= 1e-12 and v_herm.max() <= 1e-13
    return {"name": "stiefel_cptp", "passed": bool(passed), "value": float(worst),
            "detail": f"orth {orth:.2e} comp {comp:.2e} trace {v_tr.max():.2e} "
                      f"psd {v_psd.max():.2e} herm {v_herm.max():.2e}"}


def model_loss(model: Model, records, target):
    def f(F, flat):
        p = model.register(F, flat)
        pr, pi, _ = model.forward(records, F, p)
        return frobenius_loss_pairs(F, pr, pi, target.real, target.imag)

    return f


def check_gradients(hidden: int = 4, T: int = 6, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    rec = rng.normal(size=(2, T))
    target = random_states(rng, 2 * T).reshape(2, T, 2, 2)
    worst, details = 0.0, []
    passed = True
    for kind in KINDS:
        for head in ("kraus", "direct"):
            m = Model(ModelConfig(kind=kind, hidden_dim=hidden, seed=seed), head)
            g = grad_check(model_loss(m, rec, target), m.params)
            passed &= g.ok(1e-5, 1e-8)
            worst = max(worst, g.max_rel)
            details.append(f"{kind}/{head} {g.max_rel:.1e}")
    return {"name": "gradients", "passed": bool(passed), "value": worst, "detail": ", ".join(details)}


def check_simulator(seed: int = 0) -> dict:
    p = SimParams(gamma=0.5, omega1=2.0, omega2=1.0, tau=100, T=200, seed=mix64(seed, 7))
    a, b = simulate_trajectory(p), simulate_trajectory(p)
    same = np.array_equal(a.record, b.record) and np.array_equal(a.bloch, b.bloch)
    phys = bool(np.all(qcore.is_density(a.states, psd_tol=1e-12)))
    return {"name": "simulator", "passed": bool(same and phys), "value": float(same),
            "detail": f"reproducible {same}, states valid {phys}"}


def check_unitary_limit(dt: float = 0.002, T: int = 500) -> dict:
    """gamma = 0 Lindblad RK4 against the closed-form Rabi solution ``<z> = cos(2 omega t)``."""
    w = 1.3
    H = w * qcore.SX
    states = lindblad_rk4(lambda t: H, 0.0, dt, T, substeps=1)
    t = dt * np.arange(1, T + 1)
    err = float(np.abs(qcore.rho_to_bloch(states)[:, 2] - np.cos(2 * w * t)).max())
    return {"name": "rabi_limit", "passed": err < 1e-8, "value": err, "detail": f"max |dz| {err:.2e}"}


def check_rng(seed: int = 0) -> dict:
    a = SplitMix64(mix64(seed, 3)).normal(10000)
    b = SplitMix64(mix64(seed, 3)).normal(10000)
    m, s = float(a.mean()), float(a.std())
    ok = np.array_equal(a, b) and abs(m) < 0.05 and abs(s - 1) < 0.05
    return {"name": "rng", "passed": bool(ok), "value": m, "detail": f"mean {m:.3f} std {s:.3f}"}


def run_all(seed: int | None = 0) -> list[dict]:
    seed = 0 if seed is None else seed
    return [check_rng(seed), check_stiefel(seed=seed), check_gradients(seed=seed), check_simulator(seed),
            check_unitary_limit()]
