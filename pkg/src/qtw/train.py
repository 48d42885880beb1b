"""Training: Frobenius loss, AdamW, plateau scheduling, model selection, checkpoints.

Checkpoint file (little-endian)::

    magic  b"QCKP"
    u32    version = 1
    u64    header length n
    n      UTF-8 JSON header (config, head, seed, metric, epoch, counts, ...)
    f64    params[n_params]
    f64    optimizer blob [2 * n_params] (first then second moments), if present
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import qcore
from .ad import TapeOps
from .backbones import ModelConfig
from .model import Model
from .rng import SplitMix64, mix64

log = logging.getLogger(__name__)

CKPT_MAGIC = b"QCKP"
CKPT_VERSION = 1
SHUFFLE_STREAM = 21
JITTER_STREAM = 22
SELECT_STREAM = 23
PHYS_STREAM = 24


class TrainingDivergence(FloatingPointError):
    """Loss or gradients became non-finite; ``last_good`` holds the last finite checkpoint."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


# --------------------------------------------------------------------- loss


def frobenius_loss(pred, true) -> float:
    """Mean over batch and time of ``|pred - true|_F^2`` for complex ``(..., 2, 2)`` stacks."""
    d = np.asarray(pred) - np.asarray(true)
    per = np.sum(d.real**2 + d.imag**2, axis=(-2, -1))
    return float(np.mean(per))


def frobenius_loss_pairs(F, pr, pi, tr, ti):
    """Tape version of :func:`frobenius_loss` on ``(re, im)`` pairs of shape ``(B, T, 2, 2)``."""
    n = int(np.prod(F.value(pr).shape[:-2]))
    sq = F.add(F.square(F.sub(pr, tr)), F.square(F.sub(pi, ti)))
    return F.scale(F.sum(sq), 1.0 / n)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: OptimState) -> np.ndarray:
    """Decoupled-weight-decay Adam; updates ``state`` in place, returns new params.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise TrainingDivergence(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    b1, b2 = state.betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return params - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)) - state.lr * state.weight_decay * params


@dataclass
class SchedulerState:
    """Reduce-on-plateau on the training loss."""

    factor: float = 0.5
    patience: int = 3
    min_improve_rel: float = 1e-4
    best_loss: float = math.inf
    epochs_since_improve: int = 0
    reductions: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")


def plateau_step(state: SchedulerState, epoch_loss: float, lr: float) -> float:
    """Return the learning rate to use after an epoch with ``epoch_loss``."""
    if epoch_loss < state.best_loss * (1.0 - state.min_improve_rel):
        state.best_loss = epoch_loss
        state.epochs_since_improve = 0
        return lr
    state.epochs_since_improve += 1
    if state.epochs_since_improve >= state.patience:
        state.epochs_since_improve = 0
        state.reductions += 1
        return lr * state.factor
    return lr


# -------------------------------------------------------------- checkpoint


@dataclass
class ModelCheckpoint:
    config: dict
    head: str
    params: np.ndarray
    seed: int
    epoch: int
    metric: float
    optim: Optional[OptimState] = None
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def model(self) -> Model:
        return Model(ModelConfig(**self.config), self.head, self.params.copy())

    def header(self) -> dict:
        h = {
            "format_version": self.version,
            "config": self.config,
            "head": self.head,
            "seed": self.seed,
            "epoch": self.epoch,
            "metric": self.metric,
            "metric_name": "selection_bures",
            "n_params": int(self.params.size),
            "has_optimizer": self.optim is not None,
            "meta": self.meta,
        }
        if self.optim is not None:
            h["optimizer"] = {
                "step": self.optim.step,
                "lr": self.optim.lr,
                "betas": list(self.optim.betas),
                "eps": self.optim.eps,
                "weight_decay": self.optim.weight_decay,
            }
        return h


def encode_checkpoint(ck: ModelCheckpoint) -> bytes:
    cfg = ModelConfig(**ck.config)
    expected = Model(cfg, ck.head, ck.params).n_params
    if ck.params.size != expected:
        raise ValueError(f"parameter count {ck.params.size} does not match config ({expected})")
    header = json.dumps(ck.header(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", ck.version, len(header)), header, ck.params.astype("<f8").tobytes()]
    if ck.optim is not None:
        parts.append(ck.optim.m.astype("<f8").tobytes())
        parts.append(ck.optim.v.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ck: ModelCheckpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 12
    h = json.loads(data[off : off + hlen].decode())
    off += hlen
    n = h["n_params"]
    params = np.frombuffer(data, "<f8", n, off).copy()
    off += 8 * n
    optim = None
    if h["has_optimizer"]:
        m = np.frombuffer(data, "<f8", n, off).copy()
        v = np.frombuffer(data, "<f8", n, off + 8 * n).copy()
        o = h["optimizer"]
        optim = OptimState(m, v, o["step"], o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"])
    return ModelCheckpoint(h["config"], h["head"], params, h["seed"], h["epoch"], h["metric"], optim, h["meta"], version)


# -------------------------------------------------------------------- fit


@dataclass
class TrainRunConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    tbptt_window: int = 0
    weight_decay: float = 0.01
    patience: int = 3
    plateau: bool = True  # False holds lr constant
    select_frac: float = 0.1
    clip_norm: Optional[float] = None
    jitter: bool = True
    loss: str = "frobenius"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.loss != "frobenius":
            raise ValueError("only the Frobenius loss is supported")
        if not 0 <= self.select_frac < 1:
            raise ValueError("select_frac must lie in [0, 1)")


def split_selection(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (train, selection) index split; ``frac = 0`` selects on the training set."""
    if frac <= 0 or n < 2:
        idx = np.arange(n)
        return idx, idx
    k = max(1, int(round(frac * n)))
    order = np.argsort(SplitMix64(mix64(seed, SELECT_STREAM)).uniform(n), kind="stable")
    return np.sort(order[k:]), np.sort(order[:k])


def mean_bures(model: Model, records: np.ndarray, states: np.ndarray) -> float:
    pred, _ = model.predict(records)
    f = qcore.fidelity_full(pred, states, strict=False)
    return float(np.mean(qcore.bures_from_fidelity(f)))


def _batch_loss_and_grad(model: Model, flat, rec, tr, ti, jitter_rng, tbptt):
    F = TapeOps()
    p = model.register(F, flat)
    pr, pi, _ = model.forward(rec, F, p, jitter_rng=jitter_rng, tbptt=tbptt)
    loss = frobenius_loss_pairs(F, pr, pi, tr, ti)
    return float(loss.value), F.tape.backward(loss), (pr.value, pi.value)


def fit(run: TrainRunConfig, model: Model, records: np.ndarray, states: np.ndarray,
        log_path=None, meta: Optional[dict] = None) -> tuple[ModelCheckpoint, list[dict]]:
    """Train ``model`` in place and return the minimum-selection-Bures checkpoint.

    ``records`` are standardised ``(N, T)``; ``states`` complex ``(N, T, 2, 2)``
    targets. Each epoch logs the mean training loss, the selection-slice mean
    Bures distance, the learning rate and a physicality spot check on 1% of
    the rollout steps seen in training.
    """
    records = np.asarray(records, dtype=float)
    states = np.asarray(states, dtype=complex)
    train_idx, sel_idx = split_selection(len(records), run.select_frac, run.seed)
    opt = OptimState.zeros(model.n_params, lr=run.lr, weight_decay=run.weight_decay)
    sched = SchedulerState(patience=run.patience)
    jitter_rng = np.random.default_rng(mix64(run.seed, JITTER_STREAM)) if run.jitter else None
    phys_rng = np.random.default_rng(mix64(run.seed, PHYS_STREAM))
    meta = dict(meta or {})
    meta.update(train_run=asdict(run), n_train=int(train_idx.size), n_select=int(sel_idx.size),
                init_seed_shared=True)

    init_pred, _ = model.predict(records[train_idx])
    history = [{"epoch": 0, "loss": frobenius_loss(init_pred, states[train_idx]),
                "select_bures": mean_bures(model, records[sel_idx], states[sel_idx]), "lr": run.lr}]
    log.info("epoch 0 loss %.6f select_bures %.6f", history[0]["loss"], history[0]["select_bures"])
    best: Optional[ModelCheckpoint] = None
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write(json.dumps(history[0], sort_keys=True) + "\n")
        for epoch in range(1, run.epochs + 1):
            shuffle = SplitMix64(mix64(mix64(run.seed, SHUFFLE_STREAM), epoch)).uniform(train_idx.size)
            order = train_idx[np.argsort(shuffle, kind="stable")]
            total, count, checked, violations = 0.0, 0, 0, 0
            for s in range(0, order.size, run.batch_size):
                idx = order[s : s + run.batch_size]
                tgt = states[idx]
                loss, grad, (pr, pi) = _batch_loss_and_grad(
                    model, model.params, records[idx], tgt.real, tgt.imag, jitter_rng, run.tbptt_window)
                if not math.isfinite(loss):
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch}", best)
                if run.clip_norm is not None:
                    gn = float(np.linalg.norm(grad))
                    if gn > run.clip_norm:
                        grad = grad * (run.clip_norm / gn)
                try:
                    model.params = adamw_step(model.params, grad, opt)
                except TrainingDivergence as exc:
                    raise TrainingDivergence(f"epoch {epoch}: {exc}", best) from exc
                total += loss * idx.size
                count += idx.size
                if model.head == "kraus":
                    mask = phys_rng.random(pr.shape[:2]) < 0.01
                    sample = (pr + 1j * pi)[mask]
                    checked += sample.shape[0]
                    violations += int(np.sum(~qcore.is_density(sample)))
            epoch_loss = total / count
            sel = mean_bures(model, records[sel_idx], states[sel_idx])
            entry = {"epoch": epoch, "loss": epoch_loss, "select_bures": sel, "lr": opt.lr,
                     "phys_checked": checked, "phys_violations": violations}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.6f select_bures %.6f lr %.2e", epoch, epoch_loss, sel, opt.lr)
            if best is None or sel < best.metric:
                best = ModelCheckpoint(model.config.to_dict(), model.head, model.params.copy(), run.seed,
                                       epoch, sel, _copy_optim(opt), meta)
            if run.plateau:
                opt.lr = plateau_step(sched, epoch_loss, opt.lr)
    finally:
        if log_fh:
            log_fh.close()
    return best, history


def _copy_optim(o: OptimState) -> OptimState:
    return OptimState(o.m.copy(), o.v.copy(), o.step, o.lr, o.betas, o.eps, o.weight_decay)


# ---------------------------------------------------------------- diagnostics


def layerwise_grad_norms(model: Model, records, states) -> dict[str, float]:
    """L2 norm of the loss gradient per named parameter block (jitter off).

    The ESN reservoir is frozen, so its blocks are reported as exact zeros.
    """
    states = np.asarray(states, dtype=complex)
    F = TapeOps()
    p = model.register(F)
    pr, pi, _ = model.forward(np.atleast_2d(records), F, p)
    loss = frobenius_loss_pairs(F, pr, pi, states.real, states.imag)
    named = F.tape.named_grads(F.tape.backward(loss))
    out = {name: float(np.linalg.norm(g)) for name, g in named.items()}
    if model.config.kind == "esn":
        out = {"reservoir.w_res": 0.0, "reservoir.w_in": 0.0, **out}
    return out
