"""Recurrent encoders: vanilla RNN, GRU, LSTM and a fixed-reservoir ESN.

Step functions use row vectors (``h`` is ``(batch, hidden)``) and take an
ops namespace ``F`` (:class:`~qtw.ad.NumpyOps` or :class:`~qtw.ad.TapeOps`)
so the same code runs plain forward passes and recorded ones.

Per-layer parameter blocks, in layout order:

=====  =========================================================
rnn    w_ih (in, H), w_hh (H, H), b (H,)
gru    w_ih (in, 3H), w_hh_zr (H, 2H), w_hh_n (H, H), b (3H,)
       gate order z (update), r (reset), n (candidate)
lstm   w_ih (in, 4H), w_hh (H, 4H), b (4H,); gate order i, f, g, o
esn    nothing trainable; reservoir drawn from the config seed
=====  =========================================================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ad import NumpyOps
from .rng import SplitMix64, mix64

KINDS = ("rnn", "gru", "lstm", "esn")
INIT_STREAM = 11
RESERVOIR_STREAM = 12


class DivergenceError(FloatingPointError):
    """A hidden state stopped being finite."""


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "gru"
    hidden_dim: int = 32
    layers: int = 1
    input_dim: int = 1
    esn_scaling: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone {self.kind!r}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        if self.kind == "esn" and self.layers != 1:
            raise ValueError("the ESN has a single reservoir layer")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_shapes(cfg: ModelConfig, layer: int) -> list[tuple[str, tuple]]:
    H = cfg.hidden_dim
    n_in = cfg.input_dim if layer == 0 else H
    p = f"l{layer}."
    if cfg.kind == "rnn":
        return [(p + "w_ih", (n_in, H)), (p + "w_hh", (H, H)), (p + "b", (H,))]
    if cfg.kind == "gru":
        return [(p + "w_ih", (n_in, 3 * H)), (p + "w_hh_zr", (H, 2 * H)), (p + "w_hh_n", (H, H)), (p + "b", (3 * H,))]
    if cfg.kind == "lstm":
        return [(p + "w_ih", (n_in, 4 * H)), (p + "w_hh", (H, 4 * H)), (p + "b", (4 * H,))]
    return []


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    out = []
    for layer in range(cfg.layers):
        out += layer_shapes(cfg, layer)
    return out


def n_params(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count of the backbone."""
    H, n_in = cfg.hidden_dim, cfg.input_dim
    gates = {"rnn": 1, "gru": 3, "lstm": 4, "esn": 0}[cfg.kind]
    total = 0
    for layer in range(cfg.layers):
        fan_in = n_in if layer == 0 else H
        total += gates * H * (fan_in + H + 1)
    return total


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) for every trainable block, from ``cfg.seed``."""
    rng = SplitMix64(mix64(cfg.seed, INIT_STREAM))
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    out = {}
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        out[name] = rng.uniform_range(-bound, bound, size).reshape(shape)
    return out


def reservoir(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Frozen ``(w_res, w_in)``: uniform(-1, 1) entries, ``w_res`` rescaled to
    spectral radius one. Row-vector convention: ``h @ w_res``."""
    rng = SplitMix64(mix64(cfg.seed, RESERVOIR_STREAM))
    H = cfg.hidden_dim
    w_res = rng.uniform_range(-1.0, 1.0, H * H).reshape(H, H)
    radius = np.max(np.abs(np.linalg.eigvals(w_res)))
    if radius > 0:
        w_res = w_res / radius
    w_in = rng.uniform_range(-1.0, 1.0, cfg.input_dim * H).reshape(cfg.input_dim, H)
    return w_res, w_in


def rnn_step(h, x, p, F=NumpyOps):
    """``tanh(x W_ih + h W_hh + b)``."""
    return F.tanh(F.add(F.add(F.matmul(x, p["w_ih"]), F.matmul(h, p["w_hh"])), p["b"]))


def gru_step(h, x, p, F=NumpyOps):
    """GRU with the reset gate inside the candidate's recurrent term.

    ``h' = z*h + (1 - z)*n`` with ``n = tanh(x W_n + (r*h) U_n + b_n)``.
    """
    H = p["w_hh_n"].shape[0]
    gx = F.add(F.matmul(x, p["w_ih"]), p["b"])
    gh = F.matmul(h, p["w_hh_zr"])
    z = F.sigmoid(F.add(gx[..., :H], gh[..., :H]))
    r = F.sigmoid(F.add(gx[..., H : 2 * H], gh[..., H:]))
    n = F.tanh(F.add(gx[..., 2 * H :], F.matmul(F.mul(r, h), p["w_hh_n"])))
    return F.add(n, F.mul(z, F.sub(h, n)))


def lstm_step(state, x, p, F=NumpyOps):
    """LSTM without peepholes; ``state`` and the return value are ``(h, c)``."""
    h, c = state
    H = p["w_hh"].shape[0]
    g = F.add(F.add(F.matmul(x, p["w_ih"]), F.matmul(h, p["w_hh"])), p["b"])
    i = F.sigmoid(g[..., :H])
    f = F.sigmoid(g[..., H : 2 * H])
    cand = F.tanh(g[..., 2 * H : 3 * H])
    o = F.sigmoid(g[..., 3 * H :])
    c_new = F.add(F.mul(f, c), F.mul(i, cand))
    return F.mul(o, F.tanh(c_new)), c_new


def esn_step(h, x, fixed, F=NumpyOps, scaling: float = 0.5):
    """``tanh(s * h W_res + s * x W_in)`` with a frozen reservoir."""
    w_res, w_in = fixed
    return F.tanh(F.scale(F.add(F.matmul(h, w_res), F.matmul(x, w_in)), scaling))


def layer_params(cfg: ModelConfig, params: dict, layer: int) -> dict:
    prefix = f"l{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encode_sequence(cfg: ModelConfig, params: dict, record, F=NumpyOps, tbptt: int = 0,
                    fixed=None) -> list:
    """Run the backbone causally over ``record`` of shape ``(batch, T)``.

    Returns a list of ``T`` hidden states of shape ``(batch, H)`` from the top
    layer. ``tbptt > 0`` cuts the gradient path of the carried state every
    ``tbptt`` steps (values are unaffected). ``params`` values may be tape
    variables; ``fixed`` overrides the ESN reservoir.
    """
    rec = np.asarray(F.value(record), dtype=float)
    if rec.ndim == 1:
        rec = rec[None, :]
    B, T = rec.shape
    H = cfg.hidden_dim
    zeros = np.zeros((B, H))
    layers = [layer_params(cfg, params, l) for l in range(cfg.layers)]
    if cfg.kind == "esn":
        fixed = reservoir(cfg) if fixed is None else fixed
    hs = [zeros] * cfg.layers
    cs = [zeros] * cfg.layers
    out = []
    for t in range(T):
        x = rec[:, t : t + 1]
        if tbptt and t > 0 and t % tbptt == 0:
            hs = [F.stop_gradient(h) if not isinstance(h, np.ndarray) else h for h in hs]
            cs = [F.stop_gradient(c) if not isinstance(c, np.ndarray) else c for c in cs]
        inp = x
        for l in range(cfg.layers):
            if cfg.kind == "rnn":
                hs[l] = rnn_step(hs[l], inp, layers[l], F)
            elif cfg.kind == "gru":
                hs[l] = gru_step(hs[l], inp, layers[l], F)
            elif cfg.kind == "lstm":
                hs[l], cs[l] = lstm_step((hs[l], cs[l]), inp, layers[l], F)
            else:
                hs[l] = esn_step(hs[l], inp, fixed, F, cfg.esn_scaling)
            inp = hs[l]
        top = F.value(hs[-1])
        if not np.all(np.isfinite(top)):
            raise DivergenceError(f"non-finite hidden state at step {t}")
        out.append(hs[-1])
    return out
