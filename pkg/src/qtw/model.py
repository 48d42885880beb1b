"""A backbone plus an output head over one flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbones, heads, qcore
from .ad import NumpyOps, TapeOps
from .rng import SplitMix64, mix64

HEADS = ("kraus", "direct")
HEAD_INIT_STREAM = 13


@dataclass
class Model:
    config: backbones.ModelConfig
    head: str
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.params is None:
            self.params = self.initial_params()
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")
        self._reservoir = backbones.reservoir(self.config) if self.config.kind == "esn" else None

    @property
    def layout(self) -> list[tuple[str, tuple]]:
        return backbones.param_shapes(self.config) + heads.head_shapes(self.head, self.config.hidden_dim)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def initial_params(self) -> np.ndarray:
        """Backbone and head draw from separate streams of the same seed, so a
        Kraus model and its direct counterpart share the backbone init."""
        body = backbones.init_params(self.config)
        H = self.config.hidden_dim
        rng = SplitMix64(mix64(self.config.seed, HEAD_INIT_STREAM))
        bound = 1.0 / np.sqrt(H)
        parts = [body[name].ravel() for name, _ in backbones.param_shapes(self.config)]
        for _, shape in heads.head_shapes(self.head, H):
            parts.append(rng.uniform_range(-bound, bound, int(np.prod(shape))))
        flat = np.concatenate(parts) if parts else np.zeros(0)
        if self.head == "direct":
            # Start the regression at trace one: bias real diagonal += 1/2.
            off = self.n_params - heads.N_DIRECT_OUT
            flat[off + 0] += 0.5
            flat[off + 3] += 0.5
        return flat

    def unflatten(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, off = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = flat[off : off + size].reshape(shape)
            off += size
        return out

    def register(self, F, flat=None) -> dict:
        """Named blocks as tape parameters (or plain arrays for NumpyOps)."""
        return {name: F.param(name, arr) for name, arr in self.unflatten(flat).items()}

    def forward(self, records, F=NumpyOps, p=None, rho0=qcore.KET0, jitter_rng=None, tbptt: int = 0):
        """Standardised records ``(batch, T)`` to predicted ``(re, im, flags)``."""
        if p is None:
            p = self.register(F)
        records = np.atleast_2d(np.asarray(records, dtype=float))
        if self.config.kind == "esn":
            hs = backbones.encode_sequence(self.config, {}, records, NumpyOps, fixed=self._reservoir)
            hs = np.stack(hs, axis=1)
        else:
            hs = backbones.encode_sequence(self.config, p, records, F, tbptt=tbptt)
        return heads.rollout(self.head, hs, p["head.w"], p["head.b"], rho0, F, jitter_rng, tbptt)

    def predict(self, records, rho0=qcore.KET0) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic complex predictions ``(batch, T, 2, 2)`` and fallback flags."""
        pr, pi, flags = self.forward(records, NumpyOps, rho0=rho0)
        return pr + 1j * pi, flags

    def tape_forward(self, records, flat=None, **kw):
        F = TapeOps()
        p = self.register(F, flat)
        return F, self.forward(records, F, p, **kw)
