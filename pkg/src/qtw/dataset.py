"""Trajectory files, standardisation sidecars and dataset generation.

Trajectory file layout (little-endian)::

    magic  b"QTRJ"
    u32    format version (1; 2 adds a phase-2 gamma field)
    u32    d = 2
    u64    T
    f64    dt
    f64    eta
    u64    count
    count x {
        f64 gamma, [f64 gamma2 if version 2], f64 omega1, f64 omega2,
        u64 tau, u64 seed,
        f64 record[T]         raw (unstandardised) dy
        f64 bloch[T][3]       rx, ry, rz after each step
    }

Record index ``t`` drives the transition from the state before step ``t``
to ``bloch[t]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import qcore
from .sim import DatasetSpec, SimParams, StandardizationStats, Trajectory, draw_params, simulate_batch

log = logging.getLogger(__name__)

MAGIC = b"QTRJ"
_HEADER = struct.Struct("<4sIIQddQ")


class FormatError(ValueError):
    """A file does not match the expected layout."""


def record_dtype(T: int, version: int = 1) -> np.dtype:
    fields = [("gamma", "<f8")]
    if version == 2:
        fields.append(("gamma2", "<f8"))
    fields += [
        ("omega1", "<f8"),
        ("omega2", "<f8"),
        ("tau", "<u8"),
        ("seed", "<u8"),
        ("record", "<f8", (T,)),
        ("bloch", "<f8", (T, 3)),
    ]
    return np.dtype(fields)


@dataclass
class TrajectorySet:
    """Column-oriented view of a trajectory file."""

    dt: float
    eta: float
    gamma: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray
    tau: np.ndarray
    seed: np.ndarray
    record: np.ndarray  # (N, T)
    bloch: np.ndarray  # (N, T, 3)
    gamma2: Optional[np.ndarray] = None
    digest: str = ""

    def __len__(self) -> int:
        return self.record.shape[0]

    @property
    def T(self) -> int:
        return self.record.shape[1]

    def states(self, idx=slice(None)) -> np.ndarray:
        return qcore.bloch_to_rho(self.bloch[idx])

    def params(self, i: int) -> SimParams:
        return SimParams(
            gamma=float(self.gamma[i]),
            omega1=float(self.omega1[i]),
            omega2=float(self.omega2[i]),
            tau=int(self.tau[i]),
            eta=self.eta,
            dt=self.dt,
            T=self.T,
            seed=int(self.seed[i]),
            gamma2=None if self.gamma2 is None else float(self.gamma2[i]),
        )

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.params(i), self.record[i], self.bloch[i])

    def subset(self, idx) -> "TrajectorySet":
        idx = np.asarray(idx)
        return TrajectorySet(
            self.dt,
            self.eta,
            self.gamma[idx],
            self.omega1[idx],
            self.omega2[idx],
            self.tau[idx],
            self.seed[idx],
            self.record[idx],
            self.bloch[idx],
            None if self.gamma2 is None else self.gamma2[idx],
            digest=self.digest,
        )

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory]) -> "TrajectorySet":
        p0 = trajs[0].params
        with_g2 = any(t.params.gamma2 is not None for t in trajs)
        return cls(
            dt=p0.dt,
            eta=p0.eta,
            gamma=np.array([t.params.gamma for t in trajs]),
            omega1=np.array([t.params.omega1 for t in trajs]),
            omega2=np.array([t.params.omega2 for t in trajs]),
            tau=np.array([t.params.tau for t in trajs], dtype=np.uint64),
            seed=np.array([t.params.seed for t in trajs], dtype=np.uint64),
            record=np.stack([t.record for t in trajs]),
            bloch=np.stack([t.bloch for t in trajs]),
            gamma2=(
                np.array([t.params.gamma if t.params.gamma2 is None else t.params.gamma2 for t in trajs])
                if with_g2
                else None
            ),
        )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_trajectories(ts: TrajectorySet) -> bytes:
    version = 1 if ts.gamma2 is None else 2
    n, T = ts.record.shape
    rows = np.zeros(n, dtype=record_dtype(T, version))
    rows["gamma"] = ts.gamma
    if version == 2:
        rows["gamma2"] = ts.gamma2
    rows["omega1"] = ts.omega1
    rows["omega2"] = ts.omega2
    rows["tau"] = ts.tau
    rows["seed"] = ts.seed
    rows["record"] = ts.record
    rows["bloch"] = ts.bloch
    return _HEADER.pack(MAGIC, version, 2, T, ts.dt, ts.eta, n) + rows.tobytes()


def write_trajectories(path, ts: TrajectorySet) -> str:
    """Write ``ts`` and return the file's sha256."""
    data = encode_trajectories(ts)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_trajectories(path) -> TrajectorySet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, T, dt, eta, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version not in (1, 2):
        raise FormatError(f"{path}: unsupported version {version}")
    if d != 2:
        raise FormatError(f"{path}: only qubit files (d=2) are supported, got d={d}")
    dtype = record_dtype(T, version)
    if len(data) != _HEADER.size + n * dtype.itemsize:
        raise FormatError(f"{path}: size does not match header (count={n}, T={T})")
    rows = np.frombuffer(data, dtype=dtype, count=n, offset=_HEADER.size)
    return TrajectorySet(
        dt=dt,
        eta=eta,
        gamma=rows["gamma"].copy(),
        omega1=rows["omega1"].copy(),
        omega2=rows["omega2"].copy(),
        tau=rows["tau"].copy(),
        seed=rows["seed"].copy(),
        record=rows["record"].copy(),
        bloch=rows["bloch"].copy(),
        gamma2=rows["gamma2"].copy() if version == 2 else None,
        digest=hashlib.sha256(data).hexdigest(),
    )


def write_stats(path, stats: StandardizationStats, source_digest: str, source_name: str = "") -> None:
    doc = {"mu": stats.mu, "sigma": stats.sigma, "source": source_name, "source_sha256": source_digest}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_stats(path) -> tuple[StandardizationStats, dict]:
    doc = json.loads(Path(path).read_text())
    return StandardizationStats(float(doc["mu"]), float(doc["sigma"])), doc


def _simulate_indices(args):
    spec, split, indices = args
    trajs = simulate_batch([draw_params(spec, split, i) for i in indices])
    return TrajectorySet.from_trajectories(trajs), [(t.psd_projections, t.psd_significant) for t in trajs]


def simulate_split(spec: DatasetSpec, split: str, workers: int = 1, chunk: int = 64):
    """Simulate one split; the result is independent of ``workers`` and ``chunk``."""
    n = spec.count(split)
    jobs = [(spec, split, list(range(s, min(s + chunk, n)))) for s in range(0, n, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_indices, jobs))
    else:
        parts = [_simulate_indices(j) for j in jobs]
    sets = [p[0] for p in parts]
    counts = [c for p in parts for c in p[1]]
    merged = TrajectorySet(
        dt=spec.dt,
        eta=spec.eta,
        gamma=np.concatenate([s.gamma for s in sets]),
        omega1=np.concatenate([s.omega1 for s in sets]),
        omega2=np.concatenate([s.omega2 for s in sets]),
        tau=np.concatenate([s.tau for s in sets]),
        seed=np.concatenate([s.seed for s in sets]),
        record=np.concatenate([s.record for s in sets]),
        bloch=np.concatenate([s.bloch for s in sets]),
        gamma2=np.concatenate([s.gamma2 for s in sets]) if spec.resample_gamma else None,
    )
    return merged, counts


def spec_to_dict(spec: DatasetSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["tau_range"] = list(spec.resolved_tau_range())
    d["gamma_range"] = list(spec.gamma_range)
    d["omega_range"] = list(spec.omega_range)
    return d


def generate_dataset(spec: DatasetSpec, out_dir, workers: int = 1) -> dict:
    """Simulate train and test splits into ``out_dir``; returns the manifest dict.

    Writes ``train.qtrj``, ``test.qtrj``, ``stats.json`` (from training
    records only) and ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "dataset", "spec": spec_to_dict(spec), "files": {}, "psd_projections": {}}
    digests = {}
    for split in ("train", "test"):
        if spec.count(split) == 0:
            continue
        ts, counts = simulate_split(spec, split, workers=workers)
        path = out / f"{split}.qtrj"
        digests[split] = write_trajectories(path, ts)
        manifest["files"][path.name] = digests[split]
        manifest["psd_projections"][split] = {
            "total": int(sum(c[0] for c in counts)),
            "below_-1e-8": int(sum(c[1] for c in counts)),
            "trajectories_affected": int(sum(1 for c in counts if c[0] > 0)),
        }
        if split == "train":
            stats = StandardizationStats.from_records(ts.record)
        log.info("wrote %s (%d trajectories)", path, len(ts))
    stats_path = out / "stats.json"
    write_stats(stats_path, stats, digests["train"], "train.qtrj")
    manifest["files"][stats_path.name] = sha256_file(stats_path)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
