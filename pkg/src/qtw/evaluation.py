"""Test-set scoring, physicality classification, ablation deltas and report files.

Phase 1 is ``t < tau`` and phase 2 is ``t >= tau``, per trajectory. All
aggregate mean metrics are plain means of the per-trajectory values; the
``*_max`` columns are maxima over trajectories. Bures distance is computed
from the full fidelity (determinants clamped, clipped to ``[0, 1]``) so that
a state scored against itself sits at distance zero.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import qcore
from .dataset import TrajectorySet

CSV_COLUMNS = [
    "model", "head", "n_traj", "fid_proxy", "fid_full", "bures", "fid_p1", "fid_p2",
    "vtr_mean", "vtr_max", "vpsd_mean", "vpsd_max", "vherm_mean", "kraus_comp_max",
    "bloch_err", "physical",
]
TRAJ_FIELDS = [
    "traj", "tau", "fid_proxy", "fid_full", "bures", "fid_p1", "fid_p2", "vtr_mean", "vtr_max",
    "vpsd_mean", "vpsd_max", "vherm_mean", "lam_min", "kraus_comp_max", "bloch_err", "n_fallback",
]
MEAN_FIELDS = ["fid_proxy", "fid_full", "bures", "fid_p1", "fid_p2", "vtr_mean", "vpsd_mean", "vherm_mean", "bloch_err"]
MAX_FIELDS = ["vtr_max", "vpsd_max", "kraus_comp_max"]

PHYS_TRACE_TOL = 1e-4
PHYS_EIG_TOL = -1e-6


class DigestError(ValueError):
    """Train/test overlap or mismatched test sets."""


@dataclass
class EvalReport:
    model: str
    head: str
    data_digest: str
    per_traj: list[dict]
    aggregate: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.per_traj)

    @property
    def physical(self) -> bool:
        return bool(self.aggregate["physical"])

    def row(self) -> dict:
        return {"model": self.model, "head": self.head, "n_traj": len(self.per_traj), **self.aggregate}

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "head": self.head,
            "data_digest": self.data_digest,
            "meta": self.meta,
            "aggregate": {k: self.aggregate[k] for k in CSV_COLUMNS[3:]},
            "per_traj": [{k: r[k] for k in TRAJ_FIELDS} for r in self.per_traj],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d["head"], d["data_digest"], d["per_traj"], d["aggregate"], d.get("meta", {}))


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else math.nan


def _nanmax(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    return float(x.max()) if x.size else math.nan


def aggregate(rows: list[dict]) -> dict:
    agg = {}
    for k in CSV_COLUMNS[3:]:
        if k in MEAN_FIELDS:
            agg[k] = _nanmean([r[k] for r in rows])
        elif k in MAX_FIELDS:
            agg[k] = _nanmax([r[k] for r in rows])
    vtr_max = _nanmax([r["vtr_max"] for r in rows])
    lam_min = float(np.min([r["lam_min"] for r in rows]))
    agg["physical"] = bool(vtr_max < PHYS_TRACE_TOL and lam_min >= PHYS_EIG_TOL)
    return agg


def score_trajectory(pred: np.ndarray, truth: np.ndarray, tau: int, kraus_comp=None, fallback=None,
                     index: int = 0) -> dict:
    """Metrics of one predicted sequence ``(T, 2, 2)`` against ground truth."""
    fp = qcore.fidelity_proxy(pred, truth)
    ff = qcore.fidelity_full(pred, truth, strict=False)
    v_tr, v_psd, v_herm = qcore.physicality_metrics(pred)
    lam_min = qcore.eigvals_hermitian_2x2(pred)[0]
    T = pred.shape[0]
    p1 = np.arange(T) < tau
    berr = np.linalg.norm(qcore.rho_to_bloch(pred) - qcore.rho_to_bloch(truth), axis=-1)
    return {
        "traj": int(index),
        "tau": int(tau),
        "fid_proxy": float(fp.mean()),
        "fid_full": float(ff.mean()),
        "bures": float(qcore.bures_from_fidelity(ff).mean()),
        "fid_p1": float(fp[p1].mean()) if p1.any() else math.nan,
        "fid_p2": float(fp[~p1].mean()) if (~p1).any() else math.nan,
        "vtr_mean": float(v_tr.mean()),
        "vtr_max": float(v_tr.max()),
        "vpsd_mean": float(v_psd.mean()),
        "vpsd_max": float(v_psd.max()),
        "vherm_mean": float(v_herm.mean()),
        "lam_min": float(lam_min.min()),
        "kraus_comp_max": math.nan if kraus_comp is None else float(np.max(kraus_comp)),
        "bloch_err": float(berr.mean()),
        "n_fallback": 0 if fallback is None else int(np.sum(fallback)),
    }


def check_disjoint(test: TrajectorySet, train_digest: Optional[str] = None, train_seeds=None) -> None:
    if train_digest and test.digest and train_digest == test.digest:
        raise DigestError("test file digest equals the training file digest")
    if train_seeds is not None:
        overlap = np.intersect1d(np.asarray(train_seeds, dtype=np.uint64), test.seed)
        if overlap.size:
            raise DigestError(f"{overlap.size} trajectory seeds shared between train and test")


def evaluate(predictions: np.ndarray, test: TrajectorySet, model: str, head: str, kraus_comp=None,
             fallback=None, train_digest: Optional[str] = None, train_seeds=None,
             meta: Optional[dict] = None) -> EvalReport:
    """Score ``(N, T, 2, 2)`` predictions against ``test``."""
    check_disjoint(test, train_digest, train_seeds)
    truth = test.states()
    if predictions.shape != truth.shape:
        raise ValueError(f"prediction shape {predictions.shape} != truth shape {truth.shape}")
    rows = [
        score_trajectory(
            predictions[i], truth[i], int(test.tau[i]),
            None if kraus_comp is None else kraus_comp[i],
            None if fallback is None else fallback[i], i,
        )
        for i in range(len(test))
    ]
    return EvalReport(model, head, test.digest, rows, meta=dict(meta or {}))


def kraus_completeness(model, records) -> np.ndarray:
    """Per-step ``|sum K^+ K - I|_F`` of a Kraus-head model, shape ``(N, T)``."""
    from . import backbones, heads

    hs = backbones.encode_sequence(model.config, model.unflatten(), records, fixed=model._reservoir)
    H = np.stack(hs, axis=1)
    p = model.unflatten()
    vr, vi = heads.build_V(H, p["head.w"], p["head.b"])
    qr, qi = heads.thin_qr_pairs(vr, vi)
    k = heads.kraus_from_q(qr + 1j * qi)
    return qcore.kraus_completeness_error(k.K1, k.K2)


def evaluate_model(model, test: TrajectorySet, stats, name: str = "", batch: int = 64, **kw) -> EvalReport:
    from .sim import standardize

    recs = standardize(test.record, stats)
    preds, flags, comps = [], [], []
    for s in range(0, len(test), batch):
        p, f = model.predict(recs[s : s + batch])
        preds.append(p)
        flags.append(f)
        if model.head == "kraus":
            comps.append(kraus_completeness(model, recs[s : s + batch]))
    name = name or f"{model.head}-{model.config.kind}"
    meta = {"config": model.config.to_dict(), **kw.pop("meta", {})}
    return evaluate(np.concatenate(preds), test, name, model.head,
                    np.concatenate(comps) if comps else None, np.concatenate(flags), meta=meta, **kw)


# -------------------------------------------------------------- ablation


def ablation_delta(kraus: EvalReport, base: EvalReport) -> dict:
    """Kraus minus baseline for the accuracy columns; both operands are echoed."""
    if kraus.data_digest != base.data_digest:
        raise DigestError("reports were computed on different test sets")
    cols = ["fid_proxy", "fid_full", "bures", "fid_p1", "fid_p2"]
    return {
        "kraus_model": kraus.model,
        "baseline_model": base.model,
        "data_digest": kraus.data_digest,
        **{f"kraus_{c}": kraus.aggregate[c] for c in cols},
        **{f"baseline_{c}": base.aggregate[c] for c in cols},
        **{f"delta_{c}": kraus.aggregate[c] - base.aggregate[c] for c in cols},
    }


# --------------------------------------------------------------- files


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(k: str, s: str):
    if k in ("model", "head", "kraus_model", "baseline_model", "data_digest"):
        return s
    if k == "physical":
        return s == "true"
    if k in ("n_traj", "traj", "tau", "n_fallback"):
        return int(s)
    return float(s)


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def csv_to_rows(text: str) -> list[dict]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if header != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    return [{k: _parse(k, v) for k, v in zip(header, line)} for line in rd]


def emit_report(report: EvalReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    elif fmt == "csv":
        path.write_text(reports_to_csv([report]))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def delta_table_csv(deltas: list[dict]) -> str:
    if not deltas:
        return ""
    cols = list(deltas[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for d in deltas:
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()
