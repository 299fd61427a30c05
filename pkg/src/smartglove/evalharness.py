"""Fold plans, metrics, robustness sweeps and report writers."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import add_noise, mask_channels, scale_channels
from .schema import JOINT_NAMES

NOISE_GRID = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12)
MASK_GRID = (0, 1, 2, 3)
SCALE_WIDTH_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
SCALE_CHANNELS = 3


@dataclass
class FoldPlan:
    scheme: str
    assignments: np.ndarray  # window index -> fold id
    fold_names: list
    seed: int | None = None

    @property
    def n_folds(self):
        return len(self.fold_names)

    def test_indices(self, k):
        return np.flatnonzero(self.assignments == k)

    def train_indices(self, k):
        return np.flatnonzero(self.assignments != k)

    def folds(self):
        for k in range(self.n_folds):
            yield self.train_indices(k), self.test_indices(k)

    def to_dict(self):
        return {"scheme": self.scheme, "seed": self.seed, "fold_names": list(map(str, self.fold_names)),
                "fold_sizes": [int(np.sum(self.assignments == k)) for k in range(self.n_folds)]}


def _parse_scheme(scheme):
    if scheme.startswith("kfold"):
        k = scheme[5:].lstrip("(").rstrip(")")
        return "kfold", int(k) if k else 10
    if scheme in ("loso", "leave-one-subject-out"):
        return "leave-one-subject-out", None
    if scheme in ("loseo", "leave-one-session-out"):
        return "leave-one-session-out", None
    raise ValueError(f"unknown fold scheme {scheme!r}")


def split(n_windows, scheme="kfold10", seed=0, subjects=None, sessions=None) -> FoldPlan:
    """Deterministic fold plan.

    ``kfold<k>`` shuffles with ``seed`` and deals windows into k folds whose
    sizes differ by at most one (the first ``n % k`` folds get the extra).
    Leave-one-out schemes use one fold per distinct id, in sorted order.
    """
    kind, k = _parse_scheme(scheme)
    if kind == "kfold":
        if k < 2:
            raise ValueError("k must be at least 2")
        if k > n_windows:
            raise ValueError(f"k={k} exceeds dataset size {n_windows}")
        order = np.random.default_rng(seed).permutation(n_windows)
        sizes = np.full(k, n_windows // k)
        sizes[: n_windows % k] += 1
        assign = np.empty(n_windows, dtype=np.int64)
        assign[order] = np.repeat(np.arange(k), sizes)
        return FoldPlan(f"kfold{k}", assign, [f"fold{i}" for i in range(k)], seed)
    ids = subjects if kind == "leave-one-subject-out" else sessions
    if ids is None:
        raise ValueError(f"{kind} needs {'subject' if 'subject' in kind else 'session'} ids")
    ids = np.asarray(ids).astype(str)
    if len(ids) != n_windows:
        raise ValueError("id array length differs from dataset size")
    names, assign = np.unique(ids, return_inverse=True)
    if len(names) < 2:
        raise ValueError(f"{kind} needs at least two distinct ids")
    return FoldPlan(kind, assign.astype(np.int64), list(names), seed)


# ---------------------------------------------------------------- metrics

def rmse(pred, truth, axis=0):
    d = np.asarray(pred, np.float64) - np.asarray(truth, np.float64)
    return np.sqrt(np.mean(d * d, axis=axis))


def r2(pred, truth, axis=0):
    """R^2 in percent; NaN where the truth has no variance."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if truth.shape[axis] < 2:
        raise ValueError("R^2 needs at least two samples")
    sse = np.sum((pred - truth) ** 2, axis=axis)
    sst = np.sum((truth - truth.mean(axis=axis, keepdims=True)) ** 2, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sst > 0, 100.0 * (1.0 - sse / np.where(sst > 0, sst, 1.0)), np.nan)


def confusion_matrix(preds, labels, n_classes):
    preds = np.asarray(preds, np.int64)
    labels = np.asarray(labels, np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("labels outside [0, n_classes)")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def sensitivity_and_confusion(preds, labels, n_classes):
    """Per-class recall in percent (NaN for absent classes), confusion, accuracy."""
    m = confusion_matrix(preds, labels, n_classes)
    counts = m.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sens = np.where(counts > 0, 100.0 * np.diag(m) / np.where(counts > 0, counts, 1), np.nan)
    total = m.sum()
    acc = float(np.trace(m) / total) if total else float("nan")
    return {"sensitivity": sens, "confusion": m, "accuracy": acc}


@dataclass
class EvalReport:
    rmse: np.ndarray  # (22,) degrees
    r2: np.ndarray  # (22,) percent, NaN when undefined
    n_windows: int
    folds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    sensitivity: np.ndarray | None = None
    confusion: np.ndarray | None = None

    @property
    def average_rmse(self):
        return float(np.mean(self.rmse))

    @property
    def average_r2(self):
        return float(np.nanmean(self.r2)) if np.any(np.isfinite(self.r2)) else float("nan")

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, np.float64)]
        d = {"joints": list(JOINT_NAMES), "rmse_deg": clean(self.rmse), "r2_pct": clean(self.r2),
             "average_rmse_deg": self.average_rmse,
             "average_r2_pct": None if math.isnan(self.average_r2) else self.average_r2,
             "n_windows": int(self.n_windows), "folds": self.folds, "meta": self.meta}
        if self.sensitivity is not None:
            d["sensitivity_pct"] = clean(self.sensitivity)
            d["confusion"] = self.confusion.tolist()
        return d


def regression_report(pred, truth, folds=None, meta=None):
    return EvalReport(rmse(pred, truth), r2(pred, truth), len(truth), folds or [], meta or {})


# ---------------------------------------------------------------- writers

# Row layout: one row per metric, joints grouped as in the per-finger table
# with an "Average" column at the end.
def write_table_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *JOINT_NAMES, "Average"])
        w.writerow(["RMSE (deg)", *[f"{v:.4f}" for v in report.rmse], f"{report.average_rmse:.4f}"])
        w.writerow(["R2 (%)", *["" if not np.isfinite(v) else f"{v:.4f}" for v in report.r2],
                    "" if math.isnan(report.average_r2) else f"{report.average_r2:.4f}"])


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_confusion_csv(confusion, path, names=None):
    n = len(confusion)
    names = names or [str(i) for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, confusion):
            w.writerow([name, *map(int, row)])


# ---------------------------------------------------------------- robustness

def perturb(windows, kind, level, rng, channels=None):
    """Apply one sweep perturbation to every normalized window.

    noise: sigma on all channels; mask: ``level`` channels zeroed;
    scale: 3 channels scaled by U(1 - level/2, 1 + level/2).
    """
    if level == 0:
        return windows
    C = windows.shape[-1]
    chans = np.arange(C) if channels is None else np.asarray(channels)
    out = np.empty_like(windows)
    for i, w in enumerate(windows):
        if kind == "noise":
            out[i] = add_noise(w, level, k=len(chans), rng=rng, channels=chans)
        elif kind == "mask":
            out[i] = mask_channels(w, k=int(level), rng=rng, channels=chans)
        elif kind == "scale":
            out[i] = scale_channels(w, (1 - level / 2, 1 + level / 2), k=min(SCALE_CHANNELS, len(chans)),
                                    rng=rng, channels=chans)
        else:
            raise ValueError(f"unknown perturbation {kind!r}")
    return out


def sweep_cells(noise=NOISE_GRID, mask=MASK_GRID, scale=SCALE_WIDTH_GRID):
    return [("noise", v) for v in noise] + [("mask", v) for v in mask] + [("scale", v) for v in scale]


def _predict_normalized(bundle, xn, batch=512):
    from .glovepose import forward
    return np.concatenate([forward(xn[a:a + batch], bundle)[0] for a in range(0, len(xn), batch)])


def robustness_sweep(bundles: dict, windows, truth, seed=0, cells=None, channels=None):
    """Evaluate each model on every perturbation cell of the grid.

    ``windows`` are raw test windows; each bundle normalizes with its own
    stats and the perturbation is applied in normalized units.  All models
    see the same random draws in a given cell.  ``perturbed_average`` is the
    mean average-RMSE over cells with a nonzero perturbation.
    """
    from .signal import normalize
    cells = cells or sweep_cells()
    rows = []
    summary = {}
    for name, bundle in bundles.items():
        xn = normalize(windows, bundle.stats).astype(bundle.config.np_dtype)
        per_model = []
        for ci, (kind, level) in enumerate(cells):
            rng = np.random.default_rng((seed, ci))
            pred = _predict_normalized(bundle, perturb(xn, kind, level, rng, channels))
            r = rmse(pred, truth)
            q = r2(pred, truth)
            avg_r2 = float(np.nanmean(q)) if np.any(np.isfinite(q)) else None
            rows.append({"model": name, "perturbation": kind, "level": float(level),
                         "avg_rmse_deg": float(r.mean()), "avg_r2_pct": avg_r2})
            per_model.append((kind, level, float(r.mean())))
        clean = [v for _, lvl, v in per_model if lvl == 0]
        pert = [v for _, lvl, v in per_model if lvl != 0]
        summary[name] = {"clean_rmse_deg": float(np.mean(clean)) if clean else None,
                         "perturbed_average_rmse_deg": float(np.mean(pert)) if pert else None}
    return {"cells": rows, "summary": summary, "seed": seed}


def write_sweep_csv(sweep, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "perturbation", "level", "avg_rmse_deg", "avg_r2_pct"])
        for r in sweep["cells"]:
            w.writerow([r["model"], r["perturbation"], f"{r['level']:g}", f"{r['avg_rmse_deg']:.6f}",
                        "" if r["avg_r2_pct"] is None else f"{r['avg_r2_pct']:.6f}"])


def ridge_baseline(train_windows, train_targets, test_windows, alpha=1.0):
    """Closed-form ridge regression on flattened, standardized windows."""
    Xtr = train_windows.reshape(len(train_windows), -1).astype(np.float64)
    Xte = test_windows.reshape(len(test_windows), -1).astype(np.float64)
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xtr = (Xtr - mu) / sd
    Xte = (Xte - mu) / sd
    ymu = train_targets.mean(axis=0)
    A = Xtr.T @ Xtr + alpha * np.eye(Xtr.shape[1])
    W = np.linalg.solve(A, Xtr.T @ (train_targets - ymu))
    return Xte @ W + ymu
