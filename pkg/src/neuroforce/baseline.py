"""Linear-regression reference decoder on windowed spike counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import ForceTrace, WindowedCounts


class DegenerateFeatures(UserWarning):
    pass


@dataclass
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    window_len: float
    hop: float
    rank_deficient: bool = False
    degenerate: bool = False
    mu_ids: tuple[int, ...] = ()

    @property
    def n_features(self) -> int:
        return int(self.coefficients.size)


def window_targets(force: ForceTrace, counts: WindowedCounts) -> np.ndarray:
    """Mean of the force samples whose timestamps fall inside each window."""
    t = force.times
    lo = np.searchsorted(t, counts.starts - 1e-12, side="left")
    hi = np.searchsorted(t, counts.starts + counts.window_len - 1e-12, side="left")
    csum = np.concatenate(([0.0], np.cumsum(force.samples)))
    n = hi - lo
    if np.any(n == 0):
        # windows narrower than the force sampling: fall back to interpolation at the center
        centers = np.interp(counts.centers, t, force.samples)
        return np.where(n > 0, (csum[hi] - csum[lo]) / np.maximum(n, 1), centers)
    return (csum[hi] - csum[lo]) / n


def fit_ols(counts: WindowedCounts, target: np.ndarray, mu_ids: Sequence[int] = ()) -> LinearModel:
    """Least squares with intercept, solved by SVD on mean-centered features.

    Centering makes the intercept equal the target mean whenever features
    have zero variance, and the SVD solve returns the minimum-norm
    coefficients when the design is rank deficient.
    """
    X = counts.counts.astype(np.float64)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ValueError(f"target length {y.size} != n_windows {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("NaN or infinite input")
    if X.shape[0] < X.shape[1] + 1:
        raise ValueError("need n_windows >= n_mu + 1")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    beta, _, rank, _ = np.linalg.lstsq(Xc, y - y_mean, rcond=None)
    degenerate = not np.any(X) or not np.any(Xc)
    return LinearModel(beta, float(y_mean - x_mean @ beta), counts.window_len, counts.hop,
                       rank_deficient=bool(rank < X.shape[1]), degenerate=bool(degenerate),
                       mu_ids=tuple(int(m) for m in mu_ids))


def predict(model: LinearModel, counts: WindowedCounts) -> ForceTrace:
    """One prediction per window, stamped at the window center, sampled at 1/hop."""
    if counts.n_mu != model.n_features:
        raise ValueError(f"model has {model.n_features} features, counts have {counts.n_mu}")
    y = counts.counts.astype(np.float64) @ model.coefficients + model.intercept
    return ForceTrace(1.0 / counts.hop, y, t0=counts.window_len / 2)


def save_model(path: str | Path, model: LinearModel) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("term", "value"))
        ids = model.mu_ids or tuple(range(model.n_features))
        for mu, c in zip(ids, model.coefficients):
            w.writerow((f"mu_{mu}", repr(float(c))))
        w.writerow(("intercept", repr(model.intercept)))
        w.writerow(("window_len", repr(model.window_len)))
        w.writerow(("hop", repr(model.hop)))


def load_model(path: str | Path) -> LinearModel:
    ids, coef, meta = [], [], {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            term, value = row["term"], float(row["value"])
            if term.startswith("mu_"):
                ids.append(int(term[3:]))
                coef.append(value)
            else:
                meta[term] = value
    return LinearModel(np.array(coef), meta["intercept"], meta["window_len"], meta["hop"],
                       mu_ids=tuple(ids))
