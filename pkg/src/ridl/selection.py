"""L1-penalized logistic regression for radiomic feature selection.

Objective over z-scored features x~ (population standard deviation):

    (1/N) sum_i [log(1 + exp(eta_i)) - y_i eta_i] + lambda * ||beta||_1,
    eta_i = beta0 + beta . x~_i

solved by cyclic coordinate descent. Each coordinate first tries a proximal
Newton step; if that does not lower the objective it falls back to the
majorization step with curvature bound mean(x^2) / 4, which always does.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import ShapeMismatchError
from .features import FeatureTable
from .folds import FoldPlan
from .metrics import roc_auc

DEFAULT_TOL = 1e-8
KKT_TOL = 1e-6
GRID_SIZE = 50
GRID_RATIO = 1e-3
# lambda_max is inflated by this relative amount so that rounding in the
# coordinate gradient cannot leave a 1-ulp coefficient at lambda = lambda_max
LAMBDA_MAX_SLACK = 1e-10


@dataclass
class LassoModel:
    intercept: float
    coefficients: dict[str, float]  # nonzero entries only
    lam: float
    standardization: dict[str, tuple[float, float]]  # key -> (mean, std) of retained columns
    objective: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def selected(self) -> list[str]:
        return list(self.coefficients)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "intercept": self.intercept,
            "standardization": {k: list(v) for k, v in self.standardization.items()},
            "coefficients": self.coefficients,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LassoModel":
        return cls(float(d["intercept"]), {k: float(v) for k, v in d["coefficients"].items()},
                   float(d["lambda"]), {k: (float(m), float(s)) for k, (m, s) in d["standardization"].items()},
                   float(d.get("objective", "nan")))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "LassoModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# solver


@njit(cache=True)
def _log1pexp(t):
    if t > 0:
        return t + np.log1p(np.exp(-t))
    return np.log1p(np.exp(t))


@njit(cache=True)
def _sigmoid(t):
    if t >= 0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)


@njit(cache=True)
def _loss(eta, y):
    acc = 0.0
    for i in range(eta.shape[0]):
        acc += _log1pexp(eta[i]) - y[i] * eta[i]
    return acc / eta.shape[0]


@njit(cache=True)
def _soft(v, t):
    if v > t:
        return v - t
    if v < -t:
        return v + t
    return 0.0


@njit(cache=True)
def _coordinate(X, j, y, eta, b, lam, penal, curv_mm, obj):
    """Update one coordinate (j = -1 is the intercept); returns (new value, new objective)."""
    n = eta.shape[0]
    g = 0.0
    h = 0.0
    for i in range(n):
        x = 1.0 if j < 0 else X[i, j]
        p = _sigmoid(eta[i])
        g += x * (p - y[i])
        h += x * x * p * (1.0 - p)
    g /= n
    h /= n
    pen = lam if penal else 0.0
    best = b
    best_obj = obj
    for attempt in range(2):
        c = h if attempt == 0 else curv_mm
        if c <= 1e-300:
            continue
        nb = _soft(c * b - g, pen) / c
        d = nb - b
        if d == 0.0:
            return b, obj
        trial = 0.0
        for i in range(n):
            x = 1.0 if j < 0 else X[i, j]
            t = eta[i] + d * x
            trial += _log1pexp(t) - y[i] * t
        trial = trial / n + pen * (abs(nb) - abs(b))
        if attempt == 1 or trial <= obj:
            best = nb
            best_obj = trial
            break
    d = best - b
    if d != 0.0:
        for i in range(n):
            eta[i] += d * (1.0 if j < 0 else X[i, j])
    return best, best_obj


@njit(cache=True)
def _kkt_violation(X, y, eta, beta, lam):
    n, p = X.shape
    worst = 0.0
    r = np.empty(n)
    for i in range(n):
        r[i] = _sigmoid(eta[i]) - y[i]
    g0 = r.sum() / n
    worst = abs(g0)
    for j in range(p):
        g = 0.0
        for i in range(n):
            g += X[i, j] * r[i]
        g /= n
        if beta[j] == 0.0:
            v = max(abs(g) - lam, 0.0)
        else:
            v = abs(g + lam * np.sign(beta[j]))
        worst = max(worst, v)
    return worst


@njit(cache=True)
def _cd_solve(X, y, lam, b0, beta, tol, kkt_tol, max_sweeps, history):
    n, p = X.shape
    eta = np.full(n, b0)
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                eta[i] += beta[j] * X[i, j]
    curv = np.empty(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += X[i, j] * X[i, j]
        curv[j] = s / n / 4.0
    obj = _loss(eta, y) + lam * np.abs(beta).sum()
    sweeps = 0
    for sweep in range(max_sweeps):
        prev = obj
        b0, obj = _coordinate(X, -1, y, eta, b0, lam, False, 0.25, obj)
        for j in range(p):
            beta[j], obj = _coordinate(X, j, y, eta, beta[j], lam, True, curv[j], obj)
        # recompute exactly to keep rounding drift out of the stopping rule
        obj = _loss(eta, y) + lam * np.abs(beta).sum()
        history[sweep] = obj
        sweeps = sweep + 1
        if prev - obj <= tol * max(1.0, abs(obj)) and _kkt_violation(X, y, eta, beta, lam) <= kkt_tol:
            break
    return b0, obj, sweeps


def _standardize(values: np.ndarray):
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    keep = std > 1e-12 * (1.0 + np.abs(mean))
    return mean, std, keep


def _check_labels(y: np.ndarray):
    if len(y) < 2 or not np.isin(y, (0, 1)).all() or y.min() == y.max():
        raise ValueError("LASSO fit needs >= 2 samples with both labels present")


@dataclass
class _Design:
    keys: list[str]
    X: np.ndarray
    y: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def _design(table: FeatureTable) -> _Design:
    y = table.labels.astype(np.float64)
    _check_labels(table.labels)
    if not np.isfinite(table.values).all():
        raise ValueError("feature table holds non-finite values")
    mean, std, keep = _standardize(table.values)
    if not keep.any():
        raise ValueError("no feature column with nonzero variance")
    keys = [k for k, ok in zip(table.keys, keep) if ok]
    X = np.ascontiguousarray((table.values[:, keep] - mean[keep]) / std[keep])
    return _Design(keys, X, y, mean[keep], std[keep])


def _lambda_max(d: _Design) -> float:
    return float(np.max(np.abs(d.X.T @ (d.y - d.y.mean()))) / len(d.y)) * (1.0 + LAMBDA_MAX_SLACK)


def lambda_max(table: FeatureTable) -> float:
    """Smallest lambda at which every coefficient is zero."""
    return _lambda_max(_design(table))


def lambda_grid(lam_max: float, n: int = GRID_SIZE, ratio: float = GRID_RATIO) -> np.ndarray:
    """``n`` values log-spaced from ``lam_max`` down to ``lam_max * ratio``."""
    return np.geomspace(lam_max, lam_max * ratio, n)


def _base_logodds(y: np.ndarray) -> float:
    m = y.mean()
    return float(np.log(m / (1.0 - m)))


def _fit_path(d: _Design, grid: Sequence[float], tol: float, max_sweeps: int) -> list[LassoModel]:
    b0 = _base_logodds(d.y)
    beta = np.zeros(d.X.shape[1])
    models = []
    for lam in grid:
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        history = np.zeros(max_sweeps)
        b0, obj, sweeps = _cd_solve(d.X, d.y, float(lam), b0, beta, tol, KKT_TOL, max_sweeps, history)
        models.append(LassoModel(
            float(b0),
            {k: float(b) for k, b in zip(d.keys, beta) if b != 0.0},
            float(lam),
            {k: (float(m), float(s)) for k, m, s in zip(d.keys, d.mean, d.std)},
            float(obj),
            history[:sweeps].tolist(),
        ))
    return models


def fit_lasso_logistic(table: FeatureTable, lam: float, tol: float = DEFAULT_TOL,
                       max_sweeps: int = 100_000) -> LassoModel:
    return _fit_path(_design(table), [lam], tol, max_sweeps)[0]


def lasso_path(table: FeatureTable, grid: Sequence[float] | None = None, tol: float = DEFAULT_TOL,
               max_sweeps: int = 100_000) -> list[LassoModel]:
    """Warm-started fits along a descending grid (default: 50 values from lambda_max)."""
    d = _design(table)
    grid = lambda_grid(_lambda_max(d)) if grid is None else np.asarray(grid, dtype=np.float64)
    return _fit_path(d, grid, tol, max_sweeps)


def objective(model: LassoModel, table: FeatureTable) -> float:
    """Penalized objective of ``model`` on ``table`` (standardized with the model's stored statistics)."""
    eta = _linear(model, table)
    y = table.labels.astype(np.float64)
    penalty = model.lam * sum(abs(v) for v in model.coefficients.values())
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + penalty)


def _linear(model: LassoModel, table: FeatureTable) -> np.ndarray:
    eta = np.full(len(table), model.intercept)
    for key, coef in model.coefficients.items():
        if key not in table.keys:
            raise KeyError(f"feature {key!r} missing from table")
        mean, std = model.standardization[key]
        eta += coef * (table.column(key) - mean) / std
    return eta


def predict_proba(model: LassoModel, features: Mapping[str, float]) -> float:
    eta = model.intercept
    for key, coef in model.coefficients.items():
        if key not in features:
            raise KeyError(f"feature {key!r} missing")
        mean, std = model.standardization[key]
        eta += coef * (features[key] - mean) / std
    return float(expit(np.float64(eta)))


def predict_table(model: LassoModel, table: FeatureTable) -> np.ndarray:
    return expit(_linear(model, table))


def _auc_or_half(scores, labels) -> float:
    return roc_auc(scores, labels) if 0 < labels.sum() < len(labels) else 0.5


def select_lambda_cv(table: FeatureTable, folds: FoldPlan, grid: Sequence[float] | None = None,
                     fold: int | None = None, tol: float = DEFAULT_TOL):
    """Pick lambda by mean validation AUC, then refit.

    With ``fold`` set, only that fold's training and validation parts are used
    and the refit covers their union (its test part stays untouched). Without it,
    every fold of the plan contributes a validation AUC and the refit uses the
    whole table. Ties go to the larger lambda. Returns (lambda, model, selected keys).
    """
    if tuple(table.ids) != tuple(folds.ids):
        raise ShapeMismatchError("fold plan ids do not match the table rows")
    folds_used = range(folds.n_folds) if fold is None else [fold]
    if fold is None:
        refit_rows = np.arange(len(table))
    else:
        tr, va, _ = folds.indices(fold)
        refit_rows = np.sort(np.r_[tr, va])
    refit = table.subset(refit_rows)
    if grid is None:
        grid = lambda_grid(lambda_max(refit))
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(np.diff(grid) > 0):
        raise ValueError("lambda grid must be descending")

    aucs = np.zeros((len(folds_used), grid.size))
    for r, k in enumerate(folds_used):
        tr, va, _ = folds.indices(k)
        train, val = table.subset(tr), table.subset(va)
        for c, model in enumerate(_fit_path(_design(train), grid, tol, 100_000)):
            aucs[r, c] = _auc_or_half(predict_table(model, val), val.labels)
    mean_auc = aucs.mean(axis=0)
    best = 0
    for c in range(1, grid.size):
        if mean_auc[c] > mean_auc[best]:
            best = c
    model = _fit_path(_design(refit), grid[: best + 1], tol, 100_000)[-1]
    return float(grid[best]), model, model.selected
