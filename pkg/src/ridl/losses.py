"""Training losses: feature-bank de-correlation, cross-entropy, reconstruction, total.

The de-correlation loss uses a FIFO bank of (deep feature Z, radiomic feature
R) pairs. Entry i = 1 is the newest and carries weight w**i; weights are
normalized over the entries present. Each dimension is standardized under those
weights, so S is an exponentially weighted sample correlation between Z and R.

Gradients follow a stop-gradient convention: bank means and standard
deviations are constants, and only the newest ``batch_size`` Z entries receive
gradient.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientEntriesError, ShapeMismatchError

PROB_EPS = 1e-7
DEGENERATE_RTOL = 1e-12


@dataclass
class FeatureBank:
    capacity: int = 25
    decay: float = 0.9
    batch_size: int = 1
    warm_up: int = 0
    z_dim: int | None = None
    r_dim: int | None = None
    entries: deque = field(default_factory=deque)  # newest first
    iteration: int = 0  # pushes so far

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("bank capacity must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if not 1 <= self.batch_size <= self.capacity:
            raise ValueError("batch size must lie in [1, capacity]")
        if self.warm_up < 0:
            raise ValueError("warm_up must be >= 0")

    def __len__(self):
        return len(self.entries)

    @property
    def active(self) -> bool:
        """True once the warm-up iterations have elapsed."""
        return self.iteration > self.warm_up

    def push(self, z, r) -> "FeatureBank":
        z = np.array(z, dtype=np.float64).ravel()
        r = np.array(r, dtype=np.float64).ravel()
        if self.z_dim is None:
            self.z_dim, self.r_dim = z.size, r.size
        if z.size != self.z_dim or r.size != self.r_dim:
            raise ShapeMismatchError(
                f"bank holds ({self.z_dim}, {self.r_dim})-dim entries, got ({z.size}, {r.size})")
        self.entries.appendleft((z, r))
        if len(self.entries) > self.capacity:
            self.entries.pop()
        self.iteration += 1
        return self

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(Z, R) stacked newest first."""
        if not self.entries:
            raise InsufficientEntriesError("feature bank is empty")
        return (np.stack([e[0] for e in self.entries]), np.stack([e[1] for e in self.entries]))

    def copy(self) -> "FeatureBank":
        return FeatureBank(self.capacity, self.decay, self.batch_size, self.warm_up,
                           self.z_dim, self.r_dim, deque(self.entries), self.iteration)

    def with_newest(self, z_new) -> "FeatureBank":
        """Copy whose newest ``len(z_new)`` deep entries are replaced; R and older entries are kept."""
        z_new = np.atleast_2d(np.asarray(z_new, dtype=np.float64))
        if z_new.shape[0] > len(self.entries):
            raise InsufficientEntriesError("more replacement rows than bank entries")
        out = self.copy()
        for i, z in enumerate(z_new):
            if z.size != self.z_dim:
                raise ShapeMismatchError(f"expected {self.z_dim}-dim deep feature, got {z.size}")
            out.entries[i] = (z.copy(), out.entries[i][1])
        return out


def bank_push(bank: FeatureBank, z, r) -> FeatureBank:
    return bank.push(z, r)


def recency_weights(n: int, decay: float) -> np.ndarray:
    """Normalized weights w**i / sum_j w**j for i = 1 (newest) .. n."""
    raw = decay ** np.arange(1, n + 1, dtype=np.float64)
    return raw / raw.sum()


def _weighted_moments(x: np.ndarray, weights: np.ndarray):
    mean = weights @ x
    std = np.sqrt(weights @ (x - mean) ** 2)
    ok = std > DEGENERATE_RTOL * (1.0 + np.abs(mean))
    return mean, std, ok


@dataclass(frozen=True)
class BankStats:
    weights: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray
    z_ok: np.ndarray
    r_mean: np.ndarray
    r_std: np.ndarray
    r_ok: np.ndarray


def bank_stats(bank: FeatureBank) -> BankStats:
    Z, R = bank.arrays()
    if len(Z) < 2:
        raise InsufficientEntriesError(f"weighted correlation needs >= 2 entries, bank has {len(Z)}")
    w = recency_weights(len(Z), bank.decay)
    return BankStats(w, *_weighted_moments(Z, w), *_weighted_moments(R, w))


def _standardize(x, mean, std, ok):
    out = np.zeros_like(x)
    out[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
    return out


def weighted_correlation(bank: FeatureBank, stats: BankStats | None = None,
                         standardize: bool = True) -> np.ndarray:
    """dz x dr matrix S = sum_i w_i Z~_i^T R~_i with normalized recency weights.

    With ``standardize=False`` the raw entries are used as Z~ and R~ (for inputs
    that are already normalized). ``stats`` may be frozen from an earlier call.
    """
    stats = bank_stats(bank) if stats is None else stats
    Z, R = bank.arrays()
    if len(Z) != len(stats.weights):
        raise ShapeMismatchError("frozen statistics were taken on a bank of different size")
    if standardize:
        Z = _standardize(Z, stats.z_mean, stats.z_std, stats.z_ok)
        R = _standardize(R, stats.r_mean, stats.r_std, stats.r_ok)
    return (Z * stats.weights[:, None]).T @ R


def decorr_loss(bank: FeatureBank, stats: BankStats | None = None) -> float:
    """L1 norm of S; 0 during warm-up."""
    if not bank.active:
        return 0.0
    return float(np.abs(weighted_correlation(bank, stats)).sum())


def decorr_grad(bank: FeatureBank, stats: BankStats | None = None) -> np.ndarray:
    """d L_corr / d Z for the newest ``batch_size`` raw deep entries, shape (B, dz).

    Bank statistics are held constant and sign(0) = 0. Zero during warm-up.
    """
    nb = min(bank.batch_size, len(bank))
    if not bank.active:
        return np.zeros((nb, bank.z_dim or 0))
    stats = bank_stats(bank) if stats is None else stats
    S = weighted_correlation(bank, stats)
    _, R = bank.arrays()
    Rt = _standardize(R[:nb], stats.r_mean, stats.r_std, stats.r_ok)
    inv_std = np.where(stats.z_ok, 1.0 / np.where(stats.z_ok, stats.z_std, 1.0), 0.0)
    # dS_kj / dZ_ik = w_i R~_ij / sd_k
    return stats.weights[:nb, None] * (Rt @ np.sign(S).T) * inv_std[None, :]


def bce_loss(predictions, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(predictions, dtype=np.float64).ravel(), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != y.shape:
        raise ShapeMismatchError(f"{p.size} predictions for {y.size} labels")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def recon_loss(target_ct, target_mask, outputs: Sequence[tuple], alpha: float) -> float:
    """L_D1 + alpha * (L_D2 + L_D3 + L_D4), L_d = mean |c_d - c| + BCE(b_d, b).

    ``outputs`` holds one (ct, mask probability) pair per decoder, deepest
    supervision last.
    """
    c = np.asarray(target_ct, dtype=np.float64)
    b = np.asarray(target_mask, dtype=np.float64)
    if c.shape != b.shape:
        raise ShapeMismatchError("target CT and mask shapes differ")
    if len(outputs) != 4:
        raise ValueError(f"expected 4 decoder outputs, got {len(outputs)}")
    per = []
    for c_hat, b_hat in outputs:
        c_hat = np.asarray(c_hat, dtype=np.float64)
        b_hat = np.asarray(b_hat, dtype=np.float64)
        if c_hat.shape != c.shape or b_hat.shape != b.shape:
            raise ShapeMismatchError("decoder output shape differs from the target")
        per.append(float(np.mean(np.abs(c_hat - c))) + bce_loss(b_hat, b))
    return per[0] + alpha * (per[1] + per[2] + per[3])


def alpha_schedule(epoch: int, initial: float = 0.33, factor: float = 0.8, every: int = 10) -> float:
    """initial * factor ** (epoch // every), evaluated in exact rationals then rounded once."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    value = Fraction(repr(initial)) * Fraction(repr(factor)) ** (int(epoch) // every)
    return float(value)


@dataclass(frozen=True)
class LossWeights:
    w_corr: float = 2.0
    alpha: float = 0.33

    def __post_init__(self):
        if not self.w_corr >= 0:
            raise ValueError(f"w_corr must be >= 0, got {self.w_corr}")
        if not 0.0 < self.alpha <= 0.33:
            raise ValueError(f"alpha must lie in (0, 0.33], got {self.alpha}")


def total_loss(l_cls: float, l_corr: float, l_rec: float, weights: LossWeights = LossWeights()) -> float:
    if not all(math.isfinite(v) for v in (l_cls, l_corr, l_rec)):
        raise ValueError("loss components must be finite")
    return l_cls + weights.w_corr * l_corr + l_rec


LOG_FIELDS = ("epoch", "l_cls", "l_corr", "l_rec", "total", "max_abs_s")


def write_training_log(rows: Iterable[dict], path) -> Path:
    """One tab-separated line per iteration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row["epoch"], *(repr(float(row[k])) for k in LOG_FIELDS[1:])])
    return path


def read_training_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in LOG_FIELDS[1:]}} for r in rows]
