"""Online scoring and automatic threshold selection.

Scores are the absolute last-timestep residual of the two-stage
reconstruction, one per variate per stride-1 window. The alarm threshold is
extrapolated from the tail of the training-score distribution: a generalized
Pareto distribution is fitted (Grimshaw maximum likelihood, method-of-moments
fallback) to the excesses over an initial empirical quantile.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import nn
from .data import WindowInstance
from .noisegraph import (NoiseModule, batch_graph_messages,
                         complete_graph_messages, noise_forward)
from .temporal import TemporalModule
from .training import stage1_outputs


@dataclass(frozen=True)
class ScoreSeries:
    """Per-variate anomaly scores, one column per window end index."""

    scores: np.ndarray       # (N, T') nonnegative
    end_indices: np.ndarray  # (T',) global end index of each window

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape[1] != self.end_indices.size:
            raise ValueError("scores must be N x T' matching end_indices")


@dataclass(frozen=True)
class PotThreshold:
    """Fitted tail model and the resulting alarm threshold."""

    t0: float        # initial empirical quantile at `level`
    gamma: float     # GPD shape
    sigma: float     # GPD scale
    z_q: float       # final threshold
    n: int           # total number of scores
    n_excesses: int
    level: float
    q: float
    method: str      # "grimshaw", "moments", or "empirical"

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("GPD scale must be positive")
        if self.z_q < self.t0:
            raise ValueError("final threshold must not fall below t0")


def score_stream(windows: list[WindowInstance], temporal_module: TemporalModule,
                 noise_module: NoiseModule | None, graph: str = "window",
                 y1: np.ndarray | None = None) -> ScoreSeries:
    """Score windows in arrival order.

    Each window is an independent computation (no cross-window state), so
    batch scoring equals one-by-one online scoring. ``noise_module=None``
    scores from the stage-1 residual alone; ``y1`` may carry precomputed
    stage-1 reconstructions for the same window list.
    """
    if not windows:
        raise ValueError("no windows to score")
    shorts = np.stack([w.short for w in windows])
    if y1 is None:
        y1 = stage1_outputs(temporal_module, windows)
    residual = shorts - y1
    if noise_module is not None:
        if graph == "window":
            messages = batch_graph_messages(residual, shorts)
        elif graph == "complete":
            messages = complete_graph_messages(shorts)
        else:
            raise ValueError(f"unknown graph mode {graph!r}")
        with nn.no_grad():
            y2 = noise_forward(messages, noise_module).data.astype(np.float64)
        residual = residual - y2
    scores = np.abs(residual[:, :, -1]).T  # (N, T')
    ends = np.array([w.end_index for w in windows], dtype=np.int64)
    return ScoreSeries(scores=np.ascontiguousarray(scores), end_indices=ends)


# ---------------------------------------------------------------------------
# POT / generalized Pareto tail fit
# ---------------------------------------------------------------------------

def _gpd_log_likelihood(y: np.ndarray, gamma: float, sigma: float) -> float:
    n = y.size
    if sigma <= 0.0:
        return -np.inf
    if abs(gamma) < 1e-12:
        return -n * math.log(sigma) - float(y.sum()) / sigma
    z = 1.0 + gamma * y / sigma
    if np.any(z <= 0.0):
        return -np.inf
    return -n * math.log(sigma) - (1.0 + 1.0 / gamma) * float(np.log(z).sum())


def _grimshaw(y: np.ndarray) -> tuple[float, float] | None:
    """Maximum-likelihood GPD fit via Grimshaw's reduction to a scalar root.

    Solves u(x)*v(x) = 1 with u = mean(1/(1+x*y)), v = 1 + mean(log(1+x*y))
    over x in (-1/max(y), inf); each root gives gamma = v - 1, sigma = gamma/x.
    Returns the candidate with the best likelihood, or None if no usable root.
    """
    ymax, ymean, ymin = float(y.max()), float(y.mean()), float(y.min())
    if ymax <= 0.0:
        return None

    def u(x):
        return float(np.mean(1.0 / (1.0 + x * y)))

    def v(x):
        return 1.0 + float(np.mean(np.log1p(x * y)))

    def w(x):
        return u(x) * v(x) - 1.0

    eps = 1e-8 / ymean
    lo = -1.0 / ymax + eps
    hi = 2.0 * (ymean - ymin) / (ymin * ymin + 1e-30) if ymin > 0 else 2.0 / ymean
    hi = max(hi, 2.0 / ymean)

    roots: list[float] = []
    neg_grid = np.linspace(lo, -eps, 64)
    # the positive branch can span many decades, so sample it logarithmically
    pos_grid = np.geomspace(eps, hi, 64) if eps < hi else np.array([])
    for grid in (neg_grid, pos_grid):
        if grid.size < 2 or not grid[0] < grid[-1]:
            continue
        vals = np.array([w(x) for x in grid])
        sign_change = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
        for i in sign_change:
            try:
                roots.append(float(brentq(w, grid[i], grid[i + 1], xtol=1e-14)))
            except (ValueError, RuntimeError):
                continue

    best: tuple[float, float] | None = None
    best_ll = _gpd_log_likelihood(y, 0.0, ymean)  # exponential baseline
    if np.isfinite(best_ll):
        best = (0.0, ymean)
    for x in roots:
        gamma = v(x) - 1.0
        if abs(x) < 1e-30:
            continue
        sigma = gamma / x
        ll = _gpd_log_likelihood(y, gamma, sigma)
        if ll > best_ll:
            best_ll = ll
            best = (gamma, sigma)
    return best


def _moments_fit(y: np.ndarray) -> tuple[float, float]:
    mean = float(y.mean())
    var = float(y.var())
    if var <= 0.0:
        return 0.0, max(mean, 1e-12)
    gamma = 0.5 * (1.0 - mean * mean / var)
    sigma = mean * (1.0 - gamma)
    if sigma <= 0.0:
        return 0.0, max(mean, 1e-12)
    return gamma, sigma


def pot_fit(scores: np.ndarray, level: float = 0.99, q: float = 0.001
            ) -> PotThreshold:
    """Fit the peaks-over-threshold tail model to a flattened score sample."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size < 100:
        raise ValueError("need at least 100 scores for a tail fit")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if not 0.0 < q < 1.0 - level:
        raise ValueError("q must lie in (0, 1 - level)")

    n = s.size
    t0 = float(np.quantile(s, level))
    excesses = s[s > t0] - t0
    nt = excesses.size

    if nt < 10:
        warnings.warn(f"only {nt} excesses above the initial threshold; falling "
                      "back to the empirical (1-q)-quantile", stacklevel=2)
        zq = float(np.quantile(s, 1.0 - q))
        return PotThreshold(t0=min(t0, zq), gamma=0.0, sigma=1.0, z_q=zq,
                            n=n, n_excesses=nt, level=level, q=q,
                            method="empirical")

    fit = _grimshaw(excesses)
    if fit is not None:
        gamma, sigma = fit
        method = "grimshaw"
    else:
        gamma, sigma = _moments_fit(excesses)
        method = "moments"

    ratio = q * n / nt
    if abs(gamma) < 1e-6:
        zq = t0 - sigma * math.log(ratio)
    else:
        zq = t0 + (sigma / gamma) * (ratio ** (-gamma) - 1.0)
    zq = max(zq, t0)  # tail extrapolation never relaxes below the initial quantile
    return PotThreshold(t0=t0, gamma=gamma, sigma=sigma, z_q=zq, n=n,
                        n_excesses=nt, level=level, q=q, method=method)


def pot_fit_per_variate(scores: np.ndarray, level: float = 0.99,
                        q: float = 0.001) -> list[PotThreshold]:
    """Independent tail fit per variate row (optional alternative to pooling)."""
    return [pot_fit(row, level=level, q=q) for row in np.asarray(scores)]


def label(scores: ScoreSeries, threshold: PotThreshold | list[PotThreshold]
          ) -> np.ndarray:
    """Binary labels: score >= threshold (shared or per-variate)."""
    if isinstance(threshold, PotThreshold):
        return (scores.scores >= threshold.z_q).astype(np.int8)
    if len(threshold) != scores.scores.shape[0]:
        raise ValueError("need one threshold per variate")
    zq = np.array([t.z_q for t in threshold])
    return (scores.scores >= zq[:, None]).astype(np.int8)


# ---------------------------------------------------------------------------
# report I/O
# ---------------------------------------------------------------------------

def save_threshold_report(threshold: PotThreshold, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "t0": threshold.t0, "gamma": threshold.gamma, "sigma": threshold.sigma,
        "z_q": threshold.z_q, "n": threshold.n, "n_excesses": threshold.n_excesses,
        "level": threshold.level, "q": threshold.q, "method": threshold.method,
    }
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in fields.items():
            fh.write(f"{k} = {v}\n")
