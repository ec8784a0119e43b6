"""Curve-recovery and decision metrics for simulated campaigns.

Distances between the true and estimated MTD curves follow the signed
minimum-distance convention: positive when the estimated curve passes
above the true point, negative below.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import MTDCurve


def _est_points(est_curve: MTDCurve, n_disc: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(est_curve.x_lo, est_curve.x_hi, n_disc)
    ys = np.clip(est_curve.y_at(xs), 0.0, 1.0)
    return xs, ys


def signed_distance(true_curve: MTDCurve, est_curve: MTDCurve,
                    x: float, y: float, n_disc: int = 2001) -> float:
    """Signed minimum distance from the true-curve point (x, y) to the
    estimated curve, discretized at n_disc points.

    The sign is that of y' - y where (x, y') lies on the estimated curve.
    """
    y_prime = est_curve.y_at(x)
    xs, ys = _est_points(est_curve, n_disc)
    d = float(np.min(np.hypot(x - xs, y - ys)))
    return float(np.sign(y_prime - y)) * d


def curve_distance_profile(true_curve: MTDCurve, est_curve: MTDCurve,
                           grid_n: int = 101, n_disc: int = 2001) -> np.ndarray:
    """signed_distance evaluated at grid_n equally spaced true-curve points."""
    gx, gy = true_curve.grid(grid_n)
    xs, ys = _est_points(est_curve, n_disc)
    d = np.min(np.hypot(gx[:, None] - xs[None, :], gy[:, None] - ys[None, :]), axis=1)
    sign = np.sign(est_curve.y_at(gx) - gy)
    return sign * d


def pointwise_bias(true_curve: MTDCurve, est_curves: Sequence[MTDCurve],
                   grid_n: int = 101) -> np.ndarray:
    """Mean signed distance per true-curve grid point over the replicates."""
    if len(est_curves) == 0:
        raise ValueError("need at least one estimated curve")
    acc = np.zeros(grid_n)
    for est in est_curves:
        acc += curve_distance_profile(true_curve, est, grid_n)
    return acc / len(est_curves)


def percent_selection(true_curve: MTDCurve, est_curves: Sequence[MTDCurve],
                      p: float, grid_n: int = 101) -> np.ndarray:
    """Per grid point, the fraction of replicates whose estimated curve
    passes within 100p% of that point's distance from the origin."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0,1)")
    if len(est_curves) == 0:
        raise ValueError("need at least one estimated curve")
    gx, gy = true_curve.grid(grid_n)
    radius = p * np.hypot(gx, gy)
    hits = np.zeros(grid_n)
    for est in est_curves:
        d = np.abs(curve_distance_profile(true_curve, est, grid_n))
        hits += (d <= radius)
    return hits / len(est_curves)


def estimate_power(max_probs: Sequence[float], delta_u: float) -> float:
    """Fraction of replicates whose maximal exceedance probability passes
    delta_u (Bayesian power under alternatives, type-I error under nulls)."""
    arr = np.asarray(list(max_probs), dtype=float)
    if arr.size == 0:
        raise ValueError("no replicate results")
    return float(np.mean(arr > delta_u))
