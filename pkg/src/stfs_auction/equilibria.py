"""Equilibrium bidding for single-object sealed-bid auctions.

The FPSB symmetric equilibrium is

    b(v) = v - int_{v_lo}^{v} F(t)^(K-1) dt / F(v)^(K-1),

computed here three ways: adaptive quadrature per point, a vectorised
cumulative Gauss-Legendre sweep for many points, and the truncate-and-average
Monte Carlo estimator that recovers E[Y | Y <= v] from sampled opponents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from . import valuation
from .errors import (
    DegenerateDistributionError,
    DomainError,
    InsufficientSampleError,
    ShapeError,
    ValidationError,
)
from .valuation import ValuationMatrix, ValuationParams

QUAD_RTOL = 1e-8
MIN_COLUMNS = 30
MAE_FLOOR_DB = -120.0
BRIDGE_BINS = 40

_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class BneCurve:
    grid: np.ndarray
    bids: np.ndarray
    K: int

    def __post_init__(self):
        if np.shape(self.grid) != np.shape(self.bids):
            raise ShapeError("grid and bids must have equal length")


@dataclass(frozen=True)
class RevenueEstimate:
    mean: float
    std_error: float
    replications: int


def spsb_bid(v: float) -> float:
    """Truthful bid; weakly dominant in a second-price auction."""
    return v


def _check_K(K: int):
    if K < 2:
        raise DomainError(f"equilibrium shading needs K >= 2 bidders, got K={K}")


def _breakpoints(params: ValuationParams, lo: float, hi: float):
    kink = params.alpha * params.b
    return [kink] if lo < kink < hi and params.beta > 0 else []


def fpsb_bne_general(cdf_fn: Callable[[float], float], lower: float, K: int, v: float,
                     points=None) -> float:
    """FPSB equilibrium bid for any scalar valuation CDF with cdf_fn(lower) = 0."""
    _check_K(K)
    if not math.isfinite(v):
        raise DomainError("v must be finite")
    if v < lower:
        raise DomainError(f"v={v} lies below the support lower bound {lower}")
    if v == lower:
        return float(lower)
    Fv = float(cdf_fn(v))
    if Fv <= 0.0:
        raise DegenerateDistributionError(f"cdf_fn({v}) = 0 above the lower bound {lower}")
    m = K - 1
    num, _ = quad(lambda t: float(cdf_fn(t)) ** m, lower, v, epsabs=0.0, epsrel=QUAD_RTOL,
                  limit=200, points=points)
    denom = Fv**m
    if denom == 0.0:
        # F(v)^(K-1) underflows just above the lower bound; the shading there is nil
        return float(lower)
    return float(min(max(v - num / denom, lower), v))


def fpsb_bne_analytic(params: ValuationParams, K: int, v: float) -> float:
    """Equilibrium bid under the composite valuation CDF."""
    pts = _breakpoints(params, params.lower, v) or None
    return fpsb_bne_general(lambda t: valuation.cdf(params, t), params.lower, K, v, points=pts)


def fpsb_bne_curve(params: ValuationParams, K: int, v) -> np.ndarray:
    """Vectorised equilibrium bids at many valuations.

    The numerator integral is accumulated over a fine knot set (query points,
    the CDF kink, and a uniform base mesh) with 16-point Gauss-Legendre per
    knot interval, so every query point sits exactly on a knot.
    """
    _check_K(K)
    v = np.asarray(v, dtype=float)
    lower = params.lower
    if np.any(v < lower) or not np.all(np.isfinite(v)):
        raise DomainError("valuations must be finite and >= the support lower bound")
    flat = v.ravel()
    top = max(float(flat.max(initial=lower)), lower)
    base = np.linspace(lower, max(top, lower + 1e-12), 2049)
    knots = np.unique(np.concatenate([base, flat, _breakpoints(params, lower, top)]))
    left, right = knots[:-1], knots[1:]
    half = 0.5 * (right - left)
    t = left[:, None] + half[:, None] * (_GL16_X[None, :] + 1.0)
    m = K - 1
    seg = half * ((valuation.cdf(params, t) ** m) @ _GL16_W)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    num = cum[np.searchsorted(knots, flat)]
    denom = valuation.cdf(params, flat) ** m
    with np.errstate(divide="ignore", invalid="ignore"):
        bids = np.where(denom > 0, flat - num / denom, lower)
    bids = np.clip(bids, lower, flat)
    return bids.reshape(v.shape)


def _opponent_values(values, k: int) -> np.ndarray:
    V = values.v if isinstance(values, ValuationMatrix) else np.asarray(values, dtype=float)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValidationError("need a K x I matrix with K >= 2")
    if not 0 <= k < V.shape[0]:
        raise IndexError(f"node index {k} out of range for K={V.shape[0]}")
    return np.delete(V, k, axis=0)


def fpsb_bne_numeric(values, k: int, v_k: float, min_columns: int = MIN_COLUMNS) -> float:
    """Monte Carlo FPSB bid for node k from sampled opponent valuations.

    Opponent draws are read auction by auction, all draws above v_k are
    discarded, the survivors are regrouped into complete auctions of K-1
    opponents (a trailing partial group is dropped), and the mean of each
    group's maximum estimates E[Y | Y <= v_k].
    """
    opp = _opponent_values(values, k)
    k_opp = opp.shape[0]
    seq = opp.ravel(order="F")
    kept = seq[seq <= v_k]
    cols = kept.size // k_opp
    if cols < min_columns:
        raise InsufficientSampleError(
            f"only {cols} complete opponent groups below v={v_k} (need {min_columns})")
    grouped = kept[: cols * k_opp].reshape(cols, k_opp)
    return float(grouped.max(axis=1).mean())


def bne_curve_analytic(params: ValuationParams, K: int, grid) -> BneCurve:
    grid = np.asarray(grid, dtype=float)
    return BneCurve(grid, fpsb_bne_curve(params, K, grid), K)


def bne_curve_numeric(values, grid, k: int = 0, min_columns: int = MIN_COLUMNS) -> BneCurve:
    """Numeric curve over a grid; points with too few samples are NaN."""
    grid = np.asarray(grid, dtype=float)
    bids = np.full(grid.shape, np.nan)
    for i, v in enumerate(grid):
        try:
            bids[i] = fpsb_bne_numeric(values, k, float(v), min_columns)
        except InsufficientSampleError:
            pass
    K = values.K if isinstance(values, ValuationMatrix) else np.shape(values)[0]
    return BneCurve(grid, bids, K)


def order_statistic(samples, p: int) -> float:
    """The p-th largest element (p = 1 is the maximum)."""
    xs = np.asarray(samples, dtype=float).ravel()
    if not 1 <= p <= xs.size:
        raise IndexError(f"rank p={p} outside 1..{xs.size}")
    return float(np.partition(xs, xs.size - p)[xs.size - p])


def top_two(V: np.ndarray):
    """Column-wise largest and second-largest entries of a K x I matrix."""
    srt = np.partition(V, V.shape[0] - 2, axis=0)
    return srt[-1], srt[-2]


def expected_revenue(params: ValuationParams, K: int, mechanism: str, replications: int,
                     seed: int) -> RevenueEstimate:
    """Monte Carlo gateway revenue for a symmetric single-slot auction.

    SPSB revenue is the second-highest value; FPSB revenue is the
    equilibrium bid of the highest value.
    """
    _check_K(K)
    if replications < 100:
        raise ValidationError("expected_revenue needs at least 100 replications")
    mech = str(mechanism).upper()
    draws = valuation.sample(params, K, replications, seed)
    first, second = top_two(draws.v)
    if mech == "SPSB":
        rev = second
    elif mech == "FPSB":
        rev = fpsb_bne_curve(params, K, first)
    else:
        raise ValidationError(f"expected_revenue supports FPSB or SPSB, not {mechanism!r}")
    return RevenueEstimate(float(rev.mean()), float(rev.std(ddof=1) / math.sqrt(rev.size)),
                           replications)


def binned_means(x, y, bins: int = BRIDGE_BINS, lo=None, hi=None):
    """Mean x and mean y per equal-width x-bin, empty bins dropped."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sx = np.bincount(idx, weights=x, minlength=bins)
    sy = np.bincount(idx, weights=y, minlength=bins)
    keep = counts > 0
    return sx[keep] / counts[keep], sy[keep] / counts[keep], counts[keep]


def order_statistic_bridge(values, bins: int = BRIDGE_BINS) -> BneCurve:
    """Binned mean of SPSB second-price payments against the winner's value.

    Each column of ``values`` is one truthful SPSB auction; the curve
    approximates E[X_(2) | X_(1) = v], which equals the FPSB bid.
    """
    V = values.v if isinstance(values, ValuationMatrix) else np.asarray(values, dtype=float)
    first, second = top_two(V)
    gx, gy, _ = binned_means(first, second, bins)
    return BneCurve(gx, gy, V.shape[0])


def mae_db(reference: BneCurve, candidate: BneCurve) -> float:
    """Scale-free mean absolute error in decibels.

    Both curves are divided by max(reference.bids); grid points where either
    curve is NaN are skipped.  Zero error is reported as -120 dB.
    """
    return float(10.0 * math.log10(max(normalized_mae(reference, candidate), 1e-12)))


def normalized_mae(reference: BneCurve, candidate: BneCurve) -> float:
    if np.shape(reference.grid) != np.shape(candidate.grid) or not np.allclose(
            reference.grid, candidate.grid, rtol=0, atol=1e-12):
        raise ShapeError("curves must share the same grid")
    ok = np.isfinite(reference.bids) & np.isfinite(candidate.bids)
    if not ok.any():
        raise ShapeError("curves share no finite grid points")
    scale = float(np.nanmax(np.abs(reference.bids)))
    if scale == 0:
        scale = 1.0
    return float(np.mean(np.abs(reference.bids[ok] - candidate.bids[ok])) / scale)
