"""Two-factor private valuations: V = alpha * V_H + beta * V_G.

V_H is a uniform hypothesis-priority draw on [a, b] and V_G a Rayleigh
channel-strength draw with scale sigma.  The two factors are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

from .errors import DomainError, ValidationError

_SQRT2 = math.sqrt(2.0)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)

# spawn-key components for the per-node substreams
_HYPOTHESIS_STREAM = 0
_CHANNEL_STREAM = 1


@dataclass(frozen=True)
class ValuationParams:
    alpha: float = 1.0
    beta: float = 1.0
    a: float = 0.0
    b: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "a", "b", "sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValidationError("alpha + beta must be positive")
        if not self.b > self.a:
            raise ValidationError(f"need b > a, got a={self.a}, b={self.b}")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")

    @property
    def lower(self) -> float:
        """Lower bound of the composite support, alpha * a."""
        return self.alpha * self.a

    @property
    def upper(self) -> float:
        """Effective upper bound: alpha * b plus a 12-sigma Rayleigh tail."""
        return self.alpha * self.b + 12.0 * self.beta * self.sigma

    def scaled(self, c: float) -> "ValuationParams":
        return ValuationParams(self.alpha * c, self.beta * c, self.a, self.b, self.sigma)


@dataclass(frozen=True)
class ValuationSample:
    v_h: float
    v_g: float
    v: float


@dataclass(frozen=True)
class ValuationMatrix:
    """K x I valuation draws stored as parallel arrays (rows are nodes)."""

    params: ValuationParams
    v_h: np.ndarray
    v_g: np.ndarray
    v: np.ndarray
    seed: int

    @property
    def K(self) -> int:
        return self.v.shape[0]

    @property
    def I(self) -> int:  # noqa: E743
        return self.v.shape[1]

    def __getitem__(self, idx) -> ValuationSample:
        k, i = idx
        return ValuationSample(float(self.v_h[k, i]), float(self.v_g[k, i]), float(self.v[k, i]))


def node_generator(seed: int, node: int, stream: int) -> np.random.Generator:
    """Counter-based substream for one (node, factor) pair under a master seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(node), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def composite(params: ValuationParams, v_h, v_g):
    return params.alpha * np.asarray(v_h) + params.beta * np.asarray(v_g)


def sample(params: ValuationParams, K: int, I: int, seed: int) -> ValuationMatrix:
    """Draw a K x I matrix of i.i.d. valuations.

    Row k only depends on (seed, k); column i is the i-th draw of that row's
    substreams, so enlarging I keeps the existing prefix unchanged.
    """
    if K < 1 or I < 1:
        raise ValidationError(f"K and I must be >= 1, got K={K}, I={I}")
    v_h = np.empty((K, I))
    v_g = np.empty((K, I))
    for k in range(K):
        v_h[k] = node_generator(seed, k, _HYPOTHESIS_STREAM).uniform(params.a, params.b, I)
        v_g[k] = node_generator(seed, k, _CHANNEL_STREAM).rayleigh(params.sigma, I)
    return ValuationMatrix(params, v_h, v_g, composite(params, v_h, v_g), int(seed))


def _check_finite(v):
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("valuation argument must be finite")
    return arr


def cdf(params: ValuationParams, v):
    """Exact CDF of the composite valuation.

    For v >= alpha*b this is the familiar erf closed form
        1 + (beta*sigma / ((b-a)*alpha)) * sqrt(pi/2) * [erf(u_b) - erf(u_a)],
    u_x = (v - alpha*x) / (sqrt(2)*beta*sigma).  Below alpha*b the hypothesis
    integral is cut at h = v/alpha, where the channel term would need a
    negative gain, which gives the linear-minus-erf branch.

    Accepts scalars or arrays; the result is clamped to [0, 1].
    """
    x = _check_finite(v)
    p = params
    if p.alpha == 0:
        out = np.where(x > 0, -np.expm1(-0.5 * (np.maximum(x, 0) / (p.beta * p.sigma)) ** 2), 0.0)
    elif p.beta == 0:
        out = (x / p.alpha - p.a) / (p.b - p.a)
    else:
        s = _SQRT2 * p.beta * p.sigma
        c = p.beta * p.sigma * math.sqrt(math.pi / 2) / (p.alpha * (p.b - p.a))
        u_a = np.maximum(x - p.alpha * p.a, 0.0) / s
        u_b = np.maximum(x - p.alpha * p.b, 0.0) / s
        # erf(u_a) - erf(u_b) via erfc when both are in the tail
        diff = np.where(u_b > 1.0, erfc(u_b) - erfc(u_a), erf(u_a) - erf(u_b))
        linear = (np.clip(x / p.alpha, p.a, p.b) - p.a) / (p.b - p.a)
        out = linear - c * diff
        out = np.where(x <= p.lower, 0.0, out)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def _rayleigh_pdf(g, sigma):
    g = np.maximum(g, 0.0)
    return g / sigma**2 * np.exp(-0.5 * (g / sigma) ** 2)


def pdf(params: ValuationParams, v):
    """Density of the composite valuation by 256-point Gauss-Legendre quadrature.

    Integrates f_H(h) * f_G((v - alpha*h)/beta) / beta over the part of
    [a, b] where the channel argument is nonnegative.
    """
    x = _check_finite(v)
    p = params
    if p.alpha == 0:
        out = _rayleigh_pdf(x / p.beta, p.sigma) / p.beta
    elif p.beta == 0:
        inside = (x >= p.alpha * p.a) & (x <= p.alpha * p.b)
        out = np.where(inside, 1.0 / (p.alpha * (p.b - p.a)), 0.0)
    else:
        flat = np.atleast_1d(x).astype(float)
        hi = np.clip(flat / p.alpha, p.a, p.b)
        half = 0.5 * (hi - p.a)
        h = p.a + half[:, None] * (_GL_NODES[None, :] + 1.0)
        integrand = _rayleigh_pdf((flat[:, None] - p.alpha * h) / p.beta, p.sigma) / p.beta
        out = half * (integrand @ _GL_WEIGHTS) / (p.b - p.a)
        out = np.where(flat <= p.lower, 0.0, out).reshape(np.shape(x))
    return float(out) if np.ndim(out) == 0 else out


def empirical_cdf(samples, at):
    """Right-continuous empirical CDF of ``samples`` evaluated at ``at``."""
    xs = np.sort(np.ravel(samples))
    return np.searchsorted(xs, at, side="right") / xs.size


def ks_distance(params: ValuationParams, samples) -> float:
    """Sup distance between the analytic CDF and the empirical CDF of samples."""
    xs = np.sort(np.ravel(samples))
    n = xs.size
    f = cdf(params, xs)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max(np.max(np.abs(f - hi)), np.max(np.abs(f - lo))))
