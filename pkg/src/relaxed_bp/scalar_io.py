"""Scalar estimation functions for the input and output nodes.

Input side: posterior mean/variance of ``x ~ prior`` observed as ``q = x + N(0, mu)``.
Output side: the Gaussian-smoothed likelihood ``p(y | zhat, mu)`` and the
negative derivatives ``D1, D2`` of its log with respect to ``zhat``.

Every function broadcasts over numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp

from .errors import (
    ConfigError,
    DegeneratePosterior,
    LikelihoodUnderflow,
    NonPositiveVariance,
)

D2_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)
_CHUNK_ELEMS = 1 << 21


@dataclass(frozen=True)
class QuadratureSpec:
    """Uniform-grid trapezoid rule on ``center +/- truncation_radius * sd``."""

    node_count: int = 2001
    truncation_radius: float = 8.0

    def __post_init__(self):
        if int(self.node_count) != self.node_count or self.node_count < 21:
            raise ValueError("node_count must be an integer >= 21")
        if not self.truncation_radius >= 6:
            raise ValueError("truncation_radius must be >= 6")

    def standard_normal_rule(self):
        """Nodes ``t`` and weights ``w`` with ``sum(w * f(t)) ~ E f(N(0,1))``.

        Weights are renormalized so that constants integrate exactly.
        """
        t = np.linspace(-self.truncation_radius, self.truncation_radius, self.node_count)
        w = np.exp(-0.5 * t * t)
        w[0] *= 0.5
        w[-1] *= 0.5
        return t, w / w.sum()


DEFAULT_QUAD = QuadratureSpec()


def _check_mu(mu, allow_inf=False):
    mu = np.asarray(mu, dtype=float)
    bad = ~(mu > 0)
    if not allow_inf:
        bad |= ~np.isfinite(mu)
    if np.any(bad):
        raise NonPositiveVariance(f"variance must be positive and finite, got {mu[bad].ravel()[:3]}")
    return mu


def _out(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


# --------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorModel:
    """Base class; subclasses define ``mean``, ``variance`` and the moments."""

    kind = "abstract"

    @property
    def second_moment(self) -> float:
        return self.variance + self.mean ** 2

    def components(self):
        """Gaussian-mixture view ``[(weight, mean, variance), ...]``.

        Point masses appear with variance 0.
        """
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError

    def to_record(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(PriorModel):
    mean: float = 0.0
    variance: float = 1.0
    kind = "gaussian"

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise ValueError("Gaussian prior needs a positive finite variance")
        if not math.isfinite(self.mean):
            raise ValueError("Gaussian prior mean must be finite")

    def components(self):
        return [(1.0, self.mean, self.variance)]

    def sample(self, rng, size):
        return self.mean + math.sqrt(self.variance) * rng.standard_normal(size)

    def to_record(self):
        return {"kind": self.kind, "mean": self.mean, "variance": self.variance}


@dataclass(frozen=True)
class GaussBernoulli(PriorModel):
    """Zero w.p. ``1 - rho``, ``N(0, on_variance)`` w.p. ``rho``.

    ``on_variance`` defaults to ``1/rho`` so the prior has unit variance.
    """

    rho: float = 0.1
    on_variance: float | None = None
    kind = "gauss-bernoulli"

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.on_variance is None:
            object.__setattr__(self, "on_variance", 1.0 / self.rho)
        if not (self.on_variance > 0 and math.isfinite(self.on_variance)):
            raise ValueError("on_variance must be positive and finite")

    @property
    def mean(self) -> float:
        return 0.0

    @property
    def variance(self) -> float:
        return self.rho * self.on_variance

    def components(self):
        comps = [(self.rho, 0.0, self.on_variance)]
        if self.rho < 1:
            comps.insert(0, (1.0 - self.rho, 0.0, 0.0))
        return comps

    def sample(self, rng, size):
        on = rng.random(size) < self.rho
        return np.where(on, math.sqrt(self.on_variance) * rng.standard_normal(size), 0.0)

    def to_record(self):
        return {"kind": self.kind, "rho": self.rho, "on_variance": self.on_variance}


@dataclass(frozen=True)
class Discrete(PriorModel):
    values: tuple = (-1.0, 1.0)
    weights: tuple = (0.5, 0.5)
    kind = "discrete"

    def __post_init__(self):
        v = tuple(float(a) for a in self.values)
        w = tuple(float(a) for a in self.weights)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)
        if len(v) == 0 or len(v) != len(w):
            raise ValueError("values and weights must be non-empty and equal length")
        if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if not all(math.isfinite(x) for x in v):
            raise ValueError("atom values must be finite")

    @property
    def mean(self) -> float:
        return math.fsum(a * p for a, p in zip(self.values, self.weights))

    @property
    def variance(self) -> float:
        m = self.mean
        return math.fsum(p * (a - m) ** 2 for a, p in zip(self.values, self.weights))

    def components(self):
        return [(p, a, 0.0) for a, p in zip(self.values, self.weights) if p > 0]

    def sample(self, rng, size):
        return rng.choice(np.asarray(self.values), size=size, p=np.asarray(self.weights))

    def to_record(self):
        return {"kind": self.kind, "values": list(self.values), "weights": list(self.weights)}


def _gaussian_moments(q, mu, m0, v0):
    fin = np.isfinite(mu)
    muf = np.where(fin, mu, 1.0)
    mean = np.where(fin, (q * v0 + m0 * muf) / (v0 + muf), m0)
    var = np.where(fin, v0 * muf / (v0 + muf), v0)
    return mean, var


def _gauss_bernoulli_moments(q, mu, rho, v1):
    if rho >= 1.0:
        return _gaussian_moments(q, mu, 0.0, v1)
    fin = np.isfinite(mu)
    muf = np.where(fin, mu, 1.0)
    s1 = v1 + muf
    # log-odds of the "on" component given q
    llr = math.log(rho / (1.0 - rho)) + 0.5 * np.log(muf / s1) + 0.5 * q * q * v1 / (muf * s1)
    p_on = expit(llr)
    m1 = q * v1 / s1
    mean = p_on * m1
    var = p_on * (v1 * muf / s1) + p_on * (1.0 - p_on) * m1 * m1
    return np.where(fin, mean, 0.0), np.where(fin, var, rho * v1)


def _discrete_moments(q, mu, values, weights):
    a = np.asarray(values)
    logw = np.log(np.asarray(weights))
    fin = np.isfinite(mu)
    muf = np.where(fin, mu, 1.0)
    qe = np.asarray(q)[..., None]
    logits = np.where(fin[..., None], -0.5 * (qe - a) ** 2 / muf[..., None], 0.0) + logw
    post = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    mean = np.sum(post * a, axis=-1)
    var = np.sum(post * (a - mean[..., None]) ** 2, axis=-1)
    return mean, var


def posterior_moments(q, mu, prior: PriorModel):
    """Posterior mean and variance of ``x`` given ``q = x + N(0, mu)``.

    ``mu = inf`` is accepted and means "no observation" (prior moments).
    """
    mu = _check_mu(mu, allow_inf=True)
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("q must be finite")
    q, mu = np.broadcast_arrays(q, mu)
    if isinstance(prior, Gaussian):
        mean, var = _gaussian_moments(q, mu, prior.mean, prior.variance)
    elif isinstance(prior, GaussBernoulli):
        mean, var = _gauss_bernoulli_moments(q, mu, prior.rho, prior.on_variance)
    elif isinstance(prior, Discrete):
        mean, var = _discrete_moments(q, mu, prior.values, prior.weights)
    else:
        return posterior_moments_quadrature(q, mu, prior)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise DegeneratePosterior("non-finite posterior moments")
    return _out(mean), _out(np.maximum(var, 0.0))


def posterior_mean_derivative(q, mu, prior: PriorModel):
    """d/dq of the posterior mean, using dF/dq = E_in / mu."""
    _, var = posterior_moments(q, mu, prior)
    return _out(np.asarray(var) / np.asarray(mu, dtype=float))


def posterior_moments_quadrature(q, mu, prior: PriorModel, quad: QuadratureSpec = DEFAULT_QUAD):
    """Reference path: ratios of the integrals A_r(q) = int x^r p(x) phi(q - x; mu) dx.

    Point masses are summed exactly; Gaussian components are integrated with
    the trapezoid rule over ``mean +/- R sd`` of the component.
    """
    mu = _check_mu(mu)
    q = np.asarray(q, dtype=float)
    q, mu = np.broadcast_arrays(q, mu)
    qe, mue = q[..., None], mu[..., None]
    logs, xs = [], []
    for w, m, v in prior.components():
        if v == 0:
            x = np.full(q.shape + (1,), m)
            lw = np.full(q.shape + (1,), math.log(w))
        else:
            sd = math.sqrt(v)
            x1 = np.linspace(m - quad.truncation_radius * sd, m + quad.truncation_radius * sd, quad.node_count)
            dx = x1[1] - x1[0]
            tw = np.full(quad.node_count, dx)
            tw[[0, -1]] *= 0.5
            x = np.broadcast_to(x1, q.shape + x1.shape)
            lw = math.log(w) + np.log(tw) - 0.5 * (x1 - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
            lw = np.broadcast_to(lw, x.shape)
        xs.append(x)
        logs.append(lw - 0.5 * (qe - x) ** 2 / mue)
    x = np.concatenate(xs, axis=-1)
    lg = np.concatenate(logs, axis=-1)
    top = np.max(lg, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegeneratePosterior("A_0 underflowed")
    wts = np.exp(lg - top)
    a0 = wts.sum(axis=-1)
    mean = (wts * x).sum(axis=-1) / a0
    var = (wts * (x - mean[..., None]) ** 2).sum(axis=-1) / a0
    return _out(mean), _out(var)


# --------------------------------------------------------------------------
# output channels


@dataclass(frozen=True)
class OutputChannelModel:
    kind = "abstract"
    has_closed_form_scores = False
    additive = False

    def density(self, y, z):
        """p(y | z)."""
        raise NotImplementedError

    def z_interval(self, y):
        """Interval of z outside which p(y|z) vanishes, or None."""
        return None

    def sample(self, z, rng):
        raise NotImplementedError

    def log_likelihood(self, y, zhat, mu, quad):
        raise NotImplementedError

    def raw_scores(self, y, zhat, mu, quad):
        raise NotImplementedError

    def to_record(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Awgn(OutputChannelModel):
    noise_var: float = 1.0
    kind = "awgn"
    has_closed_form_scores = True
    additive = True

    def __post_init__(self):
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise ValueError("noise_var must be positive")

    @property
    def noise_variance(self):
        return self.noise_var

    def density(self, y, z):
        r = np.asarray(y) - z
        return np.exp(-0.5 * r * r / self.noise_var) / math.sqrt(2 * math.pi * self.noise_var)

    def sample(self, z, rng):
        return z + math.sqrt(self.noise_var) * rng.standard_normal(np.shape(z))

    def log_likelihood(self, y, zhat, mu, quad):
        s = self.noise_var + mu
        r = y - zhat
        return -0.5 * r * r / s - 0.5 * (LOG_2PI + np.log(s))

    def raw_scores(self, y, zhat, mu, quad):
        s = self.noise_var + mu
        return (zhat - y) / s, 1.0 / s + 0.0 * zhat

    def to_record(self):
        return {"kind": self.kind, "noise_var": self.noise_var}


_TAIL = 5.0


def _hazard_excess(x, terms=120):
    """phi(x)/(1 - Phi(x)) - x for x >= _TAIL, by continued fraction."""
    t = np.array(x, dtype=float)
    for n in range(terms, 1, -1):
        t = x + n / t
    return 1.0 / t


def _log_diff_ndtr(a, b):
    """log(Phi(a) - Phi(b)) for a > b, accurate in both tails."""
    upper = b > 0
    # upper tail: Phi(a) - Phi(b) = Phi(-b) - Phi(-a)
    hi = np.where(upper, log_ndtr(-b), log_ndtr(a))
    lo = np.where(upper, log_ndtr(-a), log_ndtr(b))
    with np.errstate(divide="ignore"):
        return hi + np.log1p(-np.exp(lo - hi))


@dataclass(frozen=True)
class BoundedUniform(OutputChannelModel):
    """y = z + w with w uniform on [-delta, delta]."""

    delta: float = 1.0
    kind = "bounded-uniform"
    has_closed_form_scores = True
    additive = True

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError("delta must be positive")

    @property
    def noise_variance(self):
        return self.delta ** 2 / 3.0

    def density(self, y, z):
        return np.where(np.abs(np.asarray(y) - z) <= self.delta, 0.5 / self.delta, 0.0)

    def z_interval(self, y):
        return y - self.delta, y + self.delta

    def sample(self, z, rng):
        return z + rng.uniform(-self.delta, self.delta, np.shape(z))

    def _log_mass(self, r, s):
        a = (r + self.delta) / s
        b = (r - self.delta) / s
        return a, b, _log_diff_ndtr(a, b)

    def log_likelihood(self, y, zhat, mu, quad):
        s = np.sqrt(mu)
        _, _, logp = self._log_mass(y - zhat, s)
        return logp - math.log(2 * self.delta)

    def raw_scores(self, y, zhat, mu, quad):
        s = np.sqrt(mu)
        r = np.asarray(y - zhat, dtype=float)
        s, r = np.broadcast_arrays(s, r)
        a, b = (r + self.delta) / s, (r - self.delta) / s
        # reflect so the standardized box [b, a] is centred at or above zero
        flip = (a + b) < 0
        a, b = np.where(flip, -b, a), np.where(flip, -a, b)
        tail = b > _TAIL
        ra = np.zeros_like(a)
        rb = np.zeros_like(a)
        d2 = np.zeros_like(a)
        core = ~tail
        if np.any(core):
            ac, bc = a[core], b[core]
            logp = _log_diff_ndtr(ac, bc)
            ra[core] = np.exp(-0.5 * ac * ac - 0.5 * LOG_2PI - logp)
            rb[core] = np.exp(-0.5 * bc * bc - 0.5 * LOG_2PI - logp)
            d2[core] = (ra[core] - rb[core]) ** 2 + ac * ra[core] - bc * rb[core]
        if np.any(tail):
            # whole box deep in the upper tail: write the hazard as x + c(x)
            at, bt = a[tail], b[tail]
            ca, cb = _hazard_excess(at), _hazard_excess(bt)
            ratio = np.exp(log_ndtr(-at) - log_ndtr(-bt))
            k = 1.0 / (1.0 - ratio)
            ra[tail] = k * ratio * (at + ca)
            rb[tail] = k * (bt + cb)
            d2[tail] = k * k * ((bt + cb) * (bt * ratio + cb)
                                - ratio * (at + ca) * (2 * bt - at + 2 * cb - ratio * ca))
        d1 = np.where(flip, -1.0, 1.0) * (ra - rb) / s
        return d1, d2 / (s * s)

    def to_record(self):
        return {"kind": self.kind, "delta": self.delta}


@dataclass(frozen=True)
class Logistic(OutputChannelModel):
    """Binary y with P(y=1 | z) = 1 / (1 + offset * exp(-z))."""

    offset: float = 1.0
    kind = "logistic"
    observation_values = (0.0, 1.0)

    def __post_init__(self):
        if not (self.offset > 0 and math.isfinite(self.offset)):
            raise ValueError("offset must be positive")

    def _prob_and_derivs(self, y, z):
        sign = 2.0 * np.asarray(y) - 1.0
        f = expit(sign * (z - math.log(self.offset)))
        g = f * (1.0 - f)
        return f, sign * g, g * (1.0 - 2.0 * f)

    def density(self, y, z):
        return self._prob_and_derivs(y, z)[0]

    def sample(self, z, rng):
        p1 = expit(np.asarray(z) - math.log(self.offset))
        return (rng.random(np.shape(z)) < p1).astype(float)

    def _smoothed(self, y, zhat, mu, quad):
        # E f, E f', E f'' over z ~ N(zhat, mu); d/dzhat E f(z) = E f'(z)
        t, w = quad.standard_normal_rule()
        y, zhat, mu = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, zhat, mu)))
        shape = y.shape
        y, zhat, mu = y.ravel(), zhat.ravel(), mu.ravel()
        out = np.empty((3, y.size))
        step = max(1, _CHUNK_ELEMS // t.size)
        for k in range(0, y.size, step):
            sl = slice(k, k + step)
            z = zhat[sl, None] + np.sqrt(mu[sl, None]) * t
            f, f1, f2 = self._prob_and_derivs(y[sl, None], z)
            out[0, sl], out[1, sl], out[2, sl] = f @ w, f1 @ w, f2 @ w
        return out.reshape((3,) + shape)

    def log_likelihood(self, y, zhat, mu, quad):
        p, _, _ = self._smoothed(y, zhat, mu, quad)
        with np.errstate(divide="ignore"):
            return np.log(p)

    def raw_scores(self, y, zhat, mu, quad):
        p, p1, p2 = self._smoothed(y, zhat, mu, quad)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = p1 / p
            return -g, g * g - p2 / p

    def to_record(self):
        return {"kind": self.kind, "offset": self.offset}


def output_likelihood(y, zhat, mu, channel: OutputChannelModel, quad: QuadratureSpec = DEFAULT_QUAD):
    """p(y | zhat, mu) = int p(y|z) phi(z - zhat; mu) dz."""
    mu = _check_mu(mu)
    y, zhat = np.asarray(y, dtype=float), np.asarray(zhat, dtype=float)
    return _out(np.exp(channel.log_likelihood(y, zhat, mu, quad)))


def score_derivatives(y, zhat, mu, channel: OutputChannelModel, quad: QuadratureSpec = DEFAULT_QUAD):
    """(D1, D2) = -(d/dzhat, d^2/dzhat^2) log p(y | zhat, mu).

    D2 is clamped below at ``D2_FLOOR``; callers detect saturation by
    comparing against the floor.
    """
    mu = _check_mu(mu)
    y, zhat = np.asarray(y, dtype=float), np.asarray(zhat, dtype=float)
    d1, d2 = channel.raw_scores(y, zhat, mu, quad)
    bad = ~(np.isfinite(d1) & np.isfinite(d2))
    if np.any(bad):
        idx = np.argwhere(np.broadcast_to(bad, np.shape(d1)))
        raise LikelihoodUnderflow("smoothed likelihood underflowed", where=tuple(idx[0]) if idx.size else None)
    return _out(d1), _out(np.maximum(d2, D2_FLOOR))


def output_likelihood_quadrature(y, zhat, mu, channel: OutputChannelModel, quad: QuadratureSpec = DEFAULT_QUAD):
    """Reference path integrating ``channel.density`` directly.

    For channels with a bounded z-support the grid is laid only over the
    support, which keeps the integrand smooth.
    """
    mu = float(_check_mu(mu))
    y, zhat = float(y), float(zhat)
    sd = math.sqrt(mu)
    lo, hi = zhat - quad.truncation_radius * sd, zhat + quad.truncation_radius * sd
    iv = channel.z_interval(y)
    if iv is not None:
        lo, hi = max(lo, iv[0]), min(hi, iv[1])
        if hi <= lo:
            return 0.0
    z = np.linspace(lo, hi, quad.node_count)
    f = channel.density(y, z) if iv is None else np.full(z.shape, float(channel.density(y, y)))
    f = f * np.exp(-0.5 * (z - zhat) ** 2 / mu) / math.sqrt(2 * math.pi * mu)
    return float(np.trapezoid(f, z))


def score_derivatives_fd(y, zhat, mu, channel: OutputChannelModel, quad: QuadratureSpec = DEFAULT_QUAD, h=None):
    """Central finite differences of the log of the quadrature likelihood."""
    if h is None:
        h = 1e-4 * max(1.0, math.sqrt(mu))
    lp = [math.log(output_likelihood_quadrature(y, zhat + k * h, mu, channel, quad)) for k in (-1, 0, 1)]
    return -(lp[2] - lp[0]) / (2 * h), -(lp[2] - 2 * lp[1] + lp[0]) / (h * h)


# --------------------------------------------------------------------------
# records (config <-> model objects)

_PRIOR_KEYS = {
    "gauss-bernoulli": (GaussBernoulli, {"rho", "on_variance"}),
    "gaussian": (Gaussian, {"mean", "variance"}),
    "discrete": (Discrete, {"values", "weights"}),
}
_CHANNEL_KEYS = {
    "awgn": (Awgn, {"noise_var"}),
    "bounded-uniform": (BoundedUniform, {"delta"}),
    "logistic": (Logistic, {"offset"}),
}


def _from_record(rec, table, what):
    if not isinstance(rec, Mapping) or "kind" not in rec:
        raise ConfigError(f"{what} must be a table with a 'kind' key", field=what)
    kind = str(rec["kind"]).lower().replace("_", "-")
    if kind not in table:
        raise ConfigError(f"unknown kind {rec['kind']!r}; expected one of {sorted(table)}", field=f"{what}.kind")
    cls, allowed = table[kind]
    extra = set(rec) - allowed - {"kind"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", field=what)
    kwargs: dict[str, Any] = {k: v for k, v in rec.items() if k != "kind"}
    if "values" in kwargs:
        kwargs["values"] = tuple(kwargs["values"])
        kwargs["weights"] = tuple(kwargs.get("weights", ()))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=what) from exc


def prior_from_record(rec: Mapping) -> PriorModel:
    """Build a prior from e.g. ``{"kind": "gauss-bernoulli", "rho": 0.1}``."""
    return _from_record(rec, _PRIOR_KEYS, "prior")


def channel_from_record(rec: Mapping) -> OutputChannelModel:
    """Build a channel from e.g. ``{"kind": "awgn", "noise_var": 0.1}``."""
    return _from_record(rec, _CHANNEL_KEYS, "channel")
