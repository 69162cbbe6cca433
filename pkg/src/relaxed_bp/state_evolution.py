"""State evolution: the scalar recursion predicting relaxed BP error variances.

    mu_q(t)     = Ebar_out(mu_z(t))
    mu_x(t+1,s) = Ebar_in(mu_q(t), s)
    mu_z(t+1)   = beta * Ebar_in(mu_q(t))

started either from ``mu_z = mu_z_init`` ("hi", the algorithm) or from
``mu_z = 0`` ("lo", the genie-aided lower bound).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from .errors import DomainError, MonotonicityViolation
from .message_passing import MU_Z_FLOOR
from .scalar_io import (
    D2_FLOOR,
    DEFAULT_QUAD,
    Awgn,
    BoundedUniform,
    Gaussian,
    Logistic,
    OutputChannelModel,
    PriorModel,
    QuadratureSpec,
    posterior_moments,
    score_derivatives,
)

NSE_FLOOR_DB = -100.0
MONOTONE_SLACK = 1e-12

Branch = Literal["hi", "lo"]


@dataclass(frozen=True)
class ScaleModel:
    """Distribution of the column scale factors; ``((1.0, 1.0),)`` is s = 1."""

    atoms: tuple = ((1.0, 1.0),)

    def __post_init__(self):
        atoms = tuple((float(s), float(w)) for s, w in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise ValueError("scale model needs at least one atom")
        if any(s <= 0 for s, _ in atoms):
            raise ValueError("scale factors must be positive")
        if any(w < 0 for _, w in atoms) or abs(math.fsum(w for _, w in atoms) - 1) > 1e-12:
            raise ValueError("scale weights must be non-negative and sum to 1")

    @property
    def kind(self) -> str:
        return "unit" if self.atoms == ((1.0, 1.0),) else "discrete"

    @property
    def mean_s(self) -> float:
        return math.fsum(s * w for s, w in self.atoms)

    @property
    def values(self):
        return np.array([s for s, _ in self.atoms])

    @property
    def weights(self):
        return np.array([w for _, w in self.atoms])


@dataclass(frozen=True)
class Quadrature:
    spec: QuadratureSpec = DEFAULT_QUAD


@dataclass(frozen=True)
class MonteCarlo:
    samples: int = 100_000
    seed: int = 0


@dataclass(frozen=True)
class SEConfig:
    beta: float
    prior: PriorModel
    channel: OutputChannelModel
    scale: ScaleModel = ScaleModel()
    max_iterations: int = 100
    fixed_point_tolerance: float = 1e-9
    expectation_method: Union[Quadrature, MonteCarlo] = Quadrature()

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be positive")
        if not self.fixed_point_tolerance > 0:
            raise ValueError("fixed_point_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    @property
    def quad(self) -> QuadratureSpec:
        m = self.expectation_method
        return m.spec if isinstance(m, Quadrature) else DEFAULT_QUAD


@dataclass
class SETrajectory:
    branch: Branch
    mu_z: list = field(default_factory=list)
    mu_q: list = field(default_factory=list)
    mu_x: list = field(default_factory=list)  # one array over scale atoms per t
    mu_z_init: float = 0.0
    converged: bool = False
    fixed_point_mu_z: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.mu_q)


def mu_z_init(config: SEConfig) -> float:
    return config.beta * config.scale.mean_s * config.prior.variance


# --------------------------------------------------------------------------
# input side


def _expected_posterior_variance(mu: float, prior: PriorModel, method) -> float:
    """E[E_in(x + v, mu)] for x ~ prior, v ~ N(0, mu)."""
    if mu == 0:
        return 0.0
    if not math.isfinite(mu):
        return prior.variance
    if isinstance(prior, Gaussian):
        return prior.variance * mu / (prior.variance + mu)
    if isinstance(method, MonteCarlo):
        rng = np.random.default_rng(method.seed)
        x = prior.sample(rng, method.samples)
        q = x + math.sqrt(mu) * rng.standard_normal(method.samples)
        return float(np.mean(posterior_moments(q, mu, prior)[1]))
    # the marginal of q is a Gaussian mixture; integrate each component
    t, w = method.spec.standard_normal_rule()
    total = 0.0
    for wk, mk, vk in prior.components():
        q = mk + math.sqrt(vk + mu) * t
        total += wk * float(np.dot(w, posterior_moments(q, mu, prior)[1]))
    return total


def mse_in_bar(mu_q: float, config: SEConfig):
    """Input MSE function: ``(sum_s w_s s Ebar_in(mu, s), [Ebar_in(mu, s) per atom])``."""
    if mu_q < 0 or math.isnan(mu_q):
        raise DomainError("mu_q must be >= 0")
    per = np.array([
        _expected_posterior_variance(mu_q / s, config.prior, config.expectation_method)
        for s in config.scale.values
    ])
    total = float(np.dot(config.scale.weights * config.scale.values, per))
    return total, per


# --------------------------------------------------------------------------
# output side


def _bounded_uniform_fisher(ch: BoundedUniform, mu: float, quad: QuadratureSpec) -> float:
    """E[D2] for y - zhat = N(0, mu) + U[-delta, delta], integrated over the residual.

    The residual density has edges of width ~sqrt(mu) at +/-delta, so the
    grid is split into segments refined around each edge.
    """
    s = math.sqrt(mu)
    d, R = ch.delta, quad.truncation_radius * s
    if d > R:
        cuts = [-d - R, -d + R, d - R, d + R]
    else:
        cuts = [-d - R, d + R]
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        r = np.linspace(lo, hi, quad.node_count)
        dens = np.exp(ch.log_likelihood(r, 0.0, mu, quad))
        _, d2 = score_derivatives(r, 0.0, mu, ch, quad)
        total += float(np.trapezoid(dens * d2, r))
    return total


def _logistic_fisher(ch: Logistic, mu: float, spread: float, quad: QuadratureSpec) -> float:
    """E over zhat ~ N(0, spread) of sum_y p(y | zhat, mu) D2(y, zhat, mu)."""
    t, w = quad.standard_normal_rule()
    zhat = math.sqrt(spread) * t if spread > 0 else np.zeros(1)
    w = w if spread > 0 else np.ones(1)
    total = 0.0
    for yv in ch.observation_values:
        p = np.exp(ch.log_likelihood(yv, zhat, mu, quad))
        _, d2 = score_derivatives(yv, zhat, mu, ch, quad)
        total += float(np.dot(w, p * d2))
    return total


def _monte_carlo_fisher(ch: OutputChannelModel, mu: float, mu_init: float, method: MonteCarlo, quad) -> float:
    rng = np.random.default_rng(method.seed)
    zhat = math.sqrt(mu_init - mu) * rng.standard_normal(method.samples)
    z = zhat + math.sqrt(mu) * rng.standard_normal(method.samples)
    y = ch.sample(z, rng)
    _, d2 = score_derivatives(y, zhat, mu, ch, quad)
    return float(np.mean(d2))


def mse_out_bar(mu_z: float, mu_z_init_value: float, config: SEConfig) -> float:
    """Output MSE function ``1 / E[D2(y, zhat, mu_z)]``.

    ``(z, zhat)`` has variance ``mu_z_init`` for z, ``mu_z_init - mu_z`` for
    zhat and covariance equal to var(zhat); y ~ p(y | z).
    """
    if mu_z < 0 or mu_z > mu_z_init_value * (1 + 1e-12) + 1e-300 or math.isnan(mu_z):
        raise DomainError(f"mu_z={mu_z} outside [0, mu_z_init={mu_z_init_value}]")
    mu_z = min(mu_z, mu_z_init_value)
    ch = config.channel
    if isinstance(ch, Awgn):
        return ch.noise_var + mu_z
    mu = max(mu_z, MU_Z_FLOOR)
    method = config.expectation_method
    if isinstance(method, MonteCarlo):
        fisher = _monte_carlo_fisher(ch, mu, max(mu_z_init_value, mu), method, config.quad)
    elif isinstance(ch, BoundedUniform):
        fisher = _bounded_uniform_fisher(ch, mu, method.spec)
    elif isinstance(ch, Logistic):
        fisher = _logistic_fisher(ch, mu, mu_z_init_value - mu_z, method.spec)
    else:
        raise NotImplementedError(f"no output expectation for {type(ch).__name__}")
    return 1.0 / max(fisher, D2_FLOOR)


def se_map(mu_z: float, config: SEConfig, mu_init: float | None = None) -> float:
    """The composed map G(mu) = beta * Ebar_in(Ebar_out(mu))."""
    if mu_init is None:
        mu_init = mu_z_init(config)
    return config.beta * mse_in_bar(mse_out_bar(mu_z, mu_init, config), config)[0]


# --------------------------------------------------------------------------
# recursion


def _polish(mu: float, config: SEConfig, mu_init: float, branch: Branch) -> float:
    """Bisection on mu - G(mu) in a +/-10 tol window around ``mu``."""
    tol = config.fixed_point_tolerance
    lo, hi = max(0.0, mu - 10 * tol), min(mu_init, mu + 10 * tol)

    def h(v):
        return v - se_map(v, config, mu_init)

    hlo, hhi = h(lo), h(hi)
    if hlo > 0 or hhi < 0:
        return mu
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if h(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi if branch == "hi" else lo


def run_se(config: SEConfig, branch: Branch = "hi") -> SETrajectory:
    if branch not in ("hi", "lo"):
        raise ValueError(f"unknown branch {branch!r}")
    mu_init = mu_z_init(config)
    traj = SETrajectory(branch=branch, mu_z_init=mu_init)
    nscale = len(config.scale.atoms)
    mu = mu_init if branch == "hi" else 0.0
    traj.mu_z.append(mu)
    traj.mu_x.append(np.full(nscale, config.prior.variance) if branch == "hi" else np.zeros(nscale))
    slack = MONOTONE_SLACK * max(1.0, mu_init)
    for t in range(1, config.max_iterations + 1):
        mq = mse_out_bar(mu, mu_init, config)
        total, per = mse_in_bar(mq, config)
        new = config.beta * total
        if (branch == "hi" and new > mu + slack) or (branch == "lo" and new < mu - slack):
            raise MonotonicityViolation(
                f"{branch} branch moved the wrong way at t={t}: {mu!r} -> {new!r}; "
                "increase the quadrature nodes or Monte Carlo samples"
            )
        new = min(max(new, 0.0), mu_init)
        traj.mu_q.append(mq)
        traj.mu_x.append(per)
        traj.mu_z.append(new)
        done = abs(new - mu) < config.fixed_point_tolerance
        mu = new
        if done:
            traj.converged = True
            break
    traj.fixed_point_mu_z = _polish(mu, config, mu_init, branch) if traj.converged else mu
    return traj


def predicted_nse_db(traj: SETrajectory, config: SEConfig) -> np.ndarray:
    """10 log10(E_s[mu_x(t, s)] / prior variance) for each recorded t."""
    w = config.scale.weights
    ratio = np.array([float(np.dot(w, mx)) for mx in traj.mu_x]) / config.prior.variance
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(ratio)
    return np.maximum(db, NSE_FLOOR_DB)


def predicted_curve(traj: SETrajectory, config: SEConfig, iterations: int) -> np.ndarray:
    """Predicted NSE after 0..iterations algorithm iterations (padded at the fixed point)."""
    db = predicted_nse_db(traj, config)
    if len(db) < iterations + 1:
        db = np.concatenate([db, np.full(iterations + 1 - len(db), db[-1])])
    return db[: iterations + 1]


def fixed_point_nse_db(traj: SETrajectory, config: SEConfig) -> float:
    """Predicted NSE at the reported fixed point of ``traj``."""
    mq = mse_out_bar(traj.fixed_point_mu_z, traj.mu_z_init, config)
    _, per = mse_in_bar(mq, config)
    ratio = float(np.dot(config.scale.weights, per)) / config.prior.variance
    return max(10 * math.log10(ratio), NSE_FLOOR_DB) if ratio > 0 else NSE_FLOOR_DB


def fixed_point_summary(hi: SETrajectory, lo: SETrajectory, config: SEConfig) -> dict:
    """JSON-ready summary; ``unique`` means both branches met (optimality certificate)."""
    tol = 10 * config.fixed_point_tolerance * max(1.0, hi.mu_z_init)
    unique = bool(hi.converged and lo.converged and abs(hi.fixed_point_mu_z - lo.fixed_point_mu_z) <= tol)
    return {
        "beta": config.beta,
        "mu_z_init": hi.mu_z_init,
        "mu_z_hi": hi.fixed_point_mu_z,
        "mu_z_lo": lo.fixed_point_mu_z,
        "fixed_point_mu_z": hi.fixed_point_mu_z,
        "nse_db_hi": fixed_point_nse_db(hi, config),
        "nse_db_lo": fixed_point_nse_db(lo, config),
        "converged_hi": hi.converged,
        "converged_lo": lo.converged,
        "unique": unique,
    }


def trajectory_csv(trajs, config: SEConfig) -> str:
    """CSV with columns ``t, branch, mu_z, mu_q, mu_x, nse_db`` (t starts at 1)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "branch", "mu_z", "mu_q", "mu_x", "nse_db"])
    for traj in trajs:
        db = predicted_nse_db(traj, config)
        for k, mz in enumerate(traj.mu_z):
            mq = repr(traj.mu_q[k]) if k < len(traj.mu_q) else ""
            mx = float(np.dot(config.scale.weights, traj.mu_x[k]))
            w.writerow([k + 1, traj.branch, repr(mz), mq, repr(mx), repr(float(db[k]))])
    return buf.getvalue()
