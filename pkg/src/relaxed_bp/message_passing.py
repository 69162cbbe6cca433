"""Relaxed belief propagation on a dense measurement matrix.

Two variants share one state container:

* ``"full"``: every edge (i, j) carries its own mean/variance pair in both
  directions, with the excluded-term sums computed exactly.
* ``"simplified"``: variances are shared per vertex and the per-edge means
  are first-order corrections of the vertex estimates, so the nonlinear
  functions are evaluated once per vertex.

Arrays follow the shape conventions ``Phi: (m, n)``, output-node vectors
``(m,)``, input-node vectors ``(n,)`` and edge arrays ``(m, n)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import IterationError, MissingTruth, RBPError
from .scalar_io import (
    D2_FLOOR,
    DEFAULT_QUAD,
    OutputChannelModel,
    PriorModel,
    QuadratureSpec,
    posterior_moments,
    score_derivatives,
)

MU_Z_FLOOR = 1e-12
CANCELLATION_RATIO = 1e6

Variant = Literal["full", "simplified"]


@dataclass
class ProblemInstance:
    Phi: np.ndarray
    y: np.ndarray
    prior: PriorModel
    channel: OutputChannelModel
    true_x: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        m, n = self.Phi.shape
        if m < 1 or n < 1:
            raise ValueError("Phi must be non-empty")
        if np.isnan(self.Phi).any():
            raise ValueError("Phi contains NaN")
        if self.y.shape != (m,):
            raise ValueError(f"y has shape {self.y.shape}, expected ({m},)")
        if self.true_x is not None:
            self.true_x = np.asarray(self.true_x, dtype=float)
            if self.true_x.shape != (n,):
                raise ValueError(f"true_x has shape {self.true_x.shape}, expected ({n},)")

    @property
    def shape(self):
        return self.Phi.shape


@dataclass(frozen=True)
class RbpOptions:
    max_iterations: int = 20
    variant: Variant = "full"
    init: Literal["prior", "genie"] = "prior"
    damping: float = 0.0
    stop_tolerance: float = 0.0
    quad: QuadratureSpec = DEFAULT_QUAD

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.variant not in ("full", "simplified"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.init not in ("prior", "genie"):
            raise ValueError(f"unknown init {self.init!r}")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must lie in [0, 1]")
        if self.stop_tolerance < 0:
            raise ValueError("stop_tolerance must be >= 0")


@dataclass
class MessageState:
    """Iterate of the algorithm.

    Node-level arrays are always present.  For ``"full"`` every ``edge_*``
    array is populated; ``"simplified"`` keeps only the edge means
    ``edge_x`` and ``edge_u`` and shares the variances per vertex.
    """

    variant: Variant
    x: np.ndarray
    mu_x: np.ndarray
    z: np.ndarray
    mu_z: np.ndarray
    q: np.ndarray
    mu_q: np.ndarray
    u: np.ndarray
    mu_u: np.ndarray
    edge_x: np.ndarray
    edge_u: np.ndarray
    edge_mu_x: Optional[np.ndarray] = None
    edge_z: Optional[np.ndarray] = None
    edge_mu_z: Optional[np.ndarray] = None
    edge_mu_u: Optional[np.ndarray] = None
    edge_q: Optional[np.ndarray] = None
    edge_mu_q: Optional[np.ndarray] = None
    t: int = 1
    saturated: int = 0
    zero_precision: Optional[np.ndarray] = None


@dataclass
class History:
    """Node estimates after each iteration; row 0 is the initialization."""

    x: list = field(default_factory=list)
    mu_x: list = field(default_factory=list)
    z: list = field(default_factory=list)
    mu_z: list = field(default_factory=list)

    def as_arrays(self):
        return {k: np.array(getattr(self, k)) for k in ("x", "mu_x", "z", "mu_z")}

    def to_csv(self) -> str:
        """Long-format CSV with columns ``t, node, x_hat, mu_x``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "node", "x_hat", "mu_x"])
        for t, (xs, vs) in enumerate(zip(self.x, self.mu_x)):
            for j, (a, b) in enumerate(zip(xs, vs)):
                w.writerow([t, j, repr(float(a)), repr(float(b))])
        return buf.getvalue()


def _exclude(terms: np.ndarray, axis: int):
    """Return (total, total - term) along ``axis`` for every entry.

    The leave-one-out sums come from subtraction; entries where that
    subtraction loses more than ~6 digits are recomputed directly.
    """
    total = terms.sum(axis=axis, keepdims=True)
    loo = total - terms
    bad = np.abs(terms) > CANCELLATION_RATIO * np.abs(loo)
    bad &= terms != 0
    if np.any(bad):
        for i, j in zip(*np.nonzero(bad)):
            line = terms[:, j] if axis == 0 else terms[i, :]
            k = i if axis == 0 else j
            loo[i, j] = np.sum(line[:k]) + np.sum(line[k + 1:])
    return np.squeeze(total, axis=axis), loo


def initialize(problem: ProblemInstance, opts: RbpOptions) -> MessageState:
    m, n = problem.shape
    if opts.init == "genie":
        if problem.true_x is None:
            raise MissingTruth("genie initialization needs problem.true_x")
        x = problem.true_x.astype(float).copy()
        mu_x = np.zeros(n)
    else:
        x = np.full(n, float(problem.prior.mean))
        mu_x = np.full(n, float(problem.prior.variance))
    edge_x = np.broadcast_to(x, (m, n)).copy()
    state = MessageState(
        variant=opts.variant,
        x=x,
        mu_x=mu_x,
        z=np.zeros(m),
        mu_z=np.zeros(m),
        q=np.zeros(n),
        mu_q=np.full(n, np.inf),
        u=np.zeros(m),
        mu_u=np.full(m, np.inf),
        edge_x=edge_x,
        edge_u=np.zeros((m, n)),
        zero_precision=np.zeros(n, dtype=bool),
    )
    if opts.variant == "full":
        state.edge_mu_x = np.broadcast_to(mu_x, (m, n)).copy()
    return state


def output_linear_step(state: MessageState, problem: ProblemInstance) -> MessageState:
    Phi = problem.Phi
    if state.variant == "full":
        state.z, state.edge_z = _exclude(Phi * state.edge_x, axis=1)
        state.mu_z, state.edge_mu_z = _exclude(Phi * Phi * state.edge_mu_x, axis=1)
        state.edge_mu_z = np.maximum(state.edge_mu_z, 0.0)
    else:
        state.z = np.sum(Phi * state.edge_x, axis=1)
        state.mu_z = (Phi * Phi) @ state.mu_x
    return state


def output_nonlinear_step(state: MessageState, problem: ProblemInstance,
                          quad: QuadratureSpec = DEFAULT_QUAD) -> MessageState:
    y = problem.y
    if state.variant == "full":
        try:
            d1, d2 = score_derivatives(y[:, None], state.edge_z, np.maximum(state.edge_mu_z, MU_Z_FLOOR),
                                       problem.channel, quad)
        except RBPError as exc:
            if getattr(exc, "where", None) is not None:
                exc.args = (f"{exc.args[0]} (edge i, j = {exc.where})",)
            raise
        state.edge_u = -d1 / d2
        state.edge_mu_u = 1.0 / d2
        state.saturated = int(np.count_nonzero(d2 <= D2_FLOOR))
    else:
        d1, d2 = score_derivatives(y, state.z, np.maximum(state.mu_z, MU_Z_FLOOR), problem.channel, quad)
        state.u = -d1 / d2
        state.mu_u = 1.0 / d2
        # first-order shift from zhat_i to zhat_{i->j} = zhat_i - Phi_ij xhat_{i<-j}
        state.edge_u = state.u[:, None] + problem.Phi * state.edge_x
        state.saturated = int(np.count_nonzero(d2 <= D2_FLOOR))
    return state


def input_linear_step(state: MessageState, problem: ProblemInstance) -> MessageState:
    Phi = problem.Phi
    prior_mean = problem.prior.mean
    if state.variant == "full":
        prec_tot, prec_loo = _exclude(Phi * Phi / state.edge_mu_u, axis=0)
        num_tot, num_loo = _exclude(Phi * state.edge_u / state.edge_mu_u, axis=0)
        prec_loo = np.maximum(prec_loo, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            state.edge_mu_q = np.where(prec_loo > 0, 1.0 / prec_loo, np.inf)
            state.edge_q = np.where(prec_loo > 0, num_loo / prec_loo, prior_mean)
    else:
        w = 1.0 / state.mu_u
        prec_tot = (Phi * Phi).T @ w
        num_tot = np.sum(Phi * state.edge_u * w[:, None], axis=0)
    state.zero_precision = ~(prec_tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        state.mu_q = np.where(state.zero_precision, np.inf, 1.0 / prec_tot)
        state.q = np.where(state.zero_precision, prior_mean, num_tot / prec_tot)
    return state


def input_nonlinear_step(state: MessageState, problem: ProblemInstance, damping: float = 0.0) -> MessageState:
    prior = problem.prior
    x_old, edge_x_old = state.x, state.edge_x
    x, mu_x = posterior_moments(state.q, state.mu_q, prior)
    x, mu_x = np.atleast_1d(x), np.atleast_1d(mu_x)
    if state.variant == "full":
        edge_x, state.edge_mu_x = posterior_moments(state.edge_q, state.edge_mu_q, prior)
        edge_x, state.edge_mu_x = np.atleast_2d(edge_x), np.atleast_2d(state.edge_mu_x)
    else:
        # first-order correction with dF/dq = E_in / mu_q
        edge_x = x[None, :] - problem.Phi * state.edge_u * (mu_x[None, :] / state.mu_u[:, None])
    if damping > 0:
        x = (1.0 - damping) * x + damping * x_old
        edge_x = (1.0 - damping) * edge_x + damping * edge_x_old
    state.x, state.mu_x, state.edge_x = x, mu_x, edge_x
    return state


def run(problem: ProblemInstance, opts: RbpOptions = RbpOptions()):
    """Iterate output/input steps; returns ``(final_state, history)``.

    The reported estimate of x_j is the total-node mean ``state.x``.
    """
    state = initialize(problem, opts)
    hist = History()
    hist.x.append(state.x.copy())
    hist.mu_x.append(state.mu_x.copy())
    n = problem.shape[1]
    for it in range(1, opts.max_iterations + 1):
        x_prev = state.x
        try:
            output_linear_step(state, problem)
            hist.z.append(state.z.copy())
            hist.mu_z.append(state.mu_z.copy())
            output_nonlinear_step(state, problem, opts.quad)
            input_linear_step(state, problem)
            input_nonlinear_step(state, problem, opts.damping)
        except RBPError as exc:
            raise IterationError(it, exc) from exc
        state.t += 1
        hist.x.append(state.x.copy())
        hist.mu_x.append(state.mu_x.copy())
        if opts.stop_tolerance > 0:
            if np.linalg.norm(state.x - x_prev) / np.sqrt(n) < opts.stop_tolerance:
                break
    return state, hist


def run_simplified(problem: ProblemInstance, opts: RbpOptions = RbpOptions()):
    """Same as :func:`run` with per-vertex variances and nonlinear evaluations."""
    from dataclasses import replace

    return run(problem, replace(opts, variant="simplified"))
