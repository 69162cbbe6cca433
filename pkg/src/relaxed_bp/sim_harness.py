"""Monte Carlo experiments: instance generation, baselines and report files.

Per-trial randomness comes from ``SeedSequence(seed, spawn_key=(trial,))``,
so a trial's instance depends only on ``(seed, trial)`` and never on the
order or the thread that runs it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from numba import njit

from .errors import RBPError, SingularSystem, UnsupportedCalibration
from .message_passing import ProblemInstance, RbpOptions, run
from .scalar_io import (
    Awgn,
    BoundedUniform,
    OutputChannelModel,
    PriorModel,
    channel_from_record,
    prior_from_record,
)
from .state_evolution import (
    NSE_FLOOR_DB,
    ScaleModel,
    SEConfig,
    fixed_point_summary,
    predicted_curve,
    run_se,
)

SCHEMA_VERSION = 1
ALGORITHMS = ("rbp_full", "rbp_simplified", "rbp_genie", "lmmse", "lmmse_projected", "se_predict")
TRIAL_ALGORITHMS = ALGORITHMS[:-1]


@dataclass(frozen=True)
class MatrixModel:
    """``gaussian-iid`` (entry variance defaults to 1/m) or ``sparse-factorized``."""

    kind: str = "gaussian-iid"
    variance: Optional[float] = None
    d: int = 10
    scale: ScaleModel = ScaleModel()

    def __post_init__(self):
        if self.kind not in ("gaussian-iid", "sparse-factorized"):
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        if self.variance is not None and not self.variance > 0:
            raise ValueError("matrix variance must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    def entry_variance(self, m: int) -> float:
        return 1.0 / m if self.variance is None else self.variance

    def se_scale(self, m: int) -> ScaleModel:
        """Scale model seen by state evolution for this matrix ensemble."""
        if self.kind == "sparse-factorized":
            return self.scale
        return ScaleModel(((m * self.entry_variance(m), 1.0),))

    def to_record(self) -> dict:
        if self.kind == "gaussian-iid":
            rec = {"kind": self.kind}
            if self.variance is not None:
                rec["variance"] = self.variance
            return rec
        return {"kind": self.kind, "d": self.d, "scale": [list(a) for a in self.scale.atoms]}


@dataclass(frozen=True)
class ExperimentSpec:
    n: int
    beta: float
    prior: PriorModel
    channel: dict  # channel record; parameters may be omitted when snr_db is set
    snr_db: Optional[float] = None
    matrix: MatrixModel = MatrixModel()
    trials: int = 200
    seed: int = 0
    iterations: int = 20
    algorithms: tuple = ("rbp_simplified", "se_predict")
    threads: int = 1

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}")
        object.__setattr__(self, "algorithms", tuple(self.algorithms))

    @property
    def m(self) -> int:
        return max(1, int(round(self.n / self.beta)))

    def to_record(self) -> dict:
        rec = {
            "n": self.n,
            "beta": self.beta,
            "prior": self.prior.to_record(),
            "channel": dict(self.channel),
            "matrix": self.matrix.to_record(),
            "trials": self.trials,
            "seed": self.seed,
            "iterations": self.iterations,
            "algorithms": list(self.algorithms),
        }
        if self.snr_db is not None:
            rec["snr_db"] = self.snr_db
        return rec

    def content_hash(self) -> str:
        blob = json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrialResult:
    trial: int
    nse_db: dict = field(default_factory=dict)  # algorithm -> (iterations + 1,) array
    consistent: dict = field(default_factory=dict)  # algorithm -> bool, bounded channel only
    failures: dict = field(default_factory=dict)  # algorithm -> message
    wall_time: float = 0.0


@dataclass
class AggregateReport:
    spec: ExperimentSpec
    channel: OutputChannelModel
    trials: list
    median_nse_db: dict
    mean_nse_db: dict
    cdf: dict  # algorithm -> (sorted nse_db at the last iteration, empirical prob)
    se_curve: Optional[np.ndarray] = None
    se_summary: Optional[dict] = None

    @property
    def failure_count(self) -> int:
        return sum(len(t.failures) for t in self.trials)

    @property
    def failure_rate(self) -> float:
        runs = len(self.trials) * max(1, len([a for a in self.spec.algorithms if a != "se_predict"]))
        return self.failure_count / runs


# --------------------------------------------------------------------------
# instance generation


def expected_signal_energy(spec: ExperimentSpec) -> float:
    """E||Phi x||^2 in closed form for the experiment's matrix model and prior."""
    m, n = spec.m, spec.n
    ex2 = spec.prior.second_moment
    if spec.matrix.kind == "gaussian-iid":
        return m * n * spec.matrix.entry_variance(m) * ex2
    # d entries of magnitude sqrt(n/m) per row, times s_j / d
    return m * (n / m) * spec.matrix.scale.mean_s * ex2


def calibrate_noise(spec: ExperimentSpec) -> OutputChannelModel:
    """Channel with parameters set from ``snr_db`` (or taken verbatim from the record)."""
    rec = dict(spec.channel)
    kind = str(rec.get("kind", "")).lower()
    if spec.snr_db is None:
        return channel_from_record(rec)
    if kind == "logistic":
        raise UnsupportedCalibration("logistic channel has no SNR; give 'offset' explicitly")
    mu_w = expected_signal_energy(spec) / (spec.n * 10.0 ** (spec.snr_db / 10.0))
    if kind == "awgn":
        return Awgn(mu_w)
    if kind == "bounded-uniform":
        return BoundedUniform(math.sqrt(3.0 * mu_w))
    raise UnsupportedCalibration(f"cannot calibrate channel kind {kind!r}")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def _sparse_factorized(m, n, mm: MatrixModel, rng):
    d = min(mm.d, n)
    s = rng.choice(mm.scale.values, size=n, p=mm.scale.weights)
    A = np.zeros((m, n))
    amp = math.sqrt(n / m)
    for i in range(m):
        cols = rng.choice(n, size=d, replace=False)
        A[i, cols] = amp * rng.choice((-1.0, 1.0), size=d)
    return A * np.sqrt(s) / math.sqrt(d)


def generate_instance(spec: ExperimentSpec, trial: int, channel: OutputChannelModel | None = None) -> ProblemInstance:
    if channel is None:
        channel = calibrate_noise(spec)
    rng = trial_rng(spec.seed, trial)
    m, n = spec.m, spec.n
    x = np.asarray(spec.prior.sample(rng, n), dtype=float)
    if spec.matrix.kind == "gaussian-iid":
        Phi = math.sqrt(spec.matrix.entry_variance(m)) * rng.standard_normal((m, n))
    else:
        Phi = _sparse_factorized(m, n, spec.matrix, rng)
    y = channel.sample(Phi @ x, rng)
    return ProblemInstance(Phi, y, spec.prior, channel, true_x=x)


# --------------------------------------------------------------------------
# baselines


def lmmse_baseline(problem: ProblemInstance, noise_variance: float) -> np.ndarray:
    """Linear MMSE estimate for an i.i.d. prior with the given mean and variance."""
    Phi = problem.Phi
    m0, v0 = problem.prior.mean, problem.prior.variance
    resid = problem.y - Phi @ np.full(Phi.shape[1], m0)
    K = v0 * (Phi @ Phi.T) + noise_variance * np.eye(Phi.shape[0])
    try:
        c = scipy.linalg.cho_factor(K)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("measurement covariance is not positive definite") from exc
    return m0 + v0 * (Phi.T @ scipy.linalg.cho_solve(c, resid))


@njit
def _pocs_slabs(Phi, y, delta, x, tol, max_sweeps):
    m, n = Phi.shape
    norms = np.zeros(m)
    for i in range(m):
        for k in range(n):
            norms[i] += Phi[i, k] * Phi[i, k]
    viol = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        for i in range(m):
            if norms[i] == 0.0:
                continue
            r = y[i]
            for k in range(n):
                r -= Phi[i, k] * x[k]
            if r > delta:
                step = (r - delta) / norms[i]
            elif r < -delta:
                step = (r + delta) / norms[i]
            else:
                continue
            for k in range(n):
                x[k] += step * Phi[i, k]
        viol = 0.0
        for i in range(m):
            r = y[i]
            for k in range(n):
                r -= Phi[i, k] * x[k]
            v = abs(r) - delta
            if v > viol:
                viol = v
        if viol < tol:
            break
    return x, sweeps, viol


@dataclass
class ProjectionResult:
    x: np.ndarray
    sweeps: int
    max_violation: float
    converged: bool


def project_consistent(x_hat, problem: ProblemInstance, delta: float,
                       tol: float = 1e-9, max_sweeps: int = 10_000) -> ProjectionResult:
    """Cyclic projections onto the slabs ``|y_i - Phi_i x| <= delta``.

    Each slab projection moves ``x`` along row ``Phi_i`` just far enough to
    satisfy that row; sweeps repeat until the largest violation is below
    ``tol``.  Points already in the set are returned unchanged.
    """
    Phi = np.ascontiguousarray(problem.Phi, dtype=float)
    y = np.ascontiguousarray(problem.y, dtype=float)
    x0 = np.array(x_hat, dtype=float)
    viol0 = float(np.max(np.abs(y - Phi @ x0)) - delta)
    if viol0 <= 0:
        return ProjectionResult(x0, 0, max(viol0, 0.0), True)
    x, sweeps, viol = _pocs_slabs(Phi, y, float(delta), x0, tol, max_sweeps)
    return ProjectionResult(x, int(sweeps), float(max(viol, 0.0)), bool(viol < tol))


# --------------------------------------------------------------------------
# experiment loop


def nse_db(x_hat, x, second_moment: float) -> np.ndarray:
    """10 log10(||x_hat - x||^2 / E||x||^2), rows of ``x_hat`` are iterations."""
    x_hat = np.atleast_2d(x_hat)
    err = np.sum((x_hat - x) ** 2, axis=-1) / (x.size * second_moment)
    with np.errstate(divide="ignore"):
        return np.maximum(10 * np.log10(err), NSE_FLOOR_DB)


def _run_trial(spec: ExperimentSpec, channel: OutputChannelModel, trial: int) -> TrialResult:
    t0 = time.perf_counter()
    res = TrialResult(trial=trial)
    prob = generate_instance(spec, trial, channel)
    x = prob.true_x
    ex2 = spec.prior.second_moment
    T = spec.iterations
    bounded = isinstance(channel, BoundedUniform)
    lmmse_x = None

    def consistent(est):
        return bool(np.max(np.abs(prob.y - prob.Phi @ est)) <= channel.delta + 1e-9)

    for alg in spec.algorithms:
        if alg == "se_predict":
            continue
        try:
            if alg.startswith("rbp_"):
                opts = RbpOptions(
                    max_iterations=T,
                    variant="full" if alg == "rbp_full" else "simplified",
                    init="genie" if alg == "rbp_genie" else "prior",
                )
                _, hist = run(prob, opts)
                est = np.array(hist.x)
            else:
                if lmmse_x is None:
                    lmmse_x = lmmse_baseline(prob, channel.noise_variance)
                est = lmmse_x
                if alg == "lmmse_projected":
                    if not bounded:
                        raise UnsupportedCalibration("projection needs a bounded-uniform channel")
                    proj = project_consistent(lmmse_x, prob, channel.delta)
                    if not proj.converged:
                        raise RBPError(f"projection did not converge (violation {proj.max_violation:.3g})")
                    est = proj.x
                est = np.broadcast_to(est, (T + 1, x.size))
            res.nse_db[alg] = nse_db(est, x, ex2)
            if bounded:
                res.consistent[alg] = consistent(est[-1])
        except (RBPError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            res.failures[alg] = f"{type(exc).__name__}: {exc}"
    res.wall_time = time.perf_counter() - t0
    return res


def se_config_for(spec: ExperimentSpec, channel: OutputChannelModel, **kw) -> SEConfig:
    """SE configuration matching the realized dimensions (beta = n / m)."""
    m = spec.m
    return SEConfig(beta=spec.n / m, prior=spec.prior, channel=channel, scale=spec.matrix.se_scale(m), **kw)


def _empirical_cdf(values):
    v = np.sort(np.asarray(values, dtype=float))
    return v, np.arange(1, v.size + 1) / v.size


def run_experiment(spec: ExperimentSpec) -> AggregateReport:
    channel = calibrate_noise(spec)
    idx = range(spec.trials)
    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            trials = list(pool.map(lambda k: _run_trial(spec, channel, k), idx))
    else:
        trials = [_run_trial(spec, channel, k) for k in idx]
    trials.sort(key=lambda r: r.trial)

    median, mean, cdf = {}, {}, {}
    for alg in spec.algorithms:
        if alg == "se_predict":
            continue
        rows = [t.nse_db[alg] for t in trials if alg in t.nse_db]
        if not rows:
            continue
        arr = np.sort(np.vstack(rows), axis=0)  # sorted per iteration: order-independent reduction
        median[alg] = np.median(arr, axis=0)
        mean[alg] = np.mean(arr, axis=0)
        cdf[alg] = _empirical_cdf(arr[:, -1])

    report = AggregateReport(spec, channel, trials, median, mean, cdf)
    if "se_predict" in spec.algorithms:
        try:
            cfg = se_config_for(spec, channel)
            hi, lo = run_se(cfg, "hi"), run_se(cfg, "lo")
            report.se_curve = predicted_curve(hi, cfg, spec.iterations)
            report.se_summary = fixed_point_summary(hi, lo, cfg)
        except (RBPError, NotImplementedError) as exc:
            report.se_summary = {"error": f"{type(exc).__name__}: {exc}"}
    return report


# --------------------------------------------------------------------------
# report files


def _f(v) -> str:
    return repr(float(v))


def report_summary(report: AggregateReport) -> dict:
    spec = report.spec
    final = {a: {"median_nse_db": float(v[-1]), "mean_nse_db": float(report.mean_nse_db[a][-1])}
             for a, v in report.median_nse_db.items()}
    if report.se_curve is not None:
        final["se_predict"] = {"median_nse_db": float(report.se_curve[-1]), "mean_nse_db": float(report.se_curve[-1])}
    return {
        "schema": SCHEMA_VERSION,
        "spec": spec.to_record(),
        "config_hash": spec.content_hash(),
        "channel": report.channel.to_record(),
        "m": spec.m,
        "nse_floor_db": NSE_FLOOR_DB,
        "final": final,
        "fixed_point": report.se_summary,
        "failures": [{"trial": t.trial, "algorithm": a, "error": msg}
                     for t in report.trials for a, msg in sorted(t.failures.items())],
        "failure_count": report.failure_count,
    }


def write_report(report: AggregateReport, out_dir) -> dict:
    """Write report.json, median_nse.csv, cdf.csv and trials.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in ("report.json", "median_nse.csv", "cdf.csv", "trials.csv")}
    with open(paths["report.json"], "w") as fh:
        json.dump(report_summary(report), fh, indent=2, sort_keys=True)
        fh.write("\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "algorithm", "nse_db", "mean_nse_db"])
    curves = dict(report.median_nse_db)
    for alg in report.spec.algorithms:
        if alg == "se_predict" and report.se_curve is not None:
            for t, v in enumerate(report.se_curve):
                w.writerow([t, alg, _f(v), _f(v)])
        elif alg in curves:
            for t, v in enumerate(curves[alg]):
                w.writerow([t, alg, _f(v), _f(report.mean_nse_db[alg][t])])
    with open(paths["median_nse.csv"], "w") as fh:
        fh.write(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "nse_db", "empirical_prob"])
    for alg, (v, p) in report.cdf.items():
        for a, b in zip(v, p):
            w.writerow([alg, _f(a), _f(b)])
    with open(paths["cdf.csv"], "w") as fh:
        fh.write(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "algorithm", "t", "nse_db", "consistent"])
    for tr in report.trials:
        for alg, vals in tr.nse_db.items():
            flag = tr.consistent.get(alg)
            flag = "" if flag is None else int(flag)
            for t, v in enumerate(vals):
                w.writerow([tr.trial, alg, t, _f(v), flag])
    with open(paths["trials.csv"], "w") as fh:
        fh.write(buf.getvalue())
    return paths


def spec_from_record(rec: dict) -> ExperimentSpec:
    """Inverse of ``ExperimentSpec.to_record`` (used by the CLI)."""
    rec = dict(rec)
    mat = dict(rec.pop("matrix", {"kind": "gaussian-iid"}))
    if "scale" in mat:
        mat["scale"] = ScaleModel(tuple(tuple(a) for a in mat["scale"]))
    return ExperimentSpec(
        prior=prior_from_record(rec.pop("prior")),
        channel=dict(rec.pop("channel")),
        matrix=MatrixModel(**mat),
        algorithms=tuple(rec.pop("algorithms", ExperimentSpec.algorithms)),
        **rec,
    )


def replace_spec(spec: ExperimentSpec, **kw) -> ExperimentSpec:
    return dataclasses.replace(spec, **kw)
