"""Command line front end: ``relaxed-bp {simulate,se,sweep} --config run.toml``.

One TOML document describes a run; scalar fields can be overridden with
``--set key=value`` (dotted keys reach into tables, e.g. ``prior.rho=0.2``).
See README.md for the schema.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError, RBPError
from .scalar_io import QuadratureSpec, channel_from_record, prior_from_record
from .sim_harness import (
    ALGORITHMS,
    ExperimentSpec,
    MatrixModel,
    calibrate_noise,
    run_experiment,
    write_report,
)
from .state_evolution import (
    MonteCarlo,
    Quadrature,
    ScaleModel,
    SEConfig,
    fixed_point_summary,
    run_se,
    trajectory_csv,
)

log = logging.getLogger("relaxed_bp")

TOP_KEYS = {
    "n", "beta", "trials", "seed", "iterations", "snr_db", "algorithms", "threads",
    "output_dir", "verbosity", "prior", "channel", "matrix", "se",
}
SE_KEYS = {"max_iterations", "tolerance", "method", "nodes", "radius", "samples", "mc_seed"}
MATRIX_KEYS = {"kind", "variance", "d", "scale"}
SWEEPABLE = ("beta", "snr_db", "n", "rho")
EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 1, 2


@dataclass
class CliConfig:
    experiment: Optional[ExperimentSpec]
    se: SEConfig
    output_dir: str = "out"
    verbosity: str = "info"
    raw: dict = field(default_factory=dict)


def _require(d, key, kind, where=None):
    if key not in d:
        raise ConfigError("missing required key", field=where or key)
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is not None and not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise ConfigError(f"expected {kind.__name__}, got {type(v).__name__}", field=where or key)
    return v


def _optional(d, key, kind, default):
    return _require(d, key, kind) if key in d else default


def parse_config(raw: dict) -> CliConfig:
    """Validate a config mapping (parsed TOML or an echoed report spec)."""
    if not raw:
        raise ConfigError("configuration is empty")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field=sorted(unknown)[0])
    beta = _require(raw, "beta", float)
    if not (beta > 0 and math.isfinite(beta)):
        raise ConfigError("must be a positive number", field="beta")
    prior = prior_from_record(_require(raw, "prior", dict))
    chan_rec = dict(_require(raw, "channel", dict))
    snr_db = _optional(raw, "snr_db", float, None)
    if snr_db is not None and len(set(chan_rec) - {"kind"}) > 0:
        raise ConfigError("give either snr_db or explicit channel parameters, not both", field="channel")
    if snr_db is None:
        channel_from_record(chan_rec)  # validates explicit parameters

    mrec = dict(_optional(raw, "matrix", dict, {"kind": "gaussian-iid"}))
    if set(mrec) - MATRIX_KEYS:
        raise ConfigError(f"unknown keys {sorted(set(mrec) - MATRIX_KEYS)}", field="matrix")
    try:
        if "scale" in mrec:
            mrec["scale"] = ScaleModel(tuple(tuple(a) for a in mrec["scale"]))
        matrix = MatrixModel(**mrec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="matrix") from exc

    algorithms = tuple(_optional(raw, "algorithms", list, list(ExperimentSpec.algorithms)))
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad:
        raise ConfigError(f"unknown algorithms {bad}; choose from {list(ALGORITHMS)}", field="algorithms")

    experiment = None
    if "n" in raw:
        for key in ("n", "trials", "seed", "iterations", "threads"):
            if key in raw:
                v = _require(raw, key, int)
                if v < (0 if key == "seed" else 1):
                    raise ConfigError("out of range", field=key)
        try:
            experiment = ExperimentSpec(
                n=raw["n"], beta=beta, prior=prior, channel=chan_rec, snr_db=snr_db, matrix=matrix,
                trials=raw.get("trials", 200), seed=raw.get("seed", 0), iterations=raw.get("iterations", 20),
                algorithms=algorithms, threads=raw.get("threads", 1),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    se_raw = dict(_optional(raw, "se", dict, {}))
    if set(se_raw) - SE_KEYS:
        raise ConfigError(f"unknown keys {sorted(set(se_raw) - SE_KEYS)}", field="se")
    method_name = se_raw.get("method", "quadrature")
    try:
        if method_name == "quadrature":
            method = Quadrature(QuadratureSpec(se_raw.get("nodes", 2001), float(se_raw.get("radius", 8.0))))
        elif method_name == "monte-carlo":
            method = MonteCarlo(se_raw.get("samples", 100_000), se_raw.get("mc_seed", 0))
        else:
            raise ConfigError("must be 'quadrature' or 'monte-carlo'", field="se.method")
        if snr_db is not None:
            calib = experiment or ExperimentSpec(n=1000, beta=beta, prior=prior, channel=chan_rec,
                                                 snr_db=snr_db, matrix=matrix)
            se_channel = calibrate_noise(calib)
        else:
            se_channel = channel_from_record(chan_rec)
        se = SEConfig(
            beta=beta, prior=prior, channel=se_channel, scale=matrix.se_scale(experiment.m if experiment else 1),
            max_iterations=se_raw.get("max_iterations", 100),
            fixed_point_tolerance=float(se_raw.get("tolerance", 1e-9)),
            expectation_method=method,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, RBPError) as exc:
        raise ConfigError(str(exc), field="se") from exc
    if matrix.kind == "gaussian-iid" and matrix.variance is not None:
        log.debug("SE uses unit scale; explicit matrix variance only affects simulations")

    return CliConfig(
        experiment=experiment,
        se=se,
        output_dir=str(_optional(raw, "output_dir", str, "out")),
        verbosity=str(_optional(raw, "verbosity", str, "info")),
        raw=raw,
    )


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, sets=(), **scalars) -> dict:
    raw = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("not a table", field=key)
        node[parts[-1]] = _parse_value(text.strip())
    for key, v in scalars.items():
        if v is not None:
            raw[key] = v
    return raw


def load_raw(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: CliConfig, out_dir: str) -> int:
    if cfg.experiment is None:
        raise ConfigError("missing required key", field="n")
    spec = cfg.experiment
    log.info("simulate: n=%d m=%d beta=%g trials=%d", spec.n, spec.m, spec.beta, spec.trials)
    report = run_experiment(spec)
    paths = write_report(report, out_dir)
    for p in paths.values():
        log.info("wrote %s", p)
    if report.failure_rate > 0.01:
        log.error("%d per-trial failures (%.1f%%)", report.failure_count, 100 * report.failure_rate)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_se(cfg: CliConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    hi, lo = run_se(cfg.se, "hi"), run_se(cfg.se, "lo")
    summary = fixed_point_summary(hi, lo, cfg.se)
    with open(os.path.join(out_dir, "se_trajectory.csv"), "w") as fh:
        fh.write(trajectory_csv([hi, lo], cfg.se))
    with open(os.path.join(out_dir, "se_fixed_point.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("SE fixed point mu_z: hi=%.10g lo=%.10g unique=%s",
             summary["mu_z_hi"], summary["mu_z_lo"], summary["unique"])
    return EXIT_OK


def parse_sweep(text: str):
    """``param=start:step:stop`` (inclusive) or ``param=v1,v2,...``."""
    if "=" not in text:
        raise ConfigError(f"--sweep expects parameter=values, got {text!r}")
    name, vals = (s.strip() for s in text.split("=", 1))
    if name not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {name!r}; choose from {list(SWEEPABLE)}", field="sweep")
    try:
        if ":" in vals:
            start, step, stop = (float(v) for v in vals.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [round(start + k * step, 12) for k in range(count)]
        else:
            values = [float(v) for v in vals.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc), field="sweep") from exc
    if name == "n":
        values = [int(v) for v in values]
    return name, values


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def cmd_sweep(raw: dict, sweep: str, out_dir: str) -> int:
    name, values = parse_sweep(sweep)
    rows, status = [], EXIT_OK
    for v in values:
        sub_raw = copy.deepcopy(raw)
        if name == "rho":
            sub_raw.setdefault("prior", {})["rho"] = v
        else:
            sub_raw[name] = v
        sub_dir = os.path.join(out_dir, f"{name}={_fmt(v)}")
        try:
            cfg = parse_config(sub_raw)
            code = cmd_simulate(cfg, sub_dir)
            cmd_se(cfg, sub_dir)
            with open(os.path.join(sub_dir, "report.json")) as fh:
                final = json.load(fh)["final"]
            for alg in cfg.experiment.algorithms:
                f = final.get(alg, {})
                rows.append([name, _fmt(v), alg, _fmt(f.get("median_nse_db", "")), _fmt(f.get("mean_nse_db", "")), ""])
            status = max(status, code)
        except (RBPError, OSError, ValueError) as exc:
            log.error("%s=%s failed: %s", name, v, exc)
            rows.append([name, _fmt(v), "", "", "", f"{type(exc).__name__}: {exc}"])
            status = EXIT_FAILURES
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "algorithm", "median_nse_db", "mean_nse_db", "error"])
        w.writerows(rows)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaxed-bp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "se", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML run description")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if name == "sweep":
            sp.add_argument("--sweep", required=True, metavar="PARAM=VALUES",
                            help="e.g. beta=0.5:0.5:3.0 or snr_db=5,10,15")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_raw(args.config)
        if not raw:
            raise ConfigError("configuration is empty")
        raw = apply_overrides(raw, args.set, seed=args.seed, trials=args.trials, threads=args.threads)
        cfg = parse_config(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg.verbosity.upper(), logging.INFO),
                        format="%(levelname)s %(message)s")
    out_dir = args.out or cfg.output_dir
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "se":
            return cmd_se(cfg, out_dir)
        return cmd_sweep(raw, args.sweep, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
