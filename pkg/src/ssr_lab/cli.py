"""``ssr-lab`` command line: estimate, limit, sweep-eps, sweep-T, selftest."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .asymptotics import (
    epsilon_sweep_schedule,
    maturity_sweep_schedule,
    short_maturity_limit,
    small_vol_limit,
)
from .errors import (
    ConfigError,
    DegenerateDenominator,
    HypothesisNotSatisfied,
    NoArbitrageViolation,
    NumericalDegeneracy,
    SSRLabError,
    UnsupportedKernelMix,
)
from .model import ModelConfig, effective_kernel, load_config
from .parallel import resolve_workers
from .sim_engine import PathSimulator, TimeGrid, generate_paths, write_path_dump
from .ssr_estimators import estimate_skew_fd, estimate_XY, run_path_statistics

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

DEMO_CONFIGS = ("flat_exp", "rough_h01", "two_factor_bergomi")

ESTIMATE_FIELDS = (
    "row_type", "status", "warning", "epsilon", "maturity",
    "X", "X_se", "Y", "Y_se", "R", "R_se",
    "digital_prob", "atm_total_var", "atm_vol",
    "skew_fd", "skew_fd_se", "skew_eqSk", "skew_eqSk_se",
    "n_paths", "n_steps", "seed",
)
LIMIT_FIELDS = (
    "limit", "status", "value", "quadrature_error", "method",
    "A", "B", "C", "D", "g0", "H",
    "E_Z1Z2", "E_Z2sq", "x_scaled_limit", "y_scaled_limit", "message",
)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    n_paths: int
    n_steps: int
    antithetic: bool
    workers: int
    output_path: str | None
    format: str = "csv"

    def __post_init__(self):
        if self.n_paths < 2:
            raise ConfigError("--paths must be at least 2")
        if self.antithetic and self.n_paths % 2:
            raise ConfigError("--paths must be even with --antithetic")
        if not 8 <= self.n_steps <= 4096:
            raise ConfigError("--steps must lie in [8, 4096]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if self.format not in ("csv", "json"):
            raise ConfigError("--format must be csv or json")


# ------------------------------------------------------------ output


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def render(records: list[dict], fields, fmt: str) -> str:
    if fmt == "json":
        rows = [{f: _json_value(r.get(f)) for f in fields} for r in records]
        return json.dumps(rows, indent=2) + "\n"
    lines = [",".join(fields)]
    for r in records:
        lines.append(",".join(format_value(r.get(f)) for f in fields))
    return "\n".join(lines) + "\n"


def write_atomic(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent if str(target.parent) else ".", prefix=".ssrlab-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _log(msg: str) -> None:
    print(f"ssr-lab: {msg}", file=sys.stderr)


# ------------------------------------------------------------ config


def resolve_config(path: str | None) -> ModelConfig:
    if path is None:
        raise ConfigError("--config is required")
    if os.path.exists(path):
        return load_config(path)
    name = path[5:] if path.startswith("demo:") else path
    if name in DEMO_CONFIGS:
        text = resources.files("ssr_lab").joinpath("configs", f"{name}.json").read_text()
        return load_config(text)
    raise ConfigError(f"config file not found: {path}")


# ------------------------------------------------------------ commands


def _estimate_record(stats, config: ModelConfig, grid: TimeGrid, manifest: RunManifest) -> dict:
    rec = {
        "row_type": "estimate",
        "epsilon": config.epsilon,
        "maturity": config.maturity,
        "n_paths": manifest.n_paths,
        "n_steps": grid.n_steps,
        "seed": manifest.seed,
    }
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = estimate_XY(stats, config, grid)
    except NoArbitrageViolation as exc:
        rec.update(status="numerical_error", warning=str(exc))
        return rec
    rec.update(
        status="ok",
        warning=est.warning,
        X=est.X, X_se=est.X_se, Y=est.Y, Y_se=est.Y_se, R=est.R, R_se=est.R_se,
        digital_prob=est.digital_prob,
        atm_total_var=est.atm_total_var,
        atm_vol=math.sqrt(est.atm_total_var / config.maturity),
    )
    try:
        sk = estimate_skew_fd(stats, config, grid)
        rec.update(
            skew_fd=sk.skew_fd, skew_fd_se=sk.skew_fd_se,
            skew_eqSk=sk.skew_eqSk, skew_eqSk_se=sk.skew_eqSk_se,
        )
    except NoArbitrageViolation as exc:
        rec["warning"] = "; ".join(filter(None, [rec["warning"], f"skew: {exc}"]))
    return rec


def cmd_estimate(manifest: RunManifest, dump_paths: str | None = None) -> list[dict]:
    config = resolve_config(manifest.config_path)
    grid = TimeGrid(config.maturity, manifest.n_steps)
    sim = PathSimulator(config, grid)
    stats = run_path_statistics(
        config, grid, manifest.n_paths, manifest.seed, manifest.antithetic,
        manifest.workers, simulator=sim,
    )[config.epsilon]
    if dump_paths:
        bundles = generate_paths(config, grid, manifest.n_paths, manifest.seed, manifest.antithetic, simulator=sim)
        write_path_dump(dump_paths, bundles, grid.n_steps, manifest.n_paths, manifest.seed)
    rec = _estimate_record(stats, config, grid, manifest)
    if rec["status"] != "ok":
        raise NumericalDegeneracy(rec["warning"])
    return [rec]


def limit_records(config: ModelConfig, tol: float = 1e-8) -> list[dict]:
    rows = []
    try:
        kernel = effective_kernel(config)
    except UnsupportedKernelMix as exc:
        for kind in ("short_maturity", "small_vol"):
            rows.append({"limit": kind, "status": "unsupported_kernel_mix", "message": str(exc)})
        return rows

    row = {"limit": "short_maturity", "g0": kernel.g0, "H": kernel.hurst_H}
    try:
        rep = short_maturity_limit(kernel)
        c = rep.components
        row.update(
            status="ok", value=rep.value, quadrature_error=0.0, method=rep.method,
            E_Z1Z2=c.E_Z1Z2, E_Z2sq=c.E_Z2sq,
            x_scaled_limit=c.x_scaled_limit, y_scaled_limit=c.y_scaled_limit,
        )
    except HypothesisNotSatisfied as exc:
        row.update(status="hypothesis_not_satisfied", message=str(exc))
    rows.append(row)

    row = {"limit": "small_vol", "g0": kernel.g0, "H": kernel.hurst_H}
    try:
        rep = small_vol_limit(config.curve, kernel, config.maturity, tol)
        c = rep.components
        row.update(
            status="ok", value=rep.value, quadrature_error=rep.quadrature_error_estimate,
            method=rep.method, A=c.A, B=c.B, C=c.C, D=c.D,
        )
    except HypothesisNotSatisfied as exc:
        row.update(status="hypothesis_not_satisfied", message=str(exc))
    except DegenerateDenominator as exc:
        row.update(status="degenerate_denominator", message=str(exc))
    rows.append(row)
    return rows


def cmd_limit(manifest: RunManifest) -> list[dict]:
    return limit_records(resolve_config(manifest.config_path))


def cmd_sweep(manifest: RunManifest, variable: str, values) -> list[dict]:
    config = resolve_config(manifest.config_path)
    if variable == "epsilon":
        plan = epsilon_sweep_schedule(values, manifest.seed)
        grid = TimeGrid(config.maturity, manifest.n_steps)
        rows = []
        stats = run_path_statistics(
            config, grid, manifest.n_paths, manifest.seed, manifest.antithetic,
            manifest.workers, epsilons=plan.values,
        )
        for eps in plan.values:
            rows.append(_estimate_record(stats[eps], config.replace(epsilon=eps), grid, manifest))
        limit_row = {"row_type": "limit", "epsilon": 0.0, "maturity": config.maturity}
        try:
            rep = small_vol_limit(config.curve, effective_kernel(config), config.maturity)
            limit_row.update(status="ok", R=rep.value)
        except SSRLabError as exc:
            limit_row.update(status="hypothesis_not_satisfied", warning=str(exc))
        rows.append(limit_row)
        key = "epsilon"
    else:
        plan = maturity_sweep_schedule(values, manifest.seed)
        rows = []
        for T in plan.values:
            try:
                cfg_T = config.replace(maturity=T)
                grid = TimeGrid(T, manifest.n_steps)
                stats = run_path_statistics(
                    cfg_T, grid, manifest.n_paths, manifest.seed, manifest.antithetic, manifest.workers,
                )[config.epsilon]
                rows.append(_estimate_record(stats, cfg_T, grid, manifest))
            except SSRLabError as exc:
                rows.append({
                    "row_type": "estimate", "status": "error", "warning": str(exc),
                    "epsilon": config.epsilon, "maturity": T, "n_paths": manifest.n_paths,
                    "n_steps": manifest.n_steps, "seed": manifest.seed,
                })
        limit_row = {"row_type": "limit", "epsilon": config.epsilon, "maturity": 0.0}
        try:
            rep = short_maturity_limit(effective_kernel(config))
            limit_row.update(status="ok", R=rep.value)
        except SSRLabError as exc:
            limit_row.update(status="hypothesis_not_satisfied", warning=str(exc))
        rows.append(limit_row)
        key = "maturity"
    rows.sort(key=lambda r: r[key])
    return rows


# ------------------------------------------------------------ argument parsing


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path or demo name (flat_exp, rough_h01, two_factor_bergomi)")
    common.add_argument("--seed", type=int, default=20261018)
    common.add_argument("--paths", type=int, default=100_000)
    common.add_argument("--steps", type=int, default=256)
    common.add_argument("--antithetic", action="store_true")
    common.add_argument("--workers", default=None, help="N or 'auto' (falls back to $SSRLAB_WORKERS)")
    common.add_argument("--out", default=None, help="output file ('-' or omitted: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = argparse.ArgumentParser(prog="ssr-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", parents=[common], help="Monte Carlo X, Y, R and skews")
    est.add_argument("--dump-paths", default=None, help="write simulated paths (binary, debugging)")
    sub.add_parser("limit", parents=[common], help="short-maturity and small vol-of-vol limits")
    se = sub.add_parser("sweep-eps", parents=[common], help="R(eps) over a vol-of-vol schedule")
    se.add_argument("--values", type=_values, default=[0.4, 0.2, 0.1, 0.05])
    st = sub.add_parser("sweep-T", parents=[common], help="R(T) over a maturity schedule")
    st.add_argument("--values", type=_values, default=[0.2, 0.1, 0.05, 0.025])
    sf = sub.add_parser("selftest", parents=[common], help="reduced-scale invariant suites")
    sf.add_argument("--inject-failure", default=None, metavar="SUITE",
                    help="debug: tighten one suite's tolerance so that it fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        manifest = RunManifest(
            command=args.command,
            config_path=args.config,
            seed=args.seed,
            n_paths=args.paths,
            n_steps=args.steps,
            antithetic=args.antithetic,
            workers=resolve_workers(args.workers),
            output_path=args.out,
            format=args.format,
        )
        if args.command == "estimate":
            records, fields = cmd_estimate(manifest, args.dump_paths), ESTIMATE_FIELDS
        elif args.command == "limit":
            records, fields = cmd_limit(manifest), LIMIT_FIELDS
        elif args.command == "sweep-eps":
            records, fields = cmd_sweep(manifest, "epsilon", args.values), ESTIMATE_FIELDS
        elif args.command == "sweep-T":
            records, fields = cmd_sweep(manifest, "maturity", args.values), ESTIMATE_FIELDS
        else:
            from .selftest import SUMMARY_FIELDS, run_selftest

            records = run_selftest(manifest.seed, inject_failure=args.inject_failure, log=_log)
            write_atomic(manifest.output_path, render(records, SUMMARY_FIELDS, manifest.format))
            failed = [r["suite"] for r in records if r["status"] != "pass"]
            _log(f"selftest wall time {time.perf_counter() - t0:.2f}s")
            if failed:
                _log(f"failing suites: {', '.join(failed)}")
                return EXIT_FAILURE
            return EXIT_OK
        for r in records:
            if r.get("warning"):
                _log(f"warning ({r.get('row_type', r.get('limit'))}): {r['warning']}")
        write_atomic(manifest.output_path, render(records, fields, manifest.format))
    except (NumericalDegeneracy, DegenerateDenominator, NoArbitrageViolation, ArithmeticError) as exc:
        _log(f"numerical error: {exc}")
        return EXIT_NUMERICAL
    except (ConfigError, UnsupportedKernelMix, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    _log(f"{args.command} wall time {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
