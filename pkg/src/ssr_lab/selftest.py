"""Reduced-scale invariant suites behind ``ssr-lab selftest``.

Each suite returns a short deterministic detail string; timings go to the log
only, so two runs with the same seed produce identical summaries.
"""

from __future__ import annotations

import math
import time
import warnings

import numpy as np
from scipy import stats as sps

from .asymptotics import small_vol_component_limits, small_vol_limit
from .math_core import PutQuote, bs_put, bs_put_dtotalvar, implied_total_variance
from .model import (
    ExponentialKernel,
    FlatCurve,
    ModelConfig,
    PowerKernel,
    config_from_dict,
    effective_kernel,
    mixing_matrix,
)
from .sim_engine import TimeGrid, build_joint_covariance, generate_paths
from .ssr_estimators import estimate_XY

SUMMARY_FIELDS = ("suite", "status", "detail")


def _flat_exp(eps=0.05):
    return ModelConfig(1.0, 1.0, FlatCurve(0.04), (0.6,), (ExponentialKernel(1.0, 1.0),), eps)


def suite_math_core(rng, scale):
    worst = 0.0
    for _ in range(500):
        tv = math.exp(rng.uniform(math.log(1e-6), math.log(4.0)))
        ratio = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        if abs(math.log(ratio)) > 6.0 * math.sqrt(tv):
            continue
        p = bs_put(1.0, ratio, tv)
        worst = max(worst, abs(implied_total_variance(PutQuote(1.0, ratio, p)) - tv))
    fd = (bs_put(1.0, 1.1, 0.09 + 1e-7) - bs_put(1.0, 1.1, 0.09 - 1e-7)) / 2e-7
    rel = abs(fd / bs_put_dtotalvar(1.0, 1.1, 0.09) - 1.0)
    ok = worst < 1e-8 * scale and rel < 1e-6 * scale
    return ok, f"round-trip max err {worst:.2e}; dP/dSigma rel err {rel:.1e}"


def suite_model(rng, scale):
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 6))
        v = rng.normal(size=d)
        rho = v / np.linalg.norm(v) * rng.uniform(0.01, 0.99)
        L = mixing_matrix(rho)
        worst = max(worst, np.abs(L @ L.T - (np.eye(d) - np.outer(rho, rho))).max())
    cfg = _flat_exp()
    same = config_from_dict(cfg.to_dict()) == cfg
    ok = worst <= 1e-12 * scale and same
    return ok, f"max |LL^T - (I - rho rho^T)| {worst:.1e}; config round trip {same}"


def suite_sim_engine(rng, scale):
    cfg = ModelConfig(1.0, 1.0, FlatCurve(0.04), (0.6,), (PowerKernel(1.0, 0.1),), 0.5)
    grid = TimeGrid(1.0, 32)
    jc = build_joint_covariance(cfg, grid)
    min_eig = float(np.linalg.eigvalsh(jc.cov).min())
    seed = int(rng.integers(2**32))
    s_T = np.concatenate([b.S_T for b in generate_paths(cfg, grid, 20_000, seed, True)])
    pairs = 0.5 * (s_T[0::2] + s_T[1::2])
    z_mart = abs(pairs.mean() - 1.0) / (pairs.std(ddof=1) / math.sqrt(pairs.size))

    cfg0 = cfg.replace(epsilon=0.0)
    log_st = np.concatenate([b.logS[:, -1] for b in generate_paths(cfg0, grid, 20_000, seed, False)])
    ks = sps.kstest(log_st, "norm", args=(-0.02, 0.2)).pvalue
    ok = min_eig >= -1e-10 * scale and z_mart < 3.0 * scale and ks > 0.01 / scale
    return ok, f"min eig {min_eig:.2e}; martingale z {z_mart:.2f}; eps=0 KS p {ks:.3f}"


def suite_ssr_estimators(rng, scale):
    cfg = _flat_exp(0.4)
    grid = TimeGrid(1.0, 32)
    seed = int(rng.integers(2**32))
    bundles = list(generate_paths(cfg, grid, 20_000, seed, True))
    mismatches = 0
    for b in bundles:
        s_T = b.S_T.astype(np.longdouble)
        K = np.longdouble(1.0)
        ind = s_T < K
        lhs = np.where(ind, s_T, 0)
        rhs = K * ind - np.maximum(K - s_T, 0)
        mismatches += int(np.count_nonzero(lhs != rhs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est = estimate_XY(iter(bundles), cfg, grid)
        est0 = estimate_XY(generate_paths(cfg.replace(epsilon=0.0), grid, 20_000, seed, True),
                           cfg.replace(epsilon=0.0), grid)
    x_lim, _ = small_vol_component_limits(cfg.curve, effective_kernel(cfg), 1.0)
    z_x = abs(est.X / 0.4 - x_lim) / (est.X_se / 0.4)
    ok = mismatches == 0 and est0.X == 0.0 and est0.degenerate and z_x < 6.0 * scale
    return ok, f"identity mismatches {mismatches}; eps=0 X={est0.X}; X/eps z {z_x:.2f}"


def suite_asymptotics(rng, scale):
    worst = 0.0
    for H in (0.05, 0.1, 0.25, 0.5):
        cfg = ModelConfig(1.0, 1.0, FlatCurve(0.04), (0.6,), (PowerKernel(1.0, H),), 1.0)
        rep = small_vol_limit(cfg.curve, effective_kernel(cfg), 1.0, method="quadrature")
        worst = max(worst, abs(rep.value - (H + 1.5)))
    cfg = _flat_exp()
    rep = small_vol_limit(cfg.curve, effective_kernel(cfg), 1.0)
    err_e = abs(rep.value - (math.e - 1.0))
    ok = worst < 1e-8 * scale and err_e < 1e-8 * scale
    return ok, f"max |R0 - (H + 3/2)| {worst:.1e}; |R0 - (e - 1)| {err_e:.1e}"


SUITES = {
    "math_core": suite_math_core,
    "model": suite_model,
    "sim_engine": suite_sim_engine,
    "ssr_estimators": suite_ssr_estimators,
    "asymptotics": suite_asymptotics,
}


def run_selftest(seed: int, inject_failure: str | None = None, log=None) -> list[dict]:
    """Run every suite; ``inject_failure`` shrinks one suite's tolerances to force a failure."""
    if inject_failure is not None and inject_failure not in SUITES:
        raise ValueError(f"unknown suite {inject_failure!r}; choose from {sorted(SUITES)}")
    records = []
    for i, (name, fn) in enumerate(SUITES.items()):
        rng = np.random.default_rng([seed % 2**63, i])
        scale = 1e-30 if name == inject_failure else 1.0
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng, scale)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        if log is not None:
            log(f"suite {name}: {'pass' if ok else 'FAIL'} in {time.perf_counter() - t0:.2f}s")
        records.append({"suite": name, "status": "pass" if ok else "fail", "detail": detail})
    return records
