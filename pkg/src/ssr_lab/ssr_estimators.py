"""Monte Carlo estimators of the skew stickiness ratio at time zero.

Two independent routes are provided:

* :func:`estimate_XY` evaluates ``R = X / Y`` with the Malliavin-type
  numerator ``X`` (an expectation involving the running integral ``I_T``)
  and the digital-minus-Black-Scholes denominator ``Y``;
* :func:`estimate_ssr_regression` regresses simulated ATM-vol increments on
  log returns over a short horizon and divides by the ATM skew, which is the
  textbook definition of the ratio.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import DegenerateDenominator, NoArbitrageViolation, SSRLabError
from .math_core import (
    PutQuote,
    atm_skew_from_digital,
    bs_put_dtotalvar,
    implied_total_variance,
    norm_cdf,
    norm_pdf,
)
from .model import ModelConfig, curve_eval, effective_kernel
from .parallel import map_blocks, tree_reduce
from .sim_engine import (
    BLOCK_SIZE,
    PathBundle,
    PathSimulator,
    TimeGrid,
    block_ranges,
    build_joint_covariance,
    standard_normals,
    volterra_covariance,
    volterra_dB_covariance,
)

DEFAULT_LOG_STRIKE_STEP = 0.01

FEATURES = ("x_payoff", "digital", "put_atm", "put_up", "put_down", "s_T")
_IX = {name: i for i, name in enumerate(FEATURES)}


# ------------------------------------------------------------ path statistics


def put_payoff(strike, s_T):
    return np.maximum(strike - s_T, 0.0)


def path_features(bundle: PathBundle, spot0: float, log_strike_step: float = DEFAULT_LOG_STRIKE_STEP):
    """Per-path payoffs entering every estimator, averaged over antithetic pairs."""
    s_T = bundle.S_T
    below = s_T < spot0
    cols = np.empty((s_T.size, len(FEATURES)))
    cols[:, 0] = np.where(below, s_T * bundle.I_T, 0.0)
    cols[:, 1] = below
    cols[:, 2] = put_payoff(spot0, s_T)
    cols[:, 3] = put_payoff(spot0 * math.exp(log_strike_step), s_T)
    cols[:, 4] = put_payoff(spot0 * math.exp(-log_strike_step), s_T)
    cols[:, 5] = s_T
    return bundle.unit_mean(cols)


@dataclass
class PathStatistics:
    """Mean and scatter matrix of the per-unit feature vectors.

    A unit is one path, or one antithetic pair.  Merging uses Chan's update,
    so a fixed block layout gives bit-identical results.
    """

    n_units: int
    n_paths: int
    mean: np.ndarray
    m2: np.ndarray
    log_strike_step: float = DEFAULT_LOG_STRIKE_STEP

    @classmethod
    def from_features(cls, feats: np.ndarray, n_paths: int, log_strike_step: float):
        mean = feats.mean(axis=0)
        centered = feats - mean
        return cls(feats.shape[0], n_paths, mean, centered.T @ centered, log_strike_step)

    @classmethod
    def from_bundle(cls, bundle: PathBundle, spot0: float, log_strike_step=DEFAULT_LOG_STRIKE_STEP):
        return cls.from_features(path_features(bundle, spot0, log_strike_step), len(bundle), log_strike_step)

    def merge(self, other: "PathStatistics") -> "PathStatistics":
        n = self.n_units + other.n_units
        d = other.mean - self.mean
        mean = self.mean + d * (other.n_units / n)
        m2 = self.m2 + other.m2 + np.outer(d, d) * (self.n_units * other.n_units / n)
        return PathStatistics(n, self.n_paths + other.n_paths, mean, m2, self.log_strike_step)

    @property
    def cov(self) -> np.ndarray:
        return self.m2 / max(self.n_units - 1, 1)

    def se_of(self, grad: np.ndarray) -> float:
        return float(math.sqrt(max(grad @ self.cov @ grad, 0.0) / self.n_units))

    def __getitem__(self, name: str) -> float:
        return float(self.mean[_IX[name]])


def accumulate(paths: Iterable[PathBundle], config: ModelConfig, log_strike_step=DEFAULT_LOG_STRIKE_STEP):
    parts = [PathStatistics.from_bundle(b, config.spot0, log_strike_step) for b in paths]
    return tree_reduce(parts, PathStatistics.merge)


def run_path_statistics(
    config: ModelConfig,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    antithetic: bool = True,
    workers: int = 1,
    epsilons: Iterable[float] | None = None,
    log_strike_step: float = DEFAULT_LOG_STRIKE_STEP,
    block_size: int = BLOCK_SIZE,
    simulator: PathSimulator | None = None,
) -> dict[float, PathStatistics]:
    """Simulate once and fold the paths for every requested epsilon.

    All epsilons share the same Gaussian draws (common random numbers).
    """
    if antithetic and n_paths % 2:
        raise ValueError("n_paths must be even with antithetic sampling")
    eps_list = [config.epsilon] if epsilons is None else [float(e) for e in epsilons]
    sim = simulator or PathSimulator(config, grid)
    ranges = block_ranges(n_paths, block_size)

    def one_block(b: int):
        start, stop = ranges[b]
        dB, X = sim.gaussians(seed, start, stop, antithetic)
        idx = np.arange(start, stop)
        return [
            PathStatistics.from_bundle(
                sim.assemble(dB, X, eps, idx, antithetic), config.spot0, log_strike_step
            )
            for eps in eps_list
        ]

    blocks = map_blocks(one_block, len(ranges), workers)
    return {
        eps: tree_reduce([blk[j] for blk in blocks], PathStatistics.merge)
        for j, eps in enumerate(eps_list)
    }


def _as_statistics(paths, config: ModelConfig, log_strike_step=DEFAULT_LOG_STRIKE_STEP) -> PathStatistics:
    if isinstance(paths, PathStatistics):
        return paths
    return accumulate(paths, config, log_strike_step)


# ------------------------------------------------------------ X / Y / R


@dataclass
class SSREstimate:
    epsilon: float
    X: float
    X_se: float
    Y: float
    Y_se: float
    R: float
    R_se: float
    n_paths: int
    atm_total_var: float
    digital_prob: float
    put_price: float
    degenerate: bool = False
    warning: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def estimate_XY(paths, config: ModelConfig, grid: TimeGrid | None = None) -> SSREstimate:
    """``X``, ``Y`` and ``R = X / Y`` from simulated paths (``t = 0``).

    ``paths`` is a stream of :class:`PathBundle` or an already folded
    :class:`PathStatistics`.  Standard errors use the delta method with the
    empirical covariance of the payoffs, which come from the same paths.
    """
    stats = _as_statistics(paths, config)
    if stats.n_units < 2:
        raise ValueError("need at least two independent samples")
    s0 = config.spot0
    eps = config.epsilon
    v00 = float(curve_eval(config.curve, 0.0))
    k = len(FEATURES)

    scale_x = -eps / (2.0 * s0 * math.sqrt(v00))
    X = scale_x * stats["x_payoff"] + 0.0
    grad_x = np.zeros(k)
    grad_x[_IX["x_payoff"]] = scale_x

    put = stats["put_atm"]
    tv = implied_total_variance(PutQuote(s0, s0, put))
    half = 0.5 * math.sqrt(tv)
    digital = stats["digital"]
    Y = digital - float(norm_cdf(half))
    grad_y = np.zeros(k)
    grad_y[_IX["digital"]] = 1.0
    # d Phi(sqrt(tv)/2) / d put = phi(sqrt(tv)/2) / (4 sqrt(tv)) / (dP/dtv)
    grad_y[_IX["put_atm"]] = -float(norm_pdf(half)) / (4.0 * math.sqrt(tv)) / bs_put_dtotalvar(s0, s0, tv)

    X_se = stats.se_of(grad_x)
    Y_se = stats.se_of(grad_y)
    R = X / Y if Y != 0 else math.nan
    # at eps = 0 the ratio is undefined whatever the noise in Y happens to be
    degenerate = eps == 0.0 or not abs(Y) > 2.0 * Y_se
    if degenerate:
        R_se = math.inf
        warning = "degenerate_denominator"
        warnings.warn(
            f"Y = {Y:.3g} is within two standard errors ({Y_se:.3g}) of zero; R is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    else:
        R_se = stats.se_of(grad_x / Y - X * grad_y / Y**2)
        warning = None
    return SSREstimate(
        epsilon=eps,
        X=X,
        X_se=X_se,
        Y=Y,
        Y_se=Y_se,
        R=R,
        R_se=R_se,
        n_paths=stats.n_paths,
        atm_total_var=tv,
        digital_prob=digital,
        put_price=put,
        degenerate=degenerate,
        warning=warning,
    )


# ------------------------------------------------------------ skew


@dataclass
class SkewEstimate:
    log_strike_step: float
    skew_fd: float
    skew_fd_se: float
    skew_eqSk: float
    skew_eqSk_se: float
    tv_skew_fd: float
    tv_skew_eqSk: float
    tv_diff_se: float
    atm_total_var: float

    @property
    def combined_se(self) -> float:
        """Standard error of the difference of the two estimates (same paths)."""
        return self.tv_diff_se

    def as_dict(self) -> dict:
        return asdict(self)


def _skew_quantities(mean: np.ndarray, spot0: float, maturity: float, delta: float) -> np.ndarray:
    tv0 = implied_total_variance(PutQuote(spot0, spot0, mean[_IX["put_atm"]]))
    tv_up = implied_total_variance(PutQuote(spot0, spot0 * math.exp(delta), mean[_IX["put_up"]]))
    tv_dn = implied_total_variance(PutQuote(spot0, spot0 * math.exp(-delta), mean[_IX["put_down"]]))
    digital = min(max(mean[_IX["digital"]], 0.0), 1.0)
    tv_fd = (tv_up - tv_dn) / (2.0 * delta)
    tv_eq = spot0 * atm_skew_from_digital(spot0, tv0, digital)
    vol_fd = (math.sqrt(tv_up / maturity) - math.sqrt(tv_dn / maturity)) / (2.0 * delta)
    vol_eq = tv_eq / (2.0 * math.sqrt(tv0 * maturity))
    return np.array([vol_fd, vol_eq, tv_fd, tv_eq, tv0])


def _numeric_grad(fn, mean: np.ndarray, scales: np.ndarray) -> np.ndarray:
    base = fn(mean)
    grads = np.zeros((base.size, mean.size))
    for i in range(mean.size):
        h = scales[i]
        if h == 0:
            continue
        up, dn = mean.copy(), mean.copy()
        up[i] += h
        dn[i] -= h
        grads[:, i] = (fn(up) - fn(dn)) / (2.0 * h)
    return grads


def estimate_skew_fd(paths, config: ModelConfig, grid: TimeGrid | None = None,
                     log_strike_step: float | None = None) -> SkewEstimate:
    """ATM skew by central differences of implied vol in log-strike.

    Also evaluates the digital-based skew identity on the same paths so the
    two can be compared; ``combined_se`` accounts for their correlation.
    """
    delta = log_strike_step
    if isinstance(paths, PathStatistics):
        if delta is not None and abs(delta - paths.log_strike_step) > 1e-15:
            raise ValueError("statistics were folded with a different log-strike step")
        delta = paths.log_strike_step
    delta = DEFAULT_LOG_STRIKE_STEP if delta is None else delta
    stats = _as_statistics(paths, config, delta)
    s0, T = config.spot0, config.maturity

    def fn(m):
        return _skew_quantities(m, s0, T, delta)

    try:
        vals = fn(stats.mean)
    except NoArbitrageViolation as exc:
        raise NoArbitrageViolation(f"skew inversion failed: {exc}") from exc
    used = [_IX[n] for n in ("digital", "put_atm", "put_up", "put_down")]
    scales = np.zeros(stats.mean.size)
    scales[used] = 1e-7 * np.maximum(np.abs(stats.mean[used]), 1e-3)
    G = _numeric_grad(fn, stats.mean, scales)
    return SkewEstimate(
        log_strike_step=delta,
        skew_fd=float(vals[0]),
        skew_fd_se=stats.se_of(G[0]),
        skew_eqSk=float(vals[1]),
        skew_eqSk_se=stats.se_of(G[1]),
        tv_skew_fd=float(vals[2]),
        tv_skew_eqSk=float(vals[3]),
        tv_diff_se=stats.se_of(G[2] - G[3]),
        atm_total_var=float(vals[4]),
    )


# ------------------------------------------------------------ regression route

_TAG_OUTER = 1
_TAG_INNER = 2


@dataclass
class RegressionEstimate:
    slope: float
    slope_se: float
    skew: float
    R_reg: float
    R_reg_se: float
    h: float
    n_outer: int
    n_inner: int
    n_discarded: int
    atm_vol_ref: float
    skew_se: float = 0.0
    R_reg_half_h: float | None = None
    details: dict = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("details")
        return d


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric-eigenvalue square root; tolerates rank deficiency."""
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


class _OuterSampler:
    """Joint Gaussian state on ``[0, h]`` needed to restart the model at ``h``.

    The vector holds the spot increments on ``[0, h]``, the Volterra factor at
    the interior outer edges and ``G(s) = sum_i int_0^h k_i(s - u) dW^i_u`` at
    the inner-grid edges ``s = h + j dt``, ``j = 0..n_inner_steps - 1``.
    """

    def __init__(self, config: ModelConfig, dt: float, n_h: int, n_in: int):
        keff = effective_kernel(config)
        h = n_h * dt
        outer_edges = np.arange(n_h + 1) * dt
        x_times = outer_edges[1:-1]
        s_times = h + np.arange(n_in) * dt
        times = np.concatenate([x_times, s_times])
        windows = np.concatenate([x_times, np.full(n_in, h)])
        m = times.size
        cov = np.zeros((n_h + m, n_h + m))
        cov[:n_h, :n_h] = np.eye(n_h) * dt
        cross = volterra_dB_covariance(keff, times, windows, outer_edges)
        cov[n_h:, :n_h] = cross
        cov[:n_h, n_h:] = cross.T
        cov[n_h:, n_h:] = volterra_covariance(config.factors, times, windows, times, windows)
        self.cov = cov
        self.factor = _psd_factor(cov)
        self.n_h, self.n_x = n_h, x_times.size
        self.dt = dt
        self.var_x = np.array([sum(k.sq_integral(0.0, t) for _, k in config.factors) for t in x_times])
        # int_0^h sum_i k_i(s - u)^2 du at each inner edge
        self.var_g = np.array(
            [sum(k.sq_integral(s - h, s) for _, k in config.factors) for s in s_times]
        )
        self.weights = np.asarray(keff.cell_integral(outer_edges[:-1], outer_edges[1:])) / dt
        self.outer_curve = curve_eval(config.curve, outer_edges)
        self.inner_curve = curve_eval(config.curve, s_times)


def estimate_ssr_regression(
    config: ModelConfig,
    grid: TimeGrid,
    h: float | None = None,
    n_outer: int = 200,
    n_inner: int = 2000,
    seed: int = 0,
    skew: SkewEstimate | None = None,
    skew_paths: int = 200_000,
    bias_check: bool = False,
    max_discard_fraction: float = 0.05,
) -> RegressionEstimate:
    """Definition-level SSR: regress ATM-vol increments on log returns.

    Outer paths run to ``h`` as independent draws.  Each outer state fixes the
    time-``h`` forward variance curve
    ``V_h(s) = V_0(s) exp(eps G(s) - eps^2/2 int_0^h sum_i k_i(s-u)^2 du)``,
    which is the exact conditional law of the model restarted at ``h``.  The
    inner ATM put (strike ``S_h``) is priced with a fixed set of inner draws
    shared by all outer paths, then inverted.  Increments are measured
    against the same inner pricer evaluated on the unshocked curve ``V_0``.
    The slope through the origin is divided by the ATM skew at time zero.
    Its standard error adds a jackknife over ten inner batches to the
    regression error, because the shared inner draws bias every increment
    the same way.
    """
    T = config.maturity
    dt = grid.dt
    h = T / 64 if h is None else float(h)
    n_h = int(round(h / dt))
    if n_h < 1 or abs(n_h * dt - h) > 1e-9 * T:
        raise ValueError(f"h = {h} must be a positive multiple of the grid step {dt}")
    n_in = grid.n_steps - n_h
    if n_in < 2:
        raise ValueError("h leaves fewer than two inner steps")
    if n_inner % 2:
        raise ValueError("n_inner must be even (antithetic pairs)")
    if n_outer < 3:
        raise ValueError("need at least three outer paths")
    eps = config.epsilon
    tau = T - h

    if skew is None:
        stats = run_path_statistics(config, grid, skew_paths, seed ^ 0x5EED, antithetic=True)[config.epsilon]
        skew = estimate_skew_fd(stats, config, grid)
    if skew.skew_fd == 0:
        raise DegenerateDenominator("ATM skew is zero; the ratio is undefined")

    outer = _OuterSampler(config, dt, n_h, n_in)
    z = standard_normals(seed, 0, n_outer, outer.factor.shape[1], False, _TAG_OUTER)
    g = z @ outer.factor.T
    dB = g[:, :n_h]
    X = g[:, n_h : n_h + outer.n_x]
    G = g[:, n_h + outer.n_x :]

    # outer spot path on [0, h]
    V = np.empty((n_outer, n_h))
    V[:, 0] = outer.outer_curve[0]
    if n_h > 1:
        V[:, 1:] = outer.outer_curve[1:-1] * np.exp(eps * X - 0.5 * eps**2 * outer.var_x)
    sqv = np.sqrt(V)
    log_ret = np.sum(sqv * dB - 0.5 * V * dt, axis=1)
    curves = outer.inner_curve * np.exp(eps * G - 0.5 * eps**2 * outer.var_g)

    # shared inner draws; the inner covariance is curve-free
    inner_grid = TimeGrid(tau, n_in)
    inner_cfg = config.replace(maturity=tau, spot0=1.0)
    jc = build_joint_covariance(inner_cfg, inner_grid)
    zi = standard_normals(seed, 0, n_inner, 2 * n_in, True, _TAG_INNER)
    gi = zi @ jc.factor.T
    dBi, Xi = gi[:, :n_in], gi[:, n_in:]
    shock = np.exp(eps * Xi[:, :-1] - 0.5 * eps**2 * jc.var_x[:-1])

    # inner pairs split into batches for a leave-one-batch-out jackknife
    n_batches = 10 if n_inner % 20 == 0 else 1
    batch_of = np.repeat(np.arange(n_batches), n_inner // n_batches)

    def atm_vol(price: float) -> float:
        return math.sqrt(implied_total_variance(PutQuote(1.0, 1.0, price)) / tau)

    def inner_batch_prices(curve_vals: np.ndarray) -> np.ndarray:
        Vi = np.empty((n_inner, n_in))
        Vi[:, 0] = curve_vals[0]
        Vi[:, 1:] = curve_vals[1:] * shock
        log_st = np.sum(np.sqrt(Vi) * dBi - 0.5 * Vi * dt, axis=1)
        return np.bincount(batch_of, weights=put_payoff(1.0, np.exp(log_st))) / (n_inner // n_batches)

    def vols(batch_prices: np.ndarray) -> np.ndarray:
        """ATM vol from all batches, then with each batch left out."""
        full = batch_prices.mean()
        if n_batches == 1:
            return np.array([atm_vol(full)])
        loo = (n_batches * full - batch_prices) / (n_batches - 1)
        return np.array([atm_vol(full)] + [atm_vol(p) for p in loo])

    ref = vols(inner_batch_prices(outer.inner_curve))
    dsig = np.full((n_outer, ref.size), np.nan)
    for o in range(n_outer):
        try:
            dsig[o] = vols(inner_batch_prices(curves[o])) - ref
        except NoArbitrageViolation:
            pass
    ok = np.all(np.isfinite(dsig), axis=1)
    n_disc = int(n_outer - ok.sum())
    if n_disc > max_discard_fraction * n_outer:
        raise SSRLabError(f"{n_disc} of {n_outer} outer samples failed inner inversion")

    x, y = log_ret[ok], dsig[ok, 0]
    sxx = float(np.dot(x, x))
    slope = float(np.dot(x, y) / sxx)
    resid = y - slope * x
    var_outer = float(np.dot(resid, resid) / (x.size - 1) / sxx)
    # the inner draws are shared by every outer state, so their error moves all
    # increments together and is invisible in the residuals; the jackknife
    # over inner batches measures it (the idiosyncratic part is counted twice)
    var_inner = 0.0
    if n_batches > 1:
        loo_slopes = dsig[ok, 1:].T @ x / sxx
        var_inner = float((n_batches - 1) / n_batches * np.sum((loo_slopes - loo_slopes.mean()) ** 2))
    slope_se = math.sqrt(var_outer + var_inner)
    R_reg = slope / skew.skew_fd
    R_se = abs(R_reg) * math.hypot(slope_se / slope if slope else math.inf, skew.skew_fd_se / skew.skew_fd)

    half = None
    if bias_check and n_h % 2 == 0:
        half = estimate_ssr_regression(
            config, grid, h / 2, n_outer, n_inner, seed, skew=skew, bias_check=False
        ).R_reg
    return RegressionEstimate(
        slope=slope,
        slope_se=slope_se,
        skew=skew.skew_fd,
        R_reg=R_reg,
        R_reg_se=R_se,
        h=h,
        n_outer=n_outer,
        n_inner=n_inner,
        n_discarded=n_disc,
        atm_vol_ref=float(ref[0]),
        skew_se=skew.skew_fd_se,
        R_reg_half_h=half,
        details={"log_returns": log_ret, "dsigma": dsig[:, 0], "slope_se_inner": math.sqrt(var_inner)},
    )
