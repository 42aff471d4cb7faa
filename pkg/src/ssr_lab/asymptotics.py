"""Short-maturity and small vol-of-vol limits of the skew stickiness ratio.

Short maturity: if ``u**(1/2 - H) k(u) -> g0 > 0`` the ratio tends to
``H + 3/2``.  Small vol-of-vol: with

    A = int_0^T V0,   B = int_0^T V0 k,   C = int_0^T V0 k^2,
    D = int_0^T sqrt(V0(s)) int_s^T V0(u) k(u - s) du ds,

the ratio tends to ``A B / (sqrt(V0(0)) D)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

from scipy import integrate

from .errors import DegenerateDenominator, HypothesisNotSatisfied
from .math_core import norm_pdf
from .model import (
    EffectiveKernel,
    FlatCurve,
    ForwardVarianceCurve,
    PowerKernel,
    curve_eval,
    curve_integral,
)

DEFAULT_TOL = 1e-8
_QUAD_LIMIT = 400


@dataclass(frozen=True)
class GaussianLimitMoments:
    E_Z1Z2: float
    E_Z2sq: float
    g0: float
    H: float
    x_scaled_limit: float
    y_scaled_limit: float

    @property
    def correlation(self) -> float:
        return self.E_Z1Z2 / math.sqrt(self.E_Z2sq)


@dataclass(frozen=True)
class SmallVolMoments:
    A: float
    B: float
    C: float
    D: float


@dataclass(frozen=True)
class LimitReport:
    kind: str  # "short_maturity" or "small_vol"
    value: float
    components: Union[GaussianLimitMoments, SmallVolMoments]
    quadrature_error_estimate: float = 0.0
    method: str = "closed_form"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["components"] = asdict(self.components)
        return d


def short_maturity_limit(kernel: EffectiveKernel) -> LimitReport:
    if kernel.g0 is None or kernel.hurst_H is None:
        raise HypothesisNotSatisfied("u^(1/2-H) k(u) has no finite positive limit at 0+")
    H, g0 = kernel.hurst_H, kernel.g0
    phi0 = float(norm_pdf(0.0))
    moments = GaussianLimitMoments(
        E_Z1Z2=2.0 * g0 / (2.0 * H + 1.0),
        E_Z2sq=g0**2 / (2.0 * H),
        g0=g0,
        H=H,
        x_scaled_limit=g0 * phi0 / (2.0 * H + 1.0),
        y_scaled_limit=g0 * phi0 / (2.0 * (H + 0.5) * (H + 1.5)),
    )
    return LimitReport("short_maturity", H + 1.5, moments)


# ------------------------------------------------------------ quadrature helpers


def _quad(f, a, b, tol, power=0.0, points=None):
    """Adaptive Gauss-Kronrod; ``power != 0`` applies the weight ``(x - a)**power``.

    The tolerance is relative only: the moments enter a ratio, and their scale
    (``v0 * a * T**(H + 1/2)``) can be far below any fixed absolute tolerance.
    """
    if b <= a:
        return 0.0, 0.0
    if power != 0.0:
        val, err = integrate.quad(
            f, a, b, weight="alg", wvar=(power, 0.0), epsabs=0.0, epsrel=tol, limit=_QUAD_LIMIT
        )
        return val, err
    pts = None if not points else [p for p in points if a < p < b] or None
    val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=tol, limit=_QUAD_LIMIT, points=pts)
    return val, err


def _weighted_integral(curve, T, weight_fn, power, tol):
    """``int_0^T weight_fn(s) * s**power ds`` split at curve knots."""
    pts = [0.0] + [p for p in curve.breakpoints if 0.0 < p < T] + [T]
    val = err = 0.0
    for i, (lo, hi) in enumerate(zip(pts, pts[1:])):
        if i == 0:
            v, e = _quad(weight_fn, lo, hi, tol, power=power)
        elif power != 0.0:
            v, e = _quad(lambda s: weight_fn(s) * s**power, lo, hi, tol)
        else:
            v, e = _quad(weight_fn, lo, hi, tol)
        val += v
        err += e
    return val, err


def _v0(curve):
    return lambda s: float(curve_eval(curve, min(max(s, 0.0), curve.t_max)))


def _inner_integral(curve, kern, s, T, tol):
    """``int_s^T V0(u) k_i(u - s) du`` with the power singularity substituted away."""
    v0 = _v0(curve)
    if isinstance(kern, PowerKernel) and kern.H < 0.5:
        e = kern.H + 0.5
        # v = (u - s)**e makes the integrand bounded
        top = (T - s) ** e
        pts = [(p - s) ** e for p in curve.breakpoints if s < p < T]
        return _quad(lambda v: v0(s + v ** (1.0 / e)), 0.0, top, tol, points=pts)
    pts = [p for p in curve.breakpoints if s < p < T]
    return _quad(lambda u: v0(u) * float(kern(u - s)), s, T, tol, points=pts)


def _inner_scale(kern) -> float:
    if isinstance(kern, PowerKernel) and kern.H < 0.5:
        return kern.a / (kern.H + 0.5)
    return 1.0


def small_vol_moments(curve: ForwardVarianceCurve, kernel: EffectiveKernel, T: float,
                      tol: float = DEFAULT_TOL) -> tuple[SmallVolMoments, float]:
    """Quadrature values of ``A, B, C, D`` and a summed absolute error estimate."""
    if T > curve.t_max:
        raise ValueError("curve does not cover [0, T]")
    v0 = _v0(curve)
    A = curve_integral(curve, 0.0, T)
    err_total = 0.0

    B = 0.0
    for rho, kern in kernel.components:
        val, err = _weighted_integral(curve, T, lambda s, k=kern: v0(s) * float(k.smooth(s)), kern.power, tol / 4)
        B += rho * val
        err_total += abs(rho) * err

    C = 0.0
    for rho_i, ki in kernel.components:
        for rho_j, kj in kernel.components:
            val, err = _weighted_integral(
                curve, T,
                lambda s, a=ki, b=kj: v0(s) * float(a.smooth(s)) * float(b.smooth(s)),
                ki.power + kj.power, tol / 4,
            )
            C += rho_i * rho_j * val
            err_total += abs(rho_i * rho_j) * err

    D = 0.0
    for rho, kern in kernel.components:
        scale = _inner_scale(kern)

        def outer(s, k=kern, sc=scale):
            return math.sqrt(v0(s)) * sc * _inner_integral(curve, k, s, T, tol / 8)[0]

        pts = [p for p in curve.breakpoints if 0.0 < p < T]
        val, err = _quad(outer, 0.0, T, tol / 4, points=pts)
        D += rho * val
        err_total += abs(rho) * err
    return SmallVolMoments(A, B, C, D), err_total


def _closed_form_moments(curve, kernel, T) -> SmallVolMoments | None:
    """Exact ``A, B, C, D`` for a flat curve and a single kernel family."""
    if not isinstance(curve, FlatCurve) or len(kernel.components) != 1:
        return None
    v = curve.v0
    rho, kern = kernel.components[0]
    if isinstance(kern, PowerKernel):
        a, H = kern.a, kern.H
        B = v * a * T ** (H + 0.5) / (H + 0.5)
        C = v * a**2 * T ** (2 * H) / (2 * H)
        D = v**1.5 * a * T ** (H + 1.5) / ((H + 0.5) * (H + 1.5))
    else:
        a, b = kern.a, kern.b
        m1 = -math.expm1(-b * T) / b
        B = v * a * m1
        C = v * a**2 * (-math.expm1(-2 * b * T)) / (2 * b)
        D = v**1.5 * a * (T - m1) / b
    return SmallVolMoments(v * T, rho * B, rho**2 * C, rho * D)


def _ratio_value(m: SmallVolMoments, v00: float) -> float:
    if m.D == 0.0:
        if m.B == 0.0:
            raise HypothesisNotSatisfied("both B and D vanish: the limit is 0/0")
        raise DegenerateDenominator("D vanishes while B does not")
    return m.A * m.B / (math.sqrt(v00) * m.D)


def small_vol_limit(curve: ForwardVarianceCurve, kernel: EffectiveKernel, T: float,
                    tol: float = DEFAULT_TOL, method: str = "auto") -> LimitReport:
    """Small vol-of-vol limit ``A B / (sqrt(V0(0)) D)``.

    ``method="quadrature"`` always integrates numerically; ``"auto"`` uses the
    closed form when one exists (flat curve, single kernel) and keeps the
    quadrature as a cross-check folded into the error estimate.
    """
    if kernel.is_zero:
        raise HypothesisNotSatisfied("effective kernel is identically zero")
    if method not in ("auto", "quadrature", "closed_form"):
        raise ValueError(f"unknown method {method!r}")
    v00 = float(curve_eval(curve, 0.0))
    closed = _closed_form_moments(curve, kernel, T) if method != "quadrature" else None
    if method == "closed_form" and closed is None:
        raise ValueError("no closed form for this curve/kernel combination")
    if closed is not None:
        value = _ratio_value(closed, v00)
        quad_m, _ = small_vol_moments(curve, kernel, T, tol)
        try:
            cross = abs(_ratio_value(quad_m, v00) - value)
        except (HypothesisNotSatisfied, DegenerateDenominator):
            cross = math.inf
        return LimitReport("small_vol", value, closed, cross, "closed_form")
    moments, err = small_vol_moments(curve, kernel, T, tol)
    value = _ratio_value(moments, v00)
    rel = err / max(abs(moments.A), 1e-300) + err / max(abs(moments.B), 1e-300) + err / abs(moments.D)
    return LimitReport("small_vol", value, moments, abs(value) * rel, "quadrature")


def small_vol_component_limits(curve: ForwardVarianceCurve, kernel: EffectiveKernel, T: float,
                               tol: float = DEFAULT_TOL, method: str = "auto") -> tuple[float, float]:
    """Limits of ``X(eps)/eps`` and ``Y(eps)/eps``.

    Both carry the factor ``phi(sqrt(A)/2)``, the value produced by the
    Gaussian computation of ``E[1{Z1<0} exp(Z1) Z2]``.
    """
    report = small_vol_limit(curve, kernel, T, tol, method)
    m = report.components
    v00 = float(curve_eval(curve, 0.0))
    phi = float(norm_pdf(0.5 * math.sqrt(m.A)))
    x_lim = m.B * phi / (2.0 * math.sqrt(v00 * m.A))
    y_lim = m.D * phi / (2.0 * m.A**1.5)
    return x_lim, y_lim


def gaussian_oracle_closed_form(A: float, B: float) -> float:
    """``E[1{Z1<0} exp(Z1) Z2]`` for ``Z1 ~ N(-A/2, A)``, ``E Z2 = -B``, ``Cov = B``."""
    return -B * float(norm_pdf(0.5 * math.sqrt(A))) / math.sqrt(A)


# ------------------------------------------------------------ sweep plans


@dataclass(frozen=True)
class SweepPlan:
    variable: str  # "epsilon" or "maturity"
    values: tuple[float, ...]
    seed: int | None = None

    def runs(self):
        return [(self.variable, v, self.seed) for v in self.values]


def _check_schedule(values: Sequence[float], name: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError(f"{name} schedule is empty")
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise ValueError(f"{name} values must be positive and finite")
    if len(set(vals)) != len(vals):
        raise ValueError(f"duplicate {name} values in schedule")
    inc = all(a < b for a, b in zip(vals, vals[1:]))
    dec = all(a > b for a, b in zip(vals, vals[1:]))
    if not (inc or dec):
        raise ValueError(f"{name} values must be sorted")
    return vals


def maturity_sweep_schedule(T_values: Sequence[float], seed: int | None = None) -> SweepPlan:
    return SweepPlan("maturity", _check_schedule(T_values, "maturity"), seed)


def epsilon_sweep_schedule(eps_values: Sequence[float], seed: int | None = None) -> SweepPlan:
    return SweepPlan("epsilon", _check_schedule(eps_values, "epsilon"), seed)
