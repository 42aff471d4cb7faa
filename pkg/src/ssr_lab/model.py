"""Bergomi-type model description: kernels, correlations, forward variance curve.

The forward variance of maturity ``s`` evolves as
``dV_t(s) = V_t(s) * eps * sum_i k_i(s - t) dW^i_t`` with ``d<B, W^i> = rho_i dt``.
Only the correlation-weighted aggregate ``k = sum_i rho_i k_i`` enters the
spot/variance covariation, which is what :func:`effective_kernel` builds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import hyp2f1

from .errors import ConfigError, UnsupportedKernelMix


# ---------------------------------------------------------------- kernels


@dataclass(frozen=True)
class ExponentialKernel:
    """``k(t) = a * exp(-b t)``."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ConfigError(f"exponential kernel amplitude must be positive, got {self.a!r}")
        if not (self.b > 0 and math.isfinite(self.b)):
            raise ConfigError(f"exponential kernel decay must be positive, got {self.b!r}")

    # t**power * smooth(t) factorization used by the singular quadratures
    power = 0.0

    def smooth(self, t):
        return self.a * np.exp(-self.b * np.asarray(t, dtype=float))

    def __call__(self, t):
        return self.smooth(t)

    def antiderivative(self, x):
        """``int_0^x k``."""
        x = np.asarray(x, dtype=float)
        return self.a * -np.expm1(-self.b * x) / self.b

    def cell_integral(self, t0, t1):
        return self.antiderivative(t1) - self.antiderivative(t0)

    def sq_integral(self, x0, x1):
        """``int_{x0}^{x1} k(v)^2 dv``."""
        return self.prod_integral(x0, x1, 0.0)

    def prod_integral(self, x0, x1, c):
        """``int_{x0}^{x1} k(v) k(v + c) dv`` for ``c >= 0``."""
        x0 = np.asarray(x0, dtype=float)
        x1 = np.asarray(x1, dtype=float)
        c = np.asarray(c, dtype=float)
        b2 = 2.0 * self.b
        return self.a**2 * np.exp(-self.b * c) * (np.exp(-b2 * x0) - np.exp(-b2 * x1)) / b2

    def to_dict(self) -> dict:
        return {"type": "exp", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class PowerKernel:
    """``k(t) = a * t**(H - 1/2)``; ``H = 1/2`` is the constant kernel."""

    a: float
    H: float

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ConfigError(f"power kernel amplitude must be positive, got {self.a!r}")
        if not (0.0 < self.H <= 0.5):
            raise ConfigError(f"H outside (0, 1/2]: {self.H!r}")

    @property
    def power(self) -> float:
        return self.H - 0.5

    def smooth(self, t):
        return np.full(np.shape(t), self.a, dtype=float)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.H == 0.5:
            return np.full(t.shape, self.a)
        with np.errstate(divide="ignore"):
            return self.a * t**self.power

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        e = self.H + 0.5
        return self.a * x**e / e

    def cell_integral(self, t0, t1):
        return self.antiderivative(t1) - self.antiderivative(t0)

    def sq_integral(self, x0, x1):
        x0 = np.asarray(x0, dtype=float)
        x1 = np.asarray(x1, dtype=float)
        h2 = 2.0 * self.H
        return self.a**2 * (x1**h2 - x0**h2) / h2

    def _prod_primitive(self, x, c):
        # int_0^x v^al (v + c)^al dv, c > 0, via Euler's integral for 2F1
        al = self.power
        return c**al * x ** (al + 1.0) / (al + 1.0) * hyp2f1(-al, al + 1.0, al + 2.0, -x / c)

    def prod_integral(self, x0, x1, c):
        """``int_{x0}^{x1} k(v) k(v + c) dv`` for ``c >= 0`` (hypergeometric closed form)."""
        x0, x1, c = np.broadcast_arrays(
            np.asarray(x0, dtype=float), np.asarray(x1, dtype=float), np.asarray(c, dtype=float)
        )
        if self.H == 0.5:
            return self.a**2 * (x1 - x0)
        out = np.empty(x0.shape)
        zero = c == 0.0
        out[zero] = self.sq_integral(x0[zero], x1[zero])
        nz = ~zero
        if np.any(nz):
            cc = c[nz]
            out[nz] = self.a**2 * (
                self._prod_primitive(x1[nz], cc) - self._prod_primitive(x0[nz], cc)
            )
        return out

    def to_dict(self) -> dict:
        return {"type": "power", "a": self.a, "H": self.H}


Kernel = Union[ExponentialKernel, PowerKernel]


@dataclass(frozen=True)
class EffectiveKernel:
    """``k(t) = sum_i rho_i k_i(t)`` plus its small-time regularity data.

    ``hurst_H`` and ``g0`` are set only when ``u**(1/2 - H) * k(u)`` has a finite
    positive limit at ``0+``.
    """

    components: tuple[tuple[float, Kernel], ...]
    hurst_H: float | None = None
    g0: float | None = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return sum(rho * kern(t) for rho, kern in self.components)

    def antiderivative(self, x):
        return sum(rho * kern.antiderivative(x) for rho, kern in self.components)

    def cell_integral(self, t0, t1):
        return sum(rho * kern.cell_integral(t0, t1) for rho, kern in self.components)

    def scaled(self, c: float) -> "EffectiveKernel":
        comps = tuple((rho, _scale_kernel(k, c)) for rho, k in self.components)
        g0 = None if self.g0 is None else self.g0 * c
        return EffectiveKernel(comps, self.hurst_H, g0)

    @property
    def is_zero(self) -> bool:
        """True when the weighted components cancel identically."""
        groups: dict[tuple, float] = {}
        for rho, kern in self.components:
            shape = ("exp", kern.b) if isinstance(kern, ExponentialKernel) else ("pow", kern.H)
            groups[shape] = groups.get(shape, 0.0) + rho * kern.a
        return all(abs(v) <= 1e-15 for v in groups.values())


def _scale_kernel(kern: Kernel, c: float) -> Kernel:
    if isinstance(kern, ExponentialKernel):
        return ExponentialKernel(kern.a * c, kern.b)
    return PowerKernel(kern.a * c, kern.H)


# ---------------------------------------------------------------- curves


@dataclass(frozen=True)
class FlatCurve:
    v0: float

    def __post_init__(self):
        if not (self.v0 > 0 and math.isfinite(self.v0)):
            raise ConfigError(f"forward variance must be positive, got {self.v0!r}")

    t_max = math.inf
    breakpoints = ()

    def to_dict(self) -> dict:
        return {"type": "flat", "v0": self.v0}


@dataclass(frozen=True)
class PiecewiseLinearCurve:
    knots: tuple[tuple[float, float], ...]

    def __post_init__(self):
        knots = tuple((float(t), float(v)) for t, v in self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 2:
            raise ConfigError("piecewise-linear curve needs at least two knots")
        if knots[0][0] != 0.0:
            raise ConfigError("first curve knot must sit at t = 0")
        ts = [t for t, _ in knots]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("curve knots must be strictly increasing in t")
        if any(not (v > 0 and math.isfinite(v)) for _, v in knots):
            raise ConfigError("nonpositive forward variance in curve knots")

    @property
    def t_max(self) -> float:
        return self.knots[-1][0]

    @property
    def breakpoints(self) -> tuple:
        return tuple(t for t, _ in self.knots[1:-1])

    def to_dict(self) -> dict:
        return {"type": "pwl", "knots": [[t, v] for t, v in self.knots]}


ForwardVarianceCurve = Union[FlatCurve, PiecewiseLinearCurve]


def curve_eval(curve: ForwardVarianceCurve, t):
    """Forward variance ``V_0(t)``; raises outside ``[0, t_max]``."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0) or np.any(arr > curve.t_max * (1 + 1e-12)):
        raise ValueError(f"curve evaluated outside [0, {curve.t_max}]")
    if isinstance(curve, FlatCurve):
        out = np.full(arr.shape, curve.v0)
    else:
        ts = np.array([k[0] for k in curve.knots])
        vs = np.array([k[1] for k in curve.knots])
        out = np.interp(arr, ts, vs)
    return float(out) if out.ndim == 0 else out


def curve_integral(curve: ForwardVarianceCurve, a: float, b: float) -> float:
    """Exact ``int_a^b V_0``."""
    if a > b:
        raise ValueError("integral bounds must satisfy a <= b")
    if a < 0 or b > curve.t_max * (1 + 1e-12):
        raise ValueError(f"curve integrated outside [0, {curve.t_max}]")
    if isinstance(curve, FlatCurve):
        return curve.v0 * (b - a)
    pts = [a] + [t for t, _ in curve.knots if a < t < b] + [b]
    total = 0.0
    for lo, hi in zip(pts, pts[1:]):
        total += 0.5 * (hi - lo) * (curve_eval(curve, lo) + curve_eval(curve, hi))
    return total


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    spot0: float
    maturity: float
    curve: ForwardVarianceCurve
    rhos: tuple[float, ...]
    kernels: tuple[Kernel, ...]
    epsilon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if not (self.spot0 > 0 and math.isfinite(self.spot0)):
            raise ConfigError(f"spot0 must be positive, got {self.spot0!r}")
        if not (self.maturity > 0 and math.isfinite(self.maturity)):
            raise ConfigError(f"maturity must be positive, got {self.maturity!r}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon!r}")
        if len(self.rhos) == 0:
            raise ConfigError("at least one factor is required")
        if len(self.rhos) != len(self.kernels):
            raise ConfigError("one kernel per correlation is required")
        validate_correlations(self.rhos)
        if self.curve.t_max < self.maturity:
            raise ConfigError("forward variance curve does not cover [0, maturity]")

    @property
    def factors(self):
        return tuple(zip(self.rhos, self.kernels))

    def replace(self, **changes) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "spot0": self.spot0,
            "maturity": self.maturity,
            "curve": self.curve.to_dict(),
            "factors": [{"rho": r, "kernel": k.to_dict()} for r, k in self.factors],
            "epsilon": self.epsilon,
        }


def validate_correlations(rhos) -> float:
    rhos = np.asarray(rhos, dtype=float)
    if rhos.ndim != 1 or rhos.size == 0 or not np.all(np.isfinite(rhos)):
        raise ConfigError("correlations must be a nonempty vector of finite reals")
    norm = float(np.sqrt(np.sum(rhos**2)))
    if norm >= 1.0:
        raise ConfigError(f"correlation norm >= 1 ({norm:.6g})")
    if norm <= 0.0:
        raise ConfigError("correlation norm must be positive")
    return norm


def mixing_matrix(rhos) -> np.ndarray:
    """Symmetric square root ``L = I - beta rho rho^T`` of ``I - rho rho^T``."""
    rho_vec = np.asarray(rhos, dtype=float)
    r2 = validate_correlations(rho_vec) ** 2
    beta = (1.0 - math.sqrt(1.0 - r2)) / r2
    return np.eye(rho_vec.size) - beta * np.outer(rho_vec, rho_vec)


def effective_kernel(config: ModelConfig) -> EffectiveKernel:
    comps = config.factors
    powers = {k.H for _, k in comps if isinstance(k, PowerKernel)}
    if len(powers) > 1:
        raise UnsupportedKernelMix(f"power kernels with different H: {sorted(powers)}")
    H = powers.pop() if powers else 0.5
    if H < 0.5:
        # exponential components are bounded and vanish in u**(1/2-H) k(u)
        lead = sum(r * k.a for r, k in comps if isinstance(k, PowerKernel))
    else:
        lead = sum(r * k.a for r, k in comps)
    if lead > 0:
        return EffectiveKernel(tuple(comps), H, float(lead))
    return EffectiveKernel(tuple(comps))


_TOP_KEYS = {"spot0", "maturity", "curve", "factors", "epsilon"}


def _reject_unknown(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _num(d: dict, key: str, where: str) -> float:
    if key not in d:
        raise ConfigError(f"missing '{key}' in {where}")
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"'{key}' in {where} must be a number")
    return float(val)


def _parse_kernel(d, where: str) -> Kernel:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    kind = d.get("type")
    if kind == "exp":
        _reject_unknown(d, {"type", "a", "b"}, where)
        return ExponentialKernel(_num(d, "a", where), _num(d, "b", where))
    if kind == "power":
        _reject_unknown(d, {"type", "a", "H"}, where)
        return PowerKernel(_num(d, "a", where), _num(d, "H", where))
    raise ConfigError(f"{where}: unknown kernel type {kind!r}")


def _parse_curve(d) -> ForwardVarianceCurve:
    if not isinstance(d, dict):
        raise ConfigError("curve must be an object")
    kind = d.get("type")
    if kind == "flat":
        _reject_unknown(d, {"type", "v0"}, "curve")
        return FlatCurve(_num(d, "v0", "curve"))
    if kind == "pwl":
        _reject_unknown(d, {"type", "knots"}, "curve")
        knots = d.get("knots")
        if not isinstance(knots, list) or not all(
            isinstance(k, list) and len(k) == 2 for k in knots
        ):
            raise ConfigError("curve knots must be a list of [t, v] pairs")
        try:
            pairs = tuple((float(t), float(v)) for t, v in knots)
        except (TypeError, ValueError):
            raise ConfigError("curve knots must hold numbers") from None
        return PiecewiseLinearCurve(pairs)
    raise ConfigError(f"unknown curve type {kind!r}")


def config_from_dict(doc: dict) -> ModelConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    factors = doc.get("factors")
    if not isinstance(factors, list) or not factors:
        raise ConfigError("'factors' must be a nonempty list")
    rhos, kernels = [], []
    for i, f in enumerate(factors):
        where = f"factors[{i}]"
        if not isinstance(f, dict):
            raise ConfigError(f"{where} must be an object")
        _reject_unknown(f, {"rho", "kernel"}, where)
        rhos.append(_num(f, "rho", where))
        if "kernel" not in f:
            raise ConfigError(f"missing 'kernel' in {where}")
        kernels.append(_parse_kernel(f["kernel"], f"{where}.kernel"))
    if "curve" not in doc:
        raise ConfigError("missing 'curve' in config")
    return ModelConfig(
        spot0=_num(doc, "spot0", "config"),
        maturity=_num(doc, "maturity", "config"),
        curve=_parse_curve(doc["curve"]),
        rhos=tuple(rhos),
        kernels=tuple(kernels),
        epsilon=_num(doc, "epsilon", "config"),
    )


def load_config(source: Union[str, os.PathLike]) -> ModelConfig:
    """Parse a config from a file path or from JSON text."""
    text = str(source)
    if not text.lstrip().startswith("{"):
        try:
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {source}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def dump_config(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), indent=2)
