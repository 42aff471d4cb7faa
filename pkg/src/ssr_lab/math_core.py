"""Black-Scholes put pricing in total-variance form and its inversion.

Everything here works with the implied *total* variance ``Sigma = sigma**2 * tau``
rather than an annualized volatility.  The model is driftless, so there are no
rates or dividends anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import NoArbitrageViolation

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Newton/bisection controls for the implied total variance solver.
_LOWER_TV = 1e-12
_UPPER_TV = 16.0
_PRICE_TOL = 1e-12
_MAX_ITER = 200


def norm_cdf(x):
    """Standard normal cdf through ``erfc`` (accurate in both tails)."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _d_pm(spot, strike, total_var):
    sq = np.sqrt(total_var)
    lm = np.log(spot / strike)
    return (lm + 0.5 * total_var) / sq, (lm - 0.5 * total_var) / sq


def bs_put(spot, strike, total_var):
    """Black-Scholes put price ``K Phi(-d-) - s Phi(-d+)``.

    A zero total variance returns the intrinsic value.  Arguments broadcast.
    """
    spot = np.asarray(spot, dtype=float)
    strike = np.asarray(strike, dtype=float)
    total_var = np.asarray(total_var, dtype=float)
    if np.any(total_var < 0):
        raise ValueError("total variance must be nonnegative")
    intrinsic = np.maximum(strike - spot, 0.0)
    pos = total_var > 0
    safe_tv = np.where(pos, total_var, 1.0)
    d_plus, d_minus = _d_pm(spot, strike, safe_tv)
    price = strike * norm_cdf(-d_minus) - spot * norm_cdf(-d_plus)
    # Rounding can push the price a hair below intrinsic deep in the money.
    price = np.maximum(price, intrinsic)
    out = np.where(pos, price, intrinsic)
    return float(out) if out.ndim == 0 else out


def bs_put_dtotalvar(spot, strike, total_var):
    """Sensitivity of the put price to total variance, ``s phi(d+) / (2 sqrt(Sigma))``."""
    total_var = np.asarray(total_var, dtype=float)
    if np.any(total_var <= 0):
        raise ValueError("dP/dSigma is singular at zero total variance")
    d_plus, _ = _d_pm(np.asarray(spot, float), np.asarray(strike, float), total_var)
    out = spot * norm_pdf(d_plus) / (2.0 * np.sqrt(total_var))
    return float(out) if np.ndim(out) == 0 else out


def bs_put_dtotalvar_strike_form(spot, strike, total_var):
    """Same derivative written with the strike: ``K phi(d-) / (2 sqrt(Sigma))``."""
    total_var = np.asarray(total_var, dtype=float)
    if np.any(total_var <= 0):
        raise ValueError("dP/dSigma is singular at zero total variance")
    _, d_minus = _d_pm(np.asarray(spot, float), np.asarray(strike, float), total_var)
    out = strike * norm_pdf(d_minus) / (2.0 * np.sqrt(total_var))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PutQuote:
    spot: float
    strike: float
    price: float

    def __post_init__(self):
        if not (self.spot > 0 and self.strike > 0):
            raise ValueError("spot and strike must be positive")


def _put_scalar(s: float, k: float, tv: float) -> float:
    sq = math.sqrt(tv)
    lm = math.log(s / k)
    dp = (lm + 0.5 * tv) / sq
    dm = dp - sq
    return k * 0.5 * math.erfc(dm / SQRT2) - s * 0.5 * math.erfc(dp / SQRT2)


def implied_total_variance(quote: PutQuote) -> float:
    """Invert the Black-Scholes put price for the total variance.

    Newton's method in ``w = sqrt(Sigma)`` safeguarded by a bisection bracket
    that starts at ``[1e-12, 16]`` in total variance and doubles its upper end
    until it contains the root.
    """
    s, k, p = float(quote.spot), float(quote.strike), float(quote.price)
    intrinsic = max(k - s, 0.0)
    if not (intrinsic < p < k):
        raise NoArbitrageViolation(
            f"put price {p!r} outside ({intrinsic!r}, {k!r}) for spot={s!r}, strike={k!r}"
        )

    lo, hi = math.sqrt(_LOWER_TV), math.sqrt(_UPPER_TV)
    while _put_scalar(s, k, hi * hi) < p:
        hi *= 2.0
        if hi > 1e4:
            raise NoArbitrageViolation(f"no total variance reproduces put price {p!r}")
    if _put_scalar(s, k, lo * lo) > p:
        # Time value below what the lower bracket can express.
        raise NoArbitrageViolation(f"put price {p!r} indistinguishable from intrinsic value")

    # ATM-style starting guess: p ~ s * w / sqrt(2 pi) + intrinsic.
    w = min(max((p - intrinsic) / (s * INV_SQRT_2PI), lo), hi)
    if not (lo < w < hi):
        w = 0.5 * (lo + hi)
    for _ in range(_MAX_ITER):
        f = _put_scalar(s, k, w * w) - p
        if f > 0:
            hi = w
        else:
            lo = w
        # dP/dw = s * phi(d+)
        d_plus = (math.log(s / k) + 0.5 * w * w) / w
        slope = s * INV_SQRT_2PI * math.exp(-0.5 * d_plus * d_plus)
        step = f / slope if slope > 0 else math.inf
        w_new = w - step
        if not (lo < w_new < hi):
            w_new = 0.5 * (lo + hi)
        converged = abs(f) <= _PRICE_TOL and abs(w_new - w) <= 1e-15 * max(w, 1.0)
        w = w_new
        if converged or hi - lo <= 1e-16 * hi:
            break
    return w * w


def atm_skew_from_digital(spot, total_var_atm, digital_prob):
    """ATM strike-derivative of implied total variance from a digital price.

    ``d Sigma / dK`` at ``K = spot`` equals
    ``2 sqrt(Sigma) / (spot phi(sqrt(Sigma)/2)) * (P[S_T < spot] - Phi(sqrt(Sigma)/2))``.
    Multiply by ``spot`` to get the log-strike slope.
    """
    if total_var_atm <= 0:
        raise ValueError("ATM total variance must be positive")
    if not (0.0 <= digital_prob <= 1.0):
        raise ValueError("digital probability must lie in [0, 1]")
    half = 0.5 * math.sqrt(total_var_atm)
    scale = 2.0 * math.sqrt(total_var_atm) / (spot * float(norm_pdf(half)))
    return scale * (digital_prob - float(norm_cdf(half)))
