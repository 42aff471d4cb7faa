"""Exception hierarchy shared by all ssr_lab modules."""


class SSRLabError(Exception):
    """Base class for every error raised by ssr_lab."""


class ConfigError(SSRLabError, ValueError):
    """A model configuration document is malformed or violates an invariant."""


class NoArbitrageViolation(SSRLabError, ValueError):
    """A put price lies outside the open no-arbitrage interval."""


class UnsupportedKernelMix(SSRLabError, ValueError):
    """Power kernels with different exponents were mixed in one model."""


class NumericalDegeneracy(SSRLabError, ArithmeticError):
    """A factorization or inversion failed even after regularization."""


class HypothesisNotSatisfied(SSRLabError, ValueError):
    """The hypotheses of an asymptotic limit do not hold for this model."""


class DegenerateDenominator(SSRLabError, ArithmeticError):
    """A ratio's denominator vanishes (or is indistinguishable from zero)."""
