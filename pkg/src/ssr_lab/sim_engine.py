"""Exact-covariance simulation of the spot Brownian increments and Volterra factor.

The Gaussian vector ``(dB_0, ..., dB_{n-1}, X_1, ..., X_n)`` with
``X_m = sum_i int_0^{t_m} k_i(t_m - u) dW^i_u`` is sampled through a dense
Cholesky factor of its exact covariance.  Spot variance and log-spot follow
from it; the only discretization error sits in the log-Euler spot step and in
the cell-averaged kernel weights of the running integral

    I_T = int_0^T sqrt(V_s) k(s) (dB_s - sqrt(V_s) ds).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import NumericalDegeneracy
from .model import EffectiveKernel, ModelConfig, curve_eval, effective_kernel

BLOCK_SIZE = 2048
_RIDGE_START = 1e-12
_RIDGE_RETRIES = 3


@dataclass(frozen=True)
class TimeGrid:
    maturity: float
    n_steps: int

    def __post_init__(self):
        if not self.maturity > 0:
            raise ValueError("grid maturity must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError("n_steps must be an integer >= 2")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


# ------------------------------------------------------------ covariances


def volterra_covariance(factors, times_a, windows_a, times_b, windows_b) -> np.ndarray:
    """Covariance of ``G(t, w) = sum_i int_0^w k_i(t - u) dW^i_u`` between two sets.

    Requires ``w <= t`` for every entry.  The factors ``W^i`` are independent.
    """
    ta, tb = np.meshgrid(np.asarray(times_a, float), np.asarray(times_b, float), indexing="ij")
    wa, wb = np.meshgrid(np.asarray(windows_a, float), np.asarray(windows_b, float), indexing="ij")
    w = np.minimum(wa, wb)
    lo = np.minimum(ta, tb)
    c = np.abs(tb - ta)
    out = np.zeros(ta.shape)
    for _, kern in factors:
        out += kern.prod_integral(lo - w, lo, c)
    return out


def volterra_dB_covariance(keff: EffectiveKernel, times, windows, edges) -> np.ndarray:
    """``Cov(G(t, w), B_{t_{j+1}} - B_{t_j})`` for each cell of ``edges``.

    Uses exact cell integrals of ``k`` so the singular power kernel is never
    evaluated pointwise at zero lag.
    """
    t = np.asarray(times, float)[:, None]
    w = np.asarray(windows, float)[:, None]
    left = np.asarray(edges[:-1], float)[None, :]
    right = np.minimum(np.asarray(edges[1:], float)[None, :], w)
    active = left < w
    upper = np.where(active, t - left, 0.0)
    lower = np.where(active, t - right, 0.0)
    return np.where(active, keff.antiderivative(upper) - keff.antiderivative(lower), 0.0)


def cholesky_with_ridge(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding a diagonal ridge on failure."""
    try:
        return np.linalg.cholesky(cov), 0.0
    except np.linalg.LinAlgError:
        pass
    ridge = _RIDGE_START * np.trace(cov) / cov.shape[0]
    for _ in range(_RIDGE_RETRIES):
        try:
            return np.linalg.cholesky(cov + ridge * np.eye(cov.shape[0])), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise NumericalDegeneracy("covariance is not positive definite even after ridge regularization")


@dataclass(frozen=True)
class JointCovariance:
    grid: TimeGrid
    cov: np.ndarray
    factor: np.ndarray
    var_x: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return self.cov.shape[0]


def build_joint_covariance(config: ModelConfig, grid: TimeGrid) -> JointCovariance:
    """Exact covariance of ``(dB_0..dB_{n-1}, X_1..X_n)`` and its Cholesky factor.

    Depends on the kernels and correlations only; ``epsilon`` scales ``X`` later.
    """
    n = grid.n_steps
    edges = grid.edges
    times = edges[1:]
    keff = effective_kernel(config)

    cov = np.zeros((2 * n, 2 * n))
    cov[:n, :n] = np.eye(n) * grid.dt
    cross = volterra_dB_covariance(keff, times, times, edges)
    cov[n:, :n] = cross
    cov[:n, n:] = cross.T
    cov[n:, n:] = volterra_covariance(config.factors, times, times, times, times)
    var_x = np.array([sum(k.sq_integral(0.0, t) for _, k in config.factors) for t in times], float)
    cov[n:, n:][np.diag_indices(n)] = var_x
    factor, ridge = cholesky_with_ridge(cov)
    return JointCovariance(grid, cov, factor, var_x, ridge)


def kernel_cell_weights(kernel: EffectiveKernel, grid: TimeGrid) -> np.ndarray:
    """Cell averages ``(1/dt) int_{t_j}^{t_{j+1}} k``."""
    e = grid.edges
    return np.asarray(kernel.cell_integral(e[:-1], e[1:]), dtype=float) / grid.dt


# ------------------------------------------------------------ random streams


@dataclass(frozen=True)
class RngStreamSpec:
    """Counter-based stream of one path (or antithetic pair).

    The Philox key is a 128-bit BLAKE2b hash of ``(master_seed, tag, index)``,
    so a stream never depends on how work is split across workers.
    """

    master_seed: int
    path_index: int
    tag: int = 0

    def key(self) -> np.ndarray:
        raw = struct.pack(
            "<QQQ", self.master_seed % 2**64, self.tag % 2**64, self.path_index % 2**64
        )
        digest = hashlib.blake2b(raw, digest_size=16).digest()
        return np.frombuffer(digest, dtype="<u8").copy()

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))


def standard_normals(seed: int, start: int, stop: int, dim: int, antithetic: bool, tag: int = 0):
    """Normals for paths ``start..stop-1``; antithetic partners share a stream."""
    rows = np.empty((stop - start, dim))
    if antithetic:
        if start % 2 or stop % 2:
            raise ValueError("antithetic blocks must hold whole pairs")
        for r, i in enumerate(range(start, stop, 2)):
            z = RngStreamSpec(seed, i // 2, tag).generator().standard_normal(dim)
            rows[2 * r] = z
            rows[2 * r + 1] = -z
    else:
        for r, i in enumerate(range(start, stop)):
            rows[r] = RngStreamSpec(seed, i, tag).generator().standard_normal(dim)
    return rows


# ------------------------------------------------------------ paths


@dataclass
class PathBundle:
    """A block of simulated paths; every array has the path axis first.

    ``dB`` and ``X_vol`` have ``n`` columns (``X_vol[:, m]`` is the factor at
    ``t_{m+1}``); ``V`` and ``logS`` have ``n + 1`` columns on the grid edges.
    """

    path_index: np.ndarray
    dB: np.ndarray
    X_vol: np.ndarray
    V: np.ndarray
    logS: np.ndarray
    I_T: np.ndarray
    antithetic: bool

    def __len__(self) -> int:
        return self.path_index.size

    @property
    def S_T(self) -> np.ndarray:
        return np.exp(self.logS[:, -1])

    def unit_mean(self, values: np.ndarray) -> np.ndarray:
        """Average antithetic partners so rows become independent samples."""
        if not self.antithetic:
            return values
        return 0.5 * (values[0::2] + values[1::2])


class PathSimulator:
    """Reusable simulator for one (kernels, correlations, grid) triple.

    ``epsilon`` and the forward variance curve only enter :meth:`assemble`,
    so one Gaussian block can be reused across an epsilon sweep.
    """

    def __init__(self, config: ModelConfig, grid: TimeGrid, covariance: JointCovariance | None = None):
        if abs(grid.maturity - config.maturity) > 1e-12 * config.maturity:
            raise ValueError("grid maturity differs from config maturity")
        self.config = config
        self.grid = grid
        self.covariance = covariance or build_joint_covariance(config, grid)
        self.kernel = effective_kernel(config)
        self.weights = kernel_cell_weights(self.kernel, grid)
        self.curve_values = curve_eval(config.curve, grid.edges)

    def gaussians(self, seed: int, start: int, stop: int, antithetic: bool, tag: int = 0):
        n = self.grid.n_steps
        z = standard_normals(seed, start, stop, 2 * n, antithetic, tag)
        g = z @ self.covariance.factor.T
        return g[:, :n], g[:, n:]

    def assemble(self, dB, X_vol, epsilon: float | None = None, path_index=None, antithetic=False):
        eps = self.config.epsilon if epsilon is None else float(epsilon)
        n = self.grid.n_steps
        dt = self.grid.dt
        n_paths = dB.shape[0]
        V = np.empty((n_paths, n + 1))
        V[:, 0] = self.curve_values[0]
        V[:, 1:] = self.curve_values[1:] * np.exp(eps * X_vol - 0.5 * eps**2 * self.covariance.var_x)
        sqv = np.sqrt(V[:, :-1])
        logS = np.empty((n_paths, n + 1))
        logS[:, 0] = np.log(self.config.spot0)
        np.cumsum(sqv * dB - 0.5 * V[:, :-1] * dt, axis=1, out=logS[:, 1:])
        logS[:, 1:] += logS[:, :1]
        I_T = np.sum(sqv * self.weights * (dB - sqv * dt), axis=1)
        if path_index is None:
            path_index = np.arange(n_paths)
        return PathBundle(np.asarray(path_index), dB, X_vol, V, logS, I_T, antithetic)

    def block(self, seed: int, start: int, stop: int, antithetic: bool) -> PathBundle:
        dB, X = self.gaussians(seed, start, stop, antithetic)
        return self.assemble(dB, X, path_index=np.arange(start, stop), antithetic=antithetic)


def block_ranges(n_paths: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    if block_size % 2:
        raise ValueError("block size must be even")
    return [(s, min(s + block_size, n_paths)) for s in range(0, n_paths, block_size)]


def generate_paths(
    config: ModelConfig,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    antithetic: bool = True,
    block_size: int = BLOCK_SIZE,
    simulator: PathSimulator | None = None,
) -> Iterator[PathBundle]:
    """Stream of :class:`PathBundle` blocks covering paths ``0..n_paths-1``."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if antithetic and n_paths % 2:
        raise ValueError("n_paths must be even with antithetic sampling")
    sim = simulator or PathSimulator(config, grid)
    for start, stop in block_ranges(n_paths, block_size):
        yield sim.block(seed, start, stop, antithetic)


# ------------------------------------------------------------ debug dump

_DUMP_MAGIC = b"SSRPATH1"


def write_path_dump(path, bundles, n_steps: int, n_paths: int, seed: int) -> None:
    """Little-endian float64 records after a header ``(magic, n_steps, n_paths, seed)``.

    Record layout per path: ``dB[n] X_vol[n] V[n+1] logS[n+1] I_T``.
    """
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<QQQ", n_steps, n_paths, seed % 2**64))
        for b in bundles:
            rec = np.concatenate([b.dB, b.X_vol, b.V, b.logS, b.I_T[:, None]], axis=1)
            fh.write(rec.astype("<f8").tobytes())


def read_path_dump(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != _DUMP_MAGIC:
            raise ValueError("not a path dump")
        n, n_paths, seed = struct.unpack("<QQQ", fh.read(24))
        data = np.frombuffer(fh.read(), dtype="<f8")
    width = 4 * n + 3
    data = data.reshape(n_paths, width)
    return {
        "n_steps": n,
        "n_paths": n_paths,
        "seed": seed,
        "dB": data[:, :n],
        "X_vol": data[:, n : 2 * n],
        "V": data[:, 2 * n : 3 * n + 1],
        "logS": data[:, 3 * n + 1 : 4 * n + 2],
        "I_T": data[:, 4 * n + 2],
    }
