import math

import numpy as np
import pytest
from scipy import integrate

from ssr_lab.errors import NumericalDegeneracy
from ssr_lab.model import (
    ExponentialKernel,
    FlatCurve,
    ModelConfig,
    PiecewiseLinearCurve,
    PowerKernel,
    curve_eval,
    effective_kernel,
)
from ssr_lab.sim_engine import (
    PathSimulator,
    RngStreamSpec,
    TimeGrid,
    build_joint_covariance,
    cholesky_with_ridge,
    generate_paths,
    kernel_cell_weights,
    read_path_dump,
    standard_normals,
    write_path_dump,
)


def _cfg(kernels, rhos, curve=None, eps=0.5, T=1.0):
    return ModelConfig(1.0, T, curve or FlatCurve(0.04), tuple(rhos), tuple(kernels), eps)


def _concat(bundles, attr):
    return np.concatenate([getattr(b, attr) for b in bundles])


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 8)
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25 and g.edges[-1] == 2.0


def test_exponential_volterra_covariance_closed_form():
    a, b = 1.3, 2.0
    grid = TimeGrid(1.0, 16)
    jc = build_joint_covariance(_cfg([ExponentialKernel(a, b)], [0.6]), grid)
    n = grid.n_steps
    t = grid.edges[1:]
    tm, tl = np.meshgrid(t, t, indexing="ij")
    lo = np.minimum(tm, tl)
    closed = a * a * np.exp(-b * (tm + tl)) * (np.exp(2 * b * lo) - 1) / (2 * b)
    np.testing.assert_allclose(jc.cov[n:, n:], closed, rtol=1e-12, atol=1e-14)
    # spot check against direct quadrature
    m, l = 5, 11
    ref, _ = integrate.quad(lambda u: a * a * math.exp(-b * (t[m] - u)) * math.exp(-b * (t[l] - u)), 0, t[m],
                            epsabs=1e-15, epsrel=1e-13)
    assert jc.cov[n + m, n + l] == pytest.approx(ref, abs=1e-10)


def test_power_variance_and_offdiagonal_against_quadrature():
    a, H = 0.9, 0.1
    grid = TimeGrid(1.0, 16)
    jc = build_joint_covariance(_cfg([PowerKernel(a, H)], [0.6]), grid)
    n = grid.n_steps
    t = grid.edges[1:]
    np.testing.assert_allclose(np.diag(jc.cov[n:, n:]), a * a * t ** (2 * H) / (2 * H), rtol=1e-13)
    m, l = 3, 12
    # int_0^{t_m} a^2 (t_m - u)^{H-1/2} (t_l - u)^{H-1/2} du; substitute v = t_m - u
    ref, _ = integrate.quad(lambda v: a * a * (v + t[l] - t[m]) ** (H - 0.5), 0, t[m],
                            weight="alg", wvar=(H - 0.5, 0.0), epsabs=1e-15, epsrel=1e-13)
    assert jc.cov[n + m, n + l] == pytest.approx(ref, rel=1e-10)


def test_cross_covariance_uses_cell_integrals():
    a, H, rho = 1.0, 0.1, 0.6
    grid = TimeGrid(1.0, 8)
    jc = build_joint_covariance(_cfg([PowerKernel(a, H)], [rho]), grid)
    n = grid.n_steps
    e = grid.edges
    m = 5  # X at t_6
    for j in range(n):
        if e[j] >= e[m + 1]:
            assert jc.cov[n + m, j] == 0.0
            continue
        ref, _ = integrate.quad(lambda u: rho * a * (e[m + 1] - u) ** (H - 0.5), e[j], e[j + 1])
        assert jc.cov[n + m, j] == pytest.approx(ref, rel=1e-9)
    np.testing.assert_allclose(jc.cov[:n, :n], np.eye(n) * grid.dt, atol=0)


def test_zero_effective_kernel_has_no_cross_block():
    cfg = _cfg([ExponentialKernel(1, 1), ExponentialKernel(1, 1)], [0.5, -0.5])
    grid = TimeGrid(1.0, 8)
    jc = build_joint_covariance(cfg, grid)
    n = grid.n_steps
    np.testing.assert_allclose(jc.cov[n:, :n], 0.0, atol=1e-16)


@pytest.mark.parametrize("n", [8, 64, 256])
def test_covariance_symmetric_psd(n):
    cfg = _cfg([PowerKernel(1.0, 0.05)], [0.7])
    jc = build_joint_covariance(cfg, TimeGrid(1.0, n))
    assert np.array_equal(jc.cov, jc.cov.T)
    assert np.linalg.eigvalsh(jc.cov).min() >= -1e-10
    np.testing.assert_allclose(jc.factor @ jc.factor.T, jc.cov + jc.ridge * np.eye(2 * n), atol=1e-12)


def test_ridge_policy():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular
    L, ridge = cholesky_with_ridge(cov)
    assert ridge > 0
    with pytest.raises(NumericalDegeneracy):
        cholesky_with_ridge(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cell_weights():
    grid = TimeGrid(1.0, 100)
    one = effective_kernel(_cfg([PowerKernel(1.0, 0.5)], [0.5])).scaled(2.0)
    np.testing.assert_allclose(kernel_cell_weights(one, grid), 1.0, rtol=1e-13)
    rough = effective_kernel(_cfg([PowerKernel(1.0, 0.1)], [0.5])).scaled(2.0)
    w = kernel_cell_weights(rough, grid)
    assert w[0] == pytest.approx(0.01**-0.4 / 0.6, rel=1e-13)
    assert w[0] == pytest.approx(10.516, abs=1e-3)  # 10**0.8 / 0.6
    assert np.sum(w) * grid.dt == pytest.approx(1.0 / 0.6, rel=1e-13)


def test_rng_stream_independent_of_layout():
    a = standard_normals(9, 0, 40, 6, antithetic=False)
    b = np.vstack([standard_normals(9, 0, 10, 6, False), standard_normals(9, 10, 40, 6, False)])
    assert np.array_equal(a, b)
    assert np.array_equal(a[17], RngStreamSpec(9, 17).generator().standard_normal(6))
    assert not np.array_equal(a[0], standard_normals(9, 0, 1, 6, False, tag=1)[0])


def test_antithetic_partners_are_negated():
    cfg = _cfg([PowerKernel(1.0, 0.1)], [0.6])
    grid = TimeGrid(1.0, 16)
    (b,) = list(generate_paths(cfg, grid, 64, seed=5, antithetic=True))
    assert np.array_equal(b.dB[0::2], -b.dB[1::2])
    assert np.array_equal(b.X_vol[0::2], -b.X_vol[1::2])
    with pytest.raises(ValueError):
        next(generate_paths(cfg, grid, 63, seed=5, antithetic=True))


def test_generation_is_deterministic_across_block_sizes():
    cfg = _cfg([ExponentialKernel(1, 5), ExponentialKernel(0.5, 0.2)], [0.6, 0.3])
    grid = TimeGrid(1.0, 16)
    a = list(generate_paths(cfg, grid, 1000, seed=3, antithetic=True, block_size=1000))
    b = list(generate_paths(cfg, grid, 1000, seed=3, antithetic=True, block_size=128))
    for attr in ("dB", "X_vol", "V", "logS", "I_T"):
        assert np.array_equal(_concat(a, attr), _concat(b, attr))


def test_zero_epsilon_is_deterministic_volatility():
    curve = PiecewiseLinearCurve(((0.0, 0.03), (0.5, 0.04), (2.0, 0.045)))
    cfg = _cfg([PowerKernel(1.0, 0.1)], [0.6], curve=curve, eps=0.0)
    grid = TimeGrid(1.0, 32)
    bundles = list(generate_paths(cfg, grid, 4000, seed=11, antithetic=False))
    V = _concat(bundles, "V")
    expected = curve_eval(curve, grid.edges)
    assert np.array_equal(V, np.broadcast_to(expected, V.shape))
    # logS_T is Gaussian with variance sum_j V0(t_j) dt (left points)
    total = float(np.sum(expected[:-1]) * grid.dt)
    dB = _concat(bundles, "dB")
    recon = np.sum(np.sqrt(expected[:-1]) * dB, axis=1) - 0.5 * total
    np.testing.assert_allclose(_concat(bundles, "logS")[:, -1], recon, atol=1e-13)


def test_path_shapes_and_initial_values():
    cfg = _cfg([PowerKernel(1.0, 0.1)], [0.6])
    grid = TimeGrid(1.0, 16)
    (b,) = list(generate_paths(cfg, grid, 10, seed=1, antithetic=True))
    assert b.dB.shape == (10, 16) and b.X_vol.shape == (10, 16)
    assert b.V.shape == (10, 17) and b.logS.shape == (10, 17) and b.I_T.shape == (10,)
    assert np.all(b.V > 0)
    assert np.all(b.V[:, 0] == 0.04) and np.all(b.logS[:, 0] == 0.0)


def test_I_T_matches_direct_sum():
    cfg = _cfg([ExponentialKernel(1.0, 1.0)], [0.6], eps=0.7)
    grid = TimeGrid(1.0, 16)
    (b,) = list(generate_paths(cfg, grid, 8, seed=2, antithetic=True))
    w = kernel_cell_weights(effective_kernel(cfg), grid)
    for p in range(8):
        s = 0.0
        for j in range(16):
            sv = math.sqrt(b.V[p, j])
            s += sv * w[j] * (b.dB[p, j] - sv * grid.dt)
        assert b.I_T[p] == pytest.approx(s, rel=1e-12, abs=1e-15)


@pytest.mark.slow
@pytest.mark.parametrize("eps", [0.0, 0.2, 1.0])
@pytest.mark.parametrize(
    "kernels, rhos, curve",
    [
        ([ExponentialKernel(1, 5), ExponentialKernel(0.5, 0.2)], [0.6, 0.3],
         PiecewiseLinearCurve(((0.0, 0.03), (0.5, 0.04), (2.0, 0.045)))),
        ([PowerKernel(1.0, 0.1)], [0.6], FlatCurve(0.04)),
    ],
)
def test_martingale_and_forward_variance(eps, kernels, rhos, curve):
    cfg = _cfg(kernels, rhos, curve=curve, eps=eps)
    grid = TimeGrid(1.0, 32)
    bundles = list(generate_paths(cfg, grid, 40_000, seed=2024, antithetic=True))
    s_T = np.concatenate([b.unit_mean(b.S_T) for b in bundles])
    z = abs(s_T.mean() - 1.0) / (s_T.std(ddof=1) / math.sqrt(s_T.size))
    assert z < 3.0
    V = np.concatenate([b.unit_mean(b.V) for b in bundles])
    se = V.std(axis=0, ddof=1) / math.sqrt(V.shape[0])
    target = curve_eval(curve, grid.edges)
    dev = np.abs(V.mean(axis=0) - target)
    assert np.all(dev <= 4 * se + 1e-12 * target)


def test_path_dump_round_trip(tmp_path):
    cfg = _cfg([PowerKernel(1.0, 0.1)], [0.6])
    grid = TimeGrid(1.0, 8)
    bundles = list(generate_paths(cfg, grid, 300, seed=4, antithetic=True, block_size=128))
    path = tmp_path / "paths.bin"
    write_path_dump(path, bundles, 8, 300, 4)
    back = read_path_dump(path)
    assert (back["n_steps"], back["n_paths"], back["seed"]) == (8, 300, 4)
    for attr in ("dB", "X_vol", "V", "logS", "I_T"):
        assert np.array_equal(back[attr], _concat(bundles, attr))
    assert path.stat().st_size == 8 + 24 + 300 * (4 * 8 + 3) * 8


def test_simulator_rejects_grid_mismatch():
    cfg = _cfg([PowerKernel(1.0, 0.1)], [0.6])
    with pytest.raises(ValueError):
        PathSimulator(cfg, TimeGrid(2.0, 8))
