import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from kawasaki_lab.coarse_grain import BlockScheme, hbar_Y_aux
from kawasaki_lab.dynamics import (FluxTable, InitialLaw, KawasakiOperator, MacroPdeConfig,
                                   MesoOdeConfig, SdeConfig, StabilityError, coarse_inverse_matrix,
                                   coarse_operator_apply, coarse_operator_matrix,
                                   coarse_operator_solve, heat_solution, integrate_meso,
                                   kawasaki_step, run_trajectory, simulate_ensemble,
                                   solve_macro_pde)
from kawasaki_lab.free_energy import free_energy_curve, gaussian_hbar_curve, hbar_K_curve
from kawasaki_lab.model import SpinConfiguration, double_well_model, gaussian_model
from kawasaki_lab.sampler import make_rng


def test_operator_matches_dense_laplacian():
    N = 6
    A = np.zeros((N, N))
    for i in range(N):
        A[i, i] = 2 * N * N
        A[i, (i + 1) % N] -= N * N
        A[i, (i - 1) % N] -= N * N
    op = KawasakiOperator(N)
    np.testing.assert_allclose(op.matrix(), A)
    np.testing.assert_allclose(np.sort(op.eigenvalues()), np.sort(np.linalg.eigvalsh(A)), atol=1e-9)
    xi = np.eye(N)
    B = op.noise_factor(xi)
    np.testing.assert_allclose(B @ B.T, A, atol=1e-9)


def test_zero_step_is_identity():
    x = SpinConfiguration.from_values(np.linspace(-1, 1, 8))
    assert kawasaki_step(double_well_model(8), x, 0.0, make_rng(0)) is x


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 64), st.integers(0, 2**32 - 1))
def test_step_conserves_mean(N, seed):
    model = double_well_model(N)
    rng = make_rng(seed)
    x = rng.standard_normal((3, N))
    dt = 0.4 / (8 * N * N)
    y = kawasaki_step(model, x, dt, rng)
    assert np.max(np.abs(y.sum(axis=1) - x.sum(axis=1))) / N <= 1e-12


def test_spin_configuration_step_keeps_mean():
    x = SpinConfiguration.from_values(np.random.default_rng(0).standard_normal(16))
    y = kawasaki_step(double_well_model(16), x, 1e-4, make_rng(1))
    assert isinstance(y, SpinConfiguration) and abs(np.mean(y.values) - x.mean) < 1e-12


def test_stability_guard():
    with pytest.raises(StabilityError):
        kawasaki_step(double_well_model(32), np.zeros(32), 1e-2, make_rng(0))
    with pytest.raises(StabilityError):
        SdeConfig(1e-3, 1.0).check(double_well_model(32), 32)
    SdeConfig.for_lattice(32, 1.0).check(double_well_model(32), 32)


def test_gaussian_stationary_mode_variance():
    N, n = 32, 128
    model = gaussian_model(N)
    rng = np.random.default_rng(3)
    z = rng.standard_normal((n, N))
    x0 = z - z.mean(axis=1, keepdims=True) + 0.2
    sde = SdeConfig.for_lattice(N, 1.0, seed=5)
    ens = simulate_ensemble(model, InitialLaw(lambda t: 0.2 + 0 * t), sde, n, BlockScheme.equal(N, 8),
                            np.linspace(0, 1.0, 101), x0=x0)
    cos2 = np.cos(2 * math.pi * 2 * np.arange(N) / N)
    amp = ens.states @ cos2 * 2 / N
    # exact OU value of the mode-2 amplitude variance under the projected unit covariance
    assert np.var(amp) == pytest.approx(2.0 / N, rel=0.05)
    assert abs(ens.states[:, :, 0].mean() - 0.2) < 4 * ens.states[:, :, 0].std() / math.sqrt(ens.states[:, :, 0].size / 4)


def test_gaussian_mean_profile_decays():
    N, n, a = 32, 64, 0.5
    model = gaussian_model(N)
    sde = SdeConfig.for_lattice(N, 0.05, seed=1)
    times = np.array([0.0, 0.01, 0.05])
    law = InitialLaw(lambda t: 0.1 + a * np.cos(2 * math.pi * t), "lift")
    ens = simulate_ensemble(model, law, sde, n, BlockScheme.equal(N, 8), times)
    cosv = np.cos(2 * math.pi * (np.arange(N) + 0.5) / N)
    for k, t in enumerate(ens.times):
        per = ens.states[k] @ cosv * 2 / N
        se = per.std(ddof=1) / math.sqrt(n) if t > 0 else 0.0
        assert abs(per.mean() - a * math.exp(-4 * math.pi**2 * t)) <= 3 * se + 5e-3


def test_ensemble_determinism_and_conservation():
    model = double_well_model(16)
    law = InitialLaw(lambda t: 0.3 + 0.4 * np.cos(2 * math.pi * t), burn_in=200)
    sde = SdeConfig.for_lattice(16, 0.01, seed=9)
    sc = BlockScheme.equal(16, 4)
    a = simulate_ensemble(model, law, sde, 4, sc)
    b = simulate_ensemble(model, law, sde, 4, sc)
    assert np.array_equal(a.states, b.states)
    assert a.max_mean_drift <= 1e-12
    np.testing.assert_allclose(a.block_means[0], np.tile(law.block_means(sc), (4, 1)), atol=1e-10)
    assert len(a.block_rows()) == 4 * len(a.times)


def test_constant_start_is_stationary():
    model = gaussian_model(8)
    out, _, drift = run_trajectory(model, np.full(8, 0.4), 1e-3, 40000, seed=2, record=lambda z: z[0])
    from kawasaki_lab.sampler import batch_means
    rep = batch_means(out[2000:], 40)
    assert abs(rep.estimate - 0.4) <= 3 * rep.se
    assert drift <= 1e-12


def test_coarse_operator_kernel_rejected():
    sc = BlockScheme.equal(16, 4)
    with pytest.raises(ValueError):
        coarse_operator_solve(sc, np.ones(4))
    np.testing.assert_allclose(coarse_operator_apply(sc, np.ones(4)), 0.0, atol=1e-10)


def test_coarse_operator_single_site_blocks():
    N = 12
    sc = BlockScheme.equal(N, N)
    g = np.random.default_rng(0).standard_normal(N)
    g -= g.mean()
    np.testing.assert_allclose(coarse_operator_apply(sc, g), KawasakiOperator(N).apply(g), rtol=1e-10, atol=1e-8)


def test_coarse_operator_round_trip():
    sc = BlockScheme.equal(64, 8)
    g = np.random.default_rng(1).standard_normal(8)
    g -= g.mean()
    u = coarse_operator_solve(sc, g)
    np.testing.assert_allclose(coarse_inverse_matrix(sc) @ u, g, atol=1e-10)
    Abar = coarse_operator_matrix(sc)
    np.testing.assert_allclose(Abar, Abar.T, atol=1e-8)
    assert np.all(np.linalg.eigvalsh(Abar) > -1e-8)


def test_unequal_blocks_conserve_weighted_mass():
    sc = BlockScheme((3, 4, 3, 4, 3, 4, 3, 4))
    grid = np.round(np.arange(-2, 2 + 1e-9, 0.05), 10)
    curves = {3: gaussian_hbar_curve(grid, 3), 4: gaussian_hbar_curve(grid, 4)}
    eta0 = 0.2 + 0.3 * np.cos(2 * math.pi * np.arange(8) / 8)
    tr = integrate_meso(sc, curves, eta0, 0.02, MesoOdeConfig(rtol=1e-9, atol=1e-11))
    assert tr.max_mass_drift < 1e-9


def test_meso_constant_is_stationary():
    sc = BlockScheme.equal(32, 8)
    g = gaussian_hbar_curve(np.round(np.arange(-1, 1 + 1e-9, 0.05), 10), 4)
    tr = integrate_meso(sc, g, np.full(8, 0.3), 0.05)
    np.testing.assert_allclose(tr.eta, 0.3, atol=1e-12)


def test_meso_modal_rates_gaussian():
    M, K = 32, 4
    sc = BlockScheme.equal(M * K, M)
    g = gaussian_hbar_curve(np.round(np.arange(-2, 2 + 1e-9, 0.05), 10), K)
    eta0 = np.cos(2 * math.pi * np.arange(M) / M) + 0.5 * np.cos(2 * math.pi * 3 * np.arange(M) / M)
    times = np.linspace(0, 0.02, 5)
    tr = integrate_meso(sc, g, eta0, 0.02, MesoOdeConfig(rtol=1e-10, atol=1e-12), t_eval=times)
    # exact linear flow exp(-t Abar) for the quadratic Hamiltonian
    Abar = coarse_operator_matrix(sc)
    for t, e in zip(times, tr.eta):
        np.testing.assert_allclose(e, scipy.linalg.expm(-t * Abar) @ eta0, atol=1e-7)
    modes = np.cos(2 * math.pi * np.arange(M) / M)
    rate = -np.log((tr.eta[-1] @ modes) / (eta0 @ modes)) / times[-1]
    heat = 2 * M * M * (1 - math.cos(2 * math.pi / M))
    assert rate == pytest.approx(heat, rel=0.02)


def test_meso_energy_non_increasing():
    K, M = 4, 8
    dw = double_well_model(K * M)
    sc = BlockScheme.equal(K * M, M)
    curve = hbar_K_curve(dw, K, np.round(np.arange(-1.5, 1.5 + 1e-9, 0.05), 10))
    eta0 = 0.2 + 0.5 * np.cos(2 * math.pi * (np.arange(M) + 0.5) / M)
    tr = integrate_meso(sc, curve, eta0, 0.05, MesoOdeConfig(rtol=1e-9, atol=1e-11), t_eval=np.linspace(0, 0.05, 21))
    assert np.all(np.diff(tr.energy) <= 1e-12)
    assert tr.energy[0] == pytest.approx(hbar_Y_aux(sc, curve, eta0))


def test_flux_table_inverse():
    c = free_energy_curve(double_well_model(8), np.round(np.arange(-2, 2 + 1e-9, 0.05), 10))
    f = FluxTable.from_curve(c)
    w = np.linspace(-1.5, 1.5, 7)
    np.testing.assert_allclose(f.phi_prime(f.zeta(w)), w, atol=1e-10)
    with pytest.raises(ValueError):
        f.phi_prime(np.array([100.0]))
    lin = FluxTable.linear(2.0)
    np.testing.assert_allclose(lin.phi_prime([1.0, -0.5]), [2.0, -1.0])
    with pytest.raises(ValueError):
        FluxTable([0.0, 1.0, 2.0], [0.0, 1.0, 0.5])


def test_heat_equation_second_order_in_space():
    T, a, m = 0.02, 0.5, 0.1
    z0 = lambda th: m + a * np.cos(2 * math.pi * th)
    errs = []
    for n in (16, 32):
        tr = solve_macro_pde(FluxTable.linear(), z0, T, MacroPdeConfig(points=n, dt=2e-6), t_out=[0.0, T])
        errs.append(np.max(np.abs(tr.zeta[-1] - heat_solution(m, a, T, n).values)))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_constant_profile_stays_constant():
    f = FluxTable.from_curve(free_energy_curve(double_well_model(8), np.round(np.arange(-2, 2 + 1e-9, 0.05), 10)))
    tr = solve_macro_pde(f, lambda th: 0.3 + 0 * th, 0.01, MacroPdeConfig(points=32, dt=1e-3))
    np.testing.assert_allclose(tr.zeta, 0.3, atol=1e-12)


def test_nonlinear_pde_time_self_convergence():
    f = FluxTable.from_curve(free_energy_curve(double_well_model(8), np.round(np.arange(-3, 3 + 1e-9, 0.05), 10)))
    z0 = lambda th: 0.2 + 0.5 * np.cos(2 * math.pi * th)
    sols = [solve_macro_pde(f, z0, 0.02, MacroPdeConfig(points=64, dt=dt), t_out=[0.0, 0.02]).zeta[-1]
            for dt in (4e-4, 2e-4, 1e-4)]
    e1 = np.max(np.abs(sols[0] - sols[1]))
    e2 = np.max(np.abs(sols[1] - sols[2]))
    assert math.log2(e1 / e2) >= 0.9
    assert abs(np.mean(sols[2]) - 0.2) < 1e-12
