import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kawasaki_lab.free_energy import (LOG_2PI, A_limit, GridError, QuadratureGrid, a_N_chain,
                                      cramer_gap, free_energy_curve, gaussian_hbar_curve,
                                      hbar_K_curve, hbar_N, hbar_N_many, legendre,
                                      subadditivity_defect)
from kawasaki_lab.model import ModelSpec, PotentialSpec, InteractionKernel, double_well_model, gaussian_model
from oracles import gaussian_hbar, gaussian_log_partition, hyperplane_integrals, nested_log_partition


def test_gaussian_chain_closed_form():
    assert a_N_chain(gaussian_model(3), 1.0) == pytest.approx(3 * 1.4189385332046727, abs=1e-10)


@pytest.mark.parametrize("h", [(0.2,), (-0.3,), (0.2, 0.1), (0.3, -0.15)])
@pytest.mark.parametrize("sigma", [0.0, 1.3])
def test_interacting_gaussian_against_dense_formula(h, sigma):
    m = gaussian_model(7, h=h)
    assert a_N_chain(m, sigma) == pytest.approx(gaussian_log_partition(m, sigma), abs=1e-9)


@pytest.mark.parametrize("N,n", [(2, 121), (3, 81)])
def test_double_well_against_nested_quadrature(N, n):
    m = double_well_model(N)
    for sigma in (0.0, 0.7):
        ref = nested_log_partition(m, sigma, L=8.0, n=n)
        assert a_N_chain(m, sigma) == pytest.approx(ref, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(-2.0, 2.0), st.integers(2, 12))
def test_even_potential_symmetric_in_sigma(sigma, N):
    m = double_well_model(N)
    assert a_N_chain(m, sigma) == pytest.approx(a_N_chain(m, -sigma), abs=1e-9)


def test_subadditivity_defect():
    assert subadditivity_defect(gaussian_model(8), 0.5, 4, 4) == pytest.approx(0.0, abs=1e-10)
    m = double_well_model(8)
    d1, d2 = subadditivity_defect(m, 0.0, 4, 6), subadditivity_defect(m, 0.0, 6, 4)
    assert d1 == pytest.approx(d2, abs=1e-10)
    assert abs(subadditivity_defect(m, 0.0, 4, 4)) < 0.1


def test_limit_gaussian_values():
    g = gaussian_model(8)
    assert A_limit(g, 0.0) == pytest.approx(0.9189385332046727, abs=1e-10)
    assert A_limit(g, 1.5) == pytest.approx(1.125 + 0.5 * LOG_2PI, abs=1e-10)


def test_limit_matches_chain_differences():
    m = gaussian_model(8, h=(0.2,))
    N = 64
    est = (a_N_chain(m, 0.4, N=2 * N) - a_N_chain(m, 0.4, N=N)) / N
    assert A_limit(m, 0.4) == pytest.approx(est, abs=1e-4)
    # exact symbol integral for the Gaussian chain
    k = np.linspace(0, 2 * np.pi, 4097)[:-1]
    exact = 0.5 * LOG_2PI - 0.5 * np.mean(np.log(1 + 0.4 * np.cos(k))) + 0.4**2 / (2 * 1.4)
    assert A_limit(m, 0.4) == pytest.approx(exact, abs=1e-9)


def test_limit_even_in_sigma():
    m = double_well_model(8)
    assert A_limit(m, 0.9) == pytest.approx(A_limit(m, -0.9), abs=1e-10)


def test_grid_validation():
    with pytest.raises(GridError):
        QuadratureGrid(12.0, 65)
    with pytest.raises(GridError):
        QuadratureGrid(6.0, 193).check_covers(sigma=2.0)
    g = QuadratureGrid.covering(sigma=3.0, m=1.0)
    g.check_covers(3.0, 1.0)
    assert g.refined().G == 2 * g.G - 1


def test_legendre_gaussian():
    curve = free_energy_curve(gaussian_model(8), np.array([-1.0, 0.0, 1.0]))
    r = legendre(None, curve, 1.0)
    assert r.sigma_star == pytest.approx(1.0, abs=1e-8)
    assert r.value == pytest.approx(-0.4189385332046727, abs=1e-8)
    assert legendre(None, curve, 0.0).sigma_star == pytest.approx(0.0, abs=1e-10)


def test_legendre_double_well_grid_sup():
    m = double_well_model(8)
    curve = free_energy_curve(m, np.array([-1.0, 1.0]))
    r = legendre(m, curve, 0.5)
    assert abs(r.residual) < 1e-10
    s = np.linspace(r.sigma_star - 0.2, r.sigma_star + 0.2, 401)
    grid_sup = max(si * 0.5 - A_limit(m, si) for si in s)
    assert r.value == pytest.approx(grid_sup, abs=1e-6)
    assert r.value >= grid_sup - 1e-12


def test_hbar_gaussian_closed_form():
    assert hbar_N(gaussian_model(4), 0.0) == pytest.approx(-0.375 * LOG_2PI, abs=1e-6)
    for N, m in [(4, 0.7), (9, -1.2)]:
        assert hbar_N(gaussian_model(N), m) == pytest.approx(0.5 * m * m - (N - 1) / (2 * N) * LOG_2PI, abs=1e-6)


@pytest.mark.parametrize("h", [(0.2,), (-0.35,)])
def test_hbar_interacting_gaussian(h):
    g = gaussian_model(6, h=h)
    assert hbar_N(g, 0.4) == pytest.approx(gaussian_hbar(g, 0.4), abs=1e-7)


def test_hbar_double_well_against_hyperplane_quadrature():
    m = double_well_model(4)
    log_int, _ = hyperplane_integrals(m, 0.5, L=7.0, n=121)
    assert hbar_N(m, 0.5) == pytest.approx(-log_int / 4, abs=1e-5)


def test_cramer_gap_gaussian():
    g = gaussian_model(4)
    gap = cramer_gap(g, 0.3, 4)
    assert gap.local_gap == pytest.approx(0.2297346, abs=1e-6)
    for N in (4, 8, 16):
        assert N * cramer_gap(g, 0.3, N).limit_gap == pytest.approx(0.5 * LOG_2PI, abs=1e-6)


def test_cramer_gap_symmetric_and_scaling():
    m = double_well_model(8)
    assert cramer_gap(m, 0.6, 8).limit_gap == pytest.approx(cramer_gap(m, -0.6, 8).limit_gap, abs=1e-9)
    gaps = [N * cramer_gap(m, 0.0, N).limit_gap for N in (8, 16, 32)]
    for a, b in zip(gaps, gaps[1:]):
        assert 0.5 <= b / a <= 2


def test_coarse_curves():
    grid = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.05), 10)
    g = gaussian_hbar_curve(grid, 8)
    np.testing.assert_allclose(g.second_differences(), 1.0, atol=1e-9)
    dw = double_well_model(16)
    c16 = hbar_K_curve(dw, 16, grid)
    assert np.all(c16.second_differences() > 0)
    with pytest.raises(GridError):
        c16.value(1.5)


def test_coarse_curves_approach_phi():
    m = double_well_model(8)
    grid = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.25), 10)
    curve = free_energy_curve(m, np.array([-1.0, 1.0]))
    phi = np.array([legendre(m, curve, v).value for v in grid])
    sups = [np.max(np.abs(hbar_N_many(m, grid, K).hbar - phi)) for K in (8, 16, 32)]
    assert sups[0] > sups[1] > sups[2]


def test_finite_curve_matches_chain():
    m = double_well_model(6)
    c = free_energy_curve(m, np.array([0.0, 0.5]), N=6)
    assert c.A[1] == pytest.approx(a_N_chain(m, 0.5) / 6, abs=1e-12)
    # A_N'' is a variance per site: positive and bounded
    assert 0.0 < c.convexity_constant() < 10.0
