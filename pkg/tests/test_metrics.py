import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kawasaki_lab.coarse_grain import BlockScheme
from kawasaki_lab.metrics import (MeanError, TorusFunction, discrete_form, equivalence_ratio,
                                  h_minus1_norm, kawasaki_eigenvalues, micro_macro_error,
                                  profile_error, theta_functional)


def fourier_h1_step(v):
    """Sum over k != 0 of |f_k|^2 / (2 pi k)^2 for the step function with cell values v."""
    n = v.size
    total = 0.0
    for k in range(1, 4000):
        # Fourier coefficient of the indicator of cell i is e^{-2 pi i k i/n} (1 - e^{-2 pi i k/n}) / (2 pi i k)
        cell = (1 - np.exp(-2j * math.pi * k / n)) / (2j * math.pi * k)
        fk = cell * np.sum(v * np.exp(-2j * math.pi * k * np.arange(n) / n))
        total += 2 * abs(fk) ** 2 / (2 * math.pi * k) ** 2
    return total


def test_zero_and_sine():
    assert h_minus1_norm(TorusFunction(np.zeros(16))) == 0.0
    f = TorusFunction.sample(lambda t: np.sin(2 * math.pi * t), 4096, "linear")
    assert h_minus1_norm(f) == pytest.approx(1 / (8 * math.pi**2), rel=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(8, 24), st.integers(0, 2**31))
def test_step_matches_fourier_oracle(n, seed):
    v = np.random.default_rng(seed).standard_normal(n)
    v -= v.mean()
    # tail of the Fourier sum is O(1/k^3); the cut-off leaves well under 1e-6 relative
    assert h_minus1_norm(TorusFunction(v)) == pytest.approx(fourier_h1_step(v), rel=1e-6, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_norm_properties(seed, c):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(16)
    g = rng.standard_normal(32)
    f -= f.mean()
    g -= g.mean()
    F, G = TorusFunction(f), TorusFunction(g, "linear")
    nf = math.sqrt(h_minus1_norm(F))
    ng = math.sqrt(h_minus1_norm(G))
    assert math.sqrt(h_minus1_norm(TorusFunction(c * f))) == pytest.approx(abs(c) * nf, rel=1e-9, abs=1e-12)
    zero = TorusFunction(np.zeros(8))
    nsum = math.sqrt(h_minus1_norm((F - zero) - (-1.0 * (G - zero))))
    assert nsum <= nf + ng + 1e-12


def test_refinement_stable():
    prof = lambda t: np.cos(2 * math.pi * t) + 0.3 * np.sin(4 * math.pi * t)
    a = h_minus1_norm(TorusFunction.sample(prof, 512))
    b = h_minus1_norm(TorusFunction.sample(prof, 1024))
    assert abs(a - b) / b < 1e-4
    # re-evaluating a step function on a doubled grid is exact
    v = np.random.default_rng(0).standard_normal(16)
    v -= v.mean()
    assert h_minus1_norm(TorusFunction(np.repeat(v, 2))) == pytest.approx(h_minus1_norm(TorusFunction(v)), rel=1e-12)


def test_mean_precondition():
    with pytest.raises(MeanError):
        h_minus1_norm(TorusFunction(np.ones(8)))
    with pytest.raises(MeanError):
        discrete_form(np.ones(8))
    with pytest.raises(MeanError):
        micro_macro_error(np.ones((2, 8)), TorusFunction(np.zeros(8)))


def test_discrete_form_fourier_mode():
    N = 64
    assert discrete_form(np.zeros(N)) == 0.0
    for k in (1, 3):
        x = np.cos(2 * math.pi * k * np.arange(N) / N)
        exact = x @ x / (N * N * N * 2 * (1 - math.cos(2 * math.pi * k / N)))
        assert discrete_form(x) == pytest.approx(exact, rel=1e-12)
    lam = kawasaki_eigenvalues(8)
    assert lam[0] == 0 and lam[4] == pytest.approx(4 * 64)


def test_discrete_mode_ratio_tends_to_one():
    ratios = []
    for N in (16, 64, 256):
        x = np.cos(2 * math.pi * np.arange(N) / N)
        ratios.append(discrete_form(x) / (0.5 / (2 * math.pi) ** 2))
    assert abs(ratios[-1] - 1) < abs(ratios[0] - 1) and abs(ratios[-1] - 1) < 1e-3


def test_equivalence_ratio_bounded():
    for N in (64, 128):
        x = np.sin(2 * math.pi * (np.arange(N) + 0.5) / N) + 0.2 * np.cos(6 * math.pi * np.arange(N) / N)
        x -= x.mean()
        d, c = equivalence_ratio(x)
        assert 0.5 <= d / c <= 2.0


def test_theta_zero_for_lifted_profile():
    sc = BlockScheme.equal(32, 8)
    eta = np.linspace(-1, 1, 8)
    xs = np.tile(sc.embed(eta), (5, 1))
    assert theta_functional(xs, eta, sc).estimate == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        theta_functional(xs, eta, sc, 0.1, 0.2)


def test_theta_gaussian_trace():
    N, m, n = 32, 0.3, 4000
    sc = BlockScheme.equal(N, 8)
    z = np.random.default_rng(7).standard_normal((n, N))
    xs = z - z.mean(axis=1, keepdims=True) + m
    lam = kawasaki_eigenvalues(N)
    # full spectrum of A: rfft modes 1..N/2-1 are doubly degenerate
    inv = np.concatenate([1 / lam[1:], 1 / lam[1:N // 2]])
    exact = 0.5 * np.sum(inv) / N
    rep = theta_functional(xs, np.full(8, m), sc)
    assert rep.estimate == pytest.approx(exact, rel=0.05)
    assert rep.estimate >= 0


def test_micro_macro_zero_for_own_profile():
    x = np.random.default_rng(2).standard_normal(16)
    assert micro_macro_error(x[None, :], TorusFunction(x)).estimate == pytest.approx(0.0, abs=1e-20)


def test_triangle_inequality_profiles():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.standard_normal(32)
        x -= x.mean()
        eta = rng.standard_normal(8)
        eta -= eta.mean()
        zeta = TorusFunction.sample(lambda t: 0.4 * np.cos(2 * math.pi * t + rng.uniform()), 64)
        X, E = TorusFunction(x), TorusFunction(eta)
        lhs = profile_error(X, zeta)
        assert lhs <= 2 * (profile_error(X, E) + profile_error(E, zeta)) + 1e-14
