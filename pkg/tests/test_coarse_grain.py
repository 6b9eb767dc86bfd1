import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kawasaki_lab.coarse_grain import (BlockScheme, InterpolatedModel, embed, hbar_Y_aux,
                                       hbar_Y_aux_gradient, hbar_Y_gradient, hbar_Y_hessian_entry,
                                       meso_state, project, thermodynamic_gap, to_euclidean)
from kawasaki_lab.free_energy import gaussian_hbar_curve, hbar_K_curve, hbar_N
from kawasaki_lab.model import DimensionError, double_well_model, gaussian_model
from kawasaki_lab.sampler import ChainConfig
from oracles import gaussian_block_log_integral


def test_projection_examples():
    sc = BlockScheme.equal(4, 2)
    np.testing.assert_allclose(sc.project([1, 2, 3, 4]), [1.5, 3.5])
    np.testing.assert_allclose(sc.embed([1.5, 3.5]), [1.5, 1.5, 3.5, 3.5])
    np.testing.assert_allclose(sc.project(np.full(4, 0.7)), [0.7, 0.7])
    uneq = BlockScheme((3, 2))
    np.testing.assert_allclose(uneq.project([1, 1, 1, 4, 4]), [1.0, 4.0])
    np.testing.assert_allclose(uneq.alpha, [6 / 5, 4 / 5])
    st_ = project(uneq, [1, 1, 1, 4, 4])
    assert st_.m == pytest.approx(2.2)


def test_scheme_errors():
    with pytest.raises(ValueError):
        BlockScheme.equal(10, 3)
    with pytest.raises(ValueError):
        BlockScheme((1, 5))
    with pytest.raises(DimensionError):
        BlockScheme.equal(8, 2).project(np.zeros(6))
    with pytest.raises(ValueError):
        meso_state(BlockScheme.equal(8, 2), [0.0, 1.0], m=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(2, 4), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_project_embed_identity(sizes, seed):
    sc = BlockScheme(tuple(sizes))
    y = np.random.default_rng(seed).standard_normal(sc.M)
    np.testing.assert_allclose(sc.project(sc.embed(y)), y, atol=1e-14)
    assert sc.mean(y) == pytest.approx(float(np.mean(sc.embed(y))), abs=1e-12)
    x = np.random.default_rng(seed + 1).standard_normal(sc.N)
    # adjoint pairing: x . P*y = (1/M) sum_l alpha_l y_l (Px)_l
    assert float(x @ sc.adjoint(y)) == pytest.approx(float(np.sum(sc.alpha * y * sc.project(x))) / sc.M, abs=1e-12)
    assert float(np.mean(embed(sc, y))) == pytest.approx(sc.mean(y), abs=1e-12)


def test_aux_values():
    grid = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.05), 10)
    g = gaussian_hbar_curve(grid, 8)
    sc = BlockScheme.equal(16, 2)
    assert hbar_Y_aux(sc, {8: g}, [0.0, 0.0]) == pytest.approx(float(g.value(0.0)))
    np.testing.assert_allclose(hbar_Y_aux_gradient(sc, g, [0.3, -0.4]), [0.3, -0.4], atol=1e-10)
    dw = double_well_model(16)
    c = hbar_K_curve(dw, 16, grid)
    one = BlockScheme.equal(16, 1)
    assert hbar_Y_aux(one, c, [0.25]) == pytest.approx(hbar_N(dw, 0.25), abs=1e-6)
    three = BlockScheme.equal(48, 3)
    y = [0.5, -0.5, 0.0]
    assert hbar_Y_aux(three, c, y) == pytest.approx(sum(float(c.value(v)) for v in y) / 3)
    np.testing.assert_allclose(to_euclidean(three, [3.0, 6.0, 9.0]), [1.0, 2.0, 3.0])


def test_interpolated_model_endpoints():
    m = double_well_model(8, h=(0.2, 0.1))
    sc = BlockScheme.equal(8, 2)
    x = np.random.default_rng(0).standard_normal((3, 8))
    np.testing.assert_allclose(InterpolatedModel(m, sc, 1.0).energy(x), m.energy(x))
    np.testing.assert_allclose(InterpolatedModel(m, sc, 0.0).energy(x), m.aux_energy(sc, x))
    im = InterpolatedModel(m, sc, 0.3)
    eps = 1e-6
    v = np.random.default_rng(1).standard_normal(8)
    fd = (im.energy(x[0] + eps * v) - im.energy(x[0] - eps * v)) / (2 * eps)
    assert im.grad_energy(x[0]) @ v == pytest.approx(fd, rel=1e-6)


def test_gaussian_gradient_is_identity():
    sc = BlockScheme.equal(16, 2)
    est = hbar_Y_gradient(gaussian_model(16), sc, [0.4, -0.2], ChainConfig(0.3, 200, 1, "MALA", 0), 200, 4)
    # block sums of x are pinned, so the estimator has no variance here
    np.testing.assert_allclose([e.value for e in est], [0.4, -0.2], atol=1e-10)


def test_double_well_gradient_against_aux():
    K, M = 16, 4
    dw = double_well_model(K * M)
    sc = BlockScheme.equal(K * M, M)
    y = [0.5, -0.5, 0.0, 0.2]
    grid = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.05), 10)
    aux = hbar_Y_aux_gradient(sc, hbar_K_curve(dw, K, grid), y)
    est = hbar_Y_gradient(dw, sc, y, ChainConfig(0.15, 1000, 2, "MALA", 3), 1500, 64)
    for e, a in zip(est, aux):
        assert abs(e.value - a) <= 2 * e.se + 0.1


def test_constant_profile_gradient_interior_equal():
    K, M = 8, 4
    dw = double_well_model(K * M)
    sc = BlockScheme.equal(K * M, M)
    est = hbar_Y_gradient(dw, sc, [0.3] * M, ChainConfig(0.15, 1000, 2, "MALA", 4), 1500, 64)
    assert abs(est[1].value - est[2].value) <= 3 * math.hypot(est[1].se, est[2].se)
    assert abs(est[0].value - est[1].value) <= 3 * math.hypot(est[0].se, est[1].se) + 1.0 / K


def test_gaussian_free_hessian():
    sc = BlockScheme.equal(16, 2)
    cfg = ChainConfig(0.3, 100, 1, "MALA", 0)
    assert hbar_Y_hessian_entry(gaussian_model(16), sc, [0.1, 0.2], 0, 0, cfg, 100, 4).value == pytest.approx(1.0)
    assert hbar_Y_hessian_entry(gaussian_model(16), sc, [0.1, 0.2], 0, 1, cfg, 100, 4).value == pytest.approx(0.0, abs=1e-12)


def test_double_well_diagonal_bounded():
    dw = double_well_model(16)
    sc = BlockScheme.equal(16, 2)
    for y in ([0.0, 0.0], [1.0, -0.5]):
        e = hbar_Y_hessian_entry(dw, sc, y, 0, 0, ChainConfig(0.15, 1000, 2, "MALA", 1), 1500, 64)
        assert 0.1 <= e.value <= 10.0


def test_thermodynamic_gap_against_gaussian_oracle():
    m = gaussian_model(8, h=(0.3,))
    sc = BlockScheme.equal(8, 2)
    y = [0.4, -0.1]
    Q = np.eye(8) + m.coupling_matrix
    lab = sc.labels
    Qa = Q.copy()
    Qa[lab[:, None] != lab[None, :]] = 0.0
    exact = -(gaussian_block_log_integral(Q, sc, y) - gaussian_block_log_integral(Qa, sc, y)) / 8
    est = thermodynamic_gap(m, sc, y, nodes=16, count=1500, n_chains=32, seed=2)
    assert abs(est.value - exact) <= 3 * est.se + 1e-3
    assert thermodynamic_gap(gaussian_model(8), sc, y, nodes=4, count=50, n_chains=2).value == 0.0
