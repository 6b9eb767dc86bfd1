"""Transfer-operator free energies, Legendre transforms and the one-block
coarse-grained Hamiltonian.

Partition functions of the open chain are computed by iterating a bounded
symmetric transfer kernel on a quadrature grid. Each bond r carries the
weight exp(-a_r (x^2 + y^2)/2 - h_r x y) with a_r = |h_r| / (2 sum|h|), which
is bounded because the coupling is diagonally dominant; site factors carry
whatever is left of exp(-psi). Columns of a recursion may carry different
complex tilts sigma + i t, which is how the hyperplane integral is obtained
from the characteristic function of the total spin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from .model import ModelSpec

LOG_2PI = math.log(2.0 * math.pi)


class GridError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureGrid:
    L: float = 12.0
    G: int = 193
    rule: str = "trapezoid"

    def __post_init__(self):
        if self.G < 129:
            raise GridError(f"G={self.G} below the minimum of 129 points")
        if self.rule not in ("trapezoid", "gauss_legendre"):
            raise GridError(f"unknown rule {self.rule!r}")

    @classmethod
    def covering(cls, sigma=0.0, m=0.0, spacing=0.125, rule="trapezoid", min_half_width=12.0):
        L = max(6.0 * (1.0 + abs(sigma) + abs(m)), min_half_width)
        G = max(129, 2 * int(math.ceil(L / spacing)) + 1)
        return cls(L, G, rule)

    def refined(self) -> "QuadratureGrid":
        return QuadratureGrid(self.L, 2 * self.G - 1, self.rule)

    def check_covers(self, sigma=0.0, m=0.0):
        need = 6.0 * (1.0 + abs(sigma) + abs(m))
        if self.L < need - 1e-12:
            raise GridError(f"half-width {self.L} below tail requirement {need:.3g} "
                            f"(sigma={sigma:.3g}, m={m:.3g})")

    def nodes(self):
        if self.rule == "trapezoid":
            x = np.linspace(-self.L, self.L, self.G)
            w = np.full(self.G, x[1] - x[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            return x, w
        x, w = np.polynomial.legendre.leggauss(self.G)
        return self.L * x, self.L * w


def _bond_weights(model: ModelSpec):
    h = np.array(model.kernel.h)
    tot = np.sum(np.abs(h))
    if tot == 0.0:
        return np.zeros_like(h)
    return np.abs(h) / (2.0 * tot)


def _site_log_factors(model: ModelSpec, N: int, x):
    """log of the real site factors, shape (N, G); bond Gaussians removed."""
    a = _bond_weights(model)
    s = np.zeros(N) if model.s is None or model.N != N else np.asarray(model.s)
    out = np.empty((N, x.size))
    base = -model.potential.psi(x)
    for k in range(N):
        bonds = 0.0
        for r in range(1, model.R + 1):
            if a[r - 1] == 0.0:
                continue
            n = (k - r >= 0) + (k + r < N)
            bonds += a[r - 1] * n
        out[k] = base + 0.5 * bonds * x * x - s[k] * x
    return out


def _bond_matrix(model: ModelSpec, r: int, x):
    a = _bond_weights(model)[r - 1]
    h = model.kernel.h[r - 1]
    return np.exp(-0.5 * a * (x[:, None] ** 2 + x[None, :] ** 2) - h * np.outer(x, x))


def transfer_sums(model: ModelSpec, N: int, grid: QuadratureGrid, tilts, insert=None):
    """Open-chain partition functions for several complex tilts at once.

    Returns ``(log_scale, totals)`` with ``Z_c = exp(log_scale[c]) * totals[c]``
    where Z_c = int exp(tilt_c * sum x - H_N(x)) dx. ``insert`` is an optional
    (site, values-on-grid) pair multiplying the integrand by an observable of
    one spin.
    """
    if model.R > 2:
        raise GridError("transfer recursion supports interaction range R <= 2")
    tilts = np.atleast_1d(np.asarray(tilts))
    x, w = grid.nodes()
    logf = _site_log_factors(model, N, x)
    cplx = np.iscomplexobj(tilts)
    dtype = complex if cplx else float
    tilt_fac = np.exp(np.outer(x, tilts.real)) * (np.exp(1j * np.outer(x, tilts.imag)) if cplx else 1.0)
    # column-wise scaling keeps the real part of the tilt from over/underflowing
    shift = np.max(np.outer(x, tilts.real) + logf.max(axis=0)[:, None], axis=0)
    log_scale = np.zeros(tilts.size)

    def site(k):
        f = np.exp(logf[k] + np.log(w))[:, None] * tilt_fac * np.exp(-shift)[None, :]
        if insert is not None and insert[0] == k:
            obs = insert[1](x) if callable(insert[1]) else np.asarray(insert[1])
            f = f * obs[:, None]
        return f.astype(dtype, copy=False)

    def renorm(v):
        axes = tuple(range(v.ndim - 1))
        s = np.max(np.abs(v), axis=axes)
        s = np.where(s > 0, s, 1.0)
        log_scale[:] += np.log(s) + shift
        return v / s

    if model.R == 1 or N <= 2:
        E = _bond_matrix(model, 1, x) if N > 1 else None
        v = renorm(site(0))
        for k in range(1, N):
            v = renorm(site(k) * (E @ v))
        return log_scale, np.sum(v, axis=0)

    # R = 2: state indexed by the last two spins, shape (G, G, C)
    E1 = _bond_matrix(model, 1, x)
    E2 = _bond_matrix(model, 2, x)
    f0, f1 = site(0), site(1)
    V = f0[:, None, :] * E1[:, :, None] * f1[None, :, :]
    log_scale[:] += shift  # site 0 scale
    V = renorm(V)
    for k in range(2, N):
        fk = site(k)
        # V'(b, c) = f_k(c) E1(b, c) sum_a V(a, b) E2(a, c)
        W = np.einsum("abk,ac->bck", V, E2, optimize=True)
        V = renorm(W * E1[:, :, None] * fk[None, :, :])
    return log_scale, np.sum(V, axis=(0, 1))


def a_N_chain(model: ModelSpec, sigma: float, grid: QuadratureGrid | None = None, N: int | None = None) -> float:
    """log int exp(sigma sum x - H_N(x)) dx for the open chain of length N."""
    N = model.N if N is None else N
    grid = grid or QuadratureGrid.covering(sigma)
    grid.check_covers(sigma)
    log_scale, tot = transfer_sums(model, N, grid, [float(sigma)])
    return float(log_scale[0] + math.log(tot[0]))


def a_N_many(model: ModelSpec, sigmas, N: int, grid: QuadratureGrid | None = None) -> np.ndarray:
    sigmas = np.asarray(sigmas, dtype=float)
    grid = grid or QuadratureGrid.covering(float(np.max(np.abs(sigmas))))
    grid.check_covers(float(np.max(np.abs(sigmas))))
    log_scale, tot = transfer_sums(model, N, grid, sigmas)
    return log_scale + np.log(tot)


def subadditivity_defect(model: ModelSpec, sigma: float, N1: int, N2: int, grid=None) -> float:
    g = grid or QuadratureGrid.covering(sigma)
    return (a_N_chain(model, sigma, g, N1 + N2) - a_N_chain(model, sigma, g, N1)
            - a_N_chain(model, sigma, g, N2))


def _limit_kernel(model: ModelSpec, sigma: float, grid: QuadratureGrid):
    if model.R != 1:
        raise GridError("thermodynamic-limit kernel implemented for R = 1")
    x, w = grid.nodes()
    interior = _site_log_factors(model.with_size(3), 3, x)[1]
    half = np.sqrt(w) * np.exp(0.5 * (sigma * x + interior))
    return half[:, None] * _bond_matrix(model, 1, x) * half[None, :]


def top_eigenvalue(K: np.ndarray, tol=1e-13, max_iter=20000) -> float:
    """Largest eigenvalue of a symmetric positive kernel by power iteration."""
    v = np.ones(K.shape[0]) / math.sqrt(K.shape[0])
    lam = 0.0
    for it in range(max_iter):
        u = K @ v
        new = float(v @ u)
        nrm = np.linalg.norm(u)
        if nrm == 0:
            raise ConvergenceError("kernel annihilated the iterate")
        resid = np.linalg.norm(u - new * v) / abs(new)
        v = u / nrm
        if abs(new - lam) <= tol * abs(new) and resid < 1e-7:
            return new
        lam = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps "
                           f"(possible near-degenerate top eigenvalue)")


def A_limit(model: ModelSpec, sigma: float, grid: QuadratureGrid | None = None) -> float:
    """Free-energy density log(lambda_max) of the transfer operator."""
    grid = grid or QuadratureGrid.covering(sigma)
    grid.check_covers(sigma)
    return math.log(top_eigenvalue(_limit_kernel(model, sigma, grid)))


# ---------------------------------------------------------------------------
# curves and Legendre transforms

def _fd_derivatives(f: Callable, sigma, step):
    """Richardson-extrapolated centred first and second differences."""
    s = np.atleast_1d(np.asarray(sigma, dtype=float))
    pts = np.concatenate([s - step, s - step / 2, s, s + step / 2, s + step])
    vals = np.asarray(f(pts)).reshape(5, -1)
    fm, fmh, f0, fph, fp = vals
    d1 = (4 * (fph - fmh) / step - (fp - fm) / (2 * step)) / 3
    d2 = (4 * (fph - 2 * f0 + fmh) / (step / 2) ** 2 - (fp - 2 * f0 + fm) / step**2) / 3
    return f0, d1, d2


@dataclass
class FreeEnergyCurve:
    sigma: np.ndarray
    A: np.ndarray
    dA: np.ndarray
    d2A: np.ndarray
    provenance: str
    N: int | None = None
    evaluator: Callable | None = field(default=None, repr=False)
    step: float = 0.02

    def derivatives(self, sigma):
        """(A, A', A'') at arbitrary sigma, from the evaluator when available."""
        if self.evaluator is not None:
            return _fd_derivatives(self.evaluator, sigma, self.step)
        s = np.atleast_1d(sigma)
        if np.any(s < self.sigma[0]) or np.any(s > self.sigma[-1]):
            raise GridError("sigma outside the tabulated range and no evaluator attached")
        from scipy.interpolate import CubicSpline

        return (CubicSpline(self.sigma, self.A)(s), CubicSpline(self.sigma, self.dA)(s),
                CubicSpline(self.sigma, self.d2A)(s))

    def convexity_constant(self) -> float:
        """Smallest C with 1/C <= A'' <= C on the table."""
        return float(max(np.max(self.d2A), 1.0 / np.min(self.d2A)))

    def rows(self):
        return [(float(s), float(a), float(b), float(c))
                for s, a, b, c in zip(self.sigma, self.A, self.dA, self.d2A)]


def _finite_evaluator(model, N, grid_spacing):
    def f(s):
        s = np.asarray(s, dtype=float)
        g = QuadratureGrid.covering(float(np.max(np.abs(s))), spacing=grid_spacing)
        return a_N_many(model, s, N, g) / N
    return f


def _limit_evaluator(model, grid_spacing):
    def f(s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        g = QuadratureGrid.covering(float(np.max(np.abs(s))), spacing=grid_spacing)
        return np.array([A_limit(model, float(v), g) for v in s])
    return f


def free_energy_curve(model: ModelSpec, sigmas=None, N: int | None = None,
                      spacing=0.125, step=0.02) -> FreeEnergyCurve:
    """Tabulate A_N (N given) or the limit A on a sigma grid."""
    if sigmas is None:
        sigmas = np.round(np.arange(-6.0, 6.0 + 1e-9, 0.05), 10)
    sigmas = np.asarray(sigmas, dtype=float)
    ev = _finite_evaluator(model, N, spacing) if N else _limit_evaluator(model, spacing)
    A, dA, d2A = _fd_derivatives(ev, sigmas, step)
    return FreeEnergyCurve(sigmas, A, dA, d2A, "finite_N" if N else "limit", N, ev, step)


@dataclass(frozen=True)
class LegendreResult:
    m: float
    sigma_star: float
    value: float
    derivative: float
    residual: float


def legendre(model: ModelSpec | None, curve: FreeEnergyCurve, m: float, tol=1e-10, max_iter=100) -> LegendreResult:
    """sup_sigma (sigma m - A(sigma)) by safeguarded Newton on A'(sigma) = m."""
    res = legendre_many(curve, [m], tol, max_iter)
    return res[0]


def legendre_many(curve: FreeEnergyCurve, ms, tol=1e-10, max_iter=100) -> list:
    ms = np.asarray(ms, dtype=float)
    # bracket from the table, extended outward if an evaluator is attached
    lo = np.full(ms.size, float(curve.sigma[0]))
    hi = np.full(ms.size, float(curve.sigma[-1]))
    for _ in range(8):
        _, dlo, _ = curve.derivatives(lo)
        _, dhi, _ = curve.derivatives(hi)
        bad_lo = dlo > ms
        bad_hi = dhi < ms
        if not (bad_lo.any() or bad_hi.any()):
            break
        if curve.evaluator is None:
            raise GridError("m outside the range of A' on the tabulated sigma grid")
        width = hi - lo
        lo = np.where(bad_lo, lo - width, lo)
        hi = np.where(bad_hi, hi + width, hi)
    else:
        raise GridError("could not bracket m by extending the sigma grid")
    s = np.interp(ms, curve.dA, curve.sigma) if np.all(np.diff(curve.dA) > 0) else 0.5 * (lo + hi)
    s = np.clip(s, lo, hi)
    for _ in range(max_iter):
        _, d1, d2 = curve.derivatives(s)
        r = d1 - ms
        if np.all(np.abs(r) < tol):
            break
        lo = np.where(r < 0, np.maximum(lo, s), lo)
        hi = np.where(r > 0, np.minimum(hi, s), hi)
        new = s - r / np.where(d2 > 0, d2, np.inf)
        outside = ~((new > lo) & (new < hi)) | ~np.isfinite(new)
        new = np.where(outside, 0.5 * (lo + hi), new)
        s = np.where(np.abs(r) < tol, s, new)
    else:
        raise ConvergenceError("Legendre Newton iteration did not converge")
    A, d1, _ = curve.derivatives(s)
    return [LegendreResult(float(mi), float(si), float(si * mi - ai), float(si), float(di - mi))
            for mi, si, ai, di in zip(ms, s, A, d1)]


# ---------------------------------------------------------------------------
# the one-block coarse-grained Hamiltonian

def _fourier_nodes(N: int, var: float, n_t=193, width=30.0):
    """Trapezoid nodes on [0, T] for the characteristic function of sum x."""
    T = width / math.sqrt(N * max(var, 1e-3))
    t = np.linspace(0.0, T, n_t)
    wt = np.full(n_t, t[1] - t[0])
    wt[0] *= 0.5
    wt[-1] *= 0.5
    return t, wt


@dataclass(frozen=True)
class HbarResult:
    m: np.ndarray
    hbar: np.ndarray
    legendre_value: np.ndarray
    sigma: np.ndarray
    log_density: np.ndarray


def _hbar_core(model: ModelSpec, ms, N: int, spacing=0.125, n_t=193, width=30.0,
               insert=None, curve: FreeEnergyCurve | None = None):
    if model.R != 1:
        raise GridError("hbar_N requires interaction range R = 1")
    ms = np.atleast_1d(np.asarray(ms, dtype=float))
    curve = curve or free_energy_curve(model, [-1.0, 1.0], N, spacing)
    leg = legendre_many(curve, ms)
    sig = np.array([r.sigma_star for r in leg])
    _, _, var = curve.derivatives(sig)
    out_log = np.empty(ms.size)
    a_vals = np.empty(ms.size)
    ratio = np.empty(ms.size) if insert is not None else None
    for i, (m, s, v) in enumerate(zip(ms, sig, var)):
        grid = QuadratureGrid.covering(float(s), float(m), spacing)
        t, wt = _fourier_nodes(N, float(v), n_t, width)
        log_scale, tot = transfer_sums(model, N, grid, s + 1j * t)
        phi = np.exp(log_scale - log_scale[0]) * tot / tot[0].real
        a_vals[i] = log_scale[0] + math.log(tot[0].real)
        kern = np.exp(-1j * t * N * m) * wt
        dens = float(np.real(np.sum(phi * kern))) / math.pi
        if dens <= 0:
            raise ConvergenceError(f"non-positive density of the total spin at m={m}")
        out_log[i] = math.log(dens)
        if insert is not None:
            ls2, tot2 = transfer_sums(model, N, grid, s + 1j * t, insert=insert)
            phi2 = np.exp(ls2 - log_scale[0]) * tot2 / tot[0].real
            ratio[i] = float(np.real(np.sum(phi2 * kern))) / math.pi / dens
    hbar = sig * ms - a_vals / N - (0.5 * math.log(N) + out_log) / N
    leg_val = sig * ms - a_vals / N
    return HbarResult(ms, hbar, leg_val, sig, out_log), ratio


def hbar_N(model: ModelSpec, m: float, N: int | None = None, grid_spacing=0.125) -> float:
    """-(1/N) log of the integral of exp(-H) over {(1/N) sum x = m} (Hausdorff measure)."""
    N = model.N if N is None else N
    res, _ = _hbar_core(model, [m], N, grid_spacing)
    return float(res.hbar[0])


def hbar_N_many(model: ModelSpec, ms, N: int, grid_spacing=0.125, curve=None) -> HbarResult:
    return _hbar_core(model, ms, N, grid_spacing, curve=curve)[0]


@dataclass(frozen=True)
class CramerGap:
    m: float
    N: int
    hbar: float
    legendre_finite: float
    phi: float

    @property
    def local_gap(self) -> float:
        return self.hbar - self.legendre_finite

    @property
    def limit_gap(self) -> float:
        return self.hbar - self.phi


def cramer_gap(model: ModelSpec, m: float, N: int, limit_curve: FreeEnergyCurve | None = None) -> CramerGap:
    res = hbar_N_many(model, [m], N)
    limit_curve = limit_curve or free_energy_curve(model, np.array([-1.0, 1.0]))
    phi = legendre(model, limit_curve, m).value
    return CramerGap(float(m), N, float(res.hbar[0]), float(res.legendre_value[0]), phi)


@dataclass
class CoarseGrainedCurve:
    """H-bar_K on an m grid, with a shape-preserving interpolant of its derivative."""

    m: np.ndarray
    values: np.ndarray
    K: int
    slope: np.ndarray = field(init=False)
    _deriv: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        h = self.m[1] - self.m[0]
        if not np.allclose(np.diff(self.m), h):
            raise GridError("coarse-grained curve needs a uniform m grid")
        v = self.values
        d = np.gradient(v, h, edge_order=2)
        # fourth-order centred differences in the interior
        d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
        self.slope = d
        self._deriv = PchipInterpolator(self.m, d, extrapolate=False)

    @property
    def lo(self):
        return float(self.m[0])

    @property
    def hi(self):
        return float(self.m[-1])

    def covers(self, y) -> bool:
        y = np.asarray(y)
        return bool(np.all(y >= self.lo) and np.all(y <= self.hi))

    def _guard(self, y):
        if not self.covers(y):
            raise GridError(f"value outside tabulated range [{self.lo}, {self.hi}]; extend the m grid")

    def value(self, y):
        self._guard(y)
        from scipy.interpolate import CubicHermiteSpline

        return CubicHermiteSpline(self.m, self.values, self.slope)(y)

    def derivative(self, y):
        self._guard(y)
        return self._deriv(y)

    def second_derivative(self, y):
        self._guard(y)
        return self._deriv.derivative()(y)

    def second_differences(self):
        h = self.m[1] - self.m[0]
        return (self.values[2:] - 2 * self.values[1:-1] + self.values[:-2]) / h**2

    def convexity_constant(self, interior=slice(2, -2)) -> float:
        d2 = self.second_differences()[interior]
        if np.any(d2 <= 0):
            return math.inf
        return float(max(np.max(d2), 1.0 / np.min(d2)))


def hbar_K_curve(model: ModelSpec, K: int, m_grid, grid_spacing=0.125) -> CoarseGrainedCurve:
    m_grid = np.asarray(m_grid, dtype=float)
    res = hbar_N_many(model, m_grid, K, grid_spacing)
    return CoarseGrainedCurve(m_grid, res.hbar, K)


def gaussian_hbar_curve(m_grid, N: int) -> CoarseGrainedCurve:
    m_grid = np.asarray(m_grid, dtype=float)
    return CoarseGrainedCurve(m_grid, 0.5 * m_grid**2 - (N - 1) / (2 * N) * LOG_2PI, N)


# ---------------------------------------------------------------------------
# exact single-site moments

def gce_site_moment(model: ModelSpec, sigma: float, N: int, site: int, power=1, grid=None) -> float:
    grid = grid or QuadratureGrid.covering(sigma)
    x, _ = grid.nodes()
    ls0, t0 = transfer_sums(model, N, grid, [float(sigma)])
    ls1, t1 = transfer_sums(model, N, grid, [float(sigma)], insert=(site, x**power))
    return float(np.exp(ls1[0] - ls0[0]) * t1[0] / t0[0])


def ce_site_moment(model: ModelSpec, m: float, N: int, site: int, power=1, grid_spacing=0.125) -> float:
    """E[x_site^power] under the canonical ensemble with mean m."""
    _, ratio = _hbar_core(model, [m], N, grid_spacing, insert=(site, lambda x: x**power))
    return float(ratio[0])
