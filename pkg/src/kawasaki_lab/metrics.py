"""H^-1 norms on the unit torus, the discrete A^-1 quadratic form, and the
micro/meso/macro error functionals of the hydrodynamic limit."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sampler import MomentReport

# three-point Gauss-Legendre on [0, 1]; exact for the quartic omega^2 per cell
_GL_T = 0.5 * (1.0 + np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)]))
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


class MeanError(ValueError):
    pass


@dataclass(frozen=True)
class TorusFunction:
    """Function on [0, 1) from samples on a uniform periodic grid.

    ``step``: value v_i on the cell [i/n, (i+1)/n). ``linear``: nodal value
    v_i at i/n with periodic piecewise-linear interpolation. Both kinds have
    mean equal to the arithmetic mean of the samples.
    """

    values: np.ndarray
    kind: str = "step"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 8:
            raise ValueError("torus function needs at least 8 samples")
        if self.kind not in ("step", "linear"):
            raise ValueError(f"unknown kind {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @classmethod
    def sample(cls, f, n: int, kind="linear") -> "TorusFunction":
        """Nodal samples at i/n (linear) or cell midpoints (step)."""
        theta = np.arange(n) / n if kind == "linear" else (np.arange(n) + 0.5) / n
        return cls(f(theta), kind)

    def breakpoints(self):
        return np.arange(self.n + 1) / self.n

    def one_sided(self, a, b):
        """Values at a+ and b- on sub-cells [a, b] of the common refinement."""
        n = self.n
        mid = 0.5 * (a + b)
        idx = np.minimum((mid * n).astype(int), n - 1)
        if self.kind == "step":
            return self.values[idx], self.values[idx]
        v, vn = self.values[idx], self.values[(idx + 1) % n]
        s = lambda t: v + (vn - v) * (t * n - idx)
        return s(a), s(b)

    def __sub__(self, other):
        return Combination([(1.0, self), (-1.0, other)])

    def __call__(self, theta):
        theta = np.asarray(theta) % 1.0
        return self.one_sided(theta, theta)[0]


@dataclass(frozen=True)
class Combination:
    terms: list

    @property
    def mean(self) -> float:
        return float(sum(c * f.mean for c, f in self.terms))

    def breakpoints(self):
        return np.unique(np.concatenate([f.breakpoints() for _, f in self.terms]).round(15))

    def one_sided(self, a, b):
        lo = sum(c * f.one_sided(a, b)[0] for c, f in self.terms)
        hi = sum(c * f.one_sided(a, b)[1] for c, f in self.terms)
        return lo, hi

    def __sub__(self, other):
        return Combination(list(self.terms) + [(-1.0, other)])

    def __mul__(self, c):
        return Combination([(c * k, f) for k, f in self.terms])

    __rmul__ = __mul__


def h_minus1_norm(f, tol=1e-10) -> float:
    """Squared H^-1 norm int omega^2 with omega' = f and int omega = 0.

    ``f`` is a TorusFunction or a difference of them; the integral is exact
    for piecewise-linear f on the common refinement of all input grids.
    """
    if isinstance(f, TorusFunction):
        f = Combination([(1.0, f)])
    if abs(f.mean) > tol:
        raise MeanError(f"H^-1 norm needs a mean-zero function, mean is {f.mean:.3e}")
    b = f.breakpoints()
    a, e = b[:-1], b[1:]
    d = e - a
    fl, fr = f.one_sided(a, e)
    # subtract the tiny residual mean so the primitive is periodic
    mu = float(np.sum(0.5 * (fl + fr) * d))
    fl, fr = fl - mu, fr - mu
    w0 = np.concatenate([[0.0], np.cumsum(0.5 * (fl + fr) * d)[:-1]])
    s = _GL_T[None, :] * d[:, None]
    omega = w0[:, None] + fl[:, None] * s + (fr - fl)[:, None] * s * s / (2 * d[:, None])
    wts = _GL_W[None, :] * d[:, None]
    m1 = float(np.sum(wts * omega))
    m2 = float(np.sum(wts * omega * omega))
    return m2 - m1 * m1


def kawasaki_eigenvalues(N: int) -> np.ndarray:
    """Eigenvalues 4 N^2 sin^2(pi k / N) of the periodic Kawasaki operator (rfft order)."""
    k = np.arange(N // 2 + 1)
    return 4.0 * N * N * np.sin(np.pi * k / N) ** 2


def apply_pinv(x):
    """A^+ x on mean-zero vectors along the last axis (Fourier diagonalisation)."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1]
    X = np.fft.rfft(x, axis=-1)
    lam = kawasaki_eigenvalues(N)
    inv = np.zeros_like(lam)
    inv[1:] = 1.0 / lam[1:]
    return np.fft.irfft(X * inv, n=N, axis=-1)


def discrete_form(x, tol=1e-9):
    """(1/N) <x, A^+ x> for mean-zero x (batched along leading axes)."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1]
    if np.max(np.abs(x.sum(axis=-1))) > tol * max(1.0, N):
        raise MeanError("discrete form needs sum(x) = 0")
    return np.sum(x * apply_pinv(x), axis=-1) / N


@dataclass(frozen=True)
class TwoScaleConstants:
    """Constants of the two-scale criterion; ``rho`` doubles as the LSI
    constant of the marginal in the 1/M coefficient."""

    kappa: float
    lam: float
    rho: float
    alpha: float
    beta: float
    gamma: float
    C1: float
    C2: float

    def __post_init__(self):
        for k in ("lam", "rho", "alpha", "gamma"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.kappa < 0 or self.C1 < 0:
            raise ValueError("kappa and C1 must be non-negative")

    def coefficients(self, T: float) -> tuple:
        """Coefficients (a, b) of the 1/M^2 and 1/M terms of the bound."""
        a = self.C1 * self.gamma * self.kappa**2 / (2 * self.lam * self.rho**2)
        b = (math.sqrt(2 * T * self.gamma) * math.sqrt(self.alpha + 2 * self.C1 / self.rho)
             * (math.sqrt(self.C1) + math.sqrt(max(self.C2 + self.beta, 0.0))))
        return a, b

    def bound(self, theta0: float, T: float, N: int, M: int) -> float:
        a, b = self.coefficients(T)
        return theta0 + T * M / N + a / M**2 + b / M


def two_scale_slack(T: float, N: int, M: int, a: float, b: float) -> float:
    """T M/N + a/M^2 + b/M: the shape of the excess allowed over Theta(0)."""
    return T * M / N + a / M**2 + b / M


def theta_functional(xs, eta, scheme, t_x=None, t_eta=None) -> MomentReport:
    """(1/2N) E <x - N P* eta, A^+ (x - N P* eta)> over an ensemble (rows of xs)."""
    if t_x is not None and t_eta is not None and abs(t_x - t_eta) > 1e-12:
        raise ValueError(f"checkpoint time {t_x} differs from meso time {t_eta}")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    v = xs - scheme.embed(np.asarray(eta, dtype=float))[None, :]
    vals = 0.5 * discrete_form(v)
    return ensemble_report(vals)


def ensemble_report(vals) -> MomentReport:
    vals = np.asarray(vals, dtype=float)
    n = vals.size
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return MomentReport(est, se, float(n))


def micro_macro_error(xs, zeta: TorusFunction) -> MomentReport:
    """Ensemble mean of ||x_bar - zeta||^2_{H^-1}; rows of xs are trajectories."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    m = zeta.mean
    vals = []
    for x in xs:
        if abs(np.mean(x) - m) > 1e-9:
            raise MeanError(f"configuration mean {np.mean(x)} differs from profile mean {m}")
        vals.append(h_minus1_norm(TorusFunction(x, "step") - zeta))
    return ensemble_report(vals)


def profile_error(a, b) -> float:
    """||a - b||^2_{H^-1} for two profiles sharing their mean."""
    return h_minus1_norm(a - b)


def equivalence_ratio(x) -> tuple:
    """(discrete form, continuum H^-1 norm of the step function) for mean-zero x."""
    x = np.asarray(x, dtype=float)
    return float(discrete_form(x)), h_minus1_norm(TorusFunction(x, "step"))
