"""Kawasaki SDE, mesoscopic gradient flow and macroscopic nonlinear diffusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, PchipInterpolator

from .coarse_grain import BlockScheme, hbar_Y_aux, hbar_Y_aux_gradient
from .metrics import TorusFunction, apply_pinv, kawasaki_eigenvalues
from .model import ModelSpec, SpinConfiguration
from .sampler import ChainConfig, ConstraintSpec, make_rng, run_chains


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class KawasakiOperator:
    """A_ij = N^2 (2 delta_ij - delta_{i,j-1} - delta_{i,j+1}), indices mod N."""

    N: int

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        return self.N**2 * (2 * v - np.roll(v, 1, axis=-1) - np.roll(v, -1, axis=-1))

    def pinv(self, v):
        return apply_pinv(v)

    def eigenvalues(self):
        k = np.arange(self.N)
        return 4.0 * self.N**2 * np.sin(np.pi * k / self.N) ** 2

    def matrix(self):
        return self.apply(np.eye(self.N))

    def noise_factor(self, xi):
        """N D^T xi with (D v)_i = v_{i+1} - v_i, so (N D^T)(N D^T)^T = A."""
        xi = np.asarray(xi, dtype=float)
        return self.N * (np.roll(xi, 1, axis=-1) - xi)


def _hessian_bound(model: ModelSpec) -> float:
    return 1.0 + model.potential.bounds()[2] + 2.0 * sum(abs(c) for c in model.kernel.h)


@dataclass(frozen=True)
class SdeConfig:
    dt: float
    T: float
    seed: int = 0
    stepping: str = "euler_maruyama"
    stability_factor: float = 1.0

    def __post_init__(self):
        if self.stepping != "euler_maruyama":
            raise ValueError("only Euler-Maruyama stepping is provided")
        if not 0 < self.stability_factor <= 1:
            raise ValueError("stability factor must lie in (0, 1]")

    @classmethod
    def for_lattice(cls, N, T, seed=0, stability_factor=0.5):
        return cls(stability_factor / (8 * N * N), T, seed, "euler_maruyama", stability_factor)

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def check(self, model: ModelSpec, N: int):
        if self.dt < 0:
            raise StabilityError("negative time step")
        if self.dt > self.stability_factor / (8 * N * N) * (1 + 1e-12):
            raise StabilityError(f"dt={self.dt:.3e} exceeds {self.stability_factor}/(8 N^2)")
        if self.dt * 4 * N * N * _hessian_bound(model) >= 2:
            raise StabilityError("dt too large for the stiffest mode of this Hamiltonian")


def _check_step(model, N, dt):
    if dt < 0:
        raise StabilityError("negative time step")
    if dt * 4 * N * N * _hessian_bound(model) >= 2:
        raise StabilityError(f"dt={dt:.3e} violates the explicit stability bound for N={N}")


def _em_update(model: ModelSpec, op: KawasakiOperator, x, dt, xi):
    drift = op.apply(model.grad_energy(x))
    return x - dt * drift + math.sqrt(2 * dt) * op.noise_factor(xi)


def kawasaki_step(model: ModelSpec, x, dt: float, rng: np.random.Generator):
    """One Euler-Maruyama step of dX = -A grad H dt + sqrt(2A) dB.

    Accepts a SpinConfiguration (returned as one) or raw arrays of shape
    (..., N) for ensembles.
    """
    cfg = x if isinstance(x, SpinConfiguration) else None
    arr = cfg.values if cfg is not None else np.asarray(x, dtype=float)
    N = arr.shape[-1]
    _check_step(model, N, dt)
    if dt == 0:
        return x
    new = _em_update(model, KawasakiOperator(N), arr, dt, rng.standard_normal(arr.shape))
    if not np.all(np.isfinite(new)):
        bad = np.argwhere(~np.isfinite(new))[0]
        raise FloatingPointError(f"non-finite state after Kawasaki step at index {tuple(bad)}; "
                                 f"max |x| before step {np.max(np.abs(arr)):.3g}")
    return cfg.replace(new) if cfg is not None else new


def run_trajectory(model: ModelSpec, x0, dt: float, steps: int, seed=0, stream=0, record=None):
    """Single long trajectory; ``record`` maps the state to a row stored every step."""
    rng = make_rng(seed, stream)
    op = KawasakiOperator(model.N)
    _check_step(model, model.N, dt)
    x = np.array(x0, dtype=float)
    rec = record or (lambda z: z.copy())
    first = np.asarray(rec(x))
    out = np.empty((steps,) + first.shape)
    sq = math.sqrt(2 * dt)
    worst = 0.0
    s0 = x.sum()
    for k in range(steps):
        g = model.grad_energy(x)
        x = x - dt * op.apply(g) + sq * op.noise_factor(rng.standard_normal(x.shape))
        s1 = x.sum()
        worst = max(worst, abs(s1 - s0) / model.N)
        s0 = s1
        out[k] = rec(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("trajectory diverged")
    return out, x, worst


# ---------------------------------------------------------------------------
# ensembles

@dataclass(frozen=True)
class InitialLaw:
    """Initial law for hydrodynamic runs.

    ``lift``: the deterministic configuration x_i = zeta0((i + 1/2)/N).
    ``local_equilibrium``: the canonical ensemble conditioned on the block
    means of that configuration.
    """

    profile: Callable
    kind: str = "local_equilibrium"
    burn_in: int = 3000
    step: float = 0.1

    def site_values(self, N):
        x = np.asarray(self.profile((np.arange(N) + 0.5) / N), dtype=float)
        return x

    def block_means(self, scheme: BlockScheme):
        return scheme.project(self.site_values(scheme.N))

    def draw(self, model: ModelSpec, scheme: BlockScheme, n: int, seed: int):
        x = self.site_values(model.N)
        if self.kind == "lift":
            return np.tile(x, (n, 1))
        if self.kind != "local_equilibrium":
            raise ValueError(f"unknown initial law {self.kind!r}")
        y = scheme.project(x)
        cons = ConstraintSpec.blocks(scheme, y)
        chain = ChainConfig(step=self.step, burn_in=self.burn_in, thin=1, kind="MALA", seed=seed)
        run = run_chains(model, cons, chain, 1, n, stream=10_000)
        return run.final_state


@dataclass
class TrajectoryEnsemble:
    times: np.ndarray
    states: np.ndarray  # (n_checkpoints, n_traj, N)
    block_means: np.ndarray  # (n_checkpoints, n_traj, M)
    scheme: BlockScheme
    max_mean_drift: float
    mean: float

    @property
    def N(self):
        return self.states.shape[-1]

    def checkpoint(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise ValueError(f"no checkpoint at t={t}")
        return self.states[k]

    def block_rows(self):
        """Rows (traj, t, block_0..block_{M-1}) for CSV emission."""
        rows = []
        for j in range(self.states.shape[1]):
            for k, t in enumerate(self.times):
                rows.append([j, float(t)] + list(map(float, self.block_means[k, j])))
        return rows


def simulate_ensemble(model: ModelSpec, law: InitialLaw, sde: SdeConfig, n_traj: int,
                      scheme: BlockScheme, checkpoints=None, x0=None) -> TrajectoryEnsemble:
    """Vectorised ensemble of independent Kawasaki trajectories."""
    N = model.N
    sde.check(model, N)
    if x0 is None:
        x = law.draw(model, scheme, n_traj, sde.seed)
    else:
        x = np.array(np.broadcast_to(x0, (n_traj, N)), dtype=float)
    m = float(np.mean(x))
    steps = sde.steps
    if checkpoints is None:
        checkpoints = np.linspace(0.0, sde.T, 11)
    ck_steps = np.unique(np.round(np.asarray(checkpoints) / sde.dt).astype(int))
    ck_steps = ck_steps[ck_steps <= steps]
    rng = make_rng(sde.seed, 1)
    op = KawasakiOperator(N)
    sq = math.sqrt(2 * sde.dt)
    states, times = [], []
    sums0 = x.sum(axis=1)
    worst = 0.0
    want = set(ck_steps.tolist())
    for k in range(steps + 1):
        if k in want:
            states.append(x.copy())
            times.append(k * sde.dt)
        if k == steps:
            break
        x = x - sde.dt * op.apply(model.grad_energy(x)) + sq * op.noise_factor(rng.standard_normal(x.shape))
        if k % 64 == 0:
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"ensemble diverged at step {k}")
            s = x.sum(axis=1)
            worst = max(worst, float(np.max(np.abs(s - sums0))) / N)
    states = np.array(states)
    return TrajectoryEnsemble(np.array(times), states, scheme.project(states), scheme, worst, m)


# ---------------------------------------------------------------------------
# coarse-grained operator

@lru_cache(maxsize=64)
def _coarse_system(sizes: tuple):
    scheme = BlockScheme(sizes)
    M = scheme.M
    lifts = scheme.embed(np.eye(M))  # (M, N): row l is the lift of e_l
    lifts = lifts - lifts.mean(axis=1, keepdims=True)
    B = scheme.project(apply_pinv(lifts)).T  # column l = P A^+ N P* e_l
    alpha = scheme.alpha
    bordered = np.zeros((M + 1, M + 1))
    bordered[:M, :M] = B
    bordered[:M, M] = alpha
    bordered[M, :M] = alpha
    return B, scipy.linalg.lu_factor(bordered)


def coarse_inverse_matrix(scheme: BlockScheme) -> np.ndarray:
    """Matrix of P A^+ N P* acting on Y."""
    return _coarse_system(scheme.sizes)[0].copy()


def coarse_operator_solve(scheme: BlockScheme, g, tol=1e-10):
    """u with alpha . u = 0 solving P A^-1 N P* u = g, i.e. u = A_bar g."""
    g = np.asarray(g, dtype=float)
    a = scheme.alpha
    if abs(a @ g) > tol * max(1.0, np.max(np.abs(g))) * scheme.M:
        raise ValueError("coarse operator input must have zero alpha-weighted mean")
    B, lu = _coarse_system(scheme.sizes)
    sol = scipy.linalg.lu_solve(lu, np.concatenate([g, [0.0]]))
    return sol[:-1]


def coarse_operator_apply(scheme: BlockScheme, g):
    """A_bar g for an arbitrary Y-gradient: the alpha direction is annihilated."""
    g = np.asarray(g, dtype=float)
    a = scheme.alpha
    return coarse_operator_solve(scheme, g - a * (a @ g) / (a @ a))


def coarse_operator_matrix(scheme: BlockScheme) -> np.ndarray:
    M = scheme.M
    return np.stack([coarse_operator_apply(scheme, e) for e in np.eye(M)], axis=1)


# ---------------------------------------------------------------------------
# mesoscopic flow

@dataclass(frozen=True)
class MesoOdeConfig:
    mode: str = "aux"
    rtol: float = 1e-6
    atol: float = 1e-6
    method: str = "RK45"


class FluxTable:
    """phi' and its inverse A' for the macroscopic equation.

    Built from a free-energy curve (sigma, A', A''), or linear phi'(z) = c z.
    """

    def __init__(self, sigma, dA, name="table"):
        self.sigma = np.asarray(sigma, dtype=float)
        self.dA = np.asarray(dA, dtype=float)
        if np.any(np.diff(self.dA) <= 0):
            raise ValueError("A' must be strictly increasing (phi' strictly monotone)")
        self._zeta = CubicSpline(self.sigma, self.dA)
        self._dzeta = self._zeta.derivative()
        self._phi_prime = PchipInterpolator(self.dA, self.sigma)
        self.name = name
        self.slope = None

    @classmethod
    def from_curve(cls, curve):
        return cls(curve.sigma, curve.dA, name=curve.provenance)

    @classmethod
    def linear(cls, c=1.0):
        t = cls.__new__(cls)
        t.slope = float(c)
        t.name = "linear"
        return t

    def phi_prime(self, z):
        if self.slope is not None:
            return np.asarray(z, dtype=float) * self.slope
        z = np.asarray(z, dtype=float)
        if np.any(z < self.dA[0]) or np.any(z > self.dA[-1]):
            raise ValueError("profile value outside the tabulated range of A'")
        w = self._phi_prime(z)
        # polish the monotone interpolant against the spline inverse
        for _ in range(3):
            w = w - (self._zeta(w) - z) / self._dzeta(w)
        return w

    def zeta(self, w):
        if self.slope is not None:
            return np.asarray(w, dtype=float) / self.slope
        return self._zeta(w)

    def dzeta(self, w):
        if self.slope is not None:
            return np.full_like(np.asarray(w, dtype=float), 1.0 / self.slope)
        return self._dzeta(w)


@dataclass
class MesoTrajectory:
    times: np.ndarray
    eta: np.ndarray  # (n_times, M)
    energy: np.ndarray
    scheme: BlockScheme
    max_mass_drift: float


def integrate_meso(scheme: BlockScheme, curves, eta0, T: float, cfg: MesoOdeConfig = MesoOdeConfig(),
                   t_eval=None, flux: FluxTable | None = None) -> MesoTrajectory:
    """d eta/dt = -A_bar grad_Y Hbar(eta) with an embedded Runge-Kutta pair.

    ``aux`` mode uses the coarse-grained curves; ``phi`` mode replaces each
    Hbar_K by the limit potential phi (gradient alpha_l phi'(eta_l)).
    """
    eta0 = np.asarray(eta0, dtype=float)
    a = scheme.alpha
    if cfg.mode == "aux":
        grad = lambda e: hbar_Y_aux_gradient(scheme, curves, e)
        energy = lambda e: hbar_Y_aux(scheme, curves, e)
    elif cfg.mode == "phi":
        if flux is None:
            raise ValueError("phi mode needs a flux table")
        grad = lambda e: a * flux.phi_prime(e)
        energy = None
    else:
        raise ValueError(f"unknown mesoscopic mode {cfg.mode!r}")

    def rhs(_t, e):
        return -coarse_operator_apply(scheme, grad(e))

    if t_eval is None:
        t_eval = np.linspace(0.0, T, 11)
    sol = solve_ivp(rhs, (0.0, T), eta0, method=cfg.method, rtol=cfg.rtol, atol=cfg.atol,
                    t_eval=t_eval, dense_output=False)
    if not sol.success:
        raise RuntimeError(f"mesoscopic integration failed ({sol.message}); "
                           "reduce M or switch to phi mode")
    eta = sol.y.T
    mass0 = a @ eta0
    drift = float(np.max(np.abs(eta @ a - mass0))) / scheme.M
    en = np.array([energy(e) for e in eta]) if energy else np.full(len(eta), np.nan)
    return MesoTrajectory(sol.t, eta, en, scheme, drift)


# ---------------------------------------------------------------------------
# macroscopic PDE

@dataclass(frozen=True)
class MacroPdeConfig:
    points: int = 256
    dt: float = 1e-4
    newton_tol: float = 1e-13
    max_newton: int = 30
    max_halvings: int = 8


@dataclass
class MacroTrajectory:
    times: np.ndarray
    zeta: np.ndarray  # (n_times, points), nodal values at i/points
    newton_residual: float

    def at(self, t) -> TorusFunction:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise ValueError(f"no PDE snapshot at t={t}")
        return TorusFunction(self.zeta[k], "linear")


def _laplacian(n: int):
    h2 = 1.0 / n**2
    main = np.full(n, -2.0 / h2)
    off = np.full(n - 1, 1.0 / h2)
    L = scipy.sparse.diags([main, off, off], [0, 1, -1], format="lil")
    L[0, n - 1] = 1.0 / h2
    L[n - 1, 0] = 1.0 / h2
    return L.tocsc()


def _backward_euler_step(flux, zeta_old, w_guess, dt, lap, tol, max_newton):
    w = w_guess.copy()
    n = w.size
    for _ in range(max_newton):
        res = (flux.zeta(w) - zeta_old) / dt - lap @ w
        r = float(np.max(np.abs(res)) * dt)
        if r < tol:
            return w, r
        J = scipy.sparse.diags(flux.dzeta(w) / dt) - lap
        dw = scipy.sparse.linalg.spsolve(J.tocsc(), res)
        if not np.all(np.isfinite(dw)):
            return None, math.inf
        w = w - dw
    res = (flux.zeta(w) - zeta_old) / dt - lap @ w
    r = float(np.max(np.abs(res)) * dt)
    return (w, r) if r < tol else (None, r)


def solve_macro_pde(flux: FluxTable, zeta0, T: float, cfg: MacroPdeConfig = MacroPdeConfig(),
                    t_out=None) -> MacroTrajectory:
    """zeta_t = (phi'(zeta))_thetatheta on the torus; backward Euler in w = phi'(zeta)."""
    n = cfg.points
    theta = np.arange(n) / n
    z = np.asarray(zeta0(theta) if callable(zeta0) else zeta0, dtype=float)
    if z.size != n:
        raise ValueError("initial profile does not match the PDE grid")
    lap = _laplacian(n)
    w = flux.phi_prime(z)
    if t_out is None:
        t_out = np.linspace(0.0, T, 11)
    t_out = np.asarray(t_out, dtype=float)
    out = [z.copy()] if t_out[0] == 0 else []
    times = [0.0] if t_out[0] == 0 else []
    t = 0.0
    worst = 0.0
    targets = list(t_out[t_out > 0])
    while targets:
        nxt = targets[0]
        h = min(cfg.dt, nxt - t)
        if h <= 1e-15:
            out.append(z.copy())
            times.append(t)
            targets.pop(0)
            continue
        for _ in range(cfg.max_halvings + 1):
            w_new, r = _backward_euler_step(flux, z, w, h, lap, cfg.newton_tol, cfg.max_newton)
            if w_new is not None:
                break
            h *= 0.5
        else:
            raise RuntimeError(f"Newton failed at t={t:.4g} after step halving (residual {r:.2e})")
        worst = max(worst, r)
        w = w_new
        z = flux.zeta(w)
        t += h
        if abs(t - nxt) < 1e-12:
            t = nxt
            out.append(z.copy())
            times.append(t)
            targets.pop(0)
    return MacroTrajectory(np.array(times), np.array(out), worst)


def heat_solution(m: float, a: float, t: float, n: int, c: float = 1.0) -> TorusFunction:
    """Exact m + a exp(-4 pi^2 c t) cos(2 pi theta) at nodes i/n."""
    theta = np.arange(n) / n
    return TorusFunction(m + a * math.exp(-4 * math.pi**2 * c * t) * np.cos(2 * math.pi * theta), "linear")
