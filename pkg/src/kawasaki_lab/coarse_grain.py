"""Block decomposition, projection/lift, and the multi-block coarse-grained
Hamiltonian.

Gradients and Hessians of the coarse-grained Hamiltonian are expressed in the
mesoscopic metric <y, z>_Y = (1/M) sum_l y_l z_l, so the Y-gradient is M
times the Euclidean one. ``to_euclidean`` converts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import DimensionError, ModelSpec
from .sampler import ChainConfig, ConstraintSpec, batch_means, run_chains


@dataclass(frozen=True)
class BlockScheme:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("block sizes must be positive")
        object.__setattr__(self, "sizes", sizes)
        a = self.alpha
        if len(set(sizes)) > 1 and (a.min() < 0.5 or a.max() > 2.0):
            raise ValueError(f"unequal blocks need weights in [1/2, 2], got {a}")

    @classmethod
    def equal(cls, N: int, M: int) -> "BlockScheme":
        if N % M:
            raise ValueError(f"N={N} is not divisible into {M} equal blocks")
        return cls((N // M,) * M)

    @classmethod
    def balanced(cls, N: int, M: int) -> "BlockScheme":
        """M contiguous blocks whose sizes differ by at most one."""
        base, extra = divmod(N, M)
        return cls(tuple(base + 1 if l < extra else base for l in range(M)))

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @property
    def M(self) -> int:
        return len(self.sizes)

    @property
    def K(self) -> int:
        if len(set(self.sizes)) > 1:
            raise ValueError("scheme has unequal blocks")
        return self.sizes[0]

    @cached_property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)

    @cached_property
    def labels(self) -> np.ndarray:
        lab = np.repeat(np.arange(self.M), self.sizes)
        lab.setflags(write=False)
        return lab

    @cached_property
    def alpha(self) -> np.ndarray:
        return self.M * np.asarray(self.sizes, dtype=float) / self.N

    def block(self, l: int) -> range:
        s = int(self.starts[l])
        return range(s, s + self.sizes[l])

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.N:
            raise DimensionError(f"configuration has length {x.shape[-1]}, scheme covers {self.N}")
        return np.add.reduceat(x, self.starts, axis=-1) / np.asarray(self.sizes)

    def embed(self, y):
        """Block-constant lift N P* y."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.M:
            raise DimensionError(f"mesoscopic vector has length {y.shape[-1]}, expected {self.M}")
        return np.repeat(y, self.sizes, axis=-1)

    def adjoint(self, y):
        return self.embed(y) / self.N

    def mean(self, y) -> float:
        return float(np.dot(self.alpha, y) / self.M)

    def inner(self, y, z) -> float:
        return float(np.dot(y, z) / self.M)


@dataclass(frozen=True)
class MesoState:
    y: np.ndarray
    m: float

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


def project(scheme: BlockScheme, x) -> MesoState:
    y = scheme.project(x)
    return MesoState(y, scheme.mean(y))


def embed(scheme: BlockScheme, y) -> np.ndarray:
    return scheme.embed(y.y if isinstance(y, MesoState) else y)


def meso_state(scheme: BlockScheme, y, m=None) -> MesoState:
    y = np.asarray(y, dtype=float)
    mean = scheme.mean(y)
    if m is not None and abs(mean - m) > 1e-12 * max(1.0, abs(m)):
        raise ValueError(f"weighted mean {mean} differs from m={m}")
    return MesoState(y, mean if m is None else float(m))


def _curve_for(curves, K):
    try:
        return curves[K]
    except (KeyError, TypeError):
        if hasattr(curves, "value"):
            return curves
        raise KeyError(f"no coarse-grained curve for block size {K}")


def hbar_Y_aux(scheme: BlockScheme, curves, y) -> float:
    """(1/M) sum_l alpha_l Hbar_{K_l}(y_l); alpha_l = 1 for equal blocks."""
    y = np.asarray(y.y if isinstance(y, MesoState) else y, dtype=float)
    total = 0.0
    for l, K in enumerate(scheme.sizes):
        total += scheme.alpha[l] * float(_curve_for(curves, K).value(y[l]))
    return total / scheme.M


def hbar_Y_aux_gradient(scheme: BlockScheme, curves, y) -> np.ndarray:
    """Y-gradient of the auxiliary coarse-grained Hamiltonian."""
    y = np.asarray(y.y if isinstance(y, MesoState) else y, dtype=float)
    return np.array([scheme.alpha[l] * float(_curve_for(curves, K).derivative(y[l]))
                     for l, K in enumerate(scheme.sizes)])


def to_euclidean(scheme: BlockScheme, g_Y):
    """Convert a Y-gradient to the Euclidean gradient in y coordinates."""
    return np.asarray(g_Y) / scheme.M


class InterpolatedModel:
    """H_aux + lam * (cross-block interactions): a path from H_aux to H."""

    def __init__(self, model: ModelSpec, scheme: BlockScheme, lam: float):
        self.model, self.scheme, self.lam = model, scheme, float(lam)
        self.N = model.N
        self.sigma = model.sigma
        cross = np.zeros_like(model.coupling_matrix)
        lab = scheme.labels
        mask = lab[:, None] != lab[None, :]
        cross[mask] = model.coupling_matrix[mask]
        self._cross = cross

    def cross_energy(self, x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, self._cross, x)

    def energy(self, x):
        return self.model.energy(x) - (1.0 - self.lam) * self.cross_energy(x)

    def grad_energy(self, x):
        return self.model.grad_energy(x) - (1.0 - self.lam) * (x @ self._cross)


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float


def _block_sums(scheme, v):
    return np.add.reduceat(v, scheme.starts, axis=-1)


def _default_chain(seed):
    return ChainConfig(step=0.1, burn_in=2000, thin=2, kind="MALA", seed=seed)


def hbar_Y_gradient(model: ModelSpec, scheme: BlockScheme, y, chain: ChainConfig | None = None,
                    count=4000, n_chains=64, stream=0, se_tol=None):
    """Monte Carlo Y-gradient (M/N) E[sum_{i in B(l)} dH/dx_i | Px = y].

    Returns a list of per-block :class:`Estimate`.
    """
    y = np.asarray(y.y if isinstance(y, MesoState) else y, dtype=float)
    chain = chain or _default_chain(0)
    cons = ConstraintSpec.blocks(scheme, y)
    run = run_chains(model, cons, chain, count, n_chains,
                     observe=lambda x: _block_sums(scheme, model.grad_energy(x)), stream=stream)
    scale = scheme.M / scheme.N
    out = []
    for l in range(scheme.M):
        rep = batch_means(run.records[:, :, l])
        out.append(Estimate(scale * rep.estimate, scale * rep.se))
    if se_tol is not None and max(e.se for e in out) > se_tol:
        raise RuntimeError(f"gradient standard error above {se_tol}")
    return out


def _hessian_observables(model, scheme):
    def obs(x):
        g = _block_sums(scheme, x @ model.coupling_matrix + model.potential.perturbation(x, 1))
        c = _block_sums(scheme, model.potential.perturbation(x, 2))
        return np.concatenate([g, c], axis=-1)
    return obs


def hessian_samples(model, scheme, y, chain=None, count=4000, n_chains=64, stream=0):
    y = np.asarray(y.y if isinstance(y, MesoState) else y, dtype=float)
    chain = chain or _default_chain(0)
    return run_chains(model, ConstraintSpec.blocks(scheme, y), chain, count, n_chains,
                      observe=_hessian_observables(model, scheme), stream=stream)


def hessian_entry_from_samples(model, scheme, records, l, n) -> Estimate:
    """Y-Hessian entry from recorded (G_1..G_M, curvature sums) observables.

    Entry = (M/N)[delta_ln (K_l + E sum psi_b'') + sum_{B(l) x B(n)} M_ij
    - cov(G_l, G_n)], where G_l = sum_{j in B(l)} (sum_i M_ij x_i + psi_b'(x_j)).
    """
    M = scheme.M
    Gl = records[:, :, l]
    Gn = records[:, :, n]
    prod = (Gl - Gl.mean()) * (Gn - Gn.mean())
    cov = batch_means(prod)
    inter = float(model.coupling_matrix[np.ix_(list(scheme.block(l)), list(scheme.block(n)))].sum())
    val = inter - cov.estimate
    var = cov.se**2
    if l == n:
        curv = batch_means(records[:, :, M + l])
        val += scheme.sizes[l] + curv.estimate
        var += curv.se**2
    scale = M / scheme.N
    return Estimate(scale * val, scale * math.sqrt(var))


def hbar_Y_hessian_entry(model: ModelSpec, scheme: BlockScheme, y, l: int, n: int,
                         chain: ChainConfig | None = None, count=4000, n_chains=64, stream=0) -> Estimate:
    run = hessian_samples(model, scheme, y, chain, count, n_chains, stream)
    return hessian_entry_from_samples(model, scheme, run.records, l, n)


def thermodynamic_gap(model: ModelSpec, scheme: BlockScheme, y, nodes=16, chain=None,
                      count=2000, n_chains=32, seed=0) -> Estimate:
    """Hbar_Y(y) - Hbar_aux(y) = (1/N) int_0^1 E_lam[cross-block energy] d lam.

    Gauss-Legendre in lam; the expectation at each node is a block-conditional
    Monte Carlo average under H_aux + lam * cross.
    """
    y = np.asarray(y.y if isinstance(y, MesoState) else y, dtype=float)
    t, w = np.polynomial.legendre.leggauss(nodes)
    lam = 0.5 * (t + 1.0)
    w = 0.5 * w
    cons = ConstraintSpec.blocks(scheme, y)
    val, var = 0.0, 0.0
    for k, (lk, wk) in enumerate(zip(lam, w)):
        im = InterpolatedModel(model, scheme, lk)
        ch = chain or ChainConfig(step=0.1, burn_in=1000, thin=2, kind="MALA", seed=seed)
        run = run_chains(im, cons, ch, count, n_chains, observe=im.cross_energy, stream=k)
        rep = batch_means(run.records)
        val += wk * rep.estimate
        var += (wk * rep.se) ** 2
    return Estimate(val / model.N, math.sqrt(var) / model.N)
