"""Lattice Hamiltonian for 1-D real-valued spins with finite-range coupling.

    H(x) = sum_i [ psi(x_i) + s_i x_i + 1/2 sum_{1<=|j-i|<=R} h(|i-j|) x_i x_j ]

with psi(z) = z^2/2 + psi_b(z) and free boundary (spins outside the lattice
are pinned to zero). All evaluators accept a single configuration of shape
(N,) or a batch of shape (..., N).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

MODEL_VERSION = 1
POTENTIAL_KINDS = ("zero", "cosine", "gaussian_bump")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    """Bounded perturbation psi_b of the quadratic single-site potential.

    ``cosine`` takes (amplitude, frequency): psi_b(z) = a cos(f z).
    ``gaussian_bump`` takes (depth, width): psi_b(z) = -d exp(-z^2 / (2 w^2)).
    """

    kind: str = "zero"
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        need = {"zero": 0, "cosine": 2, "gaussian_bump": 2}[self.kind]
        if len(self.params) != need:
            raise ValueError(f"{self.kind} potential takes {need} parameters")
        if self.kind == "gaussian_bump" and self.params[1] <= 0:
            raise ValueError("gaussian_bump width must be positive")

    def perturbation(self, z, order=0):
        """psi_b and its first two derivatives."""
        z = np.asarray(z, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(z)
        if self.kind == "cosine":
            a, f = self.params
            return [a * np.cos(f * z), -a * f * np.sin(f * z), -a * f * f * np.cos(f * z)][order]
        d, w = self.params
        g = np.exp(-z * z / (2 * w * w))
        if order == 0:
            return -d * g
        if order == 1:
            return d * z / (w * w) * g
        return d * (1.0 / (w * w) - z * z / w**4) * g

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * z * z + self.perturbation(z, 0)

    def dpsi(self, z):
        return np.asarray(z, dtype=float) + self.perturbation(z, 1)

    def d2psi(self, z):
        return 1.0 + self.perturbation(z, 2)

    def bounds(self, half_width=50.0, points=20001):
        """Numerical sup-norms of psi_b, psi_b' and psi_b'' over a wide grid."""
        z = np.linspace(-half_width, half_width, points)
        return tuple(float(np.max(np.abs(self.perturbation(z, k)))) for k in range(3))


@dataclass(frozen=True)
class InteractionKernel:
    h: tuple = ()
    delta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "h", tuple(float(c) for c in self.h))
        if len(self.h) == 0:
            raise ValueError("kernel needs range R >= 1 (use h=(0.0,) for no coupling)")

    @property
    def R(self) -> int:
        return len(self.h)

    def dominance(self) -> float:
        return 2.0 * sum(abs(c) for c in self.h) + self.delta


@dataclass(frozen=True)
class ModelSpec:
    N: int
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    kernel: InteractionKernel = field(default_factory=lambda: InteractionKernel((0.0,)))
    s: tuple | None = None
    sigma: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.s is not None:
            s = tuple(float(v) for v in self.s)
            if len(s) != self.N:
                raise DimensionError(f"external field has length {len(s)}, expected {self.N}")
            object.__setattr__(self, "s", None if not any(s) else s)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def R(self) -> int:
        return self.kernel.R

    @cached_property
    def field_vector(self) -> np.ndarray:
        v = np.zeros(self.N) if self.s is None else np.array(self.s)
        v.setflags(write=False)
        return v

    @cached_property
    def coupling_matrix(self) -> np.ndarray:
        """Dense off-diagonal interaction matrix (zero diagonal)."""
        n = self.N
        out = np.zeros((n, n))
        for r, c in enumerate(self.kernel.h, start=1):
            if r < n:
                idx = np.arange(n - r)
                out[idx, idx + r] = c
                out[idx + r, idx] = c
        out.setflags(write=False)
        return out

    def with_size(self, n: int, s=None) -> "ModelSpec":
        return ModelSpec(n, self.potential, self.kernel, s, self.sigma)

    def is_symmetric(self) -> bool:
        """True when H(-x) = H(x), i.e. zero field and even perturbation."""
        return self.s is None

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.N:
            raise DimensionError(f"configuration has length {x.shape[-1]}, expected {self.N}")
        return x

    def _neighbour_sum(self, x):
        # sum_{1<=|j-i|<=R} h(|i-j|) x_j with zero padding
        out = np.zeros_like(x)
        for r, c in enumerate(self.kernel.h, start=1):
            if c == 0.0 or r >= self.N:
                continue
            out[..., :-r] += c * x[..., r:]
            out[..., r:] += c * x[..., :-r]
        return out

    def energy(self, x):
        x = self._check(x)
        pair = 0.0
        for r, c in enumerate(self.kernel.h, start=1):
            if c != 0.0 and r < self.N:
                pair = pair + c * np.sum(x[..., :-r] * x[..., r:], axis=-1)
        val = np.sum(self.potential.psi(x), axis=-1) + pair
        if self.s is not None:
            val = val + x @ self.field_vector
        return val

    def grad_energy(self, x):
        x = self._check(x)
        g = self.potential.dpsi(x) + self._neighbour_sum(x)
        if self.s is not None:
            g = g + self.field_vector
        return g

    def hess_action(self, x, v):
        """Hessian of H at x applied to v."""
        x = self._check(x)
        v = self._check(v)
        return self.potential.d2psi(x) * v + self._neighbour_sum(v)

    def aux_energy(self, scheme, x):
        """Energy with every interaction between distinct blocks removed."""
        x = self._check(x)
        if scheme.N != self.N:
            raise DimensionError(f"scheme covers {scheme.N} sites, model has {self.N}")
        return self.energy(x) - self.cross_block_energy(scheme, x)

    def cross_block_energy(self, scheme, x):
        x = self._check(x)
        labels = scheme.labels
        total = 0.0
        for r, c in enumerate(self.kernel.h, start=1):
            if c == 0.0 or r >= self.N:
                continue
            cross = labels[:-r] != labels[r:]
            total = total + c * np.sum((x[..., :-r] * x[..., r:])[..., cross], axis=-1)
        return total


@dataclass(frozen=True)
class SpinConfiguration:
    """A point of the hyperplane {(1/N) sum x = m}."""

    values: np.ndarray
    mean: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mean", float(self.mean))
        self.check()

    @classmethod
    def from_values(cls, x) -> "SpinConfiguration":
        x = np.asarray(x, dtype=float)
        return cls(x, float(np.mean(x)))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def check(self, tol=1e-12):
        drift = abs(float(np.mean(self.values)) - self.mean)
        if drift > tol * max(1.0, abs(self.mean)):
            raise ValueError(f"mean-spin invariant violated by {drift:.3e}")

    def replace(self, x) -> "SpinConfiguration":
        """New configuration with the same cached mean (re-checked)."""
        return SpinConfiguration(x, self.mean)

    def step_function(self):
        """Left-continuous step function on the unit torus: value x_i on [(i)/N, (i+1)/N)."""
        from .metrics import TorusFunction

        return TorusFunction(self.values, kind="step")


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def as_dict(self):
        return {"passed": self.passed,
                "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in self.checks]}


def validate(model: ModelSpec) -> ValidationReport:
    k = model.kernel
    checks = []
    dom = k.dominance()
    checks.append(("diagonal_dominance", dom <= 1.0 + 1e-15,
                   f"2*sum|h| + delta = {dom:.6g} (must be <= 1)"))
    checks.append(("margin_positive", k.delta > 0, f"delta = {k.delta:.6g}"))
    inside = all(-1.0 < c < 1.0 for c in k.h)
    checks.append(("coupling_range", inside, f"h = {list(k.h)} (each in (-1, 1))"))
    b = model.potential.bounds()
    checks.append(("perturbation_bounded", all(np.isfinite(b)),
                   f"sup|psi_b|={b[0]:.4g}, sup|psi_b'|={b[1]:.4g}, sup|psi_b''|={b[2]:.4g}"))
    checks.append(("lattice_size", model.N >= 1, f"N = {model.N}"))
    return ValidationReport(checks)


def gaussian_model(N: int, h=(0.0,), delta=0.1, sigma=0.0) -> ModelSpec:
    return ModelSpec(N, PotentialSpec("zero"), InteractionKernel(tuple(h), delta), sigma=sigma)


def double_well_model(N: int, h=(0.2,), delta=0.1, amplitude=1.0, frequency=1.5, sigma=0.0) -> ModelSpec:
    """Reference non-convex model: psi = z^2/2 + cos(1.5 z), so psi''(0) = -1.25."""
    return ModelSpec(N, PotentialSpec("cosine", (amplitude, frequency)),
                     InteractionKernel(tuple(h), delta), sigma=sigma)


def model_to_dict(model: ModelSpec) -> dict:
    out = {
        "model_version": MODEL_VERSION,
        "N": model.N,
        "potential": {"kind": model.potential.kind, "params": list(model.potential.params)},
        "kernel": {"R": model.R, "h": list(model.kernel.h), "delta": model.kernel.delta},
        "sigma": model.sigma,
    }
    if model.s is not None:
        out["s"] = list(model.s)
    return out


def model_from_dict(d: dict) -> ModelSpec:
    version = d.get("model_version", MODEL_VERSION)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model_version {version}")
    kern = d["kernel"]
    h = tuple(kern["h"])
    if "R" in kern and int(kern["R"]) != len(h):
        raise ValueError(f"kernel R={kern['R']} but {len(h)} coefficients given")
    pot = d.get("potential", {"kind": "zero", "params": []})
    return ModelSpec(
        int(d["N"]),
        PotentialSpec(pot["kind"], tuple(pot.get("params", ()))),
        InteractionKernel(h, float(kern.get("delta", 0.1))),
        tuple(d["s"]) if d.get("s") is not None else None,
        float(d.get("sigma", 0.0)),
    )


def load_model(path) -> ModelSpec:
    return model_from_dict(json.loads(Path(path).read_text()))


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")
