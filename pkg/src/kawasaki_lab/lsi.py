"""Certificate calculators for logarithmic Sobolev constants.

These combine supplied (or estimated) inputs through the standard criteria;
they never claim the true LSI constant of a measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROVENANCES = ("bakry_emery", "holley_stroock", "tensorize", "otto_reznikoff", "two_scale")


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class LsiConstant:
    rho: float
    provenance: str
    inputs: dict = field(default_factory=dict)
    formula: str = ""

    def __post_init__(self):
        if not self.rho > 0:
            raise CertificateError(f"certificate failed: rho = {self.rho}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def report(self) -> dict:
        return {"inputs": self.inputs, "formula": self.formula, "rho": self.rho,
                "provenance": self.provenance}


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise CertificateError(f"{k} must be positive, got {v}")


def tensorize(rho1: float, rho2: float) -> LsiConstant:
    _positive(rho1=rho1, rho2=rho2)
    return LsiConstant(min(rho1, rho2), "tensorize", {"rho1": rho1, "rho2": rho2}, "min(rho1, rho2)")


def holley_stroock(rho: float, osc: float) -> LsiConstant:
    _positive(rho=rho)
    if osc < 0:
        raise CertificateError("oscillation must be non-negative")
    return LsiConstant(rho * math.exp(-osc), "holley_stroock", {"rho": rho, "osc": osc}, "rho exp(-osc)")


def bakry_emery(hessian_lower_bound: float) -> LsiConstant:
    _positive(hessian_lower_bound=hessian_lower_bound)
    return LsiConstant(float(hessian_lower_bound), "bakry_emery",
                       {"hessian_lower_bound": hessian_lower_bound}, "Hess H >= rho")


def hessian_lower_bound(model) -> float:
    """Gershgorin-style bound: smallest eigenvalue of Id + coupling minus sup|psi_b''|."""
    M = np.eye(model.N) + model.coupling_matrix
    return float(np.linalg.eigvalsh(M)[0] - model.potential.bounds()[2])


def otto_reznikoff(rho, kappa, tol=1e-12) -> LsiConstant:
    """Smallest eigenvalue of the matrix with rho_i on the diagonal and -kappa_ij off it."""
    rho = np.asarray(rho, dtype=float)
    kappa = np.array(kappa, dtype=float)
    n = rho.size
    if kappa.shape != (n, n):
        raise CertificateError("kappa must be square and match rho")
    if not np.allclose(kappa, kappa.T, atol=tol, rtol=0):
        raise CertificateError("kappa must be symmetric")
    off = kappa[~np.eye(n, dtype=bool)]
    if np.any(off < 0):
        raise CertificateError("kappa must be non-negative off the diagonal")
    _positive(**{f"rho_{i}": r for i, r in enumerate(rho)})
    A = -kappa
    np.fill_diagonal(A, rho)
    lam = float(np.linalg.eigvalsh(A)[0])
    return LsiConstant(lam, "otto_reznikoff", {"rho": rho.tolist(), "kappa": kappa.tolist()},
                       "lambda_min([rho_i delta_ij - kappa_ij])")


def two_scale_combine(rho1: float, rho2: float, kappa: float) -> LsiConstant:
    _positive(rho1=rho1, rho2=rho2)
    if kappa < 0:
        raise CertificateError("kappa must be non-negative")
    if kappa == 0:
        return LsiConstant(min(rho1, rho2), "two_scale", {"rho1": rho1, "rho2": rho2, "kappa": 0.0},
                           "min(rho1, rho2) (kappa = 0)")
    s = rho1 + rho2 + kappa**2 / rho1
    disc = s * s - 4 * rho1 * rho2
    # rationalised root avoids cancellation when kappa is small
    rho = 2 * rho1 * rho2 / (s + math.sqrt(max(disc, 0.0)))
    return LsiConstant(rho, "two_scale", {"rho1": rho1, "rho2": rho2, "kappa": kappa},
                       "(s - sqrt(s^2 - 4 rho1 rho2))/2, s = rho1 + rho2 + kappa^2/rho1")


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    residual: float
    scaled_rates: dict = field(default_factory=dict)


def decay_rate_proxy(times, series, N=None) -> DecayFit:
    """Least-squares fit of log(series) against t; rate is minus the slope.

    With ``N`` given the N^-2-compensated rate rate/N^2 is also recorded.
    """
    t = np.asarray(times, dtype=float)
    s = np.asarray(series, dtype=float)
    if np.any(s <= 0):
        raise ValueError("decay series must be positive")
    slope, icpt = np.polyfit(t, np.log(s), 1)
    resid = float(np.sqrt(np.mean((np.log(s) - (icpt + slope * t)) ** 2)))
    rate = float(-slope)
    if abs(rate) < 1e-13:
        rate = 0.0
    scaled = {"per_N2": rate / N**2} if N else {}
    return DecayFit(rate, float(icpt), resid, scaled)


def rate_stability(rates_by_N: dict, tol=0.1) -> bool:
    """True when the N^-2-scaled (diffusive-time) rates agree within ``tol``."""
    vals = np.array(list(rates_by_N.values()), dtype=float)
    return bool(np.max(vals) / np.min(vals) - 1.0 <= tol)
