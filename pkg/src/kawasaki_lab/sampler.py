"""Metropolis-adjusted and unadjusted Langevin samplers for the grand
canonical, canonical and block-conditional ensembles.

Chains are vectorised: a run advances ``n_chains`` independent chains in one
array of shape (n_chains, N). Every run draws from a counter-based Philox
generator keyed by ``SeedSequence([seed, stream])``; a harness that splits
work into several runs gives each run its own ``stream`` index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROPOSALS = ("MALA", "ULA")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)])))


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    step: float = 0.1
    burn_in: int = 1000
    thin: int = 1
    kind: str = "MALA"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.step <= 1:
            raise ValueError("step size must lie in (0, 1]")
        if self.thin < 1:
            raise ValueError("thinning must be >= 1")
        if self.kind not in PROPOSALS:
            raise ValueError(f"unknown proposal kind {self.kind!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    """Which linear constraint the chain lives on.

    ``none``: grand canonical. ``mean``: sum x = N m. ``blocks``: every block
    mean pinned to ``y`` (the scheme comes from :mod:`coarse_grain`).
    """

    kind: str = "none"
    m: float | None = None
    scheme: object = None
    y: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("none", "mean", "blocks"):
            raise ConstraintError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "mean" and self.m is None:
            raise ConstraintError("mean constraint needs m")
        if self.kind == "blocks":
            if self.scheme is None or self.y is None:
                raise ConstraintError("block constraint needs a scheme and block means")
            y = np.asarray(self.y, dtype=float)
            if y.shape != (self.scheme.M,):
                raise ConstraintError(f"expected {self.scheme.M} block means, got {y.shape}")
            object.__setattr__(self, "y", tuple(float(v) for v in y))
            implied = float(np.dot(self.scheme.alpha, y) / self.scheme.M)
            if self.m is not None and abs(implied - self.m) > 1e-12 * max(1.0, abs(self.m)):
                raise ConstraintError(f"block means imply mean {implied}, not {self.m}")

    @classmethod
    def gce(cls):
        return cls("none")

    @classmethod
    def ce(cls, m):
        return cls("mean", m=float(m))

    @classmethod
    def blocks(cls, scheme, y, m=None):
        return cls("blocks", m=m, scheme=scheme, y=tuple(np.asarray(y, dtype=float)))

    def labels(self, N):
        if self.kind == "mean":
            return np.zeros(N, dtype=int)
        if self.kind == "blocks":
            if self.scheme.N != N:
                raise ConstraintError("scheme size does not match the model")
            return self.scheme.labels
        return None

    def targets(self, N):
        if self.kind == "mean":
            return np.array([self.m])
        if self.kind == "blocks":
            return np.asarray(self.y)
        return None

    def initial(self, N):
        if self.kind == "mean":
            return np.full(N, self.m)
        if self.kind == "blocks":
            return self.scheme.embed(np.asarray(self.y))
        return np.zeros(N)

    def violation(self, x) -> float:
        lab = self.labels(x.shape[-1])
        if lab is None:
            return 0.0
        means = _group_means(x, lab)
        return float(np.max(np.abs(means - self.targets(x.shape[-1]))))


def _group_means(x, labels):
    G = labels.max() + 1
    counts = np.bincount(labels, minlength=G)
    sums = np.zeros(x.shape[:-1] + (G,))
    for g in range(G):
        sums[..., g] = x[..., labels == g].sum(axis=-1)
    return sums / counts


class _Projector:
    """Orthogonal projection onto {v : sum of v over each group = 0}."""

    def __init__(self, labels, targets):
        self.labels = labels
        self.targets = targets
        if labels is not None:
            G = labels.max() + 1
            self.onehot = np.zeros((labels.size, G))
            self.onehot[np.arange(labels.size), labels] = 1.0
            self.counts = self.onehot.sum(axis=0)

    def __call__(self, v):
        if self.labels is None:
            return v
        means = (v @ self.onehot) / self.counts
        return v - means @ self.onehot.T

    def snap(self, x):
        if self.labels is None:
            return x
        means = (x @ self.onehot) / self.counts
        return x - (means - self.targets) @ self.onehot.T


@dataclass
class ChainRun:
    """Recorded output of a vectorised run: ``records[t, c, ...]``."""

    records: np.ndarray
    acceptance: float
    final_state: np.ndarray = field(repr=False)
    max_violation: float = 0.0


def run_chains(model, constraint: ConstraintSpec, chain: ChainConfig, count: int,
               n_chains: int = 1, x0=None, observe=None, stream: int = 0) -> ChainRun:
    """Advance ``n_chains`` chains and record ``count`` thinned states.

    ``model`` needs ``N``, ``sigma``, ``energy`` and ``grad_energy`` (batched).
    ``observe`` maps the (n_chains, N) state to recorded values; by default
    the configurations themselves are stored.
    """
    N = model.N
    rng = make_rng(chain.seed, stream)
    proj = _Projector(constraint.labels(N), constraint.targets(N))
    sigma = getattr(model, "sigma", 0.0) if constraint.kind == "none" else 0.0
    tau = chain.step
    if x0 is None:
        x = np.tile(constraint.initial(N), (n_chains, 1))
    else:
        x = np.array(np.broadcast_to(x0, (n_chains, N)), dtype=float)
    if constraint.violation(x) > 1e-10:
        raise ConstraintError("initial state does not satisfy the constraint")
    x = proj.snap(x)

    def logpi_and_drift(z):
        lp = sigma * z.sum(axis=-1) - model.energy(z)
        return lp, proj(sigma - model.grad_energy(z))

    lp, drift = logpi_and_drift(x)
    accepted = 0
    proposed = 0
    obs = observe or (lambda z: z.copy())
    records = None
    worst = 0.0
    total = chain.burn_in + count * chain.thin
    for step in range(total):
        noise = proj(rng.standard_normal((n_chains, N)))
        y = x + tau * drift + math.sqrt(2 * tau) * noise
        y = proj.snap(y)
        lp_y, drift_y = logpi_and_drift(y)
        if chain.kind == "MALA":
            fwd = np.sum((y - x - tau * drift) ** 2, axis=-1)
            bwd = np.sum((x - y - tau * drift_y) ** 2, axis=-1)
            log_a = lp_y - lp + (fwd - bwd) / (4 * tau)
            acc = np.log(rng.random(n_chains)) < log_a
            x = np.where(acc[:, None], y, x)
            lp = np.where(acc, lp_y, lp)
            drift = np.where(acc[:, None], drift_y, drift)
            accepted += int(acc.sum())
            proposed += n_chains
        else:
            x, lp, drift = y, lp_y, drift_y
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("sampler produced non-finite state; reduce the step size")
        if step >= chain.burn_in and (step - chain.burn_in) % chain.thin == chain.thin - 1:
            k = (step - chain.burn_in) // chain.thin
            val = np.asarray(obs(x))
            if records is None:
                records = np.empty((count,) + val.shape)
            records[k] = val
            worst = max(worst, constraint.violation(x))
    rate = accepted / proposed if proposed else 1.0
    if records is None:
        records = np.empty((0, n_chains, N))
    return ChainRun(records, rate, x, worst)


def sample(model, constraint: ConstraintSpec, chain: ChainConfig, count: int, x0=None):
    """Stream ``count`` configurations from a single chain."""
    from .model import SpinConfiguration

    run = run_chains(model, constraint, chain, count, 1, x0)
    for row in run.records[:, 0, :]:
        yield SpinConfiguration.from_values(row) if constraint.kind == "none" else \
            SpinConfiguration(row, float(np.mean(row)))


# ---------------------------------------------------------------------------
# estimators

@dataclass(frozen=True)
class MomentReport:
    estimate: float
    se: float
    ess: float
    flags: dict = field(default_factory=dict)


def batch_means(series, n_batches=20) -> MomentReport:
    """Mean with batch-means standard error; ``series`` is (T,) or (T, chains)."""
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample")
    if s.ndim == 1:
        s = s[:, None]
    T = s.shape[0]
    b = max(1, min(n_batches, T))
    L = T // b
    means = s[: b * L].reshape(b, L, -1).mean(axis=1).ravel()
    est = float(s.mean())
    if means.size < 2:
        return MomentReport(est, math.inf, 1.0)
    se = float(means.std(ddof=1) / math.sqrt(means.size))
    var = float(s.var())
    ess = var / se**2 if se > 0 else float(s.size)
    return MomentReport(est, max(se, 1e-300), ess)


def _as_series(samples):
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[:, None, :]
    return s  # (T, chains, N)


def estimate_moment(samples, site: int, power: int = 1, sigma=None, envelope=None) -> MomentReport:
    """Moment of one coordinate; optionally flags an affine envelope c1|sigma|^power + c2."""
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    s = _as_series(samples)
    rep = batch_means(s[:, :, site] ** power)
    flags = {}
    if envelope is not None and sigma is not None:
        c1, c2 = envelope
        bound = c1 * abs(sigma) ** power + c2
        flags = {"bound": bound, "within": abs(rep.estimate) <= bound}
    return MomentReport(rep.estimate, rep.se, rep.ess, flags)


def estimate_covariance(samples, f_support, g_support) -> MomentReport:
    """Covariance of sum_{i in f} x_i and sum_{j in g} x_j."""
    s = _as_series(samples)
    f = s[:, :, list(f_support)].sum(axis=-1)
    g = s[:, :, list(g_support)].sum(axis=-1)
    prod = (f - f.mean()) * (g - g.mean())
    rep = batch_means(prod)
    n = prod.size
    return MomentReport(rep.estimate * n / max(n - 1, 1), rep.se, rep.ess)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    floor: float
    pure_floor: bool
    residual: float


def fit_correlation_decay(distances, covs, ses=None, volume_term=False) -> DecayFit:
    """Fit |cov(d)| ~ C exp(-c d) (+ b for the canonical volume correction).

    Entries indistinguishable from zero (below 3 SE when errors are given)
    are treated as noise. If none survive the fit reports a pure floor.
    """
    d = np.asarray(distances, dtype=float)
    c = np.abs(np.asarray(covs, dtype=float))
    if d.size < 4:
        raise ValueError("need at least four distances")
    if not np.any(c > 0):
        raise ValueError("degenerate fit: all covariances vanish")
    keep = c > 0
    if ses is not None:
        keep &= c > 3 * np.asarray(ses)
    if keep.sum() < 2:
        return DecayFit(0.0, 0.0, float(np.max(c)), True, 0.0)
    d, c = d[keep], c[keep]
    if not volume_term:
        slope, icpt = np.polyfit(d, np.log(c), 1)
        resid = float(np.sqrt(np.mean((np.log(c) - (icpt + slope * d)) ** 2)))
        return DecayFit(float(-slope), float(math.exp(icpt)), 0.0, False, resid)
    # profile over the rate; prefactor and floor by non-negative least squares
    from scipy.optimize import minimize_scalar, nnls

    def solve(rate):
        A = np.stack([np.exp(-rate * d), np.ones_like(d)], axis=1) / c[:, None]
        coef, _ = nnls(A, np.ones_like(d))
        model = coef[0] * np.exp(-rate * d) + coef[1]
        with np.errstate(divide="ignore"):
            r = np.log(np.maximum(model, 1e-300)) - np.log(c)
        return float(np.sum(r * r)), coef

    grid = np.linspace(0.01, 10.0, 400)
    best = min(grid, key=lambda r: solve(r)[0])
    opt = minimize_scalar(lambda r: solve(r)[0], bounds=(max(best - 0.05, 1e-4), best + 0.05), method="bounded")
    err, (C, b) = solve(opt.x)
    pure = C <= 1e-12 * max(b, 1e-300) or C * math.exp(-opt.x * d.min()) < 1e-3 * b
    return DecayFit(0.0 if pure else float(opt.x), float(C), float(b), bool(pure),
                    float(math.sqrt(err / d.size)))


@dataclass(frozen=True)
class EquivalenceReport:
    m: float
    site: int
    sigma: float
    ce_mean: float
    gce_mean: float
    gap: float
    bound: float | None
    passed: bool | None


def equivalence_of_observables_check(model, m: float, site: int, C: float | None = None,
                                     N: int | None = None) -> EquivalenceReport:
    """|E_ce[x_i] - E_gce^sigma[x_i]| with sigma solving A_N'(sigma) = m.

    Both expectations are computed exactly with the transfer recursion.
    """
    from .free_energy import ce_site_moment, free_energy_curve, gce_site_moment, legendre

    N = model.N if N is None else N
    curve = free_energy_curve(model, [-1.0, 1.0], N)
    sig = legendre(model, curve, m).sigma_star
    ce = ce_site_moment(model, m, N, site)
    gce = gce_site_moment(model, sig, N, site)
    gap = abs(ce - gce)
    bound = None if C is None else C / N
    return EquivalenceReport(m, site, sig, ce, gce, gap, bound, None if C is None else gap <= bound)
