"""Experiment configuration, persistence and the scripted studies.

Each study returns an :class:`ExperimentReport` holding per-rung metrics,
tidy tables (lists of row dicts) and a pass/fail verdict per criterion.
Reports and CSVs are written atomically; the config hash covers every
numeric knob so equal hashes and seeds give equal tables.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .coarse_grain import BlockScheme, hessian_entry_from_samples, hessian_samples
from .dynamics import (FluxTable, InitialLaw, MacroPdeConfig, MesoOdeConfig, SdeConfig,
                       heat_solution, integrate_meso, run_trajectory, simulate_ensemble,
                       solve_macro_pde)
from .free_energy import (LOG_2PI, A_limit, a_N_chain, free_energy_curve, gaussian_hbar_curve,
                          hbar_K_curve, hbar_N_many, legendre_many)
from .lsi import (CertificateError, bakry_emery, decay_rate_proxy, hessian_lower_bound,
                  holley_stroock, otto_reznikoff, rate_stability, two_scale_combine)
from .metrics import (TorusFunction, discrete_form, equivalence_ratio, h_minus1_norm,
                      micro_macro_error, theta_functional)
from .model import ModelSpec, model_from_dict, model_to_dict
from .sampler import ChainConfig, ConstraintSpec, batch_means, run_chains

STUDIES = ("free_energy", "phi", "cramer", "hessian", "simulate", "converge", "certify")


class ConfigError(ValueError):
    pass


class StudyError(RuntimeError):
    """A module error raised inside a study, tagged with the rung it came from.

    ``partial`` holds the results of rungs that finished before the failure.
    """

    def __init__(self, message, partial=()):
        super().__init__(message)
        self.partial = list(partial)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    study: str
    model: dict
    ladder: tuple = ()
    ensemble: int = 64
    T: float = 0.05
    seed: int = 0
    out_dir: str = "runs"
    params: dict = field(default_factory=dict)
    model_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple((int(n), int(m)) for n, m in self.ladder))
        self.validate()

    def validate(self):
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        try:
            model = model_from_dict(self.model)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model: {exc}") from exc
        R = model.R
        for N, M in self.ladder:
            if M < 1 or N % M:
                raise ConfigError(f"rung ({N}, {M}): N must be a multiple of M")
            if N // M < 2 * R + 2:
                raise ConfigError(f"rung ({N}, {M}): block size {N // M} below 2R+2 = {2 * R + 2}")
        Ns = [n for n, _ in self.ladder]
        if any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise ConfigError("ladder must be strictly increasing in N")
        if self.ensemble < 1 or not self.T > 0:
            raise ConfigError("ensemble must be >= 1 and T > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def model_spec(self) -> ModelSpec:
        return model_from_dict(self.model)

    def hashed_fields(self) -> dict:
        return {"study": self.study, "model": self.model, "ladder": [list(r) for r in self.ladder],
                "ensemble": self.ensemble, "T": self.T, "seed": self.seed, "params": self.params}

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = self.hashed_fields()
        d["out_dir"] = self.out_dir
        if self.model_path:
            d["model_path"] = self.model_path
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", **overrides) -> "ExperimentConfig":
        d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        if "study" not in d or "model" not in d:
            raise ConfigError("config needs 'study' and 'model'")
        model = d["model"]
        path = None
        if isinstance(model, str):
            path = str(Path(base_dir) / model)
            try:
                model = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read model file {path}: {exc}") from exc
        known = {"study", "model", "ladder", "ensemble", "T", "seed", "out_dir", "params", "model_path"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(d["study"], model, tuple(map(tuple, d.get("ladder", ()))),
                       int(d.get("ensemble", 64)), float(d.get("T", 0.05)), int(d.get("seed", 0)),
                       str(d.get("out_dir", "runs")), dict(d.get("params", {})), path)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, Path(path).parent, **overrides)


# ---------------------------------------------------------------------------
# reports and persistence

@dataclass
class ExperimentReport:
    config_hash: str
    study: str
    rungs: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    criteria: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.criteria.values())

    def check(self, name: str, ok, detail: str = ""):
        self.criteria[name] = {"passed": bool(ok), "detail": detail}

    def to_dict(self, with_clock=True) -> dict:
        d = {"config_hash": self.config_hash, "study": self.study, "version": self.version,
             "rungs": self.rungs, "tables": self.tables, "criteria": self.criteria,
             "passed": self.passed}
        if with_clock:
            d["wall_clock"] = self.wall_clock
        return _plain(d)

    def to_json(self, with_clock=True) -> str:
        return json.dumps(self.to_dict(with_clock), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config_hash"], d["study"], d.get("rungs", []), d.get("tables", {}),
                   d.get("criteria", {}), d.get("wall_clock", 0.0), d.get("version", __version__))


def _plain(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        vals = [r.get(h, "") for h in header] if isinstance(r, dict) else list(r)
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def save_report(report: ExperimentReport, out_dir) -> Path:
    """Write report.json and append one line to history.jsonl."""
    out = Path(out_dir)
    path = out / f"report-{report.config_hash}.json"
    atomic_write(path, report.to_json())
    hist = out / "history.jsonl"
    line = json.dumps({"config_hash": report.config_hash, "study": report.study,
                       "passed": report.passed, "wall_clock": report.wall_clock}, sort_keys=True)
    prev = hist.read_text() if hist.exists() else ""
    atomic_write(hist, prev + line + "\n")
    return path


# columns of each figure's long-format CSV
PLOT_TABLES = {
    "hydro_error.csv": ("hydro_error", ("t", "N", "error", "se")),
    "cramer_gap.csv": ("cramer_gap", ("m", "N", "gap", "N_gap")),
    "hessian_offdiag.csv": ("hessian_offdiag", ("K", "value", "se")),
    "theta.csv": ("theta", ("t", "N", "M", "theta", "se")),
}


def emit_plot_data(report: ExperimentReport | None, out_dir) -> dict:
    """One tidy CSV per figure; tables missing from the report give header-only files."""
    if report is None:
        raise ValueError("no report to emit plot data from")
    written = {}
    for name, (table, cols) in PLOT_TABLES.items():
        rows = report.tables.get(table, [])
        path = Path(out_dir) / name
        atomic_write(path, csv_text(cols, rows))
        written[name] = path
    return written


def emit_tables(report: ExperimentReport, out_dir) -> dict:
    """Every report table as its own CSV, columns from the first row."""
    written = {}
    for name, rows in sorted(report.tables.items()):
        if not rows:
            continue
        path = Path(out_dir) / f"{name}.csv"
        atomic_write(path, csv_text(list(rows[0].keys()), rows))
        written[name] = path
    return written


# ---------------------------------------------------------------------------
# helpers shared by several studies

def is_free_gaussian(model: ModelSpec) -> bool:
    return model.potential.kind == "zero" and all(c == 0.0 for c in model.kernel.h)


def is_gaussian(model: ModelSpec) -> bool:
    return model.potential.kind == "zero"


def ratio_within(values, factor=2.0, floor=1e-9) -> tuple:
    """(ok, max/min) for a positive series; series below ``floor`` count as exact."""
    v = np.abs(np.asarray(values, dtype=float))
    if np.max(v) <= floor:
        return True, 1.0
    if np.min(v) <= 0:
        return False, math.inf
    r = float(np.max(v) / np.min(v))
    return r <= factor, r


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


def _ns(cfg, key, default):
    if key in cfg.params:
        return [int(n) for n in cfg.params[key]]
    if cfg.ladder:
        return [n for n, _ in cfg.ladder]
    return list(default)


# ---------------------------------------------------------------------------
# free energy, phi, Cramer gap

def free_energy_study(cfg: ExperimentConfig) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    sigmas = [float(s) for s in cfg.params.get("sigmas", [0.0, 1.0, 2.0])]
    Ns = _ns(cfg, "Ns", [8, 16, 32, 64])
    limit = {s: A_limit(model, s) for s in sigmas}
    rows = []
    for N in Ns:
        for s in sigmas:
            a = a_N_chain(model, s, N=N) / N
            rows.append({"sigma": s, "N": N, "A_N": a, "A_limit": limit[s],
                         "N_gap": N * abs(a - limit[s])})
    rep.tables["free_energy"] = rows
    curve = free_energy_curve(model, np.array(sigmas))
    rep.tables["free_energy_curve"] = [{"sigma": s, "A": a, "dA": d, "d2A": c}
                                       for s, a, d, c in curve.rows()]
    for s in sigmas:
        ok, r = ratio_within([row["N_gap"] for row in rows if row["sigma"] == s])
        rep.check(f"rate_sigma_{s:g}", ok, f"max/min of N|A_N - A| = {r:.3f}")
    if is_free_gaussian(model):
        exact = {s: 0.5 * s * s + 0.5 * LOG_2PI for s in sigmas}
        err = max(max(abs(r["A_N"] - exact[r["sigma"]]), abs(r["A_limit"] - exact[r["sigma"]]))
                  for r in rows)
        rep.check("gaussian_closed_form", err <= 1e-8, f"max |A - closed form| = {err:.2e}")
    return rep


def _limit_curve(model, span=3.0):
    return free_energy_curve(model, np.round(np.arange(-span, span + 1e-9, 0.05), 10))


def phi_study(cfg: ExperimentConfig) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    ms = [float(m) for m in cfg.params.get("ms", np.linspace(-1.5, 1.5, 13))]
    curve = _limit_curve(model)
    leg = legendre_many(curve, ms)
    rep.tables["phi"] = [{"m": r.m, "phi": r.value, "sigma_star": r.sigma_star, "residual": r.residual}
                         for r in leg]
    worst = max(abs(r.residual) for r in leg)
    rep.check("legendre_residual", worst < 1e-10, f"max |A'(sigma*) - m| = {worst:.2e}")
    if is_free_gaussian(model):
        err = max(abs(r.value - (0.5 * r.m**2 - 0.5 * LOG_2PI)) for r in leg)
        rep.check("gaussian_closed_form", err <= 1e-8, f"max |phi - closed form| = {err:.2e}")
    Ks = [int(k) for k in cfg.params.get("Ks", [])]
    if Ks:
        ok, rows = convexity_check(model, Ks, lam=float(cfg.params.get("lam", 0.05)),
                                   seed=cfg.seed, directions=int(cfg.params.get("directions", 20)))
        rep.tables["convexity"] = rows
        rep.check("strict_convexity", ok, f"{len(rows)} curves/directions checked")
    return rep


def convexity_check(model: ModelSpec, Ks, lam=0.05, seed=0, directions=20, lo=0.1, hi=10.0):
    """Second differences of Hbar_K on [-2, 2] within [lo, hi], and of the
    auxiliary Y-Hamiltonian along random directions at least ``lam``."""
    grid = np.round(np.arange(-2.2, 2.2 + 1e-9, 0.1), 10)
    rows = []
    ok = True
    curves = {}
    for K in Ks:
        c = hbar_K_curve(model, K, grid)
        curves[K] = c
        inside = (grid[1:-1] >= -2 - 1e-9) & (grid[1:-1] <= 2 + 1e-9)
        d2 = c.second_differences()[inside]
        good = bool(np.min(d2) >= lo and np.max(d2) <= hi)
        ok &= good
        rows.append({"kind": "curve", "K": K, "min": float(np.min(d2)), "max": float(np.max(d2)),
                     "passed": good})
    rng = np.random.default_rng(seed)
    for K in Ks:
        M = 4
        scheme = BlockScheme.equal(M * K, M)
        for j in range(directions):
            y = rng.uniform(-1.0, 1.0, M)
            d = rng.standard_normal(M)
            d /= math.sqrt(scheme.inner(d, d))
            h = 0.05
            f = lambda t: _aux_value(scheme, curves[K], y + t * d)
            q = (f(h) - 2 * f(0.0) + f(-h)) / h**2
            good = q >= lam
            ok &= good
            rows.append({"kind": "direction", "K": K, "min": q, "max": q, "passed": good})
    return ok, rows


def _aux_value(scheme, curve, y):
    return sum(float(curve.value(v)) for v in y) / scheme.M


def cramer_study(cfg: ExperimentConfig) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    ms = [float(m) for m in cfg.params.get("ms", [-1.0, 0.0, 0.5, 1.0])]
    Ns = _ns(cfg, "Ns", [8, 16, 32])
    curve = _limit_curve(model)
    phi = {r.m: r.value for r in legendre_many(curve, ms)}
    rows = []
    for N in Ns:
        res = hbar_N_many(model, ms, N)
        for m, hb in zip(ms, res.hbar):
            gap = float(hb - phi[m])
            rows.append({"m": m, "N": N, "hbar": float(hb), "phi": phi[m], "gap": gap,
                         "N_gap": N * gap, "scaled": N * abs(gap) / (m * m + 1)})
    rep.tables["cramer_gap"] = rows
    for m in ms:
        ok, r = ratio_within([row["scaled"] for row in rows if row["m"] == m])
        rep.check(f"rate_m_{m:g}", ok, f"max/min of N|gap|/(m^2+1) = {r:.3f}")
    if is_free_gaussian(model):
        err = max(abs(r["gap"] - LOG_2PI / (2 * r["N"])) for r in rows)
        rep.check("gaussian_gap", err <= 1e-6, f"max |gap - log(2 pi)/(2N)| = {err:.2e}")
        err = max(abs(r["hbar"] - (0.5 * r["m"] ** 2 - (r["N"] - 1) / (2 * r["N"]) * LOG_2PI))
                  for r in rows)
        rep.check("gaussian_hbar", err <= 1e-6, f"max |hbar - closed form| = {err:.2e}")
    return rep


# ---------------------------------------------------------------------------
# Hessian off-diagonal decay

def hessian_offdiag(model: ModelSpec, K: int, y=(0.3, -0.1), count=3000, n_chains=256,
                    seed=0, step=0.15):
    scheme = BlockScheme.equal(2 * K, 2)
    m = model.with_size(2 * K)
    chain = ChainConfig(step=step, burn_in=2000, thin=2, kind="MALA", seed=seed)
    run = hessian_samples(m, scheme, list(y), chain, count, n_chains, stream=K)
    return hessian_entry_from_samples(m, scheme, run.records, 0, 1), run.acceptance


def hessian_study(cfg: ExperimentConfig) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    Ks = [int(k) for k in cfg.params.get("Ks", [8, 16, 32])]
    count = int(cfg.params.get("count", 3000))
    chains = int(cfg.params.get("chains", 256))
    rows = []
    for K in Ks:
        try:
            est, acc = hessian_offdiag(model, K, cfg.params.get("y", (0.3, -0.1)), count, chains, cfg.seed)
        except Exception as exc:
            raise StudyError(f"hessian study, K={K}: {exc}") from exc
        rows.append({"K": K, "value": est.value, "se": est.se, "acceptance": acc,
                     "resolution": abs(est.value) / est.se if est.se > 0 else math.inf})
    rep.tables["hessian_offdiag"] = rows
    rep.rungs = rows
    slope = float(np.polyfit(np.log(Ks), np.log([abs(r["value"]) for r in rows]), 1)[0])
    resolved = all(r["resolution"] >= 3 for r in rows)
    rep.check("offdiag_slope", -1.5 <= slope <= -0.5, f"log-log slope {slope:.3f}")
    rep.check("offdiag_resolved", resolved,
              "resolutions " + ", ".join(f"{r['resolution']:.1f}" for r in rows))
    return rep


# ---------------------------------------------------------------------------
# single runs: conservation and stationarity

def stationarity_run(model: ModelSpec, m: float, dt: float, steps: int, seed=0):
    """Long single trajectory from a canonical sample; returns time-averaged
    x_1 and x_1^2 reports and the worst per-step mean drift."""
    start = run_chains(model, ConstraintSpec.ce(m), ChainConfig(0.2, 2000, 1, "MALA", seed), 1, 1,
                       stream=7).final_state[0]
    out, _, drift = run_trajectory(model, start, dt, steps, seed=seed, stream=3,
                                   record=lambda z: z[0])
    return batch_means(out, 50), batch_means(out**2, 50), drift


def simulate_study(cfg: ExperimentConfig) -> ExperimentReport:
    from .free_energy import ce_site_moment

    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    if cfg.ladder:
        N, M = cfg.ladder[0]
        m, a = float(cfg.params.get("m", 0.2)), float(cfg.params.get("amplitude", 0.5))
        scheme = BlockScheme.equal(N, M)
        sde, times = _sde_for(N, cfg.T, cfg.seed)
        ens = simulate_ensemble(model.with_size(N), InitialLaw(CosineProfile(m, a)), sde,
                                cfg.ensemble, scheme, times)
        rep.tables["block_means"] = [dict(zip(["traj", "t"] + [f"y{l}" for l in range(M)], r))
                                     for r in ens.block_rows()]
        rep.rungs.append({"N": N, "M": M, "max_mean_drift": ens.max_mean_drift})
        rep.check("conservation", ens.max_mean_drift <= 1e-12,
                  f"worst mean drift {ens.max_mean_drift:.2e}")
    if cfg.params.get("stationarity", True):
        m = float(cfg.params.get("stationary_m", 0.5))
        steps = int(cfg.params.get("steps", 1_000_000))
        dt = float(cfg.params.get("dt", 5e-5))
        small = model.with_size(4)
        r1, r2, drift = stationarity_run(small, m, dt, steps, cfg.seed)
        e1, e2 = ce_site_moment(small, m, 4, 0, 1), ce_site_moment(small, m, 4, 0, 2)
        rep.tables["stationarity"] = [
            {"observable": "x1", "time_average": r1.estimate, "se": r1.se, "exact": e1},
            {"observable": "x1^2", "time_average": r2.estimate, "se": r2.se, "exact": e2}]
        rep.check("stationary_moments", abs(r1.estimate - e1) <= 3 * r1.se and abs(r2.estimate - e2) <= 3 * r2.se,
                  f"x1 {r1.estimate:.4f}+-{r1.se:.4f} vs {e1:.4f}; x1^2 {r2.estimate:.4f}+-{r2.se:.4f} vs {e2:.4f}")
        rep.check("step_drift", drift <= 1e-12, f"worst per-step mean drift {drift:.2e}")
    return rep


# ---------------------------------------------------------------------------
# hydrodynamic ladder

@dataclass(frozen=True)
class CosineProfile:
    m: float
    a: float
    k: int = 1

    def __call__(self, theta):
        return self.m + self.a * np.cos(2 * math.pi * self.k * np.asarray(theta))


def _sde_for(N, T, seed, checkpoints=10, stability_factor=0.5):
    """Step size below the stability cap that lands exactly on T/checkpoints."""
    cap = stability_factor / (8 * N * N)
    steps = checkpoints * math.ceil(T / cap / checkpoints)
    dt = T / steps
    sde = SdeConfig(dt, T, seed, "euler_maruyama", stability_factor)
    return sde, np.arange(checkpoints + 1) * (steps // checkpoints) * dt


@dataclass(frozen=True)
class HydroJob:
    """Immutable descriptor of one ladder rung."""
    model: dict
    N: int
    M: int
    T: float
    ensemble: int
    seed: int
    profile: CosineProfile
    flux: object
    curves: object
    macro: object
    heat_c: float | None
    burn_in: int = 3000


def macro_reference(job: HydroJob, t: float) -> TorusFunction:
    if job.heat_c is not None:
        return heat_solution(job.profile.m, job.profile.a, t, 1024, job.heat_c)
    return job.macro.at(t)


def hydro_rung(job: HydroJob) -> dict:
    model = model_from_dict(job.model).with_size(job.N)
    scheme = BlockScheme.equal(job.N, job.M)
    sde, times = _sde_for(job.N, job.T, job.seed)
    law = InitialLaw(job.profile, "local_equilibrium", burn_in=job.burn_in)
    ens = simulate_ensemble(model, law, sde, job.ensemble, scheme, times)
    times = ens.times
    eta0 = law.block_means(scheme)
    ode = dict(rtol=1e-10, atol=1e-12)
    aux = integrate_meso(scheme, job.curves, eta0, job.T, MesoOdeConfig("aux", **ode), t_eval=times)
    phi = integrate_meso(scheme, job.curves, eta0, job.T, MesoOdeConfig("phi", **ode), t_eval=times,
                         flux=job.flux)
    rows = []
    for k, t in enumerate(times):
        xs = ens.states[k]
        zeta = macro_reference(job, float(t))
        eta_aux = TorusFunction(aux.eta[k], "step")
        eta_phi = TorusFunction(phi.eta[k], "step")
        mm = micro_macro_error(xs, zeta)
        ms_vals = [h_minus1_norm(TorusFunction(x, "step") - eta_aux) for x in xs]
        ms = _report(ms_vals)
        th = theta_functional(xs, aux.eta[k], scheme, float(t), float(aux.times[k]))
        rows.append({"t": float(t), "N": job.N, "M": job.M,
                     "micro_meso": ms.estimate, "meso_macro": h_minus1_norm(eta_phi - zeta),
                     "meso_macro_aux": h_minus1_norm(eta_aux - zeta), "micro_macro": mm.estimate,
                     "theta": th.estimate, "se_micro_meso": ms.se, "se_micro_macro": mm.se,
                     "se_theta": th.se})
    return {"N": job.N, "M": job.M, "rows": rows, "max_mean_drift": ens.max_mean_drift,
            "meso_mass_drift": max(aux.max_mass_drift, phi.max_mass_drift)}


def _report(vals):
    from .metrics import ensemble_report
    return ensemble_report(vals)


def _run_jobs(fn, jobs, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(jobs) <= 1:
        out = []
        for job in jobs:
            try:
                out.append(fn(job))
            except Exception as exc:
                raise StudyError(f"rung N={job.N}, M={job.M}: {exc}", out) from exc
        return out
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, job) for job in jobs]
        out = []
        for job, f in zip(jobs, futures):
            try:
                out.append(f.result())
            except Exception as exc:
                done = [g.result() for g in futures if g is not f and g.done() and not g.exception()]
                raise StudyError(f"rung N={job.N}, M={job.M}: {exc}", done) from exc
        return out


def hydro_inputs(model: ModelSpec, profile: CosineProfile, T: float, block_size: int,
                 pde_points=512, pde_dt=1e-5):
    """Flux table, coarse-grained curves, macroscopic reference and heat speed."""
    lo = profile.m - abs(profile.a) - 1.0
    hi = profile.m + abs(profile.a) + 1.0
    grid = np.round(np.arange(math.floor(lo * 40) / 40, hi + 1e-9, 0.025), 10)
    if is_gaussian(model):
        c = 1.0 + 2.0 * sum(model.kernel.h)
        flux = FluxTable.linear(c)
        curves = gaussian_hbar_curve(grid, block_size) if c == 1.0 else hbar_K_curve(model, block_size, grid)
        return flux, curves, None, c
    curve = _limit_curve(model)
    flux = FluxTable.from_curve(curve)
    curves = hbar_K_curve(model, block_size, grid)
    macro = solve_macro_pde(flux, profile, T, MacroPdeConfig(points=pde_points, dt=pde_dt),
                            t_out=np.linspace(0.0, T, 11))
    return flux, curves, macro, None


def converge_study(cfg: ExperimentConfig, workers=None) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    if not cfg.ladder:
        raise ConfigError("converge study needs a ladder")
    profile = CosineProfile(float(cfg.params.get("m", 0.2)), float(cfg.params.get("amplitude", 0.5)))
    Ks = {n // m for n, m in cfg.ladder}
    if len(Ks) != 1:
        raise ConfigError("converge study expects a fixed block size N/M along the ladder")
    K = Ks.pop()
    flux, curves, macro, heat_c = hydro_inputs(model, profile, cfg.T, K)
    jobs = [HydroJob(cfg.model, N, M, cfg.T, cfg.ensemble, cfg.seed + i, profile, flux, curves,
                     macro, heat_c, int(cfg.params.get("burn_in", 3000)))
            for i, (N, M) in enumerate(cfg.ladder)]
    results = _run_jobs(hydro_rung, jobs, workers)
    evaluate_hydro(rep, results, cfg.T, profile, level=cfg.params.get("level"))
    return rep


def evaluate_hydro(rep: ExperimentReport, results, T, profile, level=None):
    hydro, theta, summary = [], [], []
    for r in results:
        rows = r["rows"]
        rep.tables.setdefault("errors", []).extend(rows)
        for row in rows:
            hydro.append({"t": row["t"], "N": r["N"], "error": row["micro_macro"],
                          "se": row["se_micro_macro"]})
            theta.append({"t": row["t"], "N": r["N"], "M": r["M"], "theta": row["theta"],
                          "se": row["se_theta"]})
        sup = lambda key: max(row[key] for row in rows)
        arg = max(range(len(rows)), key=lambda k: rows[k]["theta"])
        summary.append({"N": r["N"], "M": r["M"], "sup_micro_macro": sup("micro_macro"),
                        "sup_micro_meso": sup("micro_meso"), "sup_meso_macro": sup("meso_macro"),
                        "sup_meso_macro_aux": sup("meso_macro_aux"), "theta0": rows[0]["theta"],
                        "theta0_se": rows[0]["se_theta"], "sup_theta": rows[arg]["theta"],
                        "sup_theta_se": rows[arg]["se_theta"], "max_mean_drift": r["max_mean_drift"],
                        "meso_mass_drift": r["meso_mass_drift"]})
    rep.tables["hydro_error"] = hydro
    rep.tables["theta"] = theta
    rep.rungs = summary
    col = lambda key: [s[key] for s in summary]
    rep.check("micro_macro_decreasing", strictly_decreasing(col("sup_micro_macro")),
              "sup_t micro_macro " + ", ".join(f"{v:.3e}" for v in col("sup_micro_macro")))
    rep.check("meso_macro_decreasing", strictly_decreasing(col("sup_meso_macro")),
              "sup_t meso_macro " + ", ".join(f"{v:.3e}" for v in col("sup_meso_macro")))
    if level is not None:
        last = summary[-1]["sup_micro_macro"]
        rep.check("micro_macro_level", last <= float(level), f"{last:.3e} <= {float(level):.3e}")
    th0 = col("theta0")
    rep.check("theta0_vanishing", strictly_decreasing(th0) and th0[-1] <= th0[0] / 2,
              "Theta(0) " + ", ".join(f"{v:.3e}" for v in th0))
    ok, detail = theta_slack_check(summary, T)
    rep.check("theta_bound_shape", ok, detail)
    worst = -math.inf
    for row in rep.tables["errors"]:
        worst = max(worst, row["micro_macro"] - 2 * (row["micro_meso"] + row["meso_macro_aux"]))
    rep.check("triangle", worst <= 0.0, f"max micro_macro - 2(micro_meso + meso_macro) = {worst:.3e}")
    drift = max(col("max_mean_drift"))
    rep.check("conservation", drift <= 1e-12, f"worst mean drift {drift:.2e}")


def theta_slack_check(summary, T) -> tuple:
    """sup Theta - Theta(0) <= T M/N + c (1/M + 1/M^2) + 3 SE, c >= 0 fitted on the first rung."""
    first = summary[0]
    shape = lambda s: 1.0 / s["M"] + 1.0 / s["M"] ** 2
    excess0 = first["sup_theta"] - first["theta0"] - T * first["M"] / first["N"]
    c = max(0.0, excess0 / shape(first))
    parts = []
    ok = True
    for s in summary:
        allowed = T * s["M"] / s["N"] + c * shape(s) + 3 * math.hypot(s["sup_theta_se"], s["theta0_se"])
        excess = s["sup_theta"] - s["theta0"]
        ok &= excess <= allowed
        parts.append(f"N={s['N']}: {excess:.3e} <= {allowed:.3e}")
    return ok, f"c={c:.3e}; " + "; ".join(parts)


# ---------------------------------------------------------------------------
# discrete/continuum H^-1 equivalence

def h1_equivalence(Ns=(32, 64, 128), profile=None):
    """Equivalence ratios and N-scaled differences for a smooth lifted profile."""
    profile = profile or (lambda th: np.cos(2 * math.pi * th) + 0.5 * np.sin(6 * math.pi * th))
    rows = []
    for N in Ns:
        x = profile((np.arange(N) + 0.5) / N)
        x = x - x.mean()
        d, c = equivalence_ratio(x)
        rows.append({"N": N, "discrete": d, "continuum": c, "ratio": d / c, "N_diff": N * abs(d - c)})
    return rows


# ---------------------------------------------------------------------------
# certificates and decay proxy

def decay_rates(model: ModelSpec, Ns=(32, 64), T=0.05, n_traj=256, seed=0, amplitude=2.0):
    """Slowest-mode decay rate of the ensemble mean, started from the lifted
    cosine profile; rates are in diffusive time."""
    rates = {}
    rows = []
    for N in Ns:
        sde, times = _sde_for(N, T, seed, checkpoints=10)
        scheme = BlockScheme.equal(N, N // 4)
        ens = simulate_ensemble(model.with_size(N), InitialLaw(CosineProfile(0.0, amplitude), "lift"),
                                sde, n_traj, scheme, times)
        cosv = np.cos(2 * math.pi * (np.arange(N) + 0.5) / N)
        amp = (ens.states.mean(axis=1) @ cosv) * 2 / N
        fit = decay_rate_proxy(times, amp, N)
        rates[N] = fit.rate
        rows += [{"N": N, "t": float(t), "amplitude": float(v)} for t, v in zip(times, amp)]
    return rates, rows


def certify_study(cfg: ExperimentConfig) -> ExperimentReport:
    model = cfg.model_spec
    rep = ExperimentReport(cfg.config_hash(), cfg.study)
    certs = []
    b = model.potential.bounds()
    site = holley_stroock(1.0, 2.0 * b[0])
    certs.append(site.report())
    hb = hessian_lower_bound(model)
    try:
        certs.append(bakry_emery(hb).report())
    except CertificateError as exc:
        certs.append({"provenance": "bakry_emery", "failed": str(exc), "inputs": {"hessian_lower_bound": hb}})
    n = min(model.N, 8)
    kappa = np.abs(model.with_size(n).coupling_matrix)
    np.fill_diagonal(kappa, 0.0)
    try:
        certs.append(otto_reznikoff(np.full(n, site.rho), kappa).report())
    except CertificateError as exc:
        certs.append({"provenance": "otto_reznikoff", "failed": str(exc)})
    p = cfg.params
    if {"rho_micro", "rho_macro", "kappa"} <= set(p):
        certs.append(two_scale_combine(float(p["rho_micro"]), float(p["rho_macro"]), float(p["kappa"])).report())
    rep.tables["certificates"] = [{"provenance": c["provenance"], "rho": c.get("rho", ""),
                                   "formula": c.get("formula", c.get("failed", ""))} for c in certs]
    rep.rungs = certs
    Ns = [int(v) for v in p.get("decay_Ns", [])]
    if Ns:
        rates, rows = decay_rates(model, Ns, cfg.T, cfg.ensemble, cfg.seed)
        rep.tables["decay"] = rows
        target = 4 * math.pi**2 * (1.0 + 2.0 * sum(model.kernel.h)) if is_gaussian(model) else None
        if target is not None:
            err = max(abs(r / target - 1) for r in rates.values())
            rep.check("decay_rate", err <= 0.1, f"rates {rates}, target {target:.3f}")
        rep.check("rate_stability", rate_stability(rates, 0.1), f"rates {rates}")
    return rep


# ---------------------------------------------------------------------------
# orchestration

RUNNERS = {
    "free_energy": free_energy_study,
    "phi": phi_study,
    "cramer": cramer_study,
    "hessian": hessian_study,
    "simulate": simulate_study,
    "converge": converge_study,
    "certify": certify_study,
}


def run(cfg: ExperimentConfig, workers=None, write=True) -> ExperimentReport:
    """Execute the configured study and persist its report and CSVs."""
    start = time.perf_counter()
    runner = RUNNERS[cfg.study]
    try:
        rep = runner(cfg, workers) if cfg.study == "converge" else runner(cfg)
    except StudyError as exc:
        if write:
            rep = ExperimentReport(cfg.config_hash(), cfg.study, rungs=exc.partial)
            rep.check("study_error", False, str(exc))
            rep.wall_clock = time.perf_counter() - start
            save_report(rep, Path(cfg.out_dir))
        raise
    rep.wall_clock = time.perf_counter() - start
    if write:
        out = Path(cfg.out_dir)
        save_report(rep, out)
        emit_tables(rep, out)
        emit_plot_data(rep, out)
        atomic_write(out / f"config-{rep.config_hash}.json",
                     json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return rep


def default_model_dict(kind="double_well", N=32) -> dict:
    from .model import double_well_model, gaussian_model

    m = gaussian_model(N) if kind == "gaussian" else double_well_model(N)
    return model_to_dict(m)
