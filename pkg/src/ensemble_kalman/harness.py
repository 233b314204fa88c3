"""Experiment driver and command line interface."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import filters_discrete as fd
from . import inversion as inv
from . import models
from . import transport_maps as tm
from .gaussian_core import (
    DEFAULT_SCALING,
    Ensemble,
    Gaussian,
    NonFinite,
    NumericalFailure,
    SeededStream,
    empirical_moments,
    gaussian_noise,
    sample,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

FILTERS = ("threedvar", "noisy_threedvar", "enkf", "eakf_state", "eakf_obs", "etkf")
INVERTERS = ("eki", "eki_transport", "eki_iterinf", "eki_bayes", "eks")
MODELS = ("l96", "l96ms", "linear")


class ConfigError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    """Experiment knobs. Unknown top-level keys are rejected.

    filter runs:    model, filter, sigma2, gamma2, tau, T, burn_in, J, init_offset
    inversion runs: problem, method, J, n_iter, dt, prior
    """

    experiment: str = "filter"
    model: Dict[str, Any] = field(default_factory=lambda: {"name": "l96"})
    filter: Dict[str, Any] = field(default_factory=lambda: {"name": "threedvar"})
    sigma2: float = 0.1
    gamma2: float = 0.1
    tau: float = 1e-3
    T: float = 20.0
    burn_in: float = 5.0
    J: int = 100
    init_offset: float = 1.0
    spinup: float = 10.0
    problem: Dict[str, Any] = field(default_factory=dict)
    method: Dict[str, Any] = field(default_factory=dict)
    n_iter: int = 15
    dt: float = 1.0
    prior: Dict[str, Any] = field(default_factory=dict)
    scaling: str = DEFAULT_SCALING
    seed: int = 0
    out: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in ("filter", "inversion", "oracle"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for name in ("tau", "T"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.experiment == "filter":
            if self.model.get("name") not in MODELS:
                raise ConfigError(f"unknown model {self.model.get('name')!r}")
            if self.filter.get("name") not in FILTERS:
                raise ConfigError(f"unknown filter {self.filter.get('name')!r}")
            if not 0 <= self.burn_in < self.T:
                raise ConfigError("burn_in must lie in [0, T)")
            if self.filter["name"] in ("enkf", "eakf_state", "eakf_obs", "etkf") and self.J < 2:
                raise ConfigError("ensemble filters need J >= 2")
        if self.experiment == "inversion":
            if self.method.get("name") not in INVERTERS:
                raise ConfigError(f"unknown inversion method {self.method.get('name')!r}")
            if self.problem.get("name") not in ("linear", "l96_time_average", "scalar"):
                raise ConfigError(f"unknown problem {self.problem.get('name')!r}")
            if self.J < 2 or self.n_iter < 1:
                raise ConfigError("need J >= 2 and n_iter >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> Dict[str, Any]:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)


# ---------------------------------------------------------------- records

@dataclass
class MetricsRecord:
    times: np.ndarray
    truth: np.ndarray      # (n, d)
    estimate: np.ndarray   # (n, d)
    spread: np.ndarray     # (n, d), per-component ensemble std (zero for single-state filters)

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.truth) == len(self.estimate) == len(self.spread) == n):
            raise AlignmentError("record arrays must have equal length")

    @property
    def sq_error(self) -> np.ndarray:
        return np.sum((self.truth - self.estimate) ** 2, axis=1)


def compute_mse(truth: np.ndarray, estimate: np.ndarray, t: float, T: float, tau: float) -> float:
    """e = sum_{n=1..N} |v_dag - v|^2 at indices n + t/tau, divided by N d; t + N tau = T.

    Paths are indexed from time 0, so row k holds time k tau.
    """
    truth, estimate = np.atleast_2d(truth), np.atleast_2d(estimate)
    if truth.shape != estimate.shape:
        raise AlignmentError("truth and estimate shapes differ")
    k0 = int(round(t / tau))
    N = int(round((T - t) / tau))
    if abs(k0 * tau - t) > 1e-9 * max(1.0, t) or abs(t + N * tau - T) > 1e-9 * max(1.0, T) or N < 1:
        raise AlignmentError("t and T must be multiples of tau with t < T")
    if k0 + N >= truth.shape[0]:
        raise AlignmentError("paths are shorter than the requested horizon")
    D = truth[k0 + 1:k0 + N + 1] - estimate[k0 + 1:k0 + N + 1]
    return float(np.sum(D * D) / (N * truth.shape[1]))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir, cfg: RunConfig, extra: Optional[Dict[str, Any]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = {"config": cfg.to_dict(), "seed": cfg.seed, "git_revision": git_revision()}
    if extra:
        man.update(extra)
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(man, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


def records_csv(record: Optional[MetricsRecord], d: Optional[int] = None) -> str:
    """CSV text with header time,truth_i...,est_i...,spread_i...; values at 17 significant digits."""
    if record is not None:
        d = record.truth.shape[1]
    d = d or 0
    header = ["time"] + [f"truth_{i}" for i in range(d)] + [f"est_{i}" for i in range(d)] \
        + [f"spread_{i}" for i in range(d)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    if record is not None:
        for k in range(len(record.times)):
            row = [record.times[k], *record.truth[k], *record.estimate[k], *record.spread[k]]
            w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def emit_records(record: Optional[MetricsRecord], out_dir, name: str = "records.csv",
                 d: Optional[int] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(records_csv(record, d))
    return path


def read_records(path) -> MetricsRecord:
    with open(path, encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    d = (len(header) - 1) // 3
    return MetricsRecord(body[:, 0], body[:, 1:1 + d], body[:, 1 + d:1 + 2 * d], body[:, 1 + 2 * d:])


def write_table(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating, int, np.integer)) else x for x in r])
    return path


# ---------------------------------------------------------------- twin experiments

@dataclass
class TwinSetup:
    dyn: models.DynamicsModel
    obs: models.ObservationModel
    K: np.ndarray
    truth_dyn: models.DynamicsModel
    d: int


def _matrix(x, name: str) -> np.ndarray:
    try:
        return np.atleast_2d(np.asarray(x, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a numeric matrix") from exc


def build_twin(cfg: RunConfig) -> TwinSetup:
    name = cfg.model["name"]
    params = dict(cfg.model.get("params", {}))
    if name in ("l96", "l96ms"):
        try:
            p = models.L96Params(**{k: v for k, v in params.items() if k in ("L", "F", "h_v")})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        H, K = models.l96_observation()
        if p.L != 9:
            raise ConfigError("the Lorenz '96 observation operator assumes L = 9")
        dyn = models.l96_dynamics(p, cfg.tau, cfg.sigma2)
        truth_dyn = dyn
        if name == "l96ms":
            # data from the multiscale model, filtering with the closed singlescale model
            mp = models.L96MultiscaleParams(**{k: v for k, v in params.items()
                                               if k in ("L", "J", "eps", "h_v", "h_w", "F")})
            flow = models.l96ms_flow(mp, cfg.tau)
            d_full = mp.L * (1 + mp.J)
            truth_dyn = models.DynamicsModel(flow, np.zeros((d_full, d_full)))
        obs = models.linear_observation(H, cfg.gamma2 * np.eye(H.shape[0]))
        return TwinSetup(dyn, obs, K, truth_dyn, p.L)
    if name == "linear":
        M = _matrix(params.get("M"), "M")
        H = _matrix(params.get("H"), "H")
        d = M.shape[0]
        dyn = models.linear_dynamics(M, cfg.sigma2 * np.eye(d))
        obs = models.linear_observation(H, cfg.gamma2 * np.eye(H.shape[0]))
        K = _matrix(params["K"], "K") if "K" in params else np.linalg.pinv(H)
        return TwinSetup(dyn, obs, K, dyn, d)
    raise ConfigError(f"unknown model {name!r}")


def synthesize_twin(cfg: RunConfig, setup: TwinSetup, n_steps: int, stream: SeededStream):
    """Truth path (n_steps+1, d) and data (n_steps+1, d_y) with y_0 unused.

    The truth starts from a spun-up state: a N(0, I) draw advanced for cfg.spinup time units.
    """
    s = stream.child("truth")
    d_full = setup.truth_dyn.noise_cov.shape[0]
    v = s.child("initial").normal(d_full, 1)[:, 0]
    n_spin = int(round(cfg.spinup / cfg.tau))
    if cfg.model["name"] in ("l96", "l96ms") and n_spin > 0:
        v = setup.truth_dyn.flow(v) if n_spin == 1 else _advance(setup.truth_dyn, v, n_spin)
    truth = np.empty((n_steps + 1, setup.d))
    data = np.zeros((n_steps + 1, setup.obs.dim))
    truth[0] = v[:setup.d]
    sq_sig = np.sqrt(cfg.sigma2)
    sq_gam = np.sqrt(cfg.gamma2)
    xi_all = s.child("signal").normal(d_full, n_steps) if cfg.sigma2 > 0 else None
    eta_all = s.child("obs").normal(setup.obs.dim, n_steps)
    for n in range(n_steps):
        v = setup.truth_dyn.flow(v)
        if xi_all is not None:
            v = v + sq_sig * xi_all[:, n]
        truth[n + 1] = v[:setup.d]
        data[n + 1] = setup.obs.h(v[:setup.d]) + sq_gam * eta_all[:, n]
    return truth, data


def _advance(dyn: models.DynamicsModel, v: np.ndarray, n: int) -> np.ndarray:
    for _ in range(n):
        v = dyn.flow(v)
    return v


def _twin_paths(cfg: RunConfig, setup: TwinSetup, n_steps: int, root: SeededStream, twin=None):
    if twin is None:
        return synthesize_twin(cfg, setup, n_steps, root)
    truth, data = twin
    if len(truth) < n_steps + 1:
        raise AlignmentError(f"precomputed truth has {len(truth) - 1} steps, need {n_steps}")
    return truth[:n_steps + 1], data[:n_steps + 1]


def run_twin_experiment(cfg: RunConfig, twin=None) -> MetricsRecord:
    """Synthesize truth and data, then run the configured filter from an offset initial state.

    twin may carry a precomputed (truth, data) pair from synthesize_twin with the same seed,
    model and noise levels but possibly a longer horizon; it is truncated to cfg.T. Draws are
    keyed per time step, so the truncation equals a fresh synthesis.
    """
    if cfg.filter["name"] == "enkf":
        return run_twin_batch(cfg, [cfg.seed], None if twin is None else [twin])[0]
    setup = build_twin(cfg)
    n_steps = int(round(cfg.T / cfg.tau))
    root = SeededStream(cfg.seed)
    truth, data = _twin_paths(cfg, setup, n_steps, root, twin)
    fs = root.child("filter")
    name = cfg.filter["name"]
    d = setup.d
    v0 = truth[0] + cfg.init_offset * fs.child("offset").normal(d, 1)[:, 0]
    est = np.empty_like(truth)
    spread = np.zeros_like(truth)
    est[0] = v0
    K = _matrix(cfg.filter["K"], "K") if "K" in cfg.filter else setup.K
    if name in ("threedvar", "noisy_threedvar"):
        v = v0
        if name == "noisy_threedvar":
            # drawn in bulk; column n depends only on n, so shorter runs are prefixes of longer ones
            xi = gaussian_noise(setup.dyn.noise_cov, n_steps, fs.child("forecast"))
            eta = gaussian_noise(setup.obs.noise_cov, n_steps, fs.child("data"))
        for n in range(n_steps):
            if name == "threedvar":
                v = fd.threedvar_step(setup.dyn, setup.obs, K, v, data[n + 1])
            else:
                v = fd.noisy_threedvar_step(setup.dyn, setup.obs, K, v, data[n + 1],
                                            xi=xi[:, n], eta=eta[:, n])
            est[n + 1] = v
    else:
        J = cfg.J
        e = Ensemble(v0[:, None] + cfg.filter.get("init_spread", 1.0) * fs.child("ensemble").normal(d, J))
        spread[0] = e.members.std(axis=1, ddof=1)
        for n in range(n_steps):
            s = fs.child("step", n)
            e = fd.ensemble_step(name, setup.dyn, setup.obs, e, data[n + 1], s, cfg.scaling)
            est[n + 1] = e.mean()
            spread[n + 1] = e.members.std(axis=1, ddof=1)
    times = cfg.tau * np.arange(n_steps + 1)
    return _checked(MetricsRecord(times, truth, est, spread))


def _checked(rec: MetricsRecord) -> MetricsRecord:
    if not (np.isfinite(rec.truth).all() and np.isfinite(rec.estimate).all()):
        raise NonFinite("twin experiment produced non-finite states")
    return rec


def run_twin_batch(cfg: RunConfig, seeds: Sequence[int], twins=None) -> List[MetricsRecord]:
    """Stochastic EnKF twin experiments for several seeds advanced in lockstep.

    Entry k equals run_twin_experiment(cfg.replace(seed=seeds[k])) exactly; batching only
    amortizes per-step overhead across seeds.
    """
    if cfg.filter["name"] != "enkf":
        return [run_twin_experiment(cfg.replace(seed=int(sd)), None if twins is None else twins[k])
                for k, sd in enumerate(seeds)]
    setup = build_twin(cfg)
    n_steps = int(round(cfg.T / cfg.tau))
    d, J, B = setup.d, cfg.J, len(seeds)
    roots = [SeededStream(int(sd)) for sd in seeds]
    paths = [_twin_paths(cfg, setup, n_steps, r, None if twins is None else twins[k])
             for k, r in enumerate(roots)]
    fss = [r.child("filter") for r in roots]
    spread0 = cfg.filter.get("init_spread", 1.0)
    X = np.empty((d, B, J))
    for b, (fs, (truth, _)) in enumerate(zip(fss, paths)):
        v0 = truth[0] + cfg.init_offset * fs.child("offset").normal(d, 1)[:, 0]
        X[:, b] = v0[:, None] + spread0 * fs.child("ensemble").normal(d, J)
    data = np.stack([p[1] for p in paths])
    est = np.empty((B, n_steps + 1, d))
    spread = np.empty((B, n_steps + 1, d))
    est[:, 0], spread[:, 0] = X.mean(axis=2).T, X.std(axis=2, ddof=1).T
    variant = cfg.filter.get("innovation", "stochastic")
    for n in range(n_steps):
        X = fd.enkf_step_batch(setup.dyn, setup.obs, X, data[:, n + 1],
                               [fs.child("step", n) for fs in fss], cfg.scaling, variant)
        est[:, n + 1], spread[:, n + 1] = X.mean(axis=2).T, X.std(axis=2, ddof=1).T
    times = cfg.tau * np.arange(n_steps + 1)
    return [_checked(MetricsRecord(times, paths[b][0], est[b], spread[b])) for b in range(B)]


# ---------------------------------------------------------------- inversion runs

@dataclass
class InversionResult:
    means: np.ndarray       # (n_iter+1, d_u)
    stds: np.ndarray        # (n_iter+1, d_u)
    final_members: np.ndarray
    problem: inv.InverseProblem
    reference: Optional[Gaussian] = None


def build_problem(cfg: RunConfig, stream: SeededStream) -> inv.InverseProblem:
    pc = cfg.problem
    pr = cfg.prior
    name = pc["name"]
    try:
        if name == "linear":
            L = _matrix(pc["L"], "L")
            prior = Gaussian(np.asarray(pr.get("mean", np.zeros(L.shape[1])), float),
                             _matrix(pr.get("cov", np.eye(L.shape[1])), "prior cov"))
            return inv.InverseProblem.linear(L, pc["w"], _matrix(pc["Gamma"], "Gamma"), prior)
        if name == "scalar":
            # polynomial forward map sum_k c_k u^k with coefficients highest power first
            coeffs = np.asarray(pc["poly"], float)
            prior = Gaussian(np.atleast_1d(float(pr.get("mean", 0.0))),
                             np.atleast_2d(float(pr.get("cov", 1.0))))
            return inv.InverseProblem(lambda U: np.polyval(coeffs, U), [pc["w"]],
                                      _matrix(pc["Gamma"], "Gamma"), prior)
        if name == "l96_time_average":
            return l96_time_average_problem(
                stream, u_true=float(pc.get("u_true", 10.0)), T_data=float(pc.get("T_data", 10.0)),
                T=float(pc.get("T", 20.0)), tau=float(pc.get("tau", 0.01)),
                gamma_reps=int(pc.get("gamma_reps", 30)),
                prior=Gaussian(np.atleast_1d(float(pr.get("mean", 0.0))),
                               np.atleast_2d(float(pr.get("cov", 10.0)))))
    except KeyError as exc:
        raise ConfigError(f"problem is missing key {exc}") from exc
    raise ConfigError(f"unknown problem {name!r}")


def l96_time_average_problem(stream: SeededStream, u_true: float = 10.0, T_data: float = 10.0,
                             T: float = 20.0, tau: float = 0.01, gamma_reps: int = 30,
                             prior: Optional[Gaussian] = None,
                             p: Optional[models.L96Params] = None) -> inv.InverseProblem:
    """Recover the forcing from time-averaged statistics.

    Data come from a length-T_data run at u_true plus N(0, Gamma) noise; Gamma is the sample
    covariance of gamma_reps independent length-T_data evaluations. The forward map used by
    the inversion averages over length T and restarts from a fresh random state on each call.
    """
    p = models.L96Params() if p is None else p
    prior = Gaussian(np.zeros(1), 10.0 * np.eye(1)) if prior is None else prior
    G_data = inv.L96TimeAverageMap(p, T_data, tau, stream.child("data-map"))
    Gamma = inv.estimate_noise_cov(G_data, u_true, gamma_reps)
    w = G_data(np.array([[u_true]]))[:, 0] + gaussian_noise(Gamma, 1, stream.child("data-noise"))[:, 0]
    G = inv.L96TimeAverageMap(p, T, tau, stream.child("forward-map"))
    return inv.InverseProblem(G, w, Gamma, prior)


def inversion_step_fn(cfg: RunConfig, p: inv.InverseProblem):
    m = cfg.method
    name = m["name"]
    sc = cfg.scaling
    if name == "eki":
        return lambda e, s: inv.eki_step(p, e, s, sc)
    if name == "eki_transport":
        dt = float(m.get("dt", cfg.dt))
        return lambda e, s: inv.eki_transport_step(p, e, dt, s, sc)
    if name == "eki_iterinf":
        params = inv.IterInfParams(alpha=float(m.get("alpha", 0.5)), sigma_p=float(m.get("sigma_p", 0.0)),
                                   gamma_p=float(m.get("gamma_p", 1.0)),
                                   r0=None if "r0" not in m else np.asarray(m["r0"], float))
        return lambda e, s: inv.eki_iterinf_step(p, params, e, s, sc)
    if name == "eki_bayes":
        alpha = float(m.get("alpha", 0.1))
        det = bool(m.get("deterministic_inflation", False))
        return lambda e, s: inv.eki_bayes_iterinf_step(p, alpha, e, s, det, sc)
    if name == "eks":
        dt = float(m.get("dt", cfg.dt))
        return lambda e, s: inv.eks_step(p, e, dt, s, sc)
    raise ConfigError(f"unknown inversion method {name!r}")


def run_inversion(cfg: RunConfig) -> InversionResult:
    root = SeededStream(cfg.seed)
    p = build_problem(cfg, root.child("problem"))
    step = inversion_step_fn(cfg, p)
    e0 = sample(p.prior, cfg.J, root.child("initial-ensemble"))
    hist = inv.run_iterations(step, e0, cfg.n_iter, root.child("iterations"),
                              collapse_tol=cfg.method.get("collapse_tol"))
    means = hist.means()
    stds = np.array([e.members.std(axis=1, ddof=1) for e in hist.ensembles])
    ref = inv.linear_posterior(p.L, p) if p.L is not None else None
    return InversionResult(means, stds, hist.ensembles[-1].members, p, ref)


def emit_inversion(res: InversionResult, out_dir) -> List[Path]:
    d = res.means.shape[1]
    rows = [[k, *res.means[k], *res.stds[k]] for k in range(len(res.means))]
    p1 = write_table(Path(out_dir) / "iterations.csv",
                     ["iteration"] + [f"mean_{i}" for i in range(d)] + [f"std_{i}" for i in range(d)], rows)
    p2 = write_table(Path(out_dir) / "final_members.csv", [f"u_{i}" for i in range(d)],
                     [list(col) for col in res.final_members.T])
    return [p1, p2]


# ---------------------------------------------------------------- oracle dumps

def run_oracle(cfg: RunConfig, out_dir) -> Path:
    p = build_problem(cfg, SeededStream(cfg.seed).child("problem"))
    g = cfg.problem.get("grid", {})
    lo, hi, n = float(g.get("lo", -5.0)), float(g.get("hi", 5.0)), int(g.get("n", 2001))
    t = float(cfg.problem.get("t", 1.0))
    axes = [np.linspace(lo, hi, n)] * p.d_u
    dens = inv.grid_posterior(p, t, axes)
    header = [f"u_{i}" for i in range(p.d_u)] + ["weight"]
    rows = [[*dens.points[:, k], dens.weights[k]] for k in range(dens.points.shape[1])]
    path = write_table(Path(out_dir) / "grid_posterior.csv", header, rows)
    mom = dens.moments()
    write_table(Path(out_dir) / "grid_moments.csv", ["quantity", "value"],
                [["mean_" + str(i), mom.mean[i]] for i in range(p.d_u)]
                + [[f"cov_{i}_{k}", mom.cov[i, k]] for i in range(p.d_u) for k in range(p.d_u)])
    return path


# ---------------------------------------------------------------- CLI

def _set_threads(n: Optional[int]):
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))
    except ImportError:
        pass


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ensemble-kalman", description="Ensemble Kalman experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("filter", "run a twin experiment"), ("invert", "run an inversion"),
                        ("transport-check", "verify the affine transport families"),
                        ("oracle", "dump a grid posterior")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=name != "transport-check")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--threads", type=int, default=None)
    return ap


def _load(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _set_threads(args.threads)
    try:
        if args.command == "transport-check":
            seed = 0 if args.seed is None else args.seed
            results = tm.transport_check_suite(seed)
            width = max(len(r.name) for r in results)
            for r in results:
                print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
            if args.out:
                write_table(Path(args.out) / "transport_check.csv", ["check", "passed", "detail"],
                            [[r.name, str(r.passed), r.detail] for r in results])
            return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL
        cfg = _load(args)
        out = Path(args.out or cfg.out or "out")
        if args.command == "filter":
            if cfg.experiment != "filter":
                raise ConfigError("the filter command needs experiment: filter")
            rec = run_twin_experiment(cfg)
            emit_records(rec, out)
            mse = compute_mse(rec.truth, rec.estimate, cfg.burn_in, cfg.T, cfg.tau)
            write_manifest(out, cfg, {"mse": mse})
            print(f"mse {mse:.6g}")
        elif args.command == "invert":
            if cfg.experiment != "inversion":
                raise ConfigError("the invert command needs experiment: inversion")
            res = run_inversion(cfg)
            emit_inversion(res, out)
            extra = {"final_mean": res.means[-1], "final_std": res.stds[-1]}
            if res.reference is not None:
                extra["posterior_mean"] = res.reference.mean
            write_manifest(out, cfg, extra)
            print("final mean " + " ".join(f"{x:.6g}" for x in res.means[-1]))
        elif args.command == "oracle":
            run_oracle(cfg, out)
            write_manifest(out, cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
