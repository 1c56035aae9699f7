"""
Monte-Carlo evaluation of precoders and the sweep driver behind the CLI.

Every scheme of a sweep point is evaluated on the same channel and pilot
noise draws. Expectations in the effective SINR are plain sample means;
standard errors come from a 10-batch jackknife over those same trials.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import precoders
from .channel import EstimateSet, EstimationModel, compute_estimation_model, mmse_estimate, sample_channels
from .detequiv import (RzfDetEq, SinrModelTPE, assemble_sinr_model, build_sinr_model, rzf_sinr_detequiv,
                       tpe_sinr_detequiv)
from .optimizer import MaxMinProblem, bisection_solve, rzf_mimic_weights
from .scenario import (CovarianceSet, Geometry, ScenarioConfig, build_covariances, build_geometry,
                       drop_rng)

log = logging.getLogger(__name__)

# RNG streams per (seed, drop)
GEOMETRY_STREAM, TRIAL_STREAM, KAPPA_STREAM = 0, 1, 2

CSV_COLUMNS = ("sweep_name", "sweep_value", "scheme", "J", "drop_count", "trial_count",
               "avg_rate_emp", "avg_rate_det", "stderr", "min_rate_emp", "xi_star")

PROFILES = {
    "smoke": {"n_drops": 1, "n_trials": 20},
    "paper": {"n_drops": 10, "n_trials": 500},
}

# a factory maps the estimates of one batch to one precoder per cell
PrecoderFactory = Callable[[EstimateSet], Sequence[precoders.PrecodingMatrix]]


class StageError(RuntimeError):
    """Failure tagged with the pipeline stage and sweep point."""

    def __init__(self, stage: str, point: str, cause: Exception):
        super().__init__(f"[{stage}] {point}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.point = point


@dataclass
class SinrReport:
    gamma_emp: np.ndarray            # (L, K)
    gamma_det: np.ndarray | None     # (L, K)
    n_trials: int
    n_drops: int = 1
    stderr: float = float("nan")     # of avg_rate_emp
    gamma_stderr: np.ndarray | None = None
    power: np.ndarray | None = None  # (L,) mean (1/K) tr(G G^H)
    power_range: np.ndarray | None = None  # (L, 2) min and max over trials

    @property
    def rate_emp(self) -> np.ndarray:
        return np.log2(1.0 + self.gamma_emp)

    @property
    def rate_det(self) -> np.ndarray | None:
        return None if self.gamma_det is None else np.log2(1.0 + self.gamma_det)

    @property
    def avg_rate_emp(self) -> float:
        return average_rate(self.gamma_emp)

    @property
    def avg_rate_det(self) -> float:
        return float("nan") if self.gamma_det is None else average_rate(self.gamma_det)


def average_rate(gamma: np.ndarray) -> float:
    """Mean of ``log2(1 + gamma)`` over all users of all cells."""
    return float(np.mean(np.log2(1.0 + np.asarray(gamma))))


def _sinr_from_moments(mean_sig: np.ndarray, second: np.ndarray, sigma2: float) -> np.ndarray:
    sig = np.abs(mean_sig) ** 2
    return sig / np.maximum(sigma2 + second - sig, 1e-300)


@dataclass
class _Moments:
    """Per-batch sums of h^H g and of the total received power."""

    sig: list = field(default_factory=list)      # per batch (L, K) complex sums
    tot: list = field(default_factory=list)      # per batch (L, K) real sums
    count: list = field(default_factory=list)
    pw_sum: np.ndarray | None = None
    pw_min: np.ndarray | None = None
    pw_max: np.ndarray | None = None

    def add(self, h: np.ndarray, G: np.ndarray):
        # h: (N, L, L, K, M), G: (N, L, M, K)
        N, L = h.shape[:2]
        hg = h.conj() @ G[:, :, None]                       # (N, l, j, m, k)
        idx = np.arange(L)
        own = hg[:, idx, idx]                               # (N, j, m, k)
        K = own.shape[-1]
        self.sig.append(own[..., np.arange(K), np.arange(K)].sum(0))
        self.tot.append((np.abs(hg) ** 2).sum(axis=(1, 4)).sum(0))
        self.count.append(N)
        pw = np.sum(np.abs(G) ** 2, axis=(-2, -1)) / K      # (N, L)
        s, lo, hi = pw.sum(0), pw.min(0), pw.max(0)
        if self.pw_sum is None:
            self.pw_sum, self.pw_min, self.pw_max = s, lo, hi
        else:
            self.pw_sum += s
            self.pw_min = np.minimum(self.pw_min, lo)
            self.pw_max = np.maximum(self.pw_max, hi)

    def report(self, sigma2: float, n_groups: int = 10) -> SinrReport:
        sig, tot, cnt = np.array(self.sig), np.array(self.tot), np.array(self.count, dtype=float)
        n = cnt.sum()
        gamma = _sinr_from_moments(sig.sum(0) / n, tot.sum(0) / n, sigma2)
        # jackknife over (up to) n_groups contiguous groups of batches
        groups = np.array_split(np.arange(len(cnt)), min(n_groups, len(cnt)))
        se_rate, se_gamma = float("nan"), None
        if len(groups) >= 2:
            loo_rate, loo_gamma = [], []
            for g in groups:
                keep = np.ones(len(cnt), bool)
                keep[g] = False
                nk = cnt[keep].sum()
                gk = _sinr_from_moments(sig[keep].sum(0) / nk, tot[keep].sum(0) / nk, sigma2)
                loo_gamma.append(gk)
                loo_rate.append(average_rate(gk))
            q = len(groups)
            loo_rate, loo_gamma = np.array(loo_rate), np.array(loo_gamma)
            se_rate = float(np.sqrt((q - 1) / q * np.sum((loo_rate - loo_rate.mean()) ** 2)))
            se_gamma = np.sqrt((q - 1) / q * np.sum((loo_gamma - loo_gamma.mean(0)) ** 2, axis=0))
        return SinrReport(gamma_emp=gamma, gamma_det=None, n_trials=int(n), stderr=se_rate,
                          gamma_stderr=se_gamma, power=self.pw_sum / n,
                          power_range=np.stack([self.pw_min, self.pw_max], axis=-1))


def effective_sinr(h: np.ndarray, G: np.ndarray, sigma2: float) -> SinrReport:
    """Effective SINR from given samples.

    ``h`` has shape (N, L, L, K, M) and ``G`` shape (N, L, M, K).
    """
    m = _Moments()
    for part in np.array_split(np.arange(h.shape[0]), min(10, h.shape[0])):
        m.add(h[part], G[part])
    return m.report(sigma2)


def _batch_size(shape: tuple, n_trials: int, budget: float = 4e6) -> int:
    L, _, K = shape[:3]
    M = shape[3]
    per_trial = L * L * K * max(M, K)
    b = int(max(2, min(50, budget // per_trial)))
    # at least 10 batches so the jackknife has its groups
    return max(1, min(b, max(1, n_trials // 10)))


def empirical_sinr(covs: CovarianceSet, est_model: EstimationModel,
                   factories: Mapping[str, PrecoderFactory], n_trials: int, rng: np.random.Generator,
                   sigma2: float, batch: int | None = None) -> dict[str, SinrReport]:
    """Monte-Carlo effective SINR of every scheme on common channel draws."""
    if n_trials < 2:
        raise ValueError("need at least two trials")
    L, _, K = covs.shape
    batch = batch or _batch_size((L, L, K, covs.M), n_trials)
    moments = {name: _Moments() for name in factories}
    done = 0
    while done < n_trials:
        n = min(batch, n_trials - done)
        draw = sample_channels(covs, rng, n_trials=n, trial_index=done)
        est = mmse_estimate(draw, est_model, rng=rng)
        for name, factory in factories.items():
            G = np.stack([np.asarray(pm.G) for pm in factory(est)], axis=1)
            moments[name].add(draw.h, G)
        done += n
    return {name: m.report(sigma2) for name, m in moments.items()}


# ---------------------------------------------------------------------------
# precoder factories

def rzf_factory(phi: Sequence[float], P: Sequence[float]) -> PrecoderFactory:
    def make(est: EstimateSet):
        H = est.H_hat
        return [precoders.rzf_precoder(H[..., l, :, :], phi[l], P[l]) for l in range(H.shape[-3])]
    return make


def mrt_factory(P: Sequence[float]) -> PrecoderFactory:
    def make(est: EstimateSet):
        H = est.H_hat
        return [precoders.mrt_precoder(H[..., l, :, :], P[l]) for l in range(H.shape[-3])]
    return make


def tpe_factory(w: Sequence) -> PrecoderFactory:
    def make(est: EstimateSet):
        H = est.H_hat
        return [precoders.tpe_precoder(H[..., l, :, :], w[l]) for l in range(H.shape[-3])]
    return make


# ---------------------------------------------------------------------------
# one drop

@dataclass
class DropContext:
    config: ScenarioConfig
    drop: int
    geometry: Geometry
    covs: CovarianceSet
    est_model: EstimationModel


def build_drop(config: ScenarioConfig, drop: int) -> DropContext:
    geometry = build_geometry(config, drop_rng(config.seed, drop, GEOMETRY_STREAM))
    covs = build_covariances(config, geometry)
    est_model = compute_estimation_model(covs, config.rho_tr)
    return DropContext(config, drop, geometry, covs, est_model)


def taylor_coefficients(ctx: DropContext, model: SinrModelTPE, rzf: RzfDetEq, J: int) -> list:
    """Truncated Neumann coefficients per cell, scaled to the asymptotic power.

    ``kappa`` is set from one estimate realisation drawn on a dedicated RNG
    stream, so the coefficients are fixed for all Monte-Carlo trials.
    """
    cfg = ctx.config
    rng = drop_rng(cfg.seed, ctx.drop, KAPPA_STREAM)
    est = mmse_estimate(sample_channels(ctx.covs, rng), ctx.est_model, rng=rng)
    sub = assemble_sinr_model(model.xbar, model.zbar, model.ctrace, model.sigma2, J)
    ws = []
    for l in range(cfg.L):
        kappa = precoders.kappa_from_estimate(est.H_hat[l], cfg.phi[l])
        w = precoders.taylor_initial_coeffs(J, np.sqrt(rzf.beta_bar[l]), cfg.phi[l], kappa)
        ws.append(precoders.normalize_tpe_power(w, sub.C_bar[l], cfg.P[l]).w)
    return ws


def mrt_coefficients(model: SinrModelTPE, P: Sequence[float]) -> list:
    """J = 1 coefficients meeting the asymptotic power constraint."""
    return [np.array([np.sqrt(P[l] / model.C_bar[l][0, 0])]) for l in range(model.L)]


@dataclass
class DropResult:
    reports: dict                   # scheme label -> SinrReport
    xi_star: dict                   # TPE label -> xi*
    rank_gap: dict = field(default_factory=dict)


def evaluate_drop(ctx: DropContext, tpe_orders: Sequence[int] = (5,), coeffs: str = "optimized",
                  schemes: Sequence[str] = ("RZF", "TPE", "MRT"), epsilon: float = 1e-3) -> DropResult:
    """Deterministic and empirical SINRs of all schemes for one user drop."""
    cfg = ctx.config
    sigma2 = cfg.sigma2
    rzf = rzf_sinr_detequiv(ctx.covs, ctx.est_model, cfg.phi, sigma2, cfg.P)
    det, factories, xi, gaps = {}, {}, {}, {}
    if "RZF" in schemes:
        det["RZF"] = rzf.gamma_bar
        factories["RZF"] = rzf_factory(cfg.phi, cfg.P)
    orders = sorted(set(int(j) for j in tpe_orders)) if "TPE" in schemes else []
    need = max(orders + ([1] if "MRT" in schemes else []), default=0)
    if need:
        full = build_sinr_model(ctx.covs, ctx.est_model, need, sigma2)
        nu = rzf_mimic_weights(rzf)
        for J in orders:
            label = f"TPE{J}"
            model = assemble_sinr_model(full.xbar, full.zbar, full.ctrace, sigma2, J)
            if coeffs == "optimized":
                res = bisection_solve(MaxMinProblem.from_model(model, nu, cfg.P), epsilon=epsilon)
                w = res.w
                xi[label] = res.xi_star
                gaps[label] = res.rank_gap
            elif coeffs == "taylor":
                w = taylor_coefficients(ctx, full, rzf, J)
                xi[label] = float("nan")
            else:
                raise ValueError(f"unknown coefficient mode {coeffs!r}")
            det[label] = tpe_sinr_detequiv(model, w)
            factories[label] = tpe_factory(w)
        if "MRT" in schemes:
            model1 = assemble_sinr_model(full.xbar, full.zbar, full.ctrace, sigma2, 1)
            det["MRT"] = tpe_sinr_detequiv(model1, mrt_coefficients(model1, cfg.P))
            factories["MRT"] = mrt_factory(cfg.P)
    rng = drop_rng(cfg.seed, ctx.drop, TRIAL_STREAM)
    reports = empirical_sinr(ctx.covs, ctx.est_model, factories, cfg.n_trials, rng, sigma2)
    for name, rep in reports.items():
        rep.gamma_det = det[name]
    return DropResult(reports, xi, gaps)


# ---------------------------------------------------------------------------
# sweeps

SWEEPS = {
    "M": lambda cfg, v: cfg.replace(M=int(v)),
    "phi": lambda cfg, v: cfg.replace(phi=(float(v),)),
    "rho_tr_db": lambda cfg, v: cfg.replace(rho_tr=float(10 ** (v / 10))),
    "J": lambda cfg, v: cfg.replace(J=(int(v),)),
}


@dataclass
class SweepSpec:
    name: str
    values: Sequence[float]
    tpe_orders: Sequence[int] | None = None     # default: config.J[0] (or the swept J)
    coeffs: str = "optimized"
    schemes: Sequence[str] = ("RZF", "TPE", "MRT")
    # optional rule replacing phi at every sweep point, e.g. phi = M sigma^2 / K
    phi_rule: Callable[[ScenarioConfig], float] | None = None
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.name not in SWEEPS:
            raise ValueError(f"unknown sweep {self.name!r}; choose from {sorted(SWEEPS)}")
        if len(self.values) == 0:
            raise ValueError("sweep needs at least one value")


@dataclass
class SweepRow:
    sweep_name: str
    sweep_value: float
    scheme: str
    J: int | None
    drop_count: int
    trial_count: int
    avg_rate_emp: float
    avg_rate_det: float
    stderr: float
    min_rate_emp: float
    xi_star: float | None
    per_drop_emp: list = field(default_factory=list, repr=False)
    per_drop_det: list = field(default_factory=list, repr=False)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    out = io.StringIO(newline="")
    out.write(",".join(CSV_COLUMNS) + "\n")
    for r in rows:
        vals = [r.sweep_name, _fmt(r.sweep_value), r.scheme, _fmt(r.J), _fmt(r.drop_count),
                _fmt(r.trial_count), _fmt(r.avg_rate_emp), _fmt(r.avg_rate_det), _fmt(r.stderr),
                _fmt(r.min_rate_emp), _fmt(r.xi_star)]
        out.write(",".join(vals) + "\n")
    return out.getvalue()


def write_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    Path(path).write_bytes(rows_to_csv(rows).encode("utf-8"))


def _point_config(config: ScenarioConfig, sweep: SweepSpec, value) -> ScenarioConfig:
    cfg = SWEEPS[sweep.name](config, value)
    if sweep.phi_rule is not None:
        cfg = cfg.replace(phi=(float(sweep.phi_rule(cfg)),))
    return cfg


def run_experiment(config: ScenarioConfig, sweep: SweepSpec,
                   progress: Callable[[str], None] | None = None) -> list[SweepRow]:
    """Evaluate every sweep point over ``config.n_drops`` drops."""
    rows = []
    for value in sweep.values:
        point = f"{sweep.name}={value:g}"
        try:
            cfg = _point_config(config, sweep, value)
        except Exception as exc:
            raise StageError("config", point, exc) from exc
        orders = [int(value)] if sweep.name == "J" else list(sweep.tpe_orders or [cfg.J[0]])
        per_drop = []
        for d in range(cfg.n_drops):
            try:
                ctx = build_drop(cfg, d)
            except Exception as exc:
                raise StageError("scenario", f"{point} drop={d}", exc) from exc
            try:
                per_drop.append(evaluate_drop(ctx, orders, sweep.coeffs, sweep.schemes, sweep.epsilon))
            except Exception as exc:
                raise StageError("evaluate", f"{point} drop={d}", exc) from exc
            if progress:
                progress(f"{point} drop {d + 1}/{cfg.n_drops}")
        labels = [s for s in ("RZF",) if s in sweep.schemes]
        labels += [f"TPE{J}" for J in sorted(set(orders))] if "TPE" in sweep.schemes else []
        labels += ["MRT"] if "MRT" in sweep.schemes else []
        for label in labels:
            reps = [dr.reports[label] for dr in per_drop]
            emp = np.array([r.avg_rate_emp for r in reps])
            detv = np.array([r.avg_rate_det for r in reps])
            se = np.array([r.stderr for r in reps])
            mins = np.array([r.rate_emp.min() for r in reps])
            is_tpe = label.startswith("TPE")
            xi = float(np.mean([dr.xi_star[label] for dr in per_drop])) if is_tpe else None
            rows.append(SweepRow(
                sweep_name=sweep.name, sweep_value=float(value),
                scheme="TPE" if is_tpe else label, J=int(label[3:]) if is_tpe else None,
                drop_count=len(reps), trial_count=reps[0].n_trials,
                avg_rate_emp=float(emp.mean()), avg_rate_det=float(detv.mean()),
                stderr=float(np.sqrt(np.sum(se ** 2)) / len(se)), min_rate_emp=float(mins.mean()),
                xi_star=xi if sweep.coeffs == "optimized" else None,
                per_drop_emp=emp.tolist(), per_drop_det=detv.tolist()))
    return rows


def scaled_phi(cfg: ScenarioConfig) -> float:
    """phi = M sigma^2 / K."""
    return cfg.M * cfg.sigma2 / cfg.K


def theory_vs_empirical(config: ScenarioConfig, M_list: Sequence[int], J: int = 5,
                        progress: Callable[[str], None] | None = None) -> list[SweepRow]:
    """Empirical and deterministic rates of RZF and Taylor-coefficient TPE versus M."""
    sweep = SweepSpec("M", list(M_list), tpe_orders=[J], coeffs="taylor", schemes=("RZF", "TPE"),
                      phi_rule=scaled_phi)
    return run_experiment(config, sweep, progress)


def apply_profile(config: ScenarioConfig, profile: str | None) -> ScenarioConfig:
    if profile is None:
        return config
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    return config.replace(**PROFILES[profile])
