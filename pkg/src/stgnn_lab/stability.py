"""Stochastic-perturbation sweeps and the first-order stability bounds.

A sweep evaluates, for each edge-sampling probability ``p``, how far the
output over RES-perturbed graphs drifts from the output over the nominal
graph, and compares the mean drift against ``C (1 - p) ||X||_F^2``.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flocking import Dataset, FlockConfig, RolloutDivergence, closed_loop_rollout, fixed_schedule, res_schedule
from .graph_core import RESConfig, ShiftOperator, alpha_constant, derive_seed, sample_gso_sequence
from .spacetime import TSOMode, TimeShiftOperator
from .stgf import apply_generalized_stgf, apply_stgf, estimate_c_l, spectral_range
from .stgnn import LIPSCHITZ, STGNN, model_features
from .training import validation_cost

log = logging.getLogger(__name__)

DEFAULT_PROBABILITIES = (1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7)
DEFAULT_SIZES = (20, 50, 80)


@dataclass(frozen=True)
class SweepConfig:
    probabilities: tuple[float, ...] = DEFAULT_PROBABILITIES
    sizes: tuple[int, ...] = DEFAULT_SIZES
    trials: int = 20
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if any(not 0.0 <= p <= 1.0 for p in self.probabilities):
            raise ValueError("every probability must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")


@dataclass
class TrialRecord:
    n: int
    p: float
    trial: int
    measured: float
    relative_cost: float
    bound: float
    seed: int


@dataclass
class SummaryRow:
    n: int
    p: float
    mean: float
    std: float
    bound: float
    slope: float
    intercept: float
    r2: float
    count: int = 0
    cost_mean: float = float("nan")
    cost_std: float = float("nan")


@dataclass
class StabilityReport:
    trials: list[TrialRecord] = field(default_factory=list)
    summary: list[SummaryRow] = field(default_factory=list)
    c_l: float = float("nan")
    constant: float = float("nan")
    quadratic: float = 0.0
    excluded: int = 0
    meta: dict = field(default_factory=dict)

    def edge_drop(self) -> np.ndarray:
        return np.array([1.0 - r.p for r in self.summary])

    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.summary])

    def stds(self) -> np.ndarray:
        return np.array([r.std for r in self.summary])

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "p", "trial", "measured", "relative_cost", "bound", "seed"])
        for r in self.trials:
            w.writerow([r.n, repr(r.p), r.trial, repr(r.measured), repr(r.relative_cost), repr(r.bound), r.seed])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "p", "mean", "std", "bound", "slope", "intercept", "r2"])
        for r in self.summary:
            w.writerow([r.n, repr(r.p), repr(r.mean), repr(r.std), repr(r.bound), repr(r.slope),
                        repr(r.intercept), repr(r.r2)])
        return buf.getvalue()

    def cost_summary_csv(self) -> str:
        """Closed-loop relative cost per ``(N, p)``: trial count, mean and std."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "p", "count", "cost_mean", "cost_std"])
        for r in self.summary:
            w.writerow([r.n, repr(r.p), r.count, repr(r.cost_mean), repr(r.cost_std)])
        return buf.getvalue()


# -- bounds ---------------------------------------------------------------------------

def filter_constant(alpha: float, n: int, c_l: float) -> float:
    return alpha * n * c_l**2


def gnn_constant(alpha: float, n: int, layers: int, c_l: float, c_sigma: float, features: int) -> float:
    return alpha * n * layers**2 * c_l**2 * c_sigma ** (2 * layers) * features ** (2 * layers)


def theoretical_bound_filter(alpha: float, n: int, c_l: float, p: float, x_norm_sq: float) -> float:
    """First-order filter bound ``alpha N C_L^2 (1 - p) ||X||_F^2``."""
    _check_bound_args(p, alpha, n, c_l, x_norm_sq)
    return filter_constant(alpha, n, c_l) * (1.0 - p) * x_norm_sq


def theoretical_bound_gnn(alpha: float, n: int, l: int, c_l: float, c_sigma: float, f: int, p: float,
                          x_norm_sq: float) -> float:
    """First-order network bound with ``C = alpha N L^2 C_L^2 C_sigma^{2L} F^{2L}``."""
    _check_bound_args(p, alpha, n, l, c_l, c_sigma, f, x_norm_sq)
    return gnn_constant(alpha, n, l, c_l, c_sigma, f) * (1.0 - p) * x_norm_sq


def _check_bound_args(p, *nonneg):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if any(v < 0 for v in nonneg):
        raise ValueError("bound inputs must be nonnegative")


# -- fitting ----------------------------------------------------------------------------

class DegenerateFit(ValueError):
    pass


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares ``y = slope x + intercept`` and its ``R^2``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 2 or x.size != y.size:
        raise DegenerateFit("need at least two paired points")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise DegenerateFit("all x values are equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - slope * x - intercept) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(1.0 - ss_res / ss_tot)
    return slope, intercept, r2


def quadratic_remainder(deltas, means) -> tuple[float, float]:
    """Fit ``mean = a delta + b delta^2`` through the origin; returns ``(a, b)``."""
    d = np.asarray(deltas, dtype=float)
    design = np.stack([d, d * d], axis=1)
    (a, b), *_ = np.linalg.lstsq(design, np.asarray(means, dtype=float), rcond=None)
    return float(a), float(b)


def remainder_allowance(report: StabilityReport, p: float) -> float:
    return max(report.quadratic, 0.0) * (1.0 - p) ** 2


def _summarize(report: StabilityReport, n: int, probabilities, bound_of: Callable[[float], float]):
    by_p = {p: [r for r in report.trials if r.p == p and r.n == n] for p in probabilities}
    means = [float(np.mean([r.measured for r in by_p[p]])) if by_p[p] else float("nan") for p in probabilities]
    deltas = [1.0 - p for p in probabilities]
    ok = np.isfinite(means)
    try:
        slope, intercept, r2 = linear_fit(np.array(deltas)[ok], np.array(means)[ok])
    except DegenerateFit:
        slope = intercept = r2 = float("nan")
    if np.sum(ok) >= 2 and np.ptp(np.array(deltas)[ok]) > 0:
        _, report.quadratic = quadratic_remainder(np.array(deltas)[ok], np.array(means)[ok])
    for p, m in zip(probabilities, means):
        rows = by_p[p]
        meas = [r.measured for r in rows]
        costs = [r.relative_cost for r in rows]
        report.summary.append(SummaryRow(
            n, p, m, float(np.std(meas)) if meas else float("nan"), bound_of(p), slope, intercept, r2, len(rows),
            float(np.mean(costs)) if costs else float("nan"), float(np.std(costs)) if costs else float("nan")))


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- filter experiment ---------------------------------------------------------------------

def _filter_trial(args):
    h, s, x, tso, p, seed = args
    y = apply_stgf(x, s, tso, h)
    seq = [ps.sampled_gso for ps in sample_gso_sequence(s, RESConfig(p, seed), len(h) - 1)]
    y_tilde = apply_generalized_stgf(x, seq, tso, h)
    dev = float(np.sum((y_tilde - y) ** 2))
    ynorm = float(np.sum(y * y))
    return dev, dev / ynorm if ynorm > 0 else 0.0


def filter_deviation_experiment(h, s: ShiftOperator, x: np.ndarray, cfg: SweepConfig,
                                tso: TimeShiftOperator = TimeShiftOperator(), c_l: float | None = None,
                                lambda_range: tuple[float, float] | None = None) -> StabilityReport:
    """Mean ``||Y~ - Y||_F^2`` between a filter over RES sequences and over ``S``, per ``p``.

    ``C_L`` is estimated on ``lambda_range`` (the nominal spectrum by
    default) unless given.  The ``relative_cost`` column holds
    ``||Y~ - Y||^2 / ||Y||^2``.
    """
    taps = np.asarray(getattr(h, "coefficients", h), dtype=float)
    n = s.n
    if c_l is None:
        est = estimate_c_l(taps, lambda_range or spectral_range(s))
        c_l = est.c_l
    alpha = alpha_constant(s)
    xsq = float(np.sum(np.asarray(x) ** 2))
    report = StabilityReport(c_l=c_l, constant=filter_constant(alpha, n, c_l),
                             meta={"alpha": alpha, "x_norm_sq": xsq, "order": taps.size - 1})
    bound_of = lambda p: theoretical_bound_filter(alpha, n, c_l, p, xsq)
    jobs = []
    for pi, p in enumerate(cfg.probabilities):
        for trial in range(cfg.trials):
            jobs.append((p, trial, derive_seed(cfg.seed, pi, trial)))
    results = _pmap(_filter_trial, [(taps, s, x, tso, p, sd) for p, _, sd in jobs], cfg.jobs)
    for (p, trial, sd), (dev, rel) in zip(jobs, results):
        report.trials.append(TrialRecord(n, p, trial, dev, rel, bound_of(p), sd))
    _summarize(report, n, cfg.probabilities, bound_of)
    return report


# -- network experiments ---------------------------------------------------------------------

OPEN_LOOP_TSO = TimeShiftOperator(mode=TSOMode.ZERO_PAD_DELAY)


def model_c_l(model: STGNN, lambda_range: tuple[float, float], lambda_samples: int = 8,
              omega_samples: int = 64) -> float:
    """Largest ``C_L`` over every filter of every layer."""
    return max(estimate_c_l(f, lambda_range, omega_samples, lambda_samples, refine=False).c_l
               for f in model.filters())


def gnn_output_deviation(model: STGNN, x: np.ndarray, s: ShiftOperator, p: float, seed: int,
                         tso: TimeShiftOperator = OPEN_LOOP_TSO) -> float:
    """Open-loop ``||Phi~ - Phi||_F^2`` for one RES sequence ``S_1..S_K``."""
    k = model.config.order
    phi = model_features(x, [s] * k, tso, model)
    seq = [ps.sampled_gso for ps in sample_gso_sequence(s, RESConfig(p, seed), k)]
    phi_tilde = model_features(x, seq, tso, model)
    return float(np.sum((phi_tilde - phi) ** 2))


def _gnn_trial(args):
    model, flock, traj, s, p, seed, base_cost, closed_loop = args
    dev = gnn_output_deviation(model, traj.features(), s, p, seed)
    if not closed_loop:
        return dev, float("nan")
    try:
        ro = closed_loop_rollout(model, flock, traj.initial_state(), res_schedule(s, p, seed, model.config.order),
                                 horizon=traj.horizon)
    except RolloutDivergence:
        return dev, None
    return dev, (validation_cost(ro) - base_cost) / base_cost


def gnn_relative_cost_experiment(model: STGNN, dataset: Dataset, cfg: SweepConfig, gso_kind="laplacian",
                                 edge_weight: float | None = None, split: str = "test", closed_loop: bool = True,
                                 avg_gsos: Sequence[ShiftOperator] | None = None,
                                 c_l: float | None = None) -> StabilityReport:
    """Per ``p``: open-loop feature deviation and closed-loop relative cost under RES.

    Every test example runs on the average of its own recorded graph
    sequence.  A trial is one ``(trial index, example)`` pair: the open-loop
    deviation uses one RES sequence ``S_1..S_K``; the closed-loop rollout
    draws a fresh realization at every step.  Relative cost is
    ``(perturbed - unperturbed) / unperturbed`` velocity-variation cost.
    """
    trajs = dataset.split(split)
    if not trajs:
        raise ValueError(f"split {split!r} is empty")
    flock: FlockConfig = dataset.config
    n = flock.agent_count
    k = model.config.order
    if avg_gsos is None:
        avg_gsos = [tr.average_gso(gso_kind, edge_weight) for tr in trajs]
    base_costs = []
    for tr, s in zip(trajs, avg_gsos):
        if closed_loop:
            ro = closed_loop_rollout(model, flock, tr.initial_state(), fixed_schedule(s, k), horizon=tr.horizon)
            base_costs.append(validation_cost(ro))
        else:
            base_costs.append(float("nan"))
    if c_l is None:
        lo = min(spectral_range(s)[0] for s in avg_gsos)
        hi = max(spectral_range(s)[1] for s in avg_gsos)
        c_l = model_c_l(model, (lo, hi))
    alpha = max(alpha_constant(s) for s in avg_gsos)
    xsq = float(np.mean([np.sum(tr.features() ** 2) for tr in trajs]))
    c = model.config
    c_sigma = LIPSCHITZ[c.nonlinearity]
    report = StabilityReport(c_l=c_l, constant=gnn_constant(alpha, n, c.layers, c_l, c_sigma, c.features),
                             meta={"alpha": alpha, "x_norm_sq": xsq, "base_costs": base_costs})
    bound_of = lambda p: theoretical_bound_gnn(alpha, n, c.layers, c_l, c_sigma, c.features, p, xsq)
    jobs = []
    for pi, p in enumerate(cfg.probabilities):
        for trial in range(cfg.trials):
            for ei in range(len(trajs)):
                jobs.append((p, trial * len(trajs) + ei, ei, derive_seed(cfg.seed, pi, trial, ei)))
    args = [(model, flock, trajs[ei], avg_gsos[ei], p, sd, base_costs[ei], closed_loop) for p, _, ei, sd in jobs]
    for (p, tid, ei, sd), (dev, rel) in zip(jobs, _pmap(_gnn_trial, args, cfg.jobs)):
        if rel is None:
            report.excluded += 1
            continue
        report.trials.append(TrialRecord(n, p, tid, dev, rel, bound_of(p), sd))
    _summarize(report, n, cfg.probabilities, bound_of)
    return report


def merge_reports(reports: Sequence[StabilityReport]) -> StabilityReport:
    out = StabilityReport()
    for r in reports:
        out.trials.extend(r.trials)
        out.summary.extend(r.summary)
        out.excluded += r.excluded
    return out
