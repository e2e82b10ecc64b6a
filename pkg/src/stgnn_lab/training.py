"""Exact gradients, MSE imitation loss, ADAM and the training loop.

Training is open loop: each example's recorded expert features are fed
through the model and compared with the expert accelerations.  Model
selection is closed loop: after every epoch the policy drives the validation
flocks and the epoch with the lowest mean velocity-variation cost wins.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flocking import (Dataset, FlockConfig, Trajectory, closed_loop_rollout, fixed_schedule, live_schedule,
                       velocity_cost)
from .graph_core import GSOKind, make_rng
from .spacetime import (TSOMode, TimeShiftOperator, load_signal, save_signal, space_shift_adjoint,
                        time_shift_adjoint)
from .stgf import _taps
from .stgnn import STGNN, ForwardCache, forward, load_model, nonlinearity_grad, save_model

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} in epoch {epoch}")
        self.epoch = epoch


class GraphMode(str, enum.Enum):
    # average of the example's recorded graph sequence, held fixed over time
    FIXED = "fixed"
    # live communication graph at every step (generalized ST-GNN)
    TIME_VARYING = "time_varying"


# -- gradients -----------------------------------------------------------------------

def _hop_adjoint(g: np.ndarray, s, tso: TimeShiftOperator) -> np.ndarray:
    """Adjoint of ``z -> S z C``."""
    return time_shift_adjoint(space_shift_adjoint(g, s), 1, tso)


def filter_backward(upstream: np.ndarray, terms: Sequence[np.ndarray], seq: Sequence, tso: TimeShiftOperator,
                    h) -> tuple[np.ndarray, np.ndarray]:
    """Tap and input gradients of ``Y = sum_k h_k z_k`` with ``z_k = S_k z_{k-1} C``.

    ``terms`` are the cached ``z_0..z_K`` of the forward pass.
    """
    h = _taps(h)
    if terms is None or len(terms) != h.size:
        raise ValueError("forward cache with K + 1 diffusion terms is required")
    tap_grads = np.array([float(np.sum(upstream * z)) for z in terms])
    w = h[-1] * upstream
    for k in range(h.size - 2, -1, -1):
        w = h[k] * upstream + _hop_adjoint(w, seq[k], tso)
    return tap_grads, w


def stgf_backward(upstream, terms, s, tso: TimeShiftOperator, h):
    return filter_backward(upstream, terms, [s] * (len(_taps(h)) - 1), tso, h)


def generalized_stgf_backward(upstream, terms, seq, tso: TimeShiftOperator, h):
    if len(seq) != len(_taps(h)) - 1:
        raise ValueError("sequence length must equal the filter order")
    return filter_backward(upstream, terms, seq, tso, h)


def model_backward(model: STGNN, cache: ForwardCache, seq: Sequence, tso: TimeShiftOperator,
                   grad_output: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of every parameter block and of the input signal."""
    grads = {
        "readout.weight": np.einsum("nto,ntf->of", grad_output, cache.features),
        "readout.bias": grad_output.sum(axis=(0, 1)),
    }
    g = np.einsum("nto,of->ntf", grad_output, model.readout.weight)
    for li in range(len(model.layers) - 1, -1, -1):
        lc, taps = cache.layers[li], model.layers[li].taps
        dpre = g * nonlinearity_grad(lc.pre, model.config.nonlinearity)
        grads[f"layer{li}.taps"] = np.stack([np.einsum("ntf,ntg->fg", dpre, z) for z in lc.terms])
        w = np.einsum("ntf,fg->ntg", dpre, taps[-1])
        for k in range(taps.shape[0] - 2, -1, -1):
            w = np.einsum("ntf,fg->ntg", dpre, taps[k]) + _hop_adjoint(w, seq[k], tso)
        g = w
    return grads, g


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- optimizer -----------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected ADAM update, in place on ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


# -- costs ------------------------------------------------------------------------------

def validation_cost(trajectory) -> float:
    """Velocity variation of a rollout summed over its horizon."""
    v = trajectory.velocities if isinstance(trajectory, Trajectory) else trajectory
    return velocity_cost(v)


# -- training loop --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    graph_mode: GraphMode = GraphMode.FIXED
    gso_kind: GSOKind = GSOKind.LAPLACIAN
    edge_weight: float | None = 0.1
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "graph_mode", GraphMode(self.graph_mode))
        object.__setattr__(self, "gso_kind", GSOKind(self.gso_kind))
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


TRAIN_TSO = TimeShiftOperator(mode=TSOMode.ZERO_PAD_DELAY)


def example_sequence(traj: Trajectory, cfg: TrainConfig, order: int) -> list:
    """GSO sequence ``S_1..S_K`` an example is trained on."""
    if cfg.graph_mode is GraphMode.FIXED:
        return [traj.average_gso(cfg.gso_kind, cfg.edge_weight)] * order
    return [traj.gso_stack(cfg.gso_kind, cfg.edge_weight)] * order


def rollout_schedule(traj: Trajectory, flock: FlockConfig, cfg: TrainConfig, order: int):
    if cfg.graph_mode is GraphMode.FIXED:
        return fixed_schedule(traj.average_gso(cfg.gso_kind, cfg.edge_weight), order)
    return live_schedule(flock.comm_radius, cfg.gso_kind, order, cfg.edge_weight)


@dataclass
class LossRow:
    epoch: int
    train_mse: float
    validation_cost: float
    selected: bool = False


@dataclass
class LossReport:
    rows: list[LossRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "validation_cost", "selected_flag"])
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.validation_cost), int(r.selected)])
        return buf.getvalue()


@dataclass
class TrainState:
    """Everything needed to continue training after an interruption."""

    model: STGNN
    adam: AdamState
    epoch: int = 0
    best: STGNN | None = None
    best_cost: float = float("inf")
    report: LossReport = field(default_factory=LossReport)


def mean_rollout_cost(model: STGNN, trajectories: Sequence[Trajectory], flock: FlockConfig, cfg: TrainConfig) -> float:
    costs = []
    for traj in trajectories:
        sched = rollout_schedule(traj, flock, cfg, model.config.order)
        costs.append(validation_cost(closed_loop_rollout(model, flock, traj.initial_state(), sched,
                                                         horizon=traj.horizon)))
    return float(np.mean(costs)) if costs else float("nan")


def train(model: STGNN, dataset: Dataset, cfg: TrainConfig = TrainConfig(), state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> tuple[STGNN, LossReport]:
    """Imitation training with ADAM and closed-loop validation model selection.

    Pass ``state`` to resume; ``on_epoch`` is called after every epoch with
    the current state (e.g. to checkpoint it).
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    if state is None:
        state = TrainState(model, AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon))
    if cfg.epochs == 0:
        return state.model, state.report
    order = state.model.config.order
    seqs = [example_sequence(tr, cfg, order) for tr in dataset.train]
    inputs = [tr.features() for tr in dataset.train]
    targets = [tr.targets() for tr in dataset.train]
    params = state.model.parameters()
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        idx = np.arange(len(dataset.train))
        if cfg.shuffle:
            make_rng(cfg.seed, epoch).shuffle(idx)
        losses = []
        for i in idx:
            cache = forward(inputs[i], seqs[i], TRAIN_TSO, state.model)
            loss, grad = mse_loss(cache.output, targets[i])
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch)
            grads, _ = model_backward(state.model, cache, seqs[i], TRAIN_TSO, grad)
            adam_step(state.adam, params, grads)
            losses.append(loss)
        vcost = mean_rollout_cost(state.model, dataset.validation, dataset.config, cfg) if dataset.validation else float(np.mean(losses))
        if not np.isfinite(vcost):
            raise TrainingDivergence(epoch, "validation cost")
        row = LossRow(epoch, float(np.mean(losses)), vcost)
        if vcost < state.best_cost:
            state.best_cost = vcost
            state.best = state.model.copy()
            for r in state.report.rows:
                r.selected = False
            row.selected = True
        state.report.rows.append(row)
        state.epoch = epoch
        log.info("epoch %d train_mse %.6g validation_cost %.6g", epoch, row.train_mse, vcost)
        if on_epoch is not None:
            on_epoch(state)
    return state.best, state.report


# -- training-state persistence ----------------------------------------------------------------

def save_train_state(state: TrainState, directory: str | Path) -> None:
    d = Path(directory)
    save_model(state.model, d / "current")
    if state.best is not None:
        save_model(state.best, d / "best")
    ad = state.adam
    for name, arr in ad.first_moment.items():
        save_signal(arr.reshape(arr.shape + (1,) * (3 - arr.ndim)), d / f"adam_m.{name}.bin")
        save_signal(ad.second_moment[name].reshape(arr.shape + (1,) * (3 - arr.ndim)), d / f"adam_v.{name}.bin")
    meta = {"epoch": state.epoch, "best_cost": repr(state.best_cost), "adam_step": ad.step,
            "adam": {"learning_rate": ad.learning_rate, "beta1": ad.beta1, "beta2": ad.beta2, "epsilon": ad.epsilon},
            "moments": sorted(ad.first_moment),
            "report": [[r.epoch, repr(r.train_mse), repr(r.validation_cost), r.selected] for r in state.report.rows]}
    (d / "train_state.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_train_state(directory: str | Path) -> TrainState:
    d = Path(directory)
    meta = json.loads((d / "train_state.json").read_text())
    model = load_model(d / "current")
    best = load_model(d / "best") if (d / "best").exists() else None
    adam = AdamState(step=meta["adam_step"], **meta["adam"])
    shapes = {k: v.shape for k, v in model.parameters().items()}
    for name in meta["moments"]:
        adam.first_moment[name] = load_signal(d / f"adam_m.{name}.bin").reshape(shapes[name])
        adam.second_moment[name] = load_signal(d / f"adam_v.{name}.bin").reshape(shapes[name])
    rows = [LossRow(e, float(m), float(c), bool(s)) for e, m, c, s in meta["report"]]
    return TrainState(model, adam, meta["epoch"], best, float(meta["best_cost"]), LossReport(rows))
