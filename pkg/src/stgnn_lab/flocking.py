"""Decentralized flocking environment.

Agents are double integrators in the plane.  The centralized expert drives
all velocities to consensus over the whole flock and adds pairwise forces
from the potential ``U(r) = 1/r^2 + log r^2`` (minimum at ``r = 1``) for pairs
closer than the interaction cutoff.  The communication graph at time ``t``
links agents within ``comm_radius`` of each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph_core import (GSOKind, Graph, RESConfig, ShiftOperator, average_gso, build_gso, communication_edges,
                         load_graph, make_rng, res_sample, save_graph)
from .spacetime import load_signal, save_signal
from .stgnn import STGNN, StreamingModel

DATASET_FORMAT = "stgnn-lab-flock-dataset/1"


class PlacementError(RuntimeError):
    """Agents could not be placed collision-free within the retry limit."""


class RolloutDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite control prediction at step {step}")
        self.step = step


@dataclass(frozen=True)
class FlockConfig:
    agent_count: int = 20
    comm_radius: float = 2.0
    dt: float = 0.01
    horizon: int = 200
    max_accel: float = 10.0
    init_box: float | None = None
    init_velocity: float = 1.0
    collision_floor: float = 0.1
    interaction_cutoff: float | None = None
    placement_retries: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.comm_radius <= 0 or self.dt <= 0 or self.horizon < 2 or self.agent_count < 1:
            raise ValueError(f"invalid flock config {self}")

    @property
    def box_side(self) -> float:
        if self.init_box is not None:
            return self.init_box
        return float(np.sqrt(self.agent_count) * self.comm_radius / 2)

    @property
    def cutoff(self) -> float:
        return self.comm_radius if self.interaction_cutoff is None else self.interaction_cutoff


@dataclass(frozen=True)
class FlockState:
    positions: np.ndarray   # (N, 2)
    velocities: np.ndarray  # (N, 2)


@dataclass
class Trajectory:
    """States at steps ``0..T-1``, the control applied at each step and the graph seen at each step."""

    positions: np.ndarray      # (T, N, 2)
    velocities: np.ndarray     # (T, N, 2)
    accelerations: np.ndarray  # (T, N, 2)
    adjacency: np.ndarray      # (T, N, N) bool
    final_state: FlockState | None = None

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]

    @property
    def agent_count(self) -> int:
        return self.positions.shape[1]

    def initial_state(self) -> FlockState:
        return FlockState(self.positions[0].copy(), self.velocities[0].copy())

    def features(self) -> np.ndarray:
        """Raw ``(p, v)`` node features as an ``(N, T, 4)`` signal."""
        return np.concatenate([self.positions, self.velocities], axis=2).transpose(1, 0, 2).copy()

    def targets(self) -> np.ndarray:
        return self.accelerations.transpose(1, 0, 2).copy()

    def graph(self, t: int, edge_weight: float | None = None) -> Graph:
        """Communication graph at step ``t``; unweighted unless ``edge_weight`` is given."""
        iu, ju = np.nonzero(np.triu(self.adjacency[t], k=1))
        weights = None if edge_weight is None else (float(edge_weight),) * iu.size
        return Graph(self.agent_count, tuple(zip(iu.tolist(), ju.tolist())), weights)

    def graphs(self, edge_weight: float | None = None) -> list[Graph]:
        return [self.graph(t, edge_weight) for t in range(self.horizon)]

    def gso_sequence(self, kind: GSOKind | str, edge_weight: float | None = None) -> list[ShiftOperator]:
        return [build_gso(g, kind) for g in self.graphs(edge_weight)]

    def gso_stack(self, kind: GSOKind | str, edge_weight: float | None = None) -> np.ndarray:
        """Time-indexed ``(T, N, N)`` GSO stack."""
        return np.stack([s.matrix for s in self.gso_sequence(kind, edge_weight)])

    def average_gso(self, kind: GSOKind | str, edge_weight: float | None = None) -> ShiftOperator:
        return average_gso(self.gso_sequence(kind, edge_weight))


@dataclass
class Dataset:
    config: FlockConfig
    train: list[Trajectory] = field(default_factory=list)
    validation: list[Trajectory] = field(default_factory=list)
    test: list[Trajectory] = field(default_factory=list)

    def split(self, name: str) -> list[Trajectory]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


# -- physics -----------------------------------------------------------------------

def communication_graph(state: FlockState, radius: float) -> Graph:
    """Edge ``(i, j)`` iff ``||p_i - p_j|| <= radius``."""
    return Graph(state.positions.shape[0], communication_edges(state.positions, radius))


def _pair_geometry(positions):
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    return diff, dist


def potential_forces(positions: np.ndarray, cutoff: float) -> np.ndarray:
    """``-sum_j grad_{p_i} U(||p_i - p_j||)`` over pairs closer than ``cutoff``."""
    diff, dist = _pair_geometry(positions)
    n = positions.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0):
        raise ValueError("coincident agents: collision potential is undefined at r = 0")
    active = off & (dist < cutoff)
    r = np.where(active, dist, 1.0)
    # U'(r) / r for U(r) = r^-2 + log r^2
    coef = np.where(active, (-2.0 / r**3 + 2.0 / r) / r, 0.0)
    return -(coef[:, :, None] * diff).sum(axis=1)


def optimal_controller(state: FlockState, cfg: FlockConfig, global_consensus: bool = True) -> np.ndarray:
    """Expert accelerations: velocity consensus plus collision-potential forces, clipped to ``max_accel``.

    With ``global_consensus`` the consensus term sums over every agent (the
    centralized expert); otherwise only over communication neighbours.
    """
    p, v = state.positions, state.velocities
    n = p.shape[0]
    if global_consensus:
        consensus = -(n * v - v.sum(axis=0))
    else:
        _, dist = _pair_geometry(p)
        adj = (dist <= cfg.comm_radius) & ~np.eye(n, dtype=bool)
        consensus = -(adj.sum(1)[:, None] * v - adj.astype(float) @ v)
    u = consensus + potential_forces(p, cfg.cutoff)
    return np.clip(u, -cfg.max_accel, cfg.max_accel)


def step_dynamics(state: FlockState, accel: np.ndarray, dt: float) -> FlockState:
    accel = np.asarray(accel, dtype=float)
    if accel.shape != state.velocities.shape:
        raise ValueError(f"acceleration shape {accel.shape} does not match state {state.velocities.shape}")
    p = state.positions + state.velocities * dt + 0.5 * accel * dt * dt
    v = state.velocities + accel * dt
    return FlockState(p, v)


def velocity_variation(velocities: np.ndarray) -> np.ndarray:
    """Per-step ``sum_i ||v_i - mean_j v_j||^2`` for velocities shaped ``(T, N, 2)``."""
    v = np.asarray(velocities, dtype=float)
    dev = v - v.mean(axis=-2, keepdims=True)
    return (dev**2).sum(axis=(-2, -1))


def velocity_cost(velocities: np.ndarray) -> float:
    """Velocity variation summed over the horizon."""
    return float(velocity_variation(velocities).sum())


# -- data generation ------------------------------------------------------------------

def initial_state(cfg: FlockConfig, rng: np.random.Generator) -> FlockState:
    """Uniform positions in the init box with rejection against ``collision_floor``."""
    n, side = cfg.agent_count, cfg.box_side
    pos = np.empty((n, 2))
    for i in range(n):
        for _ in range(cfg.placement_retries):
            cand = rng.uniform(0.0, side, size=2)
            if i == 0 or np.sqrt(((pos[:i] - cand) ** 2).sum(1)).min() >= cfg.collision_floor:
                pos[i] = cand
                break
        else:
            raise PlacementError(f"could not place agent {i} after {cfg.placement_retries} tries")
    vel = rng.uniform(-cfg.init_velocity, cfg.init_velocity, size=(n, 2))
    return FlockState(pos, vel)


def _adjacency(positions, radius):
    _, dist = _pair_geometry(positions)
    return (dist <= radius) & ~np.eye(positions.shape[0], dtype=bool)


def expert_rollout(cfg: FlockConfig, state: FlockState) -> Trajectory:
    """Roll the centralized expert forward ``cfg.horizon`` steps."""
    t_len, n = cfg.horizon, cfg.agent_count
    pos = np.empty((t_len, n, 2))
    vel = np.empty((t_len, n, 2))
    acc = np.empty((t_len, n, 2))
    adj = np.empty((t_len, n, n), dtype=bool)
    for t in range(t_len):
        pos[t], vel[t] = state.positions, state.velocities
        adj[t] = _adjacency(state.positions, cfg.comm_radius)
        acc[t] = optimal_controller(state, cfg)
        state = step_dynamics(state, acc[t], cfg.dt)
    return Trajectory(pos, vel, acc, adj, state)


SPLITS = ("train", "validation", "test")


def generate_example(cfg: FlockConfig, split_index: int, index: int) -> Trajectory:
    rng = make_rng(cfg.seed, split_index, index)
    return expert_rollout(cfg, initial_state(cfg, rng))


def generate_dataset(cfg: FlockConfig, counts: Sequence[int] = (40, 8, 8)) -> Dataset:
    """Expert trajectories for the train/validation/test splits, deterministic per ``cfg.seed``."""
    if any(c < 0 for c in counts):
        raise ValueError("split counts must be nonnegative")
    ds = Dataset(cfg)
    for si, (name, count) in enumerate(zip(SPLITS, counts)):
        ds.split(name).extend(generate_example(cfg, si, i) for i in range(count))
    return ds


# -- closed loop ---------------------------------------------------------------------

GraphSchedule = Callable[[int, np.ndarray], list]


def fixed_schedule(s: ShiftOperator, order: int) -> GraphSchedule:
    return lambda t, positions: [s] * order


def live_schedule(radius: float, kind: GSOKind | str, order: int, edge_weight: float | None = None) -> GraphSchedule:
    """Communication graph rebuilt from the current positions at every step."""
    def schedule(t, positions):
        edges = communication_edges(positions, radius)
        weights = None if edge_weight is None else (float(edge_weight),) * len(edges)
        g = Graph(positions.shape[0], edges, weights)
        return [build_gso(g, kind)] * order
    return schedule


def res_schedule(nominal: ShiftOperator, p: float, seed: int, order: int) -> GraphSchedule:
    """A fresh RES realization of ``nominal`` at every step.

    At ``p = 1`` every realization equals ``nominal`` exactly.
    """
    def schedule(t, positions):
        if p >= 1.0:
            return [nominal] * order
        g = res_sample(nominal.source, RESConfig(p, seed), make_rng(seed, t))
        return [build_gso(g, nominal.kind)] * order
    return schedule


class ExpertPolicy:
    """Wraps the centralized expert behind the streaming-policy interface."""

    def __init__(self, cfg: FlockConfig):
        self.cfg = cfg

    def reset(self):
        pass

    def step(self, x_t, gsos):
        return optimal_controller(FlockState(x_t[:, :2], x_t[:, 2:]), self.cfg)


def closed_loop_rollout(model, cfg: FlockConfig, state: FlockState, schedule: GraphSchedule,
                        horizon: int | None = None) -> Trajectory:
    """Drive the flock with a learned (or wrapped) policy.

    At each step the policy sees the current ``(p, v)`` features and the
    operators from ``schedule``; its prediction is saturated to ``max_accel``
    and applied through the dynamics.
    """
    policy = StreamingModel(model, cfg.agent_count) if isinstance(model, STGNN) else model
    policy.reset()
    t_len, n = horizon or cfg.horizon, state.positions.shape[0]
    pos = np.empty((t_len, n, 2))
    vel = np.empty((t_len, n, 2))
    acc = np.empty((t_len, n, 2))
    adj = np.empty((t_len, n, n), dtype=bool)
    for t in range(t_len):
        pos[t], vel[t] = state.positions, state.velocities
        adj[t] = _adjacency(state.positions, cfg.comm_radius)
        x_t = np.concatenate([state.positions, state.velocities], axis=1)
        u = np.asarray(policy.step(x_t, schedule(t, state.positions)), dtype=float)
        if not np.all(np.isfinite(u)):
            raise RolloutDivergence(t)
        acc[t] = np.clip(u, -cfg.max_accel, cfg.max_accel)
        state = step_dynamics(state, acc[t], cfg.dt)
    return Trajectory(pos, vel, acc, adj, state)


# -- persistence ---------------------------------------------------------------------

def save_dataset(ds: Dataset, directory: str | Path, write_graphs: bool = True) -> Path:
    """Binary tensors per example plus one text graph file per step, indexed by ``manifest.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    cfg = ds.config
    manifest = {"format": DATASET_FORMAT, "N": cfg.agent_count, "T": cfg.horizon, "dt": cfg.dt,
                "R": cfg.comm_radius, "seed": cfg.seed, "config": asdict(cfg), "splits": {}}
    for name in SPLITS:
        entries = []
        for i, traj in enumerate(ds.split(name)):
            ex = Path(name) / f"{i:04d}"
            (root / ex).mkdir(parents=True, exist_ok=True)
            for block in ("positions", "velocities", "accelerations"):
                save_signal(getattr(traj, block).transpose(1, 0, 2), root / ex / f"{block}.bin")
            graphs = []
            if write_graphs:
                (root / ex / "graphs").mkdir(exist_ok=True)
                for t in range(traj.horizon):
                    gp = ex / "graphs" / f"{t:04d}.txt"
                    save_graph(traj.graph(t), root / gp)
                    graphs.append(gp.as_posix())
            entries.append({"dir": ex.as_posix(), "graphs": graphs})
        manifest["splits"][name] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    cfg = FlockConfig(**manifest["config"])
    ds = Dataset(cfg)
    for name in SPLITS:
        for entry in manifest["splits"].get(name, []):
            ex = root / entry["dir"]
            pos, vel, acc = (load_signal(ex / f"{b}.bin").transpose(1, 0, 2)
                             for b in ("positions", "velocities", "accelerations"))
            if entry["graphs"]:
                adj = np.stack([_graph_adjacency(load_graph(root / g)) for g in entry["graphs"]])
            else:
                adj = np.stack([_adjacency(p, cfg.comm_radius) for p in pos])
            ds.split(name).append(Trajectory(pos, vel, acc, adj))
    return ds


def _graph_adjacency(g: Graph) -> np.ndarray:
    a = np.zeros((g.node_count, g.node_count), dtype=bool)
    for i, j in g.edges:
        a[i, j] = a[j, i] = True
    return a


def with_agents(cfg: FlockConfig, n: int) -> FlockConfig:
    return replace(cfg, agent_count=n)


