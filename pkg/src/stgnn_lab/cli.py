"""Command-line pipelines: generate, train, rollout, sweep, spectra.

Configuration is a JSON file with the sections shown by ``stgnn-lab
defaults``.  Values are resolved in this order, later winning: built-in
defaults, the ``--config`` file, ``--set section.key=value`` overrides, then
the dedicated flags of each subcommand.  Unknown keys are errors.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .flocking import (FlockConfig, RolloutDivergence, closed_loop_rollout, fixed_schedule, generate_dataset,
                       live_schedule, load_dataset, res_schedule, save_dataset, velocity_variation, with_agents)
from .graph_core import build_gso, make_rng, random_geometric_graph
from .stability import SweepConfig, filter_deviation_experiment, gnn_relative_cost_experiment
from .stgf import estimate_c_l, filter_norm, load_taps, response
from .stgnn import ModelConfig, init_model, load_model, save_model
from .training import (GraphMode, TrainConfig, TrainingDivergence, load_train_state, save_train_state, train,
                       validation_cost)

log = logging.getLogger("stgnn_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

_FLOCK_DEFAULTS = {k: v for k, v in asdict(FlockConfig()).items() if k != "seed"}
_MODEL_DEFAULTS = {k: v for k, v in ModelConfig().to_dict().items() if k not in ("input_features", "readout_features")}
_TRAIN_DEFAULTS = {"epochs": 30, "learning_rate": 5e-4, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
                   "graph_mode": "fixed", "gso_kind": "laplacian", "edge_weight": 0.1, "shuffle": True}

DEFAULTS = {
    "seed": 0,
    "flock": _FLOCK_DEFAULTS,
    "counts": [40, 8, 8],
    "model": _MODEL_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
    "sweep": {"probabilities": [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7], "sizes": [20, 50, 80], "trials": 20,
              "test_examples": 8, "closed_loop": True, "filter_horizon": 10, "filter_gso": "adjacency"},
    "spectra": {"lambda_range": [-1.0, 1.0], "omega_samples": 64, "lambda_samples": 64, "refine": True,
                "grid_lambdas": 41, "grid_omegas": 32},
}


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {name!r} must be an object")
            out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = val
    return out


def _parse_set(items) -> dict:
    """``section.key=json`` pairs into a nested dict (bare strings allowed)."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = val
    return out


def resolve_config(path: str | None, overrides: list[str] | None = None, flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, _parse_set(overrides))
    if flags:
        cfg = _merge(cfg, flags)
    return cfg


def _build(kind, section: dict, **extra):
    try:
        return kind(**section, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {kind.__name__}: {exc}") from exc


def flock_config(cfg: dict) -> FlockConfig:
    return _build(FlockConfig, cfg["flock"], seed=int(cfg["seed"]))


def model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], seed=int(cfg["seed"]))


def sweep_config(cfg: dict, jobs: int) -> SweepConfig:
    s = cfg["sweep"]
    return _build(SweepConfig, {"probabilities": tuple(s["probabilities"]), "sizes": tuple(s["sizes"]),
                                "trials": s["trials"]}, seed=int(cfg["seed"]), jobs=jobs)


# -- outputs ------------------------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: dict, artifacts: list[str], inputs: dict | None = None) -> Path:
    """Record everything needed to replay the run, before the run starts."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "stgnn-lab", "version": __version__, "command": command, "seed": cfg["seed"],
                "config": cfg, "inputs": inputs or {}, "artifacts": sorted(artifacts)}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# -- commands ---------------------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> int:
    out = Path(args.out)
    fc = flock_config(cfg)
    counts = [int(c) for c in cfg["counts"]]
    if len(counts) != 3 or min(counts) < 0:
        raise ConfigError("counts must be three nonnegative integers")
    write_manifest(out, "generate", cfg, ["dataset/manifest.json"])
    ds = generate_dataset(fc, counts)
    save_dataset(ds, out / "dataset", write_graphs=not args.no_graphs)
    log.info("wrote %d/%d/%d examples to %s", *counts, out / "dataset")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out)
    ds = load_dataset(args.dataset)
    mc = model_config(cfg)
    tc = train_config(cfg)
    write_manifest(out, "train", cfg, ["checkpoint/manifest.json", "loss.csv", "state/train_state.json"],
                   {"dataset": str(args.dataset)})
    state = None
    if args.resume and (out / "state" / "train_state.json").exists():
        state = load_train_state(out / "state")
        if state.model.config != mc:
            raise ConfigError("resumed state was trained with a different model config")
        log.info("resuming after epoch %d", state.epoch)
        model = state.model
    else:
        model = init_model(mc, make_rng(int(cfg["seed"]), 1))
    best, report = train(model, ds, tc, state=state, on_epoch=lambda st: save_train_state(st, out / "state"))
    save_model(best, out / "checkpoint", extra={"train": {k: (v.value if hasattr(v, "value") else v)
                                                          for k, v in asdict(tc).items()}})
    (out / "loss.csv").write_text(report.to_csv())
    return EXIT_OK


def _schedule(traj, flock, tc: TrainConfig, order: int, p: float, seed: int):
    if tc.graph_mode is GraphMode.TIME_VARYING:
        return live_schedule(flock.comm_radius, tc.gso_kind, order, tc.edge_weight)
    s = traj.average_gso(tc.gso_kind, tc.edge_weight)
    return fixed_schedule(s, order) if p >= 1.0 else res_schedule(s, p, seed, order)


def cmd_rollout(args, cfg: dict) -> int:
    out = Path(args.out)
    model = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    tc = train_config(cfg)
    write_manifest(out, "rollout", cfg, ["rollouts.csv", "variation.csv"],
                   {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset), "split": args.split,
                    "p": args.p})
    rows, var_rows = [], []
    for i, traj in enumerate(ds.split(args.split)):
        sched = _schedule(traj, ds.config, tc, model.config.order, args.p, int(cfg["seed"]) + i)
        ro = closed_loop_rollout(model, ds.config, traj.initial_state(), sched, horizon=traj.horizon)
        vv = velocity_variation(ro.velocities)
        rows.append([args.split, i, validation_cost(ro), validation_cost(traj), float(vv[0]), float(vv[-1])])
        var_rows.extend([i, t, float(v)] for t, v in enumerate(vv))
    (out / "rollouts.csv").write_text(_csv(["split", "index", "model_cost", "expert_cost", "initial_variation",
                                            "final_variation"], rows))
    (out / "variation.csv").write_text(_csv(["index", "t", "variation"], var_rows))
    return EXIT_OK


def cmd_sweep(args, cfg: dict) -> int:
    from .figures import sweep_figure

    out = Path(args.out)
    if bool(args.checkpoint) == bool(args.taps):
        raise ConfigError("sweep needs exactly one of --checkpoint or --taps")
    sc = sweep_config(cfg, args.jobs)
    s = cfg["sweep"]
    seed = int(cfg["seed"])
    arts = [f"{stem}_N{n}.{ext}" for n in sc.sizes for stem, ext in (("trials", "csv"), ("summary", "csv"),
                                                                     ("sweep", "svg"))]
    if args.checkpoint and s["closed_loop"]:
        arts += [f"cost_summary_N{n}.csv" for n in sc.sizes]
    src = {"checkpoint": str(args.checkpoint)} if args.checkpoint else {"taps": str(args.taps)}
    if args.checkpoint:
        if not (Path(args.checkpoint) / "manifest.json").exists():
            raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
        model = load_model(args.checkpoint)
        tc = train_config(cfg)
    else:
        taps = load_taps(args.taps)
    write_manifest(out, "sweep", cfg, arts, src)
    for n in sc.sizes:
        if args.checkpoint:
            fc = with_agents(flock_config(cfg), n)
            ds = generate_dataset(fc, (0, 0, int(s["test_examples"])))
            rep = gnn_relative_cost_experiment(model, ds, sc, gso_kind=tc.gso_kind, edge_weight=tc.edge_weight,
                                               closed_loop=bool(s["closed_loop"]))
            quantity = "relative_cost" if s["closed_loop"] else "measured"
        else:
            g = random_geometric_graph(n, flock_config(cfg).comm_radius, make_rng(seed, n))
            gso = build_gso(g, s["filter_gso"])
            x = make_rng(seed, n, 1).standard_normal((n, int(s["filter_horizon"]), 1))
            rep = filter_deviation_experiment(taps, gso, x, sc)
            quantity = "measured"
        (out / f"trials_N{n}.csv").write_text(rep.trials_csv())
        (out / f"summary_N{n}.csv").write_text(rep.summary_csv())
        if quantity == "relative_cost":
            (out / f"cost_summary_N{n}.csv").write_text(rep.cost_summary_csv())
        sweep_figure(rep, n, out / f"sweep_N{n}.svg", quantity=quantity)
        if rep.excluded:
            log.warning("N=%d: %d divergent trials excluded", n, rep.excluded)
        log.info("N=%d: C_L %.4g, slope %.4g, R2 %.4f", n, rep.c_l, rep.summary[0].slope, rep.summary[0].r2)
    return EXIT_OK


def _spectra_row(h, sp: dict):
    rng = tuple(sp["lambda_range"])
    est = estimate_c_l(h, rng, int(sp["omega_samples"]), int(sp["lambda_samples"]), refine=bool(sp["refine"]))
    return est, filter_norm(h, rng, int(sp["omega_samples"]), int(sp["lambda_samples"]))


def cmd_spectra(args, cfg: dict) -> int:
    out = Path(args.out)
    sp = cfg["spectra"]
    lo, hi = (float(v) for v in sp["lambda_range"])
    if not hi > lo:
        raise ConfigError(f"empty lambda range [{lo}, {hi}]")
    if bool(args.checkpoint) == bool(args.taps):
        raise ConfigError("spectra needs exactly one of --checkpoint or --taps")
    if args.taps:
        filters = [((0, 0, 0), load_taps(args.taps).coefficients)]
    else:
        model = load_model(args.checkpoint)
        filters = []
        for li, lp in enumerate(model.layers):
            for f in range(lp.taps.shape[1]):
                for g in range(lp.taps.shape[2]):
                    filters.append(((li, f, g), lp.taps[:, f, g]))
    write_manifest(out, "spectra", cfg, ["spectra.json", "filters.csv", "response_grid.csv"],
                   {"checkpoint": str(args.checkpoint)} if args.checkpoint else {"taps": str(args.taps)})
    rows, worst = [], None
    for key, h in filters:
        est, norm = _spectra_row(h, sp)
        rows.append([*key, est.c_l, est.gradient_max, est.hadamard_max, norm])
        if worst is None or est.c_l > worst[1].c_l:
            worst = (key, est, norm, h)
    (out / "filters.csv").write_text(_csv(["layer", "f", "g", "c_l", "gradient_max", "hadamard_max",
                                           "filter_norm"], rows))
    key, est, norm, h = worst
    summary = {"c_l": est.c_l, "gradient_max": est.gradient_max, "hadamard_max": est.hadamard_max,
               "filter_norm": norm, "worst_filter": list(key), "taps": [float(v) for v in h],
               "grid": est.grid_spec, "filters": len(filters)}
    (out / "spectra.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    # response of the worst filter on the diagonal lambda_1 = ... = lambda_K (the fixed-graph response)
    lams = np.linspace(lo, hi, int(sp["grid_lambdas"]))
    omegas = np.linspace(0.0, 2 * np.pi, int(sp["grid_omegas"]), endpoint=False)
    k = len(h) - 1
    grid = []
    for w in omegas:
        for lam in lams:
            r = complex(response(h, np.full(k, lam), w))
            grid.append([float(w), float(lam), r.real, r.imag, abs(r)])
    (out / "response_grid.csv").write_text(_csv(["omega", "lambda", "re", "im", "abs"], grid))
    log.info("C_L %.6g (filter %s), filter norm %.6g", est.c_l, key, norm)
    return EXIT_OK


def cmd_defaults(args, cfg: dict) -> int:
    sys.stdout.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stgnn-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate an expert flocking dataset")
    p.add_argument("--counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--agents", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--no-graphs", action="store_true", help="skip the per-step graph text files")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train an ST-GNN by imitation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--nonlinearity", choices=["tanh", "relu", "identity"])
    p.add_argument("--graph-mode", choices=["fixed", "time_varying"])
    p.add_argument("--resume", action="store_true", help="continue from OUT/state if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", parents=[common], help="closed-loop rollouts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--p", type=float, default=1.0, help="edge sampling probability (fixed-graph mode)")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("sweep", parents=[common], help="stability sweep over edge sampling probabilities")
    p.add_argument("--checkpoint", help="trained model (network sweep)")
    p.add_argument("--taps", help="filter taps file (filter sweep)")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--probabilities", type=float, nargs="+")
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("spectra", parents=[common], help="Lipschitz constant and frequency response")
    p.add_argument("--checkpoint")
    p.add_argument("--taps")
    p.add_argument("--lambda-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("defaults", parents=[common], help="print the resolved configuration")
    p.set_defaults(func=cmd_defaults)
    return parser


_FLAG_MAP = {
    "counts": ("counts",), "agents": ("flock", "agent_count"), "horizon": ("flock", "horizon"),
    "epochs": ("train", "epochs"), "features": ("model", "features"), "order": ("model", "order"),
    "layers": ("model", "layers"), "nonlinearity": ("model", "nonlinearity"),
    "graph_mode": ("train", "graph_mode"), "sizes": ("sweep", "sizes"), "probabilities": ("sweep", "probabilities"),
    "trials": ("sweep", "trials"), "lambda_range": ("spectra", "lambda_range"), "seed": ("seed",),
}


def _flag_overrides(args) -> dict:
    out: dict = {}
    for attr, path in _FLAG_MAP.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
        node[path[-1]] = val
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = resolve_config(args.config, args.set, _flag_overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDivergence, RolloutDivergence) as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
