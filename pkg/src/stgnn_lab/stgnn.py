"""Multi-layer ST-GNNs, their generalized variant and the per-node readout.

Layer ``l`` computes ``X_l^f = sigma(sum_g sum_k h_kl^{fg} S^k X_{l-1}^g C^k)``;
taps are stored as one array of shape ``(K + 1, F_out, F_in)``.  A node-local
affine readout maps the last layer's ``F`` features to the prediction at every
node and time step.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .spacetime import TSOMode, TimeShiftOperator, as_signal, gso_array, load_signal, save_signal
from .stgf import FilterTaps, diffusion_terms

CHECKPOINT_FORMAT = "stgnn-lab-checkpoint/1"


class Nonlinearity(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    # linear filter banks (no activation), used for the plain STGF baseline
    IDENTITY = "identity"


# every supported activation is nonexpansive
LIPSCHITZ = {Nonlinearity.TANH: 1.0, Nonlinearity.RELU: 1.0, Nonlinearity.IDENTITY: 1.0}


def nonlinearity_apply(z: np.ndarray, kind: Nonlinearity | str) -> np.ndarray:
    kind = Nonlinearity(kind)
    if kind is Nonlinearity.TANH:
        return np.tanh(z)
    if kind is Nonlinearity.RELU:
        return np.maximum(z, 0.0)
    return np.asarray(z, dtype=float).copy()


def nonlinearity_grad(pre: np.ndarray, kind: Nonlinearity | str) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation ``pre``."""
    kind = Nonlinearity(kind)
    if kind is Nonlinearity.TANH:
        t = np.tanh(pre)
        return 1.0 - t * t
    if kind is Nonlinearity.RELU:
        return (pre > 0).astype(float)
    return np.ones_like(pre)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 1
    features: int = 64
    order: int = 3
    nonlinearity: Nonlinearity = Nonlinearity.TANH
    input_features: int = 4
    readout_features: int = 2

    def __post_init__(self):
        object.__setattr__(self, "nonlinearity", Nonlinearity(self.nonlinearity))
        if self.layers < 1 or self.features < 1 or self.order < 0:
            raise ValueError(f"invalid model config {self}")
        if self.input_features < 1 or self.readout_features < 1:
            raise ValueError(f"invalid model config {self}")

    def feature_plan(self) -> list[tuple[int, int]]:
        """``(F_in, F_out)`` of every layer."""
        plan = [(self.input_features, self.features)]
        plan += [(self.features, self.features)] * (self.layers - 1)
        return plan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nonlinearity"] = self.nonlinearity.value
        return d


@dataclass
class LayerParams:
    taps: np.ndarray  # (K + 1, F_out, F_in)

    def filter(self, f: int, g: int) -> FilterTaps:
        return FilterTaps(self.taps[:, f, g])

    @property
    def order(self) -> int:
        return self.taps.shape[0] - 1


@dataclass
class ReadoutParams:
    weight: np.ndarray  # (F_out, F)
    bias: np.ndarray    # (F_out,)


@dataclass
class STGNN:
    config: ModelConfig
    layers: list[LayerParams]
    readout: ReadoutParams

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of every parameter block, keyed by a stable name."""
        p = {f"layer{i}.taps": lp.taps for i, lp in enumerate(self.layers)}
        p["readout.weight"] = self.readout.weight
        p["readout.bias"] = self.readout.bias
        return p

    def copy(self) -> "STGNN":
        return STGNN(self.config, [LayerParams(lp.taps.copy()) for lp in self.layers],
                     ReadoutParams(self.readout.weight.copy(), self.readout.bias.copy()))

    def filters(self):
        """Every per-(layer, f, g) filter as :class:`FilterTaps`."""
        for lp in self.layers:
            _, fo, fi = lp.taps.shape
            for f in range(fo):
                for g in range(fi):
                    yield lp.filter(f, g)


def init_model(config: ModelConfig, rng: np.random.Generator) -> STGNN:
    """Uniform init in ``[-a, a]`` with ``a = 1/sqrt((K + 1) F_in)`` for taps, ``1/sqrt(F)`` for the readout."""
    k1 = config.order + 1
    layers = []
    for fi, fo in config.feature_plan():
        a = 1.0 / np.sqrt(k1 * fi)
        layers.append(LayerParams(rng.uniform(-a, a, size=(k1, fo, fi))))
    a = 1.0 / np.sqrt(config.features)
    readout = ReadoutParams(rng.uniform(-a, a, size=(config.readout_features, config.features)),
                            rng.uniform(-a, a, size=config.readout_features))
    return STGNN(config, layers, readout)


def zero_model(config: ModelConfig) -> STGNN:
    k1 = config.order + 1
    layers = [LayerParams(np.zeros((k1, fo, fi))) for fi, fo in config.feature_plan()]
    readout = ReadoutParams(np.zeros((config.readout_features, config.features)), np.zeros(config.readout_features))
    return STGNN(config, layers, readout)


# -- forward -------------------------------------------------------------------

@dataclass
class LayerCache:
    terms: list[np.ndarray]
    pre: np.ndarray
    out: np.ndarray


@dataclass
class ForwardCache:
    layers: list[LayerCache] = field(default_factory=list)
    features: np.ndarray | None = None
    output: np.ndarray | None = None


def _mix(taps: np.ndarray, terms: Sequence[np.ndarray]) -> np.ndarray:
    pre = np.einsum("ntg,fg->ntf", terms[0], taps[0])
    for k in range(1, taps.shape[0]):
        pre = pre + np.einsum("ntg,fg->ntf", terms[k], taps[k])
    return pre


def _layer(x, seq, tso, params: LayerParams, kind) -> LayerCache:
    if x.shape[2] != params.taps.shape[2]:
        raise ValueError(f"layer expects {params.taps.shape[2]} input features, got {x.shape[2]}")
    terms = diffusion_terms(x, seq, tso)
    pre = _mix(params.taps, terms)
    return LayerCache(terms, pre, nonlinearity_apply(pre, kind))


def layer_forward(x_prev, s, tso: TimeShiftOperator, params: LayerParams, kind) -> np.ndarray:
    """One ST-GNN layer over a fixed GSO."""
    x_prev = as_signal(x_prev)
    return _layer(x_prev, [s] * params.order, tso, params, kind).out


def generalized_layer_forward(x_prev, seq, tso: TimeShiftOperator, params: LayerParams, kind) -> np.ndarray:
    if len(seq) != params.order:
        raise ValueError(f"sequence has {len(seq)} GSOs, layer order is {params.order}")
    return _layer(as_signal(x_prev), list(seq), tso, params, kind).out


def readout_apply(z: np.ndarray, readout: ReadoutParams) -> np.ndarray:
    return np.einsum("ntf,of->nto", z, readout.weight) + readout.bias


def forward(x, seq: Sequence, tso: TimeShiftOperator, model: STGNN) -> ForwardCache:
    """Full forward pass over a GSO sequence of length ``K``, keeping intermediates."""
    x = as_signal(x)
    if x.shape[2] != model.config.input_features:
        raise ValueError(f"model expects {model.config.input_features} input features, got {x.shape[2]}")
    if len(seq) != model.config.order:
        raise ValueError(f"sequence has {len(seq)} GSOs, model order is {model.config.order}")
    cache = ForwardCache()
    h = x
    for lp in model.layers:
        lc = _layer(h, seq, tso, lp, model.config.nonlinearity)
        cache.layers.append(lc)
        h = lc.out
    cache.features = h
    cache.output = readout_apply(h, model.readout)
    return cache


def model_forward(x, s, tso: TimeShiftOperator, model: STGNN) -> np.ndarray:
    """``readout(Phi(X; S, H))`` over a fixed GSO."""
    return forward(x, [s] * model.config.order, tso, model).output


def generalized_model_forward(x, seq, tso: TimeShiftOperator, model: STGNN) -> np.ndarray:
    """Generalized ST-GNN: every layer runs over the same sequence ``S_1..S_K``."""
    return forward(x, list(seq), tso, model).output


def model_features(x, seq, tso: TimeShiftOperator, model: STGNN) -> np.ndarray:
    """The ST-GNN output ``Phi`` (last layer, before the readout)."""
    return forward(x, list(seq), tso, model).features


# -- streaming evaluation --------------------------------------------------------

class StreamingModel:
    """Step-by-step evaluation for closed-loop control.

    Keeps the delayed diffusion terms of the previous step for every layer, so
    step ``t`` costs ``K`` matrix products per layer.  Outputs equal the batch
    forward pass with a :data:`TSOMode.ZERO_PAD_DELAY` TSO and time-indexed
    GSOs ``S_k(t)``.
    """

    def __init__(self, model: STGNN, n: int):
        self.model = model
        self.n = n
        self.reset()

    def reset(self):
        k = self.model.config.order
        self._prev = [[np.zeros((self.n, fi)) for _ in range(k)] for fi, _ in self.model.config.feature_plan()]

    def step(self, x_t: np.ndarray, gsos: Sequence) -> np.ndarray:
        """Advance one step with input ``(N, F_in)`` and operators ``[S_1(t)..S_K(t)]``."""
        cfg = self.model.config
        if len(gsos) != cfg.order:
            raise ValueError(f"need {cfg.order} GSOs per step, got {len(gsos)}")
        mats = [gso_array(s) for s in gsos]
        h = np.asarray(x_t, dtype=float)
        for li, lp in enumerate(self.model.layers):
            prev = self._prev[li]
            terms = [h]
            for k in range(1, cfg.order + 1):
                terms.append(mats[k - 1] @ prev[k - 1])
            pre = terms[0] @ lp.taps[0].T
            for k in range(1, cfg.order + 1):
                pre = pre + terms[k] @ lp.taps[k].T
            self._prev[li] = terms[: cfg.order]
            h = nonlinearity_apply(pre, cfg.nonlinearity)
        return h @ self.model.readout.weight.T + self.model.readout.bias


# -- checkpoints -------------------------------------------------------------------

def _as3(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (3 - a.ndim))


def save_model(model: STGNN, directory: str | Path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one binary tensor file per parameter block."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for name, arr in model.parameters().items():
        fname = f"{name}.bin"
        save_signal(_as3(arr), d / fname)
        blocks[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "blocks": blocks}
    if extra:
        manifest["extra"] = extra
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_model(directory: str | Path) -> STGNN:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    model = zero_model(ModelConfig(**manifest["config"]))
    for name, arr in model.parameters().items():
        meta = manifest["blocks"][name]
        data = load_signal(d / meta["file"]).reshape(meta["shape"])
        if data.shape != arr.shape:
            raise ValueError(f"block {name} has shape {data.shape}, expected {arr.shape}")
        arr[...] = data
    return model


def requires_causal(tso: TimeShiftOperator):
    if tso.mode is not TSOMode.ZERO_PAD_DELAY:
        raise ValueError("closed-loop evaluation needs a zero-pad delay TSO")
