"""Space-time graph filters and their multivariate frequency response.

The fixed-graph filter computes ``Y = sum_k h_k S^k X C^k`` and the generalized
filter replaces ``S^k`` by the running product ``S_k ... S_1`` of a GSO
sequence.  Both go through the same recursion ``z_k = S_k z_{k-1} C`` so a
sequence of identical operators reproduces the fixed filter bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .spacetime import TimeShiftOperator, _check_tso, as_signal, diffuse_once, gso_array


@dataclass(frozen=True)
class FilterTaps:
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size < 1:
            raise ValueError("a filter needs at least one tap")
        if not np.all(np.isfinite(c)):
            raise ValueError("filter taps must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def order(self) -> int:
        return self.coefficients.size - 1

    def __len__(self):
        return self.coefficients.size


@dataclass(frozen=True)
class FrequencyPoint:
    """Graph-frequency vector ``[lambda_1..lambda_K]`` and time frequency ``omega``.

    ``lambda_0 = 1`` is implicit and never stored.
    """

    lambda_vec: np.ndarray
    omega: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lambda_vec", np.atleast_1d(np.asarray(self.lambda_vec, dtype=float)))


@dataclass(frozen=True)
class LipschitzEstimate:
    c_l: float
    gradient_max: float
    hadamard_max: float
    grid_spec: dict = field(default_factory=dict)


def _taps(h) -> np.ndarray:
    return h.coefficients if isinstance(h, FilterTaps) else np.asarray(h, dtype=float).ravel()


def diffusion_terms(x: np.ndarray, seq: Sequence, tso: TimeShiftOperator) -> list[np.ndarray]:
    """``[z_0, ..., z_K]`` with ``z_0 = X`` and ``z_k = S_k z_{k-1} C``."""
    z = [x]
    for s in seq:
        z.append(diffuse_once(z[-1], s, tso))
    return z


def combine_terms(h: np.ndarray, z: Sequence[np.ndarray]) -> np.ndarray:
    y = h[0] * z[0]
    for k in range(1, len(h)):
        y = y + h[k] * z[k]
    return y


def apply_stgf(x, s, tso: TimeShiftOperator, h) -> np.ndarray:
    """Fixed-graph space-time filter ``sum_k h_k S^k X C^k``."""
    h = _taps(h)
    x = as_signal(x)
    _check_tso(x, tso)
    return combine_terms(h, diffusion_terms(x, [s] * (h.size - 1), tso))


def apply_generalized_stgf(x, seq: Sequence, tso: TimeShiftOperator, h) -> np.ndarray:
    """Space-time filter over a GSO sequence ``[S_1, ..., S_K]`` (``S_0 = I`` implied).

    Entries of ``seq`` may also be time-indexed ``(T, N, N)`` stacks.
    """
    h = _taps(h)
    if len(seq) != h.size - 1:
        raise ValueError(f"sequence has {len(seq)} GSOs for a filter of order {h.size - 1}")
    x = as_signal(x)
    _check_tso(x, tso)
    return combine_terms(h, diffusion_terms(x, seq, tso))


# -- frequency domain ---------------------------------------------------------

def response(h, lam: np.ndarray, omega) -> np.ndarray:
    """Vectorized ``h(lambda, omega)``; ``lam`` is ``(..., K)`` and broadcasts against ``omega``."""
    h = _taps(h)
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    k_order = h.size - 1
    if lam.shape[-1] != k_order:
        raise ValueError(f"lambda vector of length {lam.shape[-1]} for filter order {k_order}")
    out = np.zeros(np.broadcast_shapes(lam.shape[:-1], omega.shape), dtype=complex) + h[0]
    prod = np.ones(lam.shape[:-1])
    for k in range(1, k_order + 1):
        prod = prod * lam[..., k - 1]
        out = out + h[k] * np.exp(1j * k * omega) * prod
    return out


def frequency_response(h, pt: FrequencyPoint) -> complex:
    """``sum_k h_k e^{j k omega} prod_{kappa <= k} lambda_kappa`` with ``lambda_0 = 1``."""
    return complex(response(h, pt.lambda_vec, pt.omega))


def mixed_gradient(h, lam1: np.ndarray, lam2: np.ndarray, omega) -> np.ndarray:
    """Vectorized Lipschitz gradient, shape ``broadcast(...) + (K,)``.

    Entry ``k`` is the partial derivative in ``lambda_k`` taken at the point
    whose first ``k`` coordinates come from ``lam1`` and the rest from ``lam2``.
    The response is affine in each coordinate, so that partial does not
    depend on coordinate ``k`` itself.
    """
    h = _taps(h)
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    omega = np.asarray(omega, dtype=float)
    k_order = h.size - 1
    batch = np.broadcast_shapes(lam1.shape[:-1], lam2.shape[:-1], omega.shape)
    grad = np.zeros(batch + (k_order,), dtype=complex)
    phases = [np.exp(1j * m * omega) for m in range(k_order + 1)]
    for k in range(1, k_order + 1):
        head = np.prod(lam1[..., : k - 1], axis=-1)
        tail = np.ones(lam2.shape[:-1])
        acc = np.zeros(batch, dtype=complex)
        for m in range(k, k_order + 1):
            if m > k:
                tail = tail * lam2[..., m - 1]
            acc = acc + h[m] * phases[m] * head * tail
        grad[..., k - 1] = acc
    return grad


def lipschitz_gradient(h, pt1: FrequencyPoint, pt2: FrequencyPoint, omega: float) -> np.ndarray:
    h = _taps(h)
    if pt1.lambda_vec.size != h.size - 1 or pt2.lambda_vec.size != h.size - 1:
        raise ValueError("frequency points must have one coordinate per filter tap beyond h_0")
    return mixed_gradient(h, pt1.lambda_vec, pt2.lambda_vec, omega)


def _lambda_candidates(lo: float, hi: float, k_order: int, samples: int, rng: np.random.Generator,
                       pairs: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Grid of lambda vectors (or vector pairs) over the box ``[lo, hi]^K``.

    Box vertices are always included: the response is affine in every
    coordinate, so the maximized norms are coordinatewise convex and peak on
    vertices.  Interior points come from the full tensor grid when it is small,
    otherwise from ``samples**2`` uniform draws.
    """
    dims = 2 * k_order if pairs else k_order
    axis = np.linspace(lo, hi, samples)
    if samples ** dims <= 65536:
        pts = np.array(list(itertools.product(axis, repeat=dims))).reshape(-1, dims)
    else:
        verts = np.array(list(itertools.product((lo, hi), repeat=dims)), dtype=float)
        pts = np.vstack([verts, rng.uniform(lo, hi, size=(samples * samples, dims))])
    if not pairs:
        return pts, None
    return pts[:, :k_order], pts[:, k_order:]


def _c_l_on_grid(h, lo, hi, omega_samples, lambda_samples, rng):
    k_order = len(_taps(h)) - 1
    lam1, lam2 = _lambda_candidates(lo, hi, k_order, lambda_samples, rng, pairs=True)
    omegas = np.linspace(0.0, 2 * np.pi, omega_samples, endpoint=False)
    gmax = hmax = 0.0
    chunk = max(1, 200_000 // max(1, omega_samples * k_order))
    for start in range(0, lam1.shape[0], chunk):
        a = lam1[start:start + chunk, None, :]
        b = lam2[start:start + chunk, None, :]
        g = mixed_gradient(h, a, b, omegas[None, :])
        gmax = max(gmax, float(np.sqrt((np.abs(g) ** 2).sum(-1)).max()))
        hmax = max(hmax, float(np.sqrt((np.abs(a * g) ** 2).sum(-1)).max()))
    return gmax, hmax, lam1.shape[0]


def estimate_c_l(h, lambda_range: tuple[float, float], omega_samples: int = 64, lambda_samples: int = 64,
                 refine: bool = True, tol: float = 0.01, max_rounds: int = 3, seed: int = 0) -> LipschitzEstimate:
    """Grid estimate of the generalized integral Lipschitz constant.

    ``C_L`` is the maximum over sampled ``(lambda_1, lambda_2, omega)`` of both
    the Lipschitz-gradient norm and the norm of ``lambda_1`` times it.  With
    ``refine`` the sampling density doubles until the estimate moves less than
    ``tol`` (relative).
    """
    lo, hi = float(lambda_range[0]), float(lambda_range[1])
    if not hi >= lo or not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError(f"empty lambda range {lambda_range}")
    if omega_samples < 2 or lambda_samples < 2:
        raise ValueError("sample counts must be at least 2")
    h = _taps(h)
    if h.size == 1:
        return LipschitzEstimate(0.0, 0.0, 0.0, {"lambda_range": [lo, hi], "omega_samples": 0,
                                                 "lambda_pairs": 0, "rounds": 0})
    rng = np.random.default_rng(seed)
    ws, ls = omega_samples, lambda_samples
    gmax, hmax, npairs = _c_l_on_grid(h, lo, hi, ws, ls, rng)
    rounds = 1
    while refine and rounds < max_rounds:
        ws, ls = 2 * ws, 2 * ls
        g2, h2, npairs = _c_l_on_grid(h, lo, hi, ws, ls, rng)
        old, new = max(gmax, hmax), max(g2, h2, gmax, hmax)
        gmax, hmax = max(gmax, g2), max(hmax, h2)
        rounds += 1
        if new == 0 or abs(new - old) / new < tol:
            break
    spec = {"lambda_range": [lo, hi], "omega_samples": ws, "lambda_samples": ls,
            "lambda_pairs": int(npairs), "rounds": rounds}
    return LipschitzEstimate(max(gmax, hmax), gmax, hmax, spec)


def filter_norm(h, lambda_range: tuple[float, float], omega_samples: int = 64, lambda_samples: int = 64,
                seed: int = 0) -> float:
    """``max |h(lambda, omega)|`` over a grid of the lambda box and ``omega``."""
    lo, hi = float(lambda_range[0]), float(lambda_range[1])
    if not hi >= lo:
        raise ValueError(f"empty lambda range {lambda_range}")
    h = _taps(h)
    if h.size == 1:
        return float(abs(h[0]))
    lam, _ = _lambda_candidates(lo, hi, h.size - 1, lambda_samples, np.random.default_rng(seed), pairs=False)
    omegas = np.linspace(0.0, 2 * np.pi, omega_samples, endpoint=False)
    return float(np.abs(response(h, lam[:, None, :], omegas[None, :])).max())


def spectral_range(s, pad: float = 0.0) -> tuple[float, float]:
    """``[lambda_min, lambda_max]`` of a GSO, optionally widened by ``pad`` on both sides."""
    lam = np.linalg.eigvalsh(gso_array(s))
    return float(lam[0] - pad), float(lam[-1] + pad)


# -- text format -------------------------------------------------------------

def dumps_taps(h) -> str:
    c = _taps(h)
    return f"{c.size - 1}\n" + "\n".join(format(v, ".17g") for v in c) + "\n"


def loads_taps(text: str) -> FilterTaps:
    tokens = text.split()
    if not tokens:
        raise ValueError("empty taps text")
    k = int(tokens[0])
    vals = [float(t) for t in tokens[1:]]
    if len(vals) != k + 1:
        raise ValueError(f"order {k} needs {k + 1} coefficients, found {len(vals)}")
    return FilterTaps(np.array(vals))


def save_taps(h, path: str | Path) -> None:
    Path(path).write_text(dumps_taps(h))


def load_taps(path: str | Path) -> FilterTaps:
    return loads_taps(Path(path).read_text())
