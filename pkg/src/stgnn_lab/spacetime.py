"""Space-time signals and joint space/time shifts.

Signals are plain ``float64`` arrays of shape ``(N, T, F)``: ``F`` features per
node per time step.  The time-shift operator ``C`` acts on the time axis by
re-indexing; it is never materialized except for small horizons on request.

A graph operator passed to the shift functions may be a :class:`ShiftOperator`,
an ``(N, N)`` matrix, or a time-indexed ``(T, N, N)`` stack whose slice ``t``
is applied to time step ``t``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_core import ShiftOperator

_HEADER = struct.Struct("<qqq")


class TSOMode(str, enum.Enum):
    CIRCULANT = "circulant"
    ZERO_PAD_DELAY = "zero_pad_delay"


@dataclass(frozen=True)
class TimeShiftOperator:
    """One-step delay along time; ``horizon`` of ``None`` accepts any ``T``."""

    horizon: int | None = None
    mode: TSOMode = TSOMode.CIRCULANT

    def __post_init__(self):
        object.__setattr__(self, "mode", TSOMode(self.mode))
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")

    def matrix(self, horizon: int | None = None) -> np.ndarray:
        """Dense ``T x T`` matrix ``C`` with ``X @ C`` delaying ``X`` by one step."""
        t = horizon or self.horizon
        if t is None:
            raise ValueError("horizon required")
        if t > 64:
            raise ValueError("refusing to materialize a TSO with T > 64")
        c = np.zeros((t, t))
        for i in range(t - 1):
            c[i, i + 1] = 1.0
        if self.mode is TSOMode.CIRCULANT:
            c[t - 1, 0] = 1.0
        return c


def as_signal(x) -> np.ndarray:
    """Validate and coerce to an ``(N, T, F)`` float array (2-D input gets ``F = 1``)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"space-time signal must be (N, T, F) with all dims >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("space-time signal has non-finite entries")
    return x


def _check_tso(x: np.ndarray, tso: TimeShiftOperator):
    if tso.horizon is not None and tso.horizon != x.shape[1]:
        raise ValueError(f"TSO horizon {tso.horizon} does not match signal horizon {x.shape[1]}")


def time_shift(x: np.ndarray, steps: int, tso: TimeShiftOperator) -> np.ndarray:
    """``X C^k``: delay every node's series by ``steps``."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return x.copy()
    t = x.shape[1]
    if tso.mode is TSOMode.CIRCULANT:
        return np.roll(x, steps, axis=1)
    out = np.zeros_like(x)
    if steps < t:
        out[:, steps:] = x[:, : t - steps]
    return out


def time_shift_adjoint(x: np.ndarray, steps: int, tso: TimeShiftOperator) -> np.ndarray:
    """``X (C^T)^k``: advance every series by ``steps``."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return x.copy()
    t = x.shape[1]
    if tso.mode is TSOMode.CIRCULANT:
        return np.roll(x, -steps, axis=1)
    out = np.zeros_like(x)
    if steps < t:
        out[:, : t - steps] = x[:, steps:]
    return out


def gso_array(s) -> np.ndarray:
    return s.matrix if isinstance(s, ShiftOperator) else np.asarray(s, dtype=float)


def space_shift(x: np.ndarray, s) -> np.ndarray:
    """``S X`` applied to every time slice and feature."""
    m = gso_array(s)
    n = x.shape[0]
    if m.shape[-1] != n or m.shape[-2] != n:
        raise ValueError(f"GSO of shape {m.shape} does not match {n} nodes")
    if m.ndim == 2:
        return np.einsum("ij,jtf->itf", m, x)
    if m.shape[0] != x.shape[1]:
        raise ValueError(f"time-indexed GSO has {m.shape[0]} slices for horizon {x.shape[1]}")
    return np.einsum("tij,jtf->itf", m, x)


def space_shift_adjoint(x: np.ndarray, s) -> np.ndarray:
    """``S^T X`` (per time slice for time-indexed operators)."""
    m = gso_array(s)
    if m.ndim == 2:
        return np.einsum("ji,jtf->itf", m, x)
    return np.einsum("tji,jtf->itf", m, x)


def diffuse_once(z: np.ndarray, s, tso: TimeShiftOperator) -> np.ndarray:
    """One joint hop ``S z C``."""
    return space_shift(time_shift(z, 1, tso), s)


def spacetime_diffuse(x: np.ndarray, s, tso: TimeShiftOperator, k: int) -> np.ndarray:
    """``S^k X C^k`` by ``k`` successive single hops."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    x = as_signal(x)
    _check_tso(x, tso)
    z = x.copy()
    for _ in range(k):
        z = diffuse_once(z, s, tso)
    return z


# -- binary layout ----------------------------------------------------------

def signal_to_bytes(x: np.ndarray) -> bytes:
    """Header of three little-endian int64 (N, T, F) then row-major little-endian float64."""
    x = np.asarray(x, dtype="<f8")
    if x.ndim != 3:
        raise ValueError("expected an (N, T, F) array")
    return _HEADER.pack(*x.shape) + np.ascontiguousarray(x).tobytes()


def signal_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated signal header")
    n, t, f = _HEADER.unpack_from(data)
    body = data[_HEADER.size:]
    if len(body) != n * t * f * 8:
        raise ValueError(f"signal body has {len(body)} bytes, expected {n * t * f * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, t, f).astype(float)


def save_signal(x: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(signal_to_bytes(x))


def load_signal(path: str | Path) -> np.ndarray:
    return signal_from_bytes(Path(path).read_bytes())
