"""Glottal flow derivative wavetables driven by one shape parameter.

A single dimensionless parameter ``rd`` in [0.3, 2.7] spans the range from
pressed (tense) to breathy (lax) voice. Each pulse is the derivative of the
glottal flow over one normalized period: an exponentially growing sinusoid
up to the main excitation instant ``te``, followed by an exponential return
toward baseline. The pulse shape is pinned down by two implicit conditions,
solved numerically here:

* the return phase must land exactly on the baseline at the period end,
  which fixes the decay rate ``epsilon``;
* the flow must return to its starting value (zero net flow over one
  period), which fixes the open-phase growth rate ``alpha``.

Sampled pulses are stacked into a lookup table, one row per rd value,
energy-normalized and circularly rotated so all negative peaks share one
column.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RD_MIN = 0.3
RD_MAX = 2.7
DEFAULT_ROW_COUNT = 100
DEFAULT_ROW_LENGTH = 2048

_MAGIC = b"GOLF"
_FORMAT_VERSION = 1

__all__ = [
    "RD_MIN",
    "RD_MAX",
    "DEFAULT_ROW_COUNT",
    "DEFAULT_ROW_LENGTH",
    "SolverError",
    "LFParams",
    "Wavetables",
    "rd_to_lf_params",
    "lf_flow_derivative",
    "build_wavetables",
    "save_wavetables",
    "load_wavetables",
    "export_wavetables_csv",
]


class SolverError(RuntimeError):
    """An implicit pulse-shape equation failed to converge."""


@dataclass(frozen=True)
class LFParams:
    """Timing and shape constants of one glottal pulse (period normalized to 1).

    ``te`` is the main excitation instant (the negative peak of the flow
    derivative), ``tp`` the instant of peak flow, ``ta`` the effective
    return-phase duration, and ``ee`` the excitation amplitude at ``te``
    before any normalization.
    """

    rd: float
    te: float
    tp: float
    ta: float
    alpha: float
    epsilon: float
    ee: float = 1.0


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 700.0 else math.inf


def _solve_epsilon(ta: float, te: float, rd: float) -> float:
    # Positive root of eps*ta = 1 - exp(-eps*(1 - te)). eps = 0 is a
    # spurious root; starting Newton at 1/ta keeps the iterates on the
    # convex branch above the wanted root, giving monotone convergence.
    eps = 1.0 / ta
    for _ in range(64):
        em = math.exp(-eps * (1.0 - te))
        f = eps * ta - 1.0 + em
        fp = ta - (1.0 - te) * em
        step = f / fp
        eps -= step
        if abs(step) <= 1e-12 * abs(eps):
            return eps
    raise SolverError(f"return-phase decay rate did not converge for rd={rd:g}")


def _net_flow(alpha: float, te: float, tp: float, epsilon: float, ta: float) -> float:
    # Integral of the pulse over one period, written so the open-phase part
    # stays finite for large positive alpha (the e^{alpha*te} factor in the
    # amplitude constant cancels against the integral).
    omega = math.pi / tp
    s = math.sin(omega * te)
    num = alpha * s - omega * math.cos(omega * te) + omega * _safe_exp(-alpha * te)
    open_part = -num / ((alpha * alpha + omega * omega) * s)
    em = math.exp(-epsilon * (1.0 - te))
    ret_part = -((1.0 - em) / epsilon - (1.0 - te) * em) / (epsilon * ta)
    return open_part + ret_part


def _net_flow_prime(alpha: float, te: float, tp: float) -> float:
    omega = math.pi / tp
    s = math.sin(omega * te)
    e = _safe_exp(-alpha * te)
    num = alpha * s - omega * math.cos(omega * te) + omega * e
    nump = s - omega * te * e
    den = (alpha * alpha + omega * omega) * s
    denp = 2.0 * alpha * s
    return -(nump * den - num * denp) / (den * den)


def _solve_alpha(te: float, tp: float, epsilon: float, ta: float, rd: float) -> float:
    # Zero of the net-flow condition. The function decreases from +inf
    # (alpha -> -inf) through the root to 0- (alpha -> +inf), so a
    # geometrically expanded bracket always exists; bisection keeps Newton
    # honest near the ends of the bracket.
    lo, hi = -1.0, 1.0
    for _ in range(64):
        if _net_flow(lo, te, tp, epsilon, ta) > 0.0:
            break
        lo *= 2.0
    else:
        raise SolverError(f"no lower bracket for growth rate at rd={rd:g}")
    for _ in range(64):
        if _net_flow(hi, te, tp, epsilon, ta) < 0.0:
            break
        hi *= 2.0
    else:
        raise SolverError(f"no upper bracket for growth rate at rd={rd:g}")

    alpha = 0.5 * (lo + hi)
    for _ in range(200):
        fa = _net_flow(alpha, te, tp, epsilon, ta)
        if fa > 0.0:
            lo = alpha
        else:
            hi = alpha
        fp = _net_flow_prime(alpha, te, tp)
        nxt = alpha - fa / fp if fp != 0.0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - alpha) <= 1e-13 * max(1.0, abs(nxt)):
            return nxt
        alpha = nxt
    raise SolverError(f"zero-net-flow growth rate did not converge for rd={rd:g}")


def rd_to_lf_params(rd: float) -> LFParams:
    """Map the shape parameter to pulse constants via the standard regression.

    Values outside [RD_MIN, RD_MAX] are clamped with a warning; the
    regression is only calibrated inside that range.
    """
    rd = float(rd)
    if not math.isfinite(rd):
        raise ValueError("rd must be finite")
    if rd < RD_MIN or rd > RD_MAX:
        warnings.warn(
            f"rd={rd:g} outside [{RD_MIN}, {RD_MAX}]; clamping", stacklevel=2
        )
        rd = min(max(rd, RD_MIN), RD_MAX)

    ra = (-1.0 + 4.8 * rd) / 100.0
    rk = (22.4 + 11.8 * rd) / 100.0
    rg = rk * (0.5 + 1.2 * rk) / (4.0 * (0.11 * rd - ra * (0.5 + 1.2 * rk)))
    tp = 1.0 / (2.0 * rg)
    te = tp * (1.0 + rk)
    ta = ra

    epsilon = _solve_epsilon(ta, te, rd)
    alpha = _solve_alpha(te, tp, epsilon, ta, rd)
    return LFParams(rd=rd, te=te, tp=tp, ta=ta, alpha=alpha, epsilon=epsilon)


def lf_flow_derivative(t, params: LFParams):
    """Evaluate the flow derivative at normalized time t in [0, 1).

    Piecewise: growing sinusoid on [0, te], exponential return on (te, 1).
    Continuous at te with value -ee there. Accepts scalars or arrays.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t >= 1.0)):
        raise ValueError("t must lie in [0, 1); wrap phase before evaluating")

    omega = math.pi / params.tp
    e0 = -params.ee / (math.exp(params.alpha * params.te) * math.sin(omega * params.te))
    t_open = np.minimum(t, params.te)
    open_phase = e0 * np.exp(params.alpha * t_open) * np.sin(omega * t_open)

    em = math.exp(-params.epsilon * (1.0 - params.te))
    t_ret = np.maximum(t, params.te)
    scale = params.ee / (params.epsilon * params.ta)
    return_phase = -scale * (np.exp(-params.epsilon * (t_ret - params.te)) - em)

    out = np.where(t <= params.te, open_phase, return_phase)
    return out if out.ndim else float(out)


@dataclass
class Wavetables:
    """Stack of sampled glottal pulses, one row per rd value.

    Rows are sorted by rd ascending, share unit energy, and are rotated so
    every row's negative peak sits at column ``align_index``.
    """

    data: np.ndarray
    rd_values: np.ndarray
    align_index: int

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.rd_values = np.ascontiguousarray(self.rd_values, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be a K x L matrix")
        if self.rd_values.shape != (self.data.shape[0],):
            raise ValueError("rd_values length must match the row count")
        if not 0 <= self.align_index < self.data.shape[1]:
            raise ValueError("align_index out of range")
        # shared across threads; guard against accidental mutation
        self.data.setflags(write=False)
        self.rd_values.setflags(write=False)

    @property
    def row_count(self) -> int:
        return self.data.shape[0]

    @property
    def row_length(self) -> int:
        return self.data.shape[1]


def build_wavetables(
    k_count: int = DEFAULT_ROW_COUNT,
    l_count: int = DEFAULT_ROW_LENGTH,
    rd_min: float = RD_MIN,
    rd_max: float = RD_MAX,
    align_column: int | None = None,
) -> Wavetables:
    """Build the pulse table over a log-spaced rd grid.

    Each row holds one period sampled at t = j / l_count. Rows are
    de-meaned (left-endpoint sampling leaves an O(1/L) DC residual that
    would otherwise break the zero-net-flow property discretely), scaled
    to unit energy, then rotated so the negative peak lands on
    ``align_column`` (default: ceil(0.65 * l_count), a representative
    excitation-instant position).
    """
    if k_count < 2:
        raise ValueError("k_count must be at least 2")
    if l_count < 16:
        raise ValueError("l_count must be at least 16")
    if not 0.0 < rd_min < rd_max:
        raise ValueError("need 0 < rd_min < rd_max")
    if align_column is None:
        align_column = int(math.ceil(0.65 * l_count)) % l_count

    rd_values = np.exp(np.linspace(math.log(rd_min), math.log(rd_max), k_count))
    t = np.arange(l_count, dtype=np.float64) / l_count
    data = np.empty((k_count, l_count), dtype=np.float64)
    for i, rd in enumerate(rd_values):
        row = lf_flow_derivative(t, rd_to_lf_params(rd))
        row = row - row.mean()
        row /= np.linalg.norm(row)
        data[i] = np.roll(row, align_column - int(np.argmin(row)))
    return Wavetables(data=data, rd_values=rd_values, align_index=align_column)


def save_wavetables(tables: Wavetables, path) -> None:
    """Write the binary container: GOLF magic, u32 header, little-endian f64 payload."""
    k, l = tables.data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _FORMAT_VERSION, k, l, tables.align_index))
        fh.write(tables.rd_values.astype("<f8").tobytes())
        fh.write(tables.data.astype("<f8").tobytes())


def load_wavetables(path) -> Wavetables:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a wavetable file (bad magic {magic!r})")
        version, k, l, align = struct.unpack("<IIII", fh.read(16))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported wavetable format version {version}")
        rd_values = np.frombuffer(fh.read(8 * k), dtype="<f8")
        data = np.frombuffer(fh.read(8 * k * l), dtype="<f8").reshape(k, l)
    return Wavetables(data=data.copy(), rd_values=rd_values.copy(), align_index=align)


def export_wavetables_csv(tables: Wavetables, path) -> None:
    """Inspection dump: one line per row, rd value followed by the samples."""
    arr = np.column_stack([tables.rd_values, tables.data])
    np.savetxt(
        Path(path),
        arr,
        delimiter=",",
        header=f"rd followed by {tables.row_length} samples per row",
    )
