"""Stability-guaranteed biquad cascades and time-varying LPC synthesis.

Higher-order all-pole filters are built as products of second-order
sections whose denominator coefficients are squashed into the open
stability triangle {|eta2| < 1, |eta1| < 1 + eta2}, so every cascade is
stable by construction no matter what the unconstrained inputs are.

Time-varying filtering comes in two flavours: the frame-wise overlap-add
approximation (each frame filtered independently from zero state, then
windowed and summed, so frames can run in parallel) and the conventional
sample-by-sample recursion with per-sample interpolated coefficients,
kept as the non-differentiable ground-truth reference.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .iir import FilterOverflowError, lfilter_allpole, vjp_coeffs, vjp_input

# tanh saturates to exactly 1.0 in double precision around |x| ~ 19, which
# would put poles on the unit circle. The triangle margin at the saturated
# corner shrinks like 2 * delta^2, so delta must stay well above sqrt(eps)
# for the rounded coefficients to remain strictly inside.
_TANH_CLIP = 1.0 - 1e-6

_WSUM_FLOOR = 1e-12

__all__ = [
    "BiquadSection",
    "BiquadCascade",
    "FrameCoeffs",
    "FramewiseTape",
    "biquad_from_unconstrained",
    "sections_from_unconstrained",
    "sections_from_unconstrained_vjp",
    "cascade_to_direct",
    "cascade_to_direct_vjp",
    "expand_frame_cascades",
    "expand_frame_cascades_vjp",
    "synthesis_window",
    "window_sum",
    "framewise_lpc",
    "framewise_lpc_forward",
    "framewise_lpc_vjp",
    "samplewise_lpc",
]


@dataclass(frozen=True)
class BiquadSection:
    """Denominator 1 + eta1 z^-1 + eta2 z^-2 with both roots inside the unit circle."""

    eta1: float
    eta2: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta1) and math.isfinite(self.eta2)):
            raise ValueError("biquad coefficients must be finite")
        if not (abs(self.eta2) < 1.0 and abs(self.eta1) < 1.0 + self.eta2):
            raise ValueError(
                f"({self.eta1}, {self.eta2}) lies outside the stability triangle"
            )

    def poles(self) -> np.ndarray:
        return np.roots([1.0, self.eta1, self.eta2])


def biquad_from_unconstrained(x1: float, x2: float) -> BiquadSection:
    """Squash two arbitrary reals into a stable section.

    eta1 = 2 tanh(x1); eta2 = ((2 - |eta1|) tanh(x2) + |eta1|) / 2. The map
    is smooth and fills the open triangle; tanh outputs are clipped a hair
    inside +-1 so float saturation cannot land a pole on the circle.
    """
    if not (math.isfinite(x1) and math.isfinite(x2)):
        raise ValueError("unconstrained biquad inputs must be finite")
    t1 = min(max(math.tanh(x1), -_TANH_CLIP), _TANH_CLIP)
    t2 = min(max(math.tanh(x2), -_TANH_CLIP), _TANH_CLIP)
    eta1 = 2.0 * t1
    eta2 = ((2.0 - abs(eta1)) * t2 + abs(eta1)) / 2.0
    return BiquadSection(eta1, eta2)


def sections_from_unconstrained(raw: np.ndarray) -> np.ndarray:
    """Vectorized squashing map; raw and result are (..., n_sections, 2)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 2:
        raise ValueError("last axis must hold (x1, x2) pairs")
    if not np.all(np.isfinite(raw)):
        raise ValueError("unconstrained biquad inputs must be finite")
    t = np.clip(np.tanh(raw), -_TANH_CLIP, _TANH_CLIP)
    eta1 = 2.0 * t[..., 0]
    a1 = np.abs(eta1)
    eta2 = ((2.0 - a1) * t[..., 1] + a1) / 2.0
    return np.stack([eta1, eta2], axis=-1)


def sections_from_unconstrained_vjp(raw: np.ndarray, dl_deta: np.ndarray) -> np.ndarray:
    """Backward pass of the squashing map."""
    raw = np.asarray(raw, dtype=np.float64)
    t = np.tanh(raw)
    clipped = np.abs(t) > _TANH_CLIP
    t = np.clip(t, -_TANH_CLIP, _TANH_CLIP)
    dtanh = np.where(clipped, 0.0, 1.0 - t * t)

    t1, t2 = t[..., 0], t[..., 1]
    eta1 = 2.0 * t1
    a1 = np.abs(eta1)

    deta1_dx1 = 2.0 * dtanh[..., 0]
    deta2_dx2 = (2.0 - a1) * dtanh[..., 1] / 2.0
    deta2_deta1 = np.sign(eta1) * (1.0 - t2) / 2.0

    g1 = dl_deta[..., 0] * deta1_dx1 + dl_deta[..., 1] * deta2_deta1 * deta1_dx1
    g2 = dl_deta[..., 1] * deta2_dx2
    return np.stack([g1, g2], axis=-1)


def _as_eta_array(sections) -> np.ndarray:
    if isinstance(sections, np.ndarray):
        etas = np.asarray(sections, dtype=np.float64)
        if etas.ndim != 2 or etas.shape[-1] != 2:
            raise ValueError("section array must be (n_sections, 2)")
        return etas
    return np.array([[s.eta1, s.eta2] for s in sections], dtype=np.float64)


def _poly_product(etas: np.ndarray) -> np.ndarray:
    """Product of (1 + e1 z^-1 + e2 z^-2) factors per frame.

    etas is (F, S, 2); returns full coefficient rows (F, 2S + 1) with the
    leading 1 included.
    """
    f, s, _ = etas.shape
    p = np.zeros((f, 1))
    p[:, 0] = 1.0
    for i in range(s):
        e1 = etas[:, i, 0:1]
        e2 = etas[:, i, 1:2]
        q = np.zeros((f, p.shape[1] + 2))
        q[:, :-2] += p
        q[:, 1:-1] += e1 * p
        q[:, 2:] += e2 * p
        p = q
    return p


def _polymul_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros((p.shape[0], p.shape[1] + q.shape[1] - 1))
    for i in range(q.shape[1]):
        out[:, i : i + p.shape[1]] += p * q[:, i : i + 1]
    return out


def expand_frame_cascades(etas: np.ndarray) -> np.ndarray:
    """Direct-form a1..aM for every frame; etas is (F, S, 2), result (F, 2S)."""
    etas = np.asarray(etas, dtype=np.float64)
    if etas.ndim != 3 or etas.shape[-1] != 2:
        raise ValueError("etas must be (n_frames, n_sections, 2)")
    if etas.shape[1] == 0:
        raise ValueError("need at least one section")
    return _poly_product(etas)[:, 1:]


def expand_frame_cascades_vjp(etas: np.ndarray, dl_da: np.ndarray) -> np.ndarray:
    """Backward pass of the polynomial product, via prefix/suffix products.

    The derivative of the product w.r.t. one factor is the product of all
    the others, so each section's gradient is a correlation of the output
    gradient with that complementary polynomial.
    """
    etas = np.asarray(etas, dtype=np.float64)
    f, s, _ = etas.shape
    factors = [
        np.concatenate([np.ones((f, 1)), etas[:, i, :]], axis=1) for i in range(s)
    ]

    prefix = [np.ones((f, 1))]
    for i in range(s):
        prefix.append(_polymul_rows(prefix[-1], factors[i]))
    suffix = [np.ones((f, 1))]
    for i in reversed(range(s)):
        suffix.append(_polymul_rows(factors[i], suffix[-1]))
    suffix.reverse()

    # gradient w.r.t. the full polynomial rows; the leading 1 is constant
    dl_dp = np.concatenate([np.zeros((f, 1)), dl_da], axis=1)
    grad = np.empty((f, s, 2))
    for i in range(s):
        rest = _polymul_rows(prefix[i], suffix[i + 1])  # (F, 2S - 1)
        w = rest.shape[1]
        grad[:, i, 0] = np.einsum("fj,fj->f", dl_dp[:, 1 : 1 + w], rest)
        grad[:, i, 1] = np.einsum("fj,fj->f", dl_dp[:, 2 : 2 + w], rest)
    return grad


def cascade_to_direct(sections) -> np.ndarray:
    """Expand a list of sections into direct-form a1..aM."""
    etas = _as_eta_array(sections)
    if etas.shape[0] == 0:
        raise ValueError("need at least one section")
    return expand_frame_cascades(etas[None])[0]


def cascade_to_direct_vjp(sections, dl_da: np.ndarray) -> np.ndarray:
    """Gradient of the expanded coefficients w.r.t. every (eta1, eta2)."""
    etas = _as_eta_array(sections)
    return expand_frame_cascades_vjp(etas[None], np.asarray(dl_da)[None])[0]


@dataclass(frozen=True)
class BiquadCascade:
    """Sections plus their expanded direct-form coefficients."""

    sections: tuple
    expanded: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sections", tuple(self.sections))
        object.__setattr__(self, "expanded", cascade_to_direct(self.sections))

    @property
    def order(self) -> int:
        return 2 * len(self.sections)


@dataclass
class FrameCoeffs:
    """Per-frame direct-form coefficients for one filtering path.

    Frame k's coefficients apply from sample k * hop; the synthesis window
    spans ``win_length`` samples from there.
    """

    coeffs: np.ndarray
    hop: int
    win_length: int

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2:
            raise ValueError("coeffs must be (n_frames, order)")
        if self.hop <= 0:
            raise ValueError("hop must be positive")
        if self.win_length < self.hop:
            raise ValueError("window length must be at least the hop")

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]


def synthesis_window(win_length: int) -> np.ndarray:
    # periodic Hann: exact constant overlap-add at hop = win_length / 4
    return get_window("hann", win_length, fftbins=True)


def window_sum(window: np.ndarray, hop: int, n: int, n_frames: int) -> np.ndarray:
    """Sum of the shifted synthesis windows over the actual frame grid."""
    out = np.zeros(n)
    w = len(window)
    for k in range(n_frames):
        lo = k * hop
        if lo >= n:
            break
        hi = min(lo + w, n)
        out[lo:hi] += window[: hi - lo]
    return out


@dataclass
class FramewiseTape:
    """Saved forward state for the frame-wise backward pass."""

    source: np.ndarray
    gain: np.ndarray
    frames: FrameCoeffs
    window: np.ndarray
    analysis_window: np.ndarray | None
    inv_wsum: np.ndarray
    frame_outputs: np.ndarray
    n: int


def _frame_count(n: int, hop: int) -> int:
    return -(-n // hop)


def framewise_lpc_forward(
    source,
    gain,
    frames: FrameCoeffs,
    analysis_window: np.ndarray | None = None,
    window: np.ndarray | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, FramewiseTape]:
    """Overlap-add time-varying LPC.

    Each frame of gain-scaled source is filtered independently from zero
    state, multiplied by the synthesis window, and summed; the result is
    divided by the window sum over the actual frame grid so identity
    filtering preserves amplitude. Edge frames are zero-padded on the
    right. Returns the output and the tape the backward pass needs.
    """
    source = np.asarray(source, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if source.shape != gain.shape or source.ndim != 1:
        raise ValueError("source and gain must be equal-length 1-d arrays")
    n = source.shape[0]
    hop = frames.hop
    wlen = frames.win_length
    needed = _frame_count(n, hop)
    if frames.n_frames < needed:
        raise ValueError(
            f"frame grid shorter than signal: {frames.n_frames} frames, need {needed}"
        )
    if window is None:
        window = synthesis_window(wlen)
    if len(window) != wlen:
        raise ValueError("synthesis window length must match win_length")
    if analysis_window is not None and len(analysis_window) != wlen:
        raise ValueError("analysis window length must match win_length")

    x = source * gain

    def _run(k: int) -> np.ndarray:
        lo = k * hop
        hi = min(lo + wlen, n)
        seg = np.zeros(wlen)
        seg[: hi - lo] = x[lo:hi]
        if analysis_window is not None:
            seg *= analysis_window
        return lfilter_allpole(seg, frames.coeffs[k])

    if workers > 1 and needed > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run, range(needed)))
    else:
        outs = [_run(k) for k in range(needed)]
    frame_outputs = np.stack(outs) if needed else np.zeros((0, wlen))

    acc = np.zeros(n)
    for k in range(needed):
        lo = k * hop
        hi = min(lo + wlen, n)
        acc[lo:hi] += frame_outputs[k, : hi - lo] * window[: hi - lo]

    wsum = window_sum(window, hop, n, needed)
    inv = np.zeros(n)
    np.divide(1.0, wsum, out=inv, where=wsum > _WSUM_FLOOR)
    out = acc * inv

    tape = FramewiseTape(
        source=source,
        gain=gain,
        frames=frames,
        window=window,
        analysis_window=analysis_window,
        inv_wsum=inv,
        frame_outputs=frame_outputs,
        n=n,
    )
    return out, tape


def framewise_lpc(
    source,
    gain,
    frames: FrameCoeffs,
    analysis_window: np.ndarray | None = None,
    window: np.ndarray | None = None,
    workers: int = 1,
) -> np.ndarray:
    out, _ = framewise_lpc_forward(
        source, gain, frames, analysis_window, window, workers
    )
    return out


def framewise_lpc_vjp(
    tape: FramewiseTape,
    dl_dout,
    need_source: bool = True,
    need_gain: bool = True,
    need_coeffs: bool = True,
) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]:
    """Gradients w.r.t. source, gain, and the per-frame direct-form coefficients."""
    dl_dout = np.asarray(dl_dout, dtype=np.float64)
    if dl_dout.shape != (tape.n,):
        raise ValueError("output gradient length mismatch")
    frames = tape.frames
    hop, wlen, n = frames.hop, frames.win_length, tape.n
    needed = tape.frame_outputs.shape[0]

    g = dl_dout * tape.inv_wsum
    dl_dx = np.zeros(n) if (need_source or need_gain) else None
    dl_dcoeffs = np.zeros_like(frames.coeffs) if need_coeffs else None

    for k in range(needed):
        lo = k * hop
        hi = min(lo + wlen, n)
        gy = np.zeros(wlen)
        gy[: hi - lo] = g[lo:hi] * tape.window[: hi - lo]
        if need_coeffs:
            dl_dcoeffs[k] = vjp_coeffs(gy, tape.frame_outputs[k], frames.coeffs[k])
        if dl_dx is not None:
            gseg = vjp_input(gy, frames.coeffs[k])
            if tape.analysis_window is not None:
                gseg = gseg * tape.analysis_window
            dl_dx[lo:hi] += gseg[: hi - lo]

    dl_dsource = dl_dx * tape.gain if need_source else None
    dl_dgain = dl_dx * tape.source if need_gain else None
    return dl_dsource, dl_dgain, dl_dcoeffs


def _interp_coeff_rows(frames: FrameCoeffs, n: int) -> np.ndarray:
    """Per-sample coefficients, linearly interpolated between frame centers."""
    center = frames.win_length // 2
    f = frames.n_frames
    pos = (np.arange(n) - center) / frames.hop
    k = np.floor(pos).astype(np.int64)
    frac = pos - k  # in [0, 1); outside the anchor range k0 == k1, so it cancels
    k0 = np.clip(k, 0, f - 1)
    k1 = np.clip(k + 1, 0, f - 1)
    c = frames.coeffs
    return (1.0 - frac)[:, None] * c[k0] + frac[:, None] * c[k1]


def samplewise_lpc(source, gain, frames: FrameCoeffs) -> np.ndarray:
    """Sample-by-sample recursion with per-sample interpolated coefficients.

    The conventional (strictly sequential) time-varying LPC; serves as the
    ground-truth reference for the frame-wise approximation and is not
    differentiable. Interpolating direct-form coefficients between two
    stable filters is not guaranteed stable, so non-finite output raises.
    """
    source = np.asarray(source, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if source.shape != gain.shape or source.ndim != 1:
        raise ValueError("source and gain must be equal-length 1-d arrays")
    n = source.shape[0]
    if frames.n_frames < _frame_count(n, frames.hop):
        raise ValueError("frame grid shorter than signal")

    x = source * gain
    coeff_rows = _interp_coeff_rows(frames, n)
    m = coeff_rows.shape[1]
    state = np.zeros(m)
    out = np.empty(n)
    for i in range(n):
        s = x[i] - coeff_rows[i] @ state
        out[i] = s
        state[1:] = state[:-1]
        state[0] = s
    finite = np.isfinite(out)
    if not finite.all():
        raise FilterOverflowError(int(np.argmin(finite)))
    return out
