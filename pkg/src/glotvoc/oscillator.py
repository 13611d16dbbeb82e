"""Phase-accumulator wavetable source with unvoiced gating.

The oscillator integrates a gated instantaneous frequency into an
unwrapped phase, then reads the pulse table with bilinear interpolation:
the fractional phase picks the column (with circular wrap) and the
fractional table position picks the pair of adjacent rows. Only the two
neighbouring rows ever contribute, never a weighted sum over the whole
table. A band-limited pulse train built by additive synthesis is provided
as an alternative harmonic source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glottal import Wavetables

__all__ = [
    "ControlTrack",
    "PhaseTrack",
    "gate_frequency",
    "accumulate_phase",
    "accumulate_phase_vjp",
    "wavetable_lookup",
    "wavetable_lookup_vjp",
    "pulse_train",
]


@dataclass
class ControlTrack:
    """Per-sample control signals, clamped to their valid ranges on entry.

    freq is normalized instantaneous frequency in [0, 0.5]; voicing and
    rd_index live in [0, 1]; both gains are non-negative.
    """

    freq: np.ndarray
    voicing: np.ndarray
    rd_index: np.ndarray
    harm_gain: np.ndarray
    noise_gain: np.ndarray

    def __post_init__(self) -> None:
        tracks = {}
        n = None
        for name in ("freq", "voicing", "rd_index", "harm_gain", "noise_gain"):
            t = np.asarray(getattr(self, name), dtype=np.float64)
            if t.ndim != 1:
                raise ValueError(f"{name} must be 1-d")
            if n is None:
                n = t.shape[0]
            elif t.shape[0] != n:
                raise ValueError("all control tracks must have equal length")
            tracks[name] = t
        self.freq = np.clip(tracks["freq"], 0.0, 0.5)
        self.voicing = np.clip(tracks["voicing"], 0.0, 1.0)
        self.rd_index = np.clip(tracks["rd_index"], 0.0, 1.0)
        self.harm_gain = np.maximum(tracks["harm_gain"], 0.0)
        self.noise_gain = np.maximum(tracks["noise_gain"], 0.0)

    def __len__(self) -> int:
        return self.freq.shape[0]


@dataclass
class PhaseTrack:
    """Unwrapped accumulated phase; monotone non-decreasing for non-negative input."""

    phi: np.ndarray


def gate_frequency(freq, voicing) -> np.ndarray:
    """Elementwise product: voicing of zero freezes the oscillator."""
    freq = np.asarray(freq, dtype=np.float64)
    voicing = np.asarray(voicing, dtype=np.float64)
    if freq.shape != voicing.shape:
        raise ValueError("frequency and voicing tracks must have equal length")
    return freq * voicing


def accumulate_phase(f_hat, offset=None) -> PhaseTrack:
    """Running sum of the gated frequency, plus an optional per-sample offset.

    Accumulated in double precision and left unwrapped; the lookup reduces
    modulo one period, so hour-long tracks do not lose phase accuracy to
    repeated wrapping.
    """
    f_hat = np.asarray(f_hat, dtype=np.float64)
    phi = np.cumsum(f_hat)
    if offset is not None:
        offset = np.asarray(offset, dtype=np.float64)
        if offset.shape != phi.shape:
            raise ValueError("offset track must match the frequency track length")
        phi = phi + offset
    return PhaseTrack(phi=phi)


def accumulate_phase_vjp(dl_dphi) -> np.ndarray:
    """Adjoint of the running sum: a reversed cumulative sum."""
    dl_dphi = np.asarray(dl_dphi, dtype=np.float64)
    return np.cumsum(dl_dphi[::-1])[::-1]


def _lookup_cells(phi, rd_index, tables: Wavetables):
    k, l = tables.data.shape
    phi = np.asarray(phi.phi if isinstance(phi, PhaseTrack) else phi, dtype=np.float64)
    tau = np.asarray(rd_index, dtype=np.float64)
    if phi.shape != tau.shape:
        raise ValueError("phase and table-position tracks must have equal length")
    if k == 0 or l == 0:
        raise ValueError("empty wavetables")

    c = np.mod(phi, 1.0) * l
    j0 = np.minimum(c.astype(np.int64), l - 1)  # mod can round up to 1.0
    q = c - j0
    j1 = j0 + 1
    j1 = np.where(j1 == l, 0, j1)  # circular wrap: column L reads column 1

    r = np.clip(tau, 0.0, 1.0) * (k - 1)
    # top boundary folds into the last cell so the blend never indexes past
    # the final row (and its gradient uses that cell's slope)
    i0 = np.minimum(r.astype(np.int64), max(k - 2, 0))
    p = r - i0
    i1 = np.minimum(i0 + 1, k - 1)
    return j0, j1, q, i0, i1, p


def wavetable_lookup(phi, rd_index, tables: Wavetables) -> np.ndarray:
    """Bilinear read of the pulse table.

    Column coordinate is the fractional phase scaled by the row length
    (circular in the last cell); row coordinate is rd_index * (K - 1).
    Output is a convex blend of four samples from two adjacent rows.
    """
    j0, j1, q, i0, i1, p = _lookup_cells(phi, rd_index, tables)
    d = tables.data
    d00 = d[i0, j0]
    d01 = d[i0, j1]
    d10 = d[i1, j0]
    d11 = d[i1, j1]
    return (1.0 - p) * ((1.0 - q) * d00 + q * d01) + p * ((1.0 - q) * d10 + q * d11)


def wavetable_lookup_vjp(
    phi, rd_index, tables: Wavetables, dl_dout
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the lookup w.r.t. phase and table position.

    Within an interpolation cell the lookup is bilinear, so the slopes are
    exact; on cell boundaries the slope of the cell that the forward pass
    indexed is used.
    """
    j0, j1, q, i0, i1, p = _lookup_cells(phi, rd_index, tables)
    dl_dout = np.asarray(dl_dout, dtype=np.float64)
    d = tables.data
    k, l = d.shape
    d00 = d[i0, j0]
    d01 = d[i0, j1]
    d10 = d[i1, j0]
    d11 = d[i1, j1]
    dl_dphi = dl_dout * l * ((1.0 - p) * (d01 - d00) + p * (d11 - d10))
    dl_dtau = dl_dout * (k - 1) * ((1.0 - q) * (d10 - d00) + q * (d11 - d01))
    return dl_dphi, dl_dtau


def pulse_train(f_hat, sample_rate: float | None = None) -> np.ndarray:
    """Band-limited pulse train: unit cosines at every harmonic below Nyquist.

    The sum is normalized by the instantaneous harmonic count so loudness
    does not jump as harmonics enter the band. Zero wherever the gated
    frequency is zero. Pass sample_rate to hand in the track in Hz instead
    of normalized frequency.
    """
    f = np.asarray(f_hat, dtype=np.float64)
    if sample_rate is not None:
        f = f / float(sample_rate)
    if np.any(f < 0.0):
        raise ValueError("gated frequency must be non-negative")

    phi = np.cumsum(f)
    out = np.zeros_like(f)
    active = f > 0.0
    if not active.any():
        return out

    counts = np.zeros_like(f)
    counts[active] = np.ceil(0.5 / f[active]) - 1.0  # harmonics strictly below 0.5
    m_top = int(counts.max())
    two_pi_phi = 2.0 * np.pi * phi
    for m in range(1, m_top + 1):
        mask = counts >= m
        out[mask] += np.cos(m * two_pi_phi[mask])
    nz = counts > 0.0
    out[nz] /= counts[nz]
    out[~nz] = 0.0
    return out
