"""Full synthesis path: harmonic wavetable branch plus filtered noise branch.

Frame-rate control tracks are linearly upsampled to audio rate. The
harmonic branch reads the pulse table at the accumulated gated phase and
runs it through the frame-wise harmonic filter; the noise branch shapes
gain-scaled Gaussian noise with its own frame-wise filter; the output is
their sum. Every continuous parameter has a hand-written adjoint so a
loss on the rendered audio can be pushed back to the frame-rate tracks,
the unconstrained filter inputs, and an optional slowly varying phase
offset track.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .filters import (
    FrameCoeffs,
    FramewiseTape,
    expand_frame_cascades,
    expand_frame_cascades_vjp,
    framewise_lpc_forward,
    framewise_lpc_vjp,
    sections_from_unconstrained,
    sections_from_unconstrained_vjp,
    synthesis_window,
)
from .glottal import Wavetables
from .oscillator import (
    PhaseTrack,
    accumulate_phase,
    accumulate_phase_vjp,
    gate_frequency,
    wavetable_lookup,
    wavetable_lookup_vjp,
)

DEFAULT_SAMPLE_RATE = 24000
DEFAULT_HOP = 120
DEFAULT_TAU_STRIDE = 10
OFFSET_RATE_HZ = 20

PARAMS_SCHEMA_VERSION = 1

__all__ = [
    "DEFAULT_SAMPLE_RATE",
    "DEFAULT_HOP",
    "DEFAULT_TAU_STRIDE",
    "OFFSET_RATE_HZ",
    "SynthParams",
    "RenderOutput",
    "RenderTape",
    "ParamGrads",
    "upsample_linear",
    "upsample_linear_vjp",
    "gaussian_noise",
    "render",
    "render_with_offset",
    "render_forward",
    "render_vjp",
    "offset_hop",
    "save_params",
    "load_params",
    "read_wav",
    "write_wav",
]


def upsample_linear(track, hop: int, n_out: int | None = None) -> np.ndarray:
    """Linear interpolation of frame values anchored at multiples of hop.

    Past the last anchor the value is held constant. Default output length
    is len(track) * hop, i.e. the rendered clip length.
    """
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 1 or track.shape[0] == 0:
        raise ValueError("track must be a non-empty 1-d array")
    f = track.shape[0]
    if n_out is None:
        n_out = f * hop
    pos = np.arange(n_out) / hop
    k = np.minimum(pos.astype(np.int64), f - 1)
    frac = np.where(k < f - 1, pos - k, 0.0)
    k_next = np.minimum(k + 1, f - 1)
    return (1.0 - frac) * track[k] + frac * track[k_next]


def upsample_linear_vjp(dl_dout, hop: int, n_track: int) -> np.ndarray:
    """Adjoint of the linear upsampling: scatter the weights back to anchors."""
    dl_dout = np.asarray(dl_dout, dtype=np.float64)
    n_out = dl_dout.shape[0]
    pos = np.arange(n_out) / hop
    k = np.minimum(pos.astype(np.int64), n_track - 1)
    frac = np.where(k < n_track - 1, pos - k, 0.0)
    k_next = np.minimum(k + 1, n_track - 1)
    grad = np.zeros(n_track)
    np.add.at(grad, k, dl_dout * (1.0 - frac))
    np.add.at(grad, k_next, dl_dout * frac)
    return grad


def gaussian_noise(n: int, seed: int) -> np.ndarray:
    """Unit-variance Gaussian noise from a counter-based generator.

    Philox keys the stream with the seed, so renders are reproducible and
    independent of batch/evaluation order.
    """
    return np.random.Generator(np.random.Philox(key=seed)).standard_normal(n)


@dataclass
class SynthParams:
    """Frame-rate synthesis controls for one clip.

    freq, voicing, harm_gain, noise_gain have one value per hop;
    rd_index runs at the reduced rate (one value per tau_stride frames).
    harm_biquads / noise_biquads are unconstrained (n_frames, M/2, 2)
    section inputs; the squashing map makes the filters stable for any
    values. Bounded fields are clamped at ingestion.
    """

    freq: np.ndarray
    voicing: np.ndarray
    harm_gain: np.ndarray
    noise_gain: np.ndarray
    rd_index: np.ndarray
    harm_biquads: np.ndarray
    noise_biquads: np.ndarray
    hop: int = DEFAULT_HOP
    sample_rate: int = DEFAULT_SAMPLE_RATE
    tau_stride: int = DEFAULT_TAU_STRIDE
    win_length: int | None = None

    def __post_init__(self) -> None:
        self.freq = np.clip(np.asarray(self.freq, dtype=np.float64), 0.0, 0.5)
        self.voicing = np.clip(np.asarray(self.voicing, dtype=np.float64), 0.0, 1.0)
        self.harm_gain = np.maximum(np.asarray(self.harm_gain, dtype=np.float64), 0.0)
        self.noise_gain = np.maximum(
            np.asarray(self.noise_gain, dtype=np.float64), 0.0
        )
        self.rd_index = np.clip(np.asarray(self.rd_index, dtype=np.float64), 0.0, 1.0)
        self.harm_biquads = np.asarray(self.harm_biquads, dtype=np.float64)
        self.noise_biquads = np.asarray(self.noise_biquads, dtype=np.float64)

        f = self.freq.shape[0]
        for name in ("voicing", "harm_gain", "noise_gain"):
            if getattr(self, name).shape != (f,):
                raise ValueError(f"{name} must match the frame count {f}")
        for name in ("harm_biquads", "noise_biquads"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[0] != f or b.shape[2] != 2:
                raise ValueError(f"{name} must be (n_frames, n_sections, 2)")
        if self.harm_biquads.shape != self.noise_biquads.shape:
            raise ValueError("both filter paths must share the section count")
        if self.rd_index.ndim != 1 or self.rd_index.shape[0] == 0:
            raise ValueError("rd_index must be a non-empty 1-d array")
        if self.hop <= 0 or self.tau_stride <= 0 or self.sample_rate <= 0:
            raise ValueError("hop, tau_stride, and sample_rate must be positive")
        if self.win_length is None:
            self.win_length = 4 * self.hop
        if self.win_length < self.hop:
            raise ValueError("win_length must be at least the hop")

    @property
    def n_frames(self) -> int:
        return self.freq.shape[0]

    @property
    def n_samples(self) -> int:
        return self.n_frames * self.hop

    @property
    def n_sections(self) -> int:
        return self.harm_biquads.shape[1]

    @property
    def lpc_order(self) -> int:
        return 2 * self.n_sections

    def copy(self) -> "SynthParams":
        return SynthParams(
            freq=self.freq.copy(),
            voicing=self.voicing.copy(),
            harm_gain=self.harm_gain.copy(),
            noise_gain=self.noise_gain.copy(),
            rd_index=self.rd_index.copy(),
            harm_biquads=self.harm_biquads.copy(),
            noise_biquads=self.noise_biquads.copy(),
            hop=self.hop,
            sample_rate=self.sample_rate,
            tau_stride=self.tau_stride,
            win_length=self.win_length,
        )


@dataclass
class RenderOutput:
    """Rendered audio and its two stems; audio is exactly their sum."""

    audio: np.ndarray
    harmonic: np.ndarray
    noise: np.ndarray
    phase: PhaseTrack


@dataclass
class RenderTape:
    """Saved intermediates for the full backward pass."""

    params: SynthParams
    tables: Wavetables
    freq_n: np.ndarray
    voicing_n: np.ndarray
    harm_gain_n: np.ndarray
    noise_gain_n: np.ndarray
    tau_n: np.ndarray
    f_hat: np.ndarray
    phi: np.ndarray
    voiced_mask: np.ndarray
    harm_etas: np.ndarray
    noise_etas: np.ndarray
    harm_tape: FramewiseTape
    noise_tape: FramewiseTape
    white: np.ndarray
    offset_points: np.ndarray | None
    offset_hop: int


@dataclass
class ParamGrads:
    """Gradients of a scalar loss w.r.t. every continuous parameter."""

    freq: np.ndarray | None = None
    voicing: np.ndarray | None = None
    harm_gain: np.ndarray | None = None
    noise_gain: np.ndarray | None = None
    rd_index: np.ndarray | None = None
    harm_biquads: np.ndarray | None = None
    noise_biquads: np.ndarray | None = None
    offset: np.ndarray | None = None


def offset_hop(sample_rate: int) -> int:
    """Samples per phase-offset point at the fixed 20 Hz offset rate."""
    return max(1, round(sample_rate / OFFSET_RATE_HZ))


def render_forward(
    params: SynthParams,
    tables: Wavetables,
    noise_seed: int = 0,
    offset_points=None,
    workers: int = 1,
) -> tuple[RenderOutput, RenderTape]:
    """Render and keep the tape for the backward pass."""
    t = params.hop
    n = params.n_samples
    w = params.win_length

    freq_n = upsample_linear(params.freq, t, n)
    voicing_n = upsample_linear(params.voicing, t, n)
    harm_gain_n = upsample_linear(params.harm_gain, t, n)
    noise_gain_n = upsample_linear(params.noise_gain, t, n)
    tau_n = upsample_linear(params.rd_index, params.tau_stride * t, n)

    f_hat = gate_frequency(freq_n, voicing_n)
    off_hop = offset_hop(params.sample_rate)
    offset_n = None
    if offset_points is not None:
        offset_points = np.asarray(offset_points, dtype=np.float64)
        needed = -(-n // off_hop)
        if offset_points.shape[0] < needed:
            raise ValueError(
                f"offset track too short: {offset_points.shape[0]} points, "
                f"need {needed} at {OFFSET_RATE_HZ} Hz"
            )
        offset_n = upsample_linear(offset_points, off_hop, n)
    phase = accumulate_phase(f_hat, offset_n)
    phi = phase.phi

    # a frozen oscillator must stay silent, not hold the table sample at the
    # frozen phase: otherwise unvoiced regions leak DC through the filter
    voiced_mask = f_hat > 0.0
    source = np.where(voiced_mask, wavetable_lookup(phi, tau_n, tables), 0.0)

    harm_etas = sections_from_unconstrained(params.harm_biquads)
    noise_etas = sections_from_unconstrained(params.noise_biquads)
    harm_frames = FrameCoeffs(expand_frame_cascades(harm_etas), t, w)
    noise_frames = FrameCoeffs(expand_frame_cascades(noise_etas), t, w)
    window = synthesis_window(w)

    harmonic, harm_tape = framewise_lpc_forward(
        source, harm_gain_n, harm_frames, window=window, workers=workers
    )
    white = gaussian_noise(n, noise_seed)
    noise, noise_tape = framewise_lpc_forward(
        noise_gain_n * white, np.ones(n), noise_frames, window=window, workers=workers
    )
    audio = harmonic + noise

    out = RenderOutput(audio=audio, harmonic=harmonic, noise=noise, phase=phase)
    tape = RenderTape(
        params=params,
        tables=tables,
        freq_n=freq_n,
        voicing_n=voicing_n,
        harm_gain_n=harm_gain_n,
        noise_gain_n=noise_gain_n,
        tau_n=tau_n,
        f_hat=f_hat,
        phi=phi,
        voiced_mask=voiced_mask,
        harm_etas=harm_etas,
        noise_etas=noise_etas,
        harm_tape=harm_tape,
        noise_tape=noise_tape,
        white=white,
        offset_points=offset_points,
        offset_hop=off_hop,
    )
    return out, tape


def render(
    params: SynthParams, tables: Wavetables, noise_seed: int = 0, workers: int = 1
) -> RenderOutput:
    """Render a clip; deterministic for a fixed seed."""
    out, _ = render_forward(params, tables, noise_seed, workers=workers)
    return out


def render_with_offset(
    params: SynthParams,
    tables: Wavetables,
    offset_track,
    noise_seed: int = 0,
    workers: int = 1,
) -> RenderOutput:
    """Render with a slowly varying additive phase offset (20 Hz track).

    A zero track reproduces ``render`` bit for bit; constant offsets are
    equivalent modulo one period.
    """
    out, _ = render_forward(
        params, tables, noise_seed, offset_points=offset_track, workers=workers
    )
    return out


_ALL_GRADS = (
    "freq",
    "voicing",
    "harm_gain",
    "noise_gain",
    "rd_index",
    "harm_biquads",
    "noise_biquads",
    "offset",
)


def render_vjp(
    tape: RenderTape,
    dl_daudio,
    wanted: tuple[str, ...] | None = None,
    stop_pitch_grads: bool = False,
) -> ParamGrads:
    """Push a loss gradient on the audio back to every requested parameter.

    ``wanted`` limits the work to the named fields (default: all).
    ``stop_pitch_grads`` zeroes the path from the harmonic source into
    freq and voicing, mirroring the training trick of detaching the
    oscillator from the pitch controls.
    """
    dl_daudio = np.asarray(dl_daudio, dtype=np.float64)
    p = tape.params
    t = p.hop
    f = p.n_frames
    if wanted is None:
        wanted = _ALL_GRADS
    grads = ParamGrads()

    need_source_path = any(
        k in wanted for k in ("freq", "voicing", "rd_index", "offset")
    )
    need_harm = need_source_path or "harm_gain" in wanted or "harm_biquads" in wanted
    need_noise = "noise_gain" in wanted or "noise_biquads" in wanted

    if need_harm:
        dl_dsrc, dl_dhg, dl_dha = framewise_lpc_vjp(
            tape.harm_tape,
            dl_daudio,
            need_source=need_source_path,
            need_gain="harm_gain" in wanted,
            need_coeffs="harm_biquads" in wanted,
        )
        if "harm_gain" in wanted:
            grads.harm_gain = upsample_linear_vjp(dl_dhg, t, f)
        if "harm_biquads" in wanted:
            dl_detas = expand_frame_cascades_vjp(tape.harm_etas, dl_dha)
            grads.harm_biquads = sections_from_unconstrained_vjp(
                p.harm_biquads, dl_detas
            )
        if need_source_path:
            dl_dsrc = np.where(tape.voiced_mask, dl_dsrc, 0.0)
            dl_dphi, dl_dtau = wavetable_lookup_vjp(
                tape.phi, tape.tau_n, tape.tables, dl_dsrc
            )
            if "rd_index" in wanted:
                grads.rd_index = upsample_linear_vjp(
                    dl_dtau, p.tau_stride * t, p.rd_index.shape[0]
                )
            if "offset" in wanted and tape.offset_points is not None:
                grads.offset = upsample_linear_vjp(
                    dl_dphi, tape.offset_hop, tape.offset_points.shape[0]
                )
            if "freq" in wanted or "voicing" in wanted:
                if stop_pitch_grads:
                    if "freq" in wanted:
                        grads.freq = np.zeros(f)
                    if "voicing" in wanted:
                        grads.voicing = np.zeros(f)
                else:
                    dl_df_hat = accumulate_phase_vjp(dl_dphi)
                    if "freq" in wanted:
                        grads.freq = upsample_linear_vjp(
                            dl_df_hat * tape.voicing_n, t, f
                        )
                    if "voicing" in wanted:
                        grads.voicing = upsample_linear_vjp(
                            dl_df_hat * tape.freq_n, t, f
                        )

    if need_noise:
        dl_dnin, _, dl_dna = framewise_lpc_vjp(
            tape.noise_tape,
            dl_daudio,
            need_source="noise_gain" in wanted,
            need_gain=False,
            need_coeffs="noise_biquads" in wanted,
        )
        if "noise_gain" in wanted:
            grads.noise_gain = upsample_linear_vjp(dl_dnin * tape.white, t, f)
        if "noise_biquads" in wanted:
            dl_detas = expand_frame_cascades_vjp(tape.noise_etas, dl_dna)
            grads.noise_biquads = sections_from_unconstrained_vjp(
                p.noise_biquads, dl_detas
            )
    return grads


# ---------------------------------------------------------------------------
# parameter file and audio i/o


def save_params(params: SynthParams, path, table_ref: str | None = None) -> None:
    """Write the parameter file (JSON, numbers as decimal doubles)."""
    doc = {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "sample_rate": params.sample_rate,
        "hop": params.hop,
        "lpc_order": params.lpc_order,
        "tau_stride": params.tau_stride,
        "table_ref": table_ref,
        "freq": params.freq.tolist(),
        "voicing": params.voicing.tolist(),
        "harm_gain": params.harm_gain.tolist(),
        "noise_gain": params.noise_gain.tolist(),
        "rd_index": params.rd_index.tolist(),
        "harm_biquads": params.harm_biquads.tolist(),
        "noise_biquads": params.noise_biquads.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_params(path) -> tuple[SynthParams, str | None]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != PARAMS_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported parameter schema version {version!r}")
    params = SynthParams(
        freq=np.array(doc["freq"], dtype=np.float64),
        voicing=np.array(doc["voicing"], dtype=np.float64),
        harm_gain=np.array(doc["harm_gain"], dtype=np.float64),
        noise_gain=np.array(doc["noise_gain"], dtype=np.float64),
        rd_index=np.array(doc["rd_index"], dtype=np.float64),
        harm_biquads=np.array(doc["harm_biquads"], dtype=np.float64),
        noise_biquads=np.array(doc["noise_biquads"], dtype=np.float64),
        hop=int(doc["hop"]),
        sample_rate=int(doc["sample_rate"]),
        tau_stride=int(doc["tau_stride"]),
    )
    if params.lpc_order != int(doc["lpc_order"]):
        raise ValueError(f"{path}: lpc_order field disagrees with the section arrays")
    return params, doc.get("table_ref")


def save_offsets(offsets, path, sample_rate: int) -> None:
    """Phase-offset track file (JSON): points at the fixed 20 Hz rate."""
    doc = {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "rate_hz": OFFSET_RATE_HZ,
        "sample_rate": sample_rate,
        "offsets": np.asarray(offsets, dtype=np.float64).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_offsets(path) -> tuple[np.ndarray, int]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != PARAMS_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported offset schema version")
    if doc.get("rate_hz") != OFFSET_RATE_HZ:
        raise ValueError(f"{path}: offset rate must be {OFFSET_RATE_HZ} Hz")
    return np.array(doc["offsets"], dtype=np.float64), int(doc["sample_rate"])


def write_wav(path, audio, sample_rate: int) -> None:
    """Mono float32 WAV."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError("audio must be mono")
    wavfile.write(path, sample_rate, audio.astype(np.float32))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono WAV; 16-bit integer and 32-bit float are accepted."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        audio = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return audio, int(sample_rate)
