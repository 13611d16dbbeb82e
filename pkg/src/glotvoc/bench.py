"""Real-time-factor benchmark harness.

Renders a synthetic control track that exercises both branches (constant
pitch, full voicing, random stable cascades every frame, equal harmonic
and noise gains) and reports wall-clock synthesis time per stage and the
real-time factor: synthesis time divided by audio duration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .filters import (
    FrameCoeffs,
    expand_frame_cascades,
    framewise_lpc_forward,
    sections_from_unconstrained,
    synthesis_window,
)
from .glottal import Wavetables
from .oscillator import gate_frequency, wavetable_lookup
from .synth import (
    DEFAULT_HOP,
    DEFAULT_SAMPLE_RATE,
    SynthParams,
    gaussian_noise,
    upsample_linear,
)

__all__ = ["BenchReport", "synthetic_params", "run_benchmark"]

STAGES = ("oscillator", "harmonic_lpc", "noise_lpc")


@dataclass
class BenchReport:
    duration: float
    sample_rate: int
    threads: int
    repeats: int
    totals: np.ndarray
    stage_medians: dict[str, float] = field(default_factory=dict)

    @property
    def rtf_values(self) -> np.ndarray:
        return self.totals / self.duration

    @property
    def rtf_median(self) -> float:
        return float(np.median(self.rtf_values))

    @property
    def rtf_min(self) -> float:
        return float(self.rtf_values.min())

    @property
    def rtf_max(self) -> float:
        return float(self.rtf_values.max())

    def as_dict(self) -> dict:
        return {
            "duration_s": self.duration,
            "sample_rate": self.sample_rate,
            "threads": self.threads,
            "repeats": self.repeats,
            "total_s": self.totals.tolist(),
            "stage_medians_s": dict(self.stage_medians),
            "rtf": {
                "min": self.rtf_min,
                "median": self.rtf_median,
                "max": self.rtf_max,
            },
        }


def synthetic_params(
    duration: float,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    hop: int = DEFAULT_HOP,
    lpc_order: int = 22,
    seed: int = 0,
    pitch_hz: float = 220.0,
) -> SynthParams:
    """Benchmark control track: constant pitch, voiced throughout, random
    stable cascades per frame, both gains at 0.5."""
    n_frames = max(1, round(duration * sample_rate / hop))
    rng = np.random.Generator(np.random.Philox(key=seed))
    sections = lpc_order // 2
    return SynthParams(
        freq=np.full(n_frames, pitch_hz / sample_rate),
        voicing=np.ones(n_frames),
        harm_gain=np.full(n_frames, 0.5),
        noise_gain=np.full(n_frames, 0.5),
        rd_index=np.full(-(-n_frames // 10), 0.5),
        harm_biquads=rng.normal(0.0, 0.3, (n_frames, sections, 2)),
        noise_biquads=rng.normal(0.0, 0.3, (n_frames, sections, 2)),
        hop=hop,
        sample_rate=sample_rate,
    )


def _timed_render(params: SynthParams, tables: Wavetables, seed: int, workers: int):
    """One synthesis pass, instrumented per stage.

    Mirrors the render pipeline stage for stage so the timings add up to a
    real render; the output is identical to ``synth.render``.
    """
    t = params.hop
    n = params.n_samples
    stages = {}

    t0 = time.perf_counter()
    freq_n = upsample_linear(params.freq, t, n)
    voicing_n = upsample_linear(params.voicing, t, n)
    harm_gain_n = upsample_linear(params.harm_gain, t, n)
    noise_gain_n = upsample_linear(params.noise_gain, t, n)
    tau_n = upsample_linear(params.rd_index, params.tau_stride * t, n)
    f_hat = gate_frequency(freq_n, voicing_n)
    phi = np.cumsum(f_hat)
    source = np.where(f_hat > 0.0, wavetable_lookup(phi, tau_n, tables), 0.0)
    t1 = time.perf_counter()
    stages["oscillator"] = t1 - t0

    window = synthesis_window(params.win_length)
    harm_frames = FrameCoeffs(
        expand_frame_cascades(sections_from_unconstrained(params.harm_biquads)),
        t,
        params.win_length,
    )
    harmonic, _ = framewise_lpc_forward(
        source, harm_gain_n, harm_frames, window=window, workers=workers
    )
    t2 = time.perf_counter()
    stages["harmonic_lpc"] = t2 - t1

    noise_frames = FrameCoeffs(
        expand_frame_cascades(sections_from_unconstrained(params.noise_biquads)),
        t,
        params.win_length,
    )
    noise_in = noise_gain_n * gaussian_noise(n, seed)
    noise, _ = framewise_lpc_forward(
        noise_in, np.ones(n), noise_frames, window=window, workers=workers
    )
    t3 = time.perf_counter()
    stages["noise_lpc"] = t3 - t2

    return harmonic + noise, stages, t3 - t0


def run_benchmark(
    tables: Wavetables,
    duration: float,
    threads: int = 1,
    repeats: int = 3,
    seed: int = 0,
    lpc_order: int = 22,
) -> BenchReport:
    if duration <= 0.0:
        raise ValueError("duration must be positive")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    params = synthetic_params(duration, lpc_order=lpc_order, seed=seed)
    # warm-up pass: cache effects and allocator noise stay out of the numbers
    _timed_render(params, tables, seed, threads)

    totals = np.empty(repeats)
    per_stage = {name: [] for name in STAGES}
    for r in range(repeats):
        _, stages, total = _timed_render(params, tables, seed, threads)
        totals[r] = total
        for name in STAGES:
            per_stage[name].append(stages[name])
    medians = {name: float(np.median(per_stage[name])) for name in STAGES}
    return BenchReport(
        duration=params.n_samples / params.sample_rate,
        sample_rate=params.sample_rate,
        threads=threads,
        repeats=repeats,
        totals=totals,
        stage_medians=medians,
    )
