"""Glottal-flow wavetable vocoder with differentiable time-varying LPC filters.

Synthesis reads a table of glottal pulse shapes at an accumulated phase,
filters it with stability-guaranteed all-pole cascades (frame-wise, with
overlap-add), adds shaped noise, and exposes hand-derived adjoints for
every continuous control so parameters can be fitted to target audio by
gradient descent.
"""

from .glottal import (
    LFParams,
    Wavetables,
    build_wavetables,
    lf_flow_derivative,
    load_wavetables,
    rd_to_lf_params,
    save_wavetables,
)
from .iir import FilterBatch, filter_batch, lfilter_allpole, vjp_coeffs, vjp_input
from .filters import (
    BiquadCascade,
    BiquadSection,
    FrameCoeffs,
    biquad_from_unconstrained,
    cascade_to_direct,
    framewise_lpc,
    samplewise_lpc,
)
from .oscillator import (
    ControlTrack,
    PhaseTrack,
    accumulate_phase,
    gate_frequency,
    pulse_train,
    wavetable_lookup,
)
from .synth import (
    RenderOutput,
    SynthParams,
    load_params,
    read_wav,
    render,
    render_with_offset,
    save_params,
    upsample_linear,
    write_wav,
)
from .opt import (
    AdamConfig,
    AdamState,
    LossWeights,
    MsstftConfig,
    adam_step,
    fit_params,
    fit_phase_offset,
    l2_waveform,
    msstft_loss,
)
from .bench import run_benchmark

__version__ = "0.1.0"
