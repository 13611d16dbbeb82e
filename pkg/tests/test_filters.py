import math

import numpy as np
import pytest
from conftest import random_stable_coeffs

from glotvoc.filters import (
    BiquadCascade,
    BiquadSection,
    FrameCoeffs,
    FilterOverflowError,
    biquad_from_unconstrained,
    cascade_to_direct,
    cascade_to_direct_vjp,
    expand_frame_cascades,
    expand_frame_cascades_vjp,
    framewise_lpc,
    framewise_lpc_forward,
    framewise_lpc_vjp,
    samplewise_lpc,
    sections_from_unconstrained,
    sections_from_unconstrained_vjp,
    synthesis_window,
    window_sum,
)
from glotvoc.glottal import build_wavetables
from glotvoc.iir import lfilter_allpole
from glotvoc.oscillator import wavetable_lookup


def max_pole_magnitude(eta1, eta2):
    return np.max(np.abs(np.roots([1.0, eta1, eta2])))


class TestBiquadMap:
    def test_origin_maps_to_origin(self):
        s = biquad_from_unconstrained(0.0, 0.0)
        assert s.eta1 == 0.0 and s.eta2 == 0.0
        assert np.all(s.poles() == 0.0)

    def test_known_mapping_values(self):
        # oracle: evaluate the squashing formulas directly
        s = biquad_from_unconstrained(1.0, -1.0)
        eta1 = 2.0 * math.tanh(1.0)
        eta2 = ((2.0 - abs(eta1)) * math.tanh(-1.0) + abs(eta1)) / 2.0
        assert s.eta1 == pytest.approx(eta1, rel=1e-15)
        assert s.eta2 == pytest.approx(eta2, rel=1e-15)
        assert s.eta1 == pytest.approx(1.5232, abs=1e-4)
        assert s.eta2 == pytest.approx(0.5800, abs=1e-4)

    def test_extreme_grid_stays_strictly_stable(self):
        # sweep includes the float-saturation regime |x| >= 19
        vals = np.array([-1e3, -500.0, -20.0, -5.0, -1.0, 0.0, 1.0, 5.0, 20.0, 500.0, 1e3])
        for x1 in vals:
            for x2 in vals:
                s = biquad_from_unconstrained(x1, x2)
                assert max_pole_magnitude(s.eta1, s.eta2) < 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            biquad_from_unconstrained(float("inf"), 0.0)
        with pytest.raises(ValueError):
            biquad_from_unconstrained(0.0, float("nan"))

    def test_section_validation(self):
        with pytest.raises(ValueError):
            BiquadSection(2.5, 0.3)
        with pytest.raises(ValueError):
            BiquadSection(0.0, 1.0)

    def test_vectorized_matches_scalar(self, rng):
        raw = rng.normal(0.0, 2.0, (5, 3, 2))
        etas = sections_from_unconstrained(raw)
        for f in range(5):
            for s in range(3):
                ref = biquad_from_unconstrained(raw[f, s, 0], raw[f, s, 1])
                assert etas[f, s, 0] == pytest.approx(ref.eta1, rel=1e-15)
                assert etas[f, s, 1] == pytest.approx(ref.eta2, rel=1e-15)

    def test_stability_property_random_inputs(self, rng):
        raw = rng.normal(0.0, 3.0, (10_000, 1, 2))
        etas = sections_from_unconstrained(raw)
        for e1, e2 in etas[:, 0, :]:
            assert abs(e2) < 1.0 and abs(e1) < 1.0 + e2
        # polynomial root finder on a subsample
        for e1, e2 in etas[rng.choice(10_000, 200, replace=False), 0, :]:
            assert max_pole_magnitude(e1, e2) < 1.0

    def test_map_vjp_matches_finite_differences(self, rng):
        raw = rng.normal(0.0, 1.0, (3, 2, 2))
        g = rng.standard_normal((3, 2, 2))
        grad = sections_from_unconstrained_vjp(raw, g)
        h = 1e-6
        for idx in np.ndindex(raw.shape):
            rp = raw.copy()
            rp[idx] += h
            rm = raw.copy()
            rm[idx] -= h
            fd = (
                np.sum(g * sections_from_unconstrained(rp))
                - np.sum(g * sections_from_unconstrained(rm))
            ) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


class TestCascadeToDirect:
    def test_single_section_passthrough(self):
        a = cascade_to_direct([BiquadSection(0.3, 0.2)])
        assert np.allclose(a, [0.3, 0.2], rtol=0, atol=0)

    def test_two_section_hand_product(self):
        # (1 + z^-1 + 0.5 z^-2)(1 - z^-1 + 0.5 z^-2) = 1 + 0 z^-1 + 0 z^-2 + 0 z^-3 + 0.25 z^-4
        a = cascade_to_direct([BiquadSection(1.0, 0.5), BiquadSection(-1.0, 0.5)])
        assert np.allclose(a, [0.0, 0.0, 0.0, 0.25], atol=1e-15)

    def test_eleven_identity_sections(self):
        a = cascade_to_direct([BiquadSection(0.0, 0.0)] * 11)
        assert a.shape == (22,)
        assert np.all(a == 0.0)

    def test_empty_cascade_rejected(self):
        with pytest.raises(ValueError):
            cascade_to_direct([])

    def test_order_invariance(self, rng):
        sections = [
            biquad_from_unconstrained(x1, x2) for x1, x2 in rng.normal(0, 1, (6, 2))
        ]
        ref = cascade_to_direct(sections)
        for _ in range(5):
            perm = rng.permutation(6)
            a = cascade_to_direct([sections[i] for i in perm])
            assert np.max(np.abs(a - ref)) < 1e-12

    def test_cascade_type_consistency(self, rng):
        sections = [
            biquad_from_unconstrained(x1, x2) for x1, x2 in rng.normal(0, 1, (5, 2))
        ]
        cascade = BiquadCascade(sections)
        assert cascade.order == 10
        # expanded coefficients equal the polynomial product
        poly = np.array([1.0])
        for s in sections:
            poly = np.convolve(poly, [1.0, s.eta1, s.eta2])
        assert np.max(np.abs(cascade.expanded - poly[1:])) < 1e-10
        # all roots strictly inside the unit circle
        assert np.max(np.abs(np.roots(np.concatenate([[1.0], cascade.expanded])))) < 1.0

    def test_vjp_matches_finite_differences(self, rng):
        etas = sections_from_unconstrained(rng.normal(0, 1, (1, 4, 2)))[0]
        g = rng.standard_normal(8)
        grad = cascade_to_direct_vjp(etas, g)
        h = 1e-7
        for idx in np.ndindex(etas.shape):
            ep = etas.copy()
            ep[idx] += h
            em = etas.copy()
            em[idx] -= h
            fd = (g @ cascade_to_direct(ep) - g @ cascade_to_direct(em)) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_batch_expansion_matches_per_frame(self, rng):
        etas = sections_from_unconstrained(rng.normal(0, 1, (7, 3, 2)))
        batch = expand_frame_cascades(etas)
        for f in range(7):
            assert np.array_equal(batch[f], cascade_to_direct(etas[f]))


class TestCola:
    def test_constant_overlap_add_interior(self):
        w, t = 480, 120
        win = synthesis_window(w)
        n = 24000
        s = window_sum(win, t, n, -(-n // t))
        interior = s[w : n - w]
        # numerically computed window-sum identity for periodic Hann at 75% overlap
        assert np.max(np.abs(interior - 2.0)) < 1e-10


def glottal_source(n, freq, tables):
    phi = np.cumsum(np.full(n, freq))
    return wavetable_lookup(phi, np.full(n, 0.5), tables)


class TestFramewiseLpc:
    def test_identity_cascades_preserve_signal(self, rng, small_tables):
        t, w = 120, 480
        n = 16 * t
        src = glottal_source(n, 150.0 / 24000.0, small_tables)
        gain = np.full(n, 0.7)
        frames = FrameCoeffs(np.zeros((16, 22)), t, w)
        out = framewise_lpc(src, gain, frames)
        # the synthesis window vanishes on the very first sample, so the
        # window-sum normalization leaves sample 0 silent
        assert out[0] == 0.0
        assert np.allclose(out[1:], (src * gain)[1:], rtol=1e-12, atol=1e-14)

    def test_zero_gain_zero_output(self, rng):
        t = 32
        n = 8 * t
        frames = FrameCoeffs(rng.normal(0, 0.1, (8, 4)), t, 4 * t)
        out = framewise_lpc(rng.standard_normal(n), np.zeros(n), frames)
        assert np.all(out == 0.0)

    def test_frame_grid_too_short_rejected(self, rng):
        frames = FrameCoeffs(np.zeros((3, 4)), 32, 128)
        with pytest.raises(ValueError, match="frame grid"):
            framewise_lpc(np.zeros(256), np.ones(256), frames)

    def test_workers_do_not_change_results(self, rng, small_tables):
        t, w = 60, 240
        n = 20 * t
        src = glottal_source(n, 0.01, small_tables)
        gain = np.ones(n)
        etas = sections_from_unconstrained(rng.normal(0, 0.4, (20, 3, 2)))
        frames = FrameCoeffs(expand_frame_cascades(etas), t, w)
        ref = framewise_lpc(src, gain, frames, workers=1)
        assert np.array_equal(framewise_lpc(src, gain, frames, workers=4), ref)

    def test_vjps_match_finite_differences(self, rng):
        t, w = 16, 64
        n_frames = 8
        n = n_frames * t
        src = rng.standard_normal(n)
        gain = rng.uniform(0.5, 1.5, n)
        raw = rng.normal(0.0, 0.5, (n_frames, 2, 2))
        g_out = rng.standard_normal(n)

        def run(src_, gain_, raw_):
            etas = sections_from_unconstrained(raw_)
            frames = FrameCoeffs(expand_frame_cascades(etas), t, w)
            return framewise_lpc(src_, gain_, frames)

        etas = sections_from_unconstrained(raw)
        frames = FrameCoeffs(expand_frame_cascades(etas), t, w)
        out, tape = framewise_lpc_forward(src, gain, frames)
        dl_dsrc, dl_dgain, dl_dcoeffs = framewise_lpc_vjp(tape, g_out)
        dl_draw = sections_from_unconstrained_vjp(
            raw, expand_frame_cascades_vjp(etas, dl_dcoeffs)
        )

        h = 1e-6
        for i in rng.choice(n, 12, replace=False):
            sp = src.copy()
            sp[i] += h
            sm = src.copy()
            sm[i] -= h
            fd = (g_out @ run(sp, gain, raw) - g_out @ run(sm, gain, raw)) / (2 * h)
            assert abs(dl_dsrc[i] - fd) <= 1e-4 * max(1.0, abs(fd))
        for i in rng.choice(n, 12, replace=False):
            gp = gain.copy()
            gp[i] += h
            gm = gain.copy()
            gm[i] -= h
            fd = (g_out @ run(src, gp, raw) - g_out @ run(src, gm, raw)) / (2 * h)
            assert abs(dl_dgain[i] - fd) <= 1e-4 * max(1.0, abs(fd))
        for idx in np.ndindex(raw.shape):
            rp = raw.copy()
            rp[idx] += h
            rm = raw.copy()
            rm[idx] -= h
            fd = (g_out @ run(src, gain, rp) - g_out @ run(src, gain, rm)) / (2 * h)
            assert abs(dl_draw[idx] - fd) <= 1e-4 * max(1.0, abs(fd))


class TestSamplewiseLpc:
    def test_constant_coeffs_match_single_filter(self, rng):
        t = 32
        n = 12 * t
        a = random_stable_coeffs(rng, 4)
        frames = FrameCoeffs(np.tile(a, (12, 1)), t, 4 * t)
        src = rng.standard_normal(n)
        gain = np.full(n, 1.3)
        assert np.allclose(
            samplewise_lpc(src, gain, frames),
            lfilter_allpole(src * gain, a),
            rtol=1e-12,
            atol=1e-14,
        )

    def test_identity_coeffs_return_scaled_source(self, rng):
        t = 32
        n = 6 * t
        frames = FrameCoeffs(np.zeros((6, 8)), t, 4 * t)
        src = rng.standard_normal(n)
        gain = rng.uniform(0.1, 2.0, n)
        assert np.array_equal(samplewise_lpc(src, gain, frames), src * gain)

    def test_two_frame_transition_finite_and_continuous(self, rng, small_tables):
        t = 240
        n = 2 * t
        c0 = cascade_to_direct(
            sections_from_unconstrained(rng.normal(0, 0.5, (1, 2, 2)))[0]
        )
        c1 = cascade_to_direct(
            sections_from_unconstrained(rng.normal(0, 0.5, (1, 2, 2)))[0]
        )
        frames = FrameCoeffs(np.stack([c0, c1]), t, 4 * t)
        src = glottal_source(n, 0.01, small_tables)
        out = samplewise_lpc(src, np.ones(n), frames)
        assert np.all(np.isfinite(out))
        assert np.max(np.abs(np.diff(out))) < 10.0 * np.max(np.abs(out))


class TestFramewiseVsSamplewise:
    def test_constant_cascade_close_to_samplewise(self, rng, small_tables):
        # the frame-restart transients of the overlap-add path stay small
        from glotvoc.opt import msstft_loss

        t, w = 120, 480
        n_frames = 100  # half a second at 24 kHz
        n = n_frames * t
        raw = rng.normal(0.0, 0.4, (1, 11, 2))
        a = cascade_to_direct(sections_from_unconstrained(raw)[0])
        frames = FrameCoeffs(np.tile(a, (n_frames, 1)), t, w)
        src = glottal_source(n, 110.0 / 24000.0, small_tables)
        gain = np.ones(n)
        approx = framewise_lpc(src, gain, frames)
        exact = samplewise_lpc(src, gain, frames)
        assert msstft_loss(approx, exact) < 0.1
