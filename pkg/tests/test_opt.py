import numpy as np
import pytest

from glotvoc.glottal import build_wavetables
from glotvoc.opt import (
    AdamConfig,
    AdamState,
    FitDivergedError,
    LossWeights,
    MsstftConfig,
    adam_step,
    fit_params,
    fit_phase_offset,
    l2_grad,
    l2_waveform,
    msstft_grad,
    msstft_loss,
    wrap_offset_differences,
)
from glotvoc.synth import SynthParams, offset_hop, render, render_with_offset


@pytest.fixture(scope="module")
def fit_tables():
    # breathy, near-sinusoidal pulses: smooth loss surface for fitting tests
    return build_wavetables(12, 1024, 1.8, 2.7)


def voiced_params(n_frames, sr=24000, tau=0.6, f0=220.0, noise=0.0):
    rng = np.random.default_rng(42)
    return SynthParams(
        freq=np.full(n_frames, f0 / sr),
        voicing=np.ones(n_frames),
        harm_gain=np.ones(n_frames),
        noise_gain=np.full(n_frames, noise),
        rd_index=np.full(-(-n_frames // 10), tau),
        harm_biquads=rng.normal(0.0, 0.2, (n_frames, 3, 2)),
        noise_biquads=rng.normal(0.0, 0.2, (n_frames, 3, 2)),
    )


class TestMsstftLoss:
    def test_identical_signals_zero_loss(self, rng):
        x = rng.standard_normal(4096)
        assert msstft_loss(x, x) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MsstftConfig(fft_sizes=(500,))
        with pytest.raises(ValueError):
            MsstftConfig(magnitude_floor=0.0)

    def test_phase_blind_for_half_period_shift(self):
        # a half-period shift of a pure tone flips its sign; magnitudes match
        n = 8192
        f = 0.05
        t = np.arange(n)
        x = np.sin(2 * np.pi * f * t)
        shifted = np.sin(2 * np.pi * f * (t + 0.5 / f))
        assert msstft_loss(shifted, x) < 1e-3

    def test_doubled_amplitude_closed_form(self, rng):
        # |X| = 2|Y| makes the convergence term exactly 1 per resolution;
        # on white noise every bin is far above the floor, so the log term
        # approaches log 2 per resolution
        y = rng.standard_normal(8192)
        x = 2.0 * y
        cfg = MsstftConfig()
        loss = msstft_loss(x, y, cfg)
        expected = len(cfg.fft_sizes) * (1.0 + np.log(2.0))
        assert loss == pytest.approx(expected, rel=1e-9)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            msstft_loss(np.zeros(4096), np.zeros(4097))

    def test_zero_reference_rejected(self, rng):
        with pytest.raises(ValueError, match="spectral energy"):
            msstft_loss(rng.standard_normal(4096), np.zeros(4096))

    def test_signal_shorter_than_window_rejected(self, rng):
        with pytest.raises(ValueError, match="shorter"):
            msstft_loss(rng.standard_normal(1024), rng.standard_normal(1024))

    def test_grad_matches_finite_differences(self, rng):
        x = rng.standard_normal(2400)
        y = rng.standard_normal(2400)
        loss, grad = msstft_grad(x, y)
        assert loss == pytest.approx(msstft_loss(x, y), rel=1e-12)
        h = 1e-6
        for i in rng.choice(2400, 8, replace=False):
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fd = (msstft_loss(xp, y) - msstft_loss(xm, y)) / (2 * h)
            assert abs(grad[i] - fd) <= 1e-4 * max(1.0, abs(fd))


class TestL2Loss:
    def test_identical_zero(self, rng):
        x = rng.standard_normal(100)
        assert l2_waveform(x, x) == 0.0

    def test_single_impulse(self, rng):
        y = rng.standard_normal(100)
        x = y.copy()
        x[13] += 0.5
        assert l2_waveform(x, y) == pytest.approx(0.25, rel=1e-12)

    def test_anti_phase_tone_closed_form(self):
        # half-period shift negates the tone: ||x - y||^2 = ||2y||^2 = 4 sum(y^2)
        n = 1024
        f = 0.03125
        t = np.arange(n)
        y = np.sin(2 * np.pi * f * t)
        x = np.sin(2 * np.pi * f * (t + 0.5 / f))
        assert l2_waveform(x, y) == pytest.approx(4.0 * np.sum(y**2), rel=1e-9)

    def test_grad(self, rng):
        x = rng.standard_normal(64)
        y = rng.standard_normal(64)
        loss, grad = l2_grad(x, y)
        assert np.allclose(grad, 2.0 * (x - y), atol=0)
        assert loss == pytest.approx(l2_waveform(x, y), rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            l2_waveform(np.zeros(3), np.zeros(4))


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        state = AdamState.init({"w": np.array([1.0, -2.0])})
        out = adam_step(state, {"w": np.zeros(2)}, AdamConfig())
        assert np.array_equal(out.params["w"], [1.0, -2.0])
        assert out.step == 1

    def test_first_step_is_signed_learning_rate(self):
        cfg = AdamConfig(learning_rate=0.01)
        state = AdamState.init({"w": np.zeros(3)})
        g = np.array([0.5, -3.0, 1e-3])
        out = adam_step(state, {"w": g}, cfg)
        # bias correction makes m_hat = g and v_hat = g^2 at t = 1
        assert np.allclose(out.params["w"], -cfg.learning_rate * np.sign(g), rtol=1e-4)

    def test_steady_state_step_magnitude(self):
        cfg = AdamConfig(learning_rate=0.002)
        state = AdamState.init({"w": np.array([0.0])})
        g = {"w": np.array([0.7])}
        prev = 0.0
        for _ in range(1000):
            state = adam_step(state, g, cfg)
            step_size = state.params["w"][0] - prev
            prev = state.params["w"][0]
        assert abs(step_size) == pytest.approx(cfg.learning_rate, rel=1e-6)

    def test_non_finite_gradient_names_parameter(self):
        state = AdamState.init({"good": np.zeros(1), "bad": np.zeros(1)})
        with pytest.raises(ValueError, match="'bad'"):
            adam_step(
                state,
                {"good": np.zeros(1), "bad": np.array([np.nan])},
                AdamConfig(),
            )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdamConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            AdamConfig(beta1=1.0)


class TestWrapRule:
    def test_differences_land_in_half_open_band(self, rng):
        pts = rng.uniform(-4.0, 4.0, 50)
        wrapped = wrap_offset_differences(pts)
        d = np.diff(wrapped)
        assert np.all(d >= -0.5 - 1e-12) and np.all(d <= 0.5 + 1e-12)

    def test_idempotent(self, rng):
        pts = rng.uniform(-4.0, 4.0, 50)
        once = wrap_offset_differences(pts)
        twice = wrap_offset_differences(once)
        assert np.allclose(twice, once, rtol=0, atol=1e-12)

    def test_moves_points_by_whole_periods_only(self, rng):
        pts = rng.uniform(-4.0, 4.0, 50)
        wrapped = wrap_offset_differences(pts)
        shifts = wrapped - pts
        assert np.allclose(shifts, np.round(shifts), atol=1e-9)

    def test_first_point_unchanged(self, rng):
        pts = rng.uniform(0.0, 1.0, 10)
        assert wrap_offset_differences(pts)[0] == pts[0]


class TestFitPhaseOffset:
    def test_already_aligned_stays_at_zero(self, fit_tables):
        params = voiced_params(40)
        target = render(params, fit_tables, noise_seed=3).audio
        n_pts = -(-params.n_samples // offset_hop(params.sample_rate))
        fit = fit_phase_offset(
            params,
            fit_tables,
            target,
            AdamConfig(steps=5),
            seed=3,
            init=np.zeros(n_pts),
        )
        assert fit.traces[0][0] == 0.0
        assert fit.final_losses[0] == 0.0
        assert np.all(fit.offsets == 0.0)

    def test_recovers_constant_offset(self, fit_tables):
        params = voiced_params(60)  # 0.3 s
        n_pts = -(-params.n_samples // offset_hop(params.sample_rate))
        true_offset = np.full(n_pts, 0.25)
        target = render_with_offset(params, fit_tables, true_offset, noise_seed=3).audio
        fit = fit_phase_offset(
            params,
            fit_tables,
            target,
            AdamConfig(learning_rate=0.005, steps=300),
            seed=3,
            init=np.zeros(n_pts),
        )
        err = fit.offsets - true_offset
        err -= np.round(err)
        assert np.max(np.abs(err[1:-1])) < 0.01
        assert fit.final_losses[0] < 1e-2 * np.sum(target**2)

    def test_does_not_touch_other_parameters(self, fit_tables):
        params = voiced_params(20)
        before = {
            name: getattr(params, name).copy()
            for name in ("freq", "voicing", "harm_gain", "noise_gain", "rd_index")
        }
        target = render(params, fit_tables).audio
        fit_phase_offset(params, fit_tables, target, AdamConfig(steps=3), seed=0)
        for name, val in before.items():
            assert np.array_equal(getattr(params, name), val), name

    def test_restarts_report_min_and_max(self, fit_tables):
        params = voiced_params(20)
        target = render(params, fit_tables, noise_seed=1).audio
        fit = fit_phase_offset(
            params,
            fit_tables,
            target,
            AdamConfig(steps=20),
            seed=1,
            restarts=3,
        )
        assert fit.final_losses.shape == (3,)
        assert fit.min_loss <= fit.max_loss
        assert len(fit.traces) == 3 and len(fit.offsets_per_restart) == 3

    def test_deterministic_given_seed(self, fit_tables):
        params = voiced_params(20)
        target = render(params, fit_tables, noise_seed=1).audio
        cfg = AdamConfig(steps=10)
        a = fit_phase_offset(params, fit_tables, target, cfg, seed=9, restarts=2)
        b = fit_phase_offset(params, fit_tables, target, cfg, seed=9, restarts=2)
        assert np.array_equal(a.final_losses, b.final_losses)
        assert np.array_equal(a.offsets, b.offsets)

    def test_length_mismatch_rejected(self, fit_tables):
        params = voiced_params(20)
        with pytest.raises(ValueError, match="target length"):
            fit_phase_offset(params, fit_tables, np.zeros(10), AdamConfig(steps=1))


class TestFitParams:
    def test_matched_target_starts_and_stays_at_zero(self, fit_tables):
        init = voiced_params(24, noise=0.1)
        target = render(init, fit_tables, noise_seed=11).audio
        fit = fit_params(
            target,
            init,
            fit_tables,
            LossWeights(msstft=1.0, l2=1.0),
            AdamConfig(learning_rate=1e-4, steps=10),
            seed=11,
        )
        assert fit.trace[0] == 0.0
        assert np.all(np.diff(fit.trace) <= 1e-12)

    def test_recovers_scaled_harmonic_gain(self, fit_tables):
        # controlled experiment: on a periodic source the filter response at
        # the harmonics can compensate a gain change exactly, so the filter
        # groups are frozen to make the gain identifiable
        truth = voiced_params(40, noise=0.05)
        target = render(truth, fit_tables, noise_seed=2).audio
        init = truth.copy()
        init.harm_gain[:] = truth.harm_gain * 0.5
        fit = fit_params(
            target,
            init,
            fit_tables,
            LossWeights(msstft=1.0, l2=1.0),
            AdamConfig(learning_rate=0.005, steps=500),
            seed=2,
            lr_scales={"harm_biquads": 0.0, "noise_biquads": 0.0},
        )
        ratio = fit.params.harm_gain[5:-5] / truth.harm_gain[5:-5]
        assert np.all(np.abs(ratio - 1.0) < 0.1)
        assert fit.trace[-1] < fit.trace[0]

    def test_all_zero_target_drives_gains_down(self, fit_tables):
        init = voiced_params(24, noise=0.2)
        target = np.zeros(init.n_samples)
        fit = fit_params(
            target,
            init,
            fit_tables,
            LossWeights(msstft=0.0, l2=1.0),  # spectral loss rejects silence
            AdamConfig(learning_rate=0.01, steps=150),
            seed=0,
        )
        # gains head to zero until silence kills the gradient
        assert fit.params.harm_gain.mean() < 0.8 * init.harm_gain.mean()
        assert fit.params.noise_gain.mean() < 0.05 * init.noise_gain.mean()
        assert fit.trace[-1] < 1e-3 * fit.trace[0]

    def test_non_finite_loss_aborts_with_trace(self, fit_tables):
        init = voiced_params(24)
        target = np.full(init.n_samples, np.nan)
        with pytest.raises(FitDivergedError) as info:
            fit_params(
                target,
                init,
                fit_tables,
                LossWeights(msstft=0.0, l2=1.0),
                AdamConfig(steps=5),
            )
        assert info.value.trace.shape == (1,)

    def test_bounded_fields_stay_projected(self, fit_tables):
        init = voiced_params(24, noise=0.05)
        target = 0.5 * render(init, fit_tables, noise_seed=4).audio
        fit = fit_params(
            target,
            init,
            fit_tables,
            LossWeights(msstft=1.0, l2=0.0),
            AdamConfig(learning_rate=0.05, steps=40),
            seed=4,
        )
        p = fit.params
        assert np.all((p.freq >= 0.0) & (p.freq <= 0.5))
        assert np.all((p.voicing >= 0.0) & (p.voicing <= 1.0))
        assert np.all((p.rd_index >= 0.0) & (p.rd_index <= 1.0))
        assert np.all(p.harm_gain >= 0.0) and np.all(p.noise_gain >= 0.0)
