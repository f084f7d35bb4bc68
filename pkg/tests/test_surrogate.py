import numpy as np
import pytest

from irisadv.autodiff import Tensor, finite_diff_check
from irisadv.codec import IrisCode, encode, make_filter_bank
from irisadv.surrogate import (
    Surrogate,
    SurrogateConfig,
    TrainingError,
    binarize,
    bit_error_rate,
    build_surrogate,
    per_sample_bit_errors,
    reconstruction_loss,
    train_surrogate,
)
from irisadv.synth import corpus_sample


@pytest.fixture(scope="module")
def bank():
    return make_filter_bank((16.0,))


@pytest.fixture(scope="module")
def desk_data(bank):
    samples = [corpus_sample(5, i // 2, "LR"[i % 2], 0) for i in range(12)]
    return samples, [encode(s, bank) for s in samples]


class TestArchitecture:
    def test_full_scale_shapes(self):
        cfg = SurrogateConfig.full()
        net = build_surrogate(cfg, seed=0)
        rng = np.random.default_rng(0)
        iris = Tensor(rng.uniform(size=(1, 64, 512)).astype(np.float32))
        out, acts = net.forward(iris, Tensor(np.ones((1, 64, 512), np.float32)), return_activations=True)
        # NCHW: 512 channels over 2 x 16
        assert acts["conv5"] == (1, 512, 2, 16)
        assert acts["deconv0"] == (1, 6, 64, 512)
        assert out.shape == (1, 384, 512)

    def test_every_level_halves_then_doubles(self):
        cfg = SurrogateConfig.desk()
        net = build_surrogate(cfg)
        _, acts = net.forward(Tensor(np.zeros((2, 16, 128))), Tensor(np.ones((2, 16, 128))),
                              return_activations=True)
        h, w = 16, 128
        for i in range(1, cfg.levels + 1):
            h, w = h // 2, w // 2
            assert acts[f"conv{i}"][2:] == (h, w)
            assert acts[f"conv{i}"][1] == cfg.channels(f"conv{i}")[1]
        for i in range(cfg.levels - 1, -1, -1):
            h, w = h * 2, w * 2
            assert acts[f"deconv{i}"][2:] == (h, w)
        assert acts["deconv0"][1] == cfg.n_filters

    def test_channel_schedule_at_full_scale(self):
        cfg = SurrogateConfig.full()
        assert [cfg.channels(f"conv{i}")[1] for i in range(1, 6)] == [64, 128, 256, 256, 512]
        # skip concat: deconv3 sees deconv4 output plus conv4 output
        assert cfg.channels("deconv3")[0] == 512 + 256
        assert cfg.channels("deconv0") == (64 + 64, 6)

    def test_five_levels_reject_desk_extents(self):
        with pytest.raises(ValueError, match="conv5"):
            build_surrogate(SurrogateConfig.desk(levels=5))

    def test_four_levels_build(self):
        net = build_surrogate(SurrogateConfig.desk(levels=4))
        assert "conv4.dw" in net.params and "conv5.dw" not in net.params

    def test_parameter_shapes_follow_config(self):
        cfg = SurrogateConfig.desk()
        net = build_surrogate(cfg)
        for name in cfg.layer_names():
            cin, cout = cfg.channels(name)
            assert net.params[f"{name}.dw"].shape == (cin, 1, 4, 4)
            assert net.params[f"{name}.pw"].shape == (cout, cin, 1, 1)
            assert net.params[f"{name}.gamma"].shape == (cout,)

    def test_extent_mismatch_rejected(self):
        net = build_surrogate(SurrogateConfig.desk())
        with pytest.raises(ValueError):
            net.forward(Tensor(np.zeros((1, 16, 64))), Tensor(np.zeros((1, 16, 64))))


class TestForward:
    def test_range(self):
        net = build_surrogate(SurrogateConfig.desk(), seed=1)
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(4, 16, 128)) * 50 - 25  # far outside the pixel range on purpose
        soft = net.soft_codes(x, np.ones_like(x))
        assert soft.min() >= 0.0 and soft.max() <= 1.0

    def test_eval_is_deterministic(self, desk_data):
        net = build_surrogate(SurrogateConfig.desk(), seed=2)
        s = desk_data[0][0]
        np.testing.assert_array_equal(net.soft_code(s), net.soft_code(s))

    def test_build_is_seeded(self):
        a, b = build_surrogate(SurrogateConfig.desk(), 4), build_surrogate(SurrogateConfig.desk(), 4)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_untrained_agreement_is_chance(self, desk_data):
        samples, codes = desk_data
        rates = [bit_error_rate(build_surrogate(SurrogateConfig.desk(), seed=s), samples, codes) for s in range(3)]
        for r in rates:
            assert abs(r - 0.5) <= 0.05


class TestLossAndErrors:
    def test_zero_at_identity(self):
        t = Tensor(np.random.default_rng(0).integers(0, 2, (2, 4, 8)).astype(float))
        assert reconstruction_loss(t, t).item() == 0.0

    def test_loss_is_per_sample_norm_averaged(self):
        t = Tensor(np.zeros((2, 1, 2)))
        s = Tensor(np.array([[[3.0, 4.0]], [[0.0, 1.0]]]))
        assert reconstruction_loss(t, s).item() == pytest.approx((5 + 1) / 2)

    def test_one_wrong_bit_in_full_code(self):
        bits = np.zeros((384, 512), np.uint8)
        soft = bits.astype(float)
        soft[17, 300] = 0.9
        code = IrisCode(bits, np.ones_like(bits), 6)

        class Fixed:
            def soft_codes(self, iris, mask):
                return soft[None]

        sample = type("S", (), {"iris": np.zeros((64, 512)), "mask": np.ones((64, 512))})()
        errors, skipped = per_sample_bit_errors(Fixed(), [sample], [code])
        assert errors[0] == pytest.approx(1 / 196608) and not skipped
        assert errors[0] == pytest.approx(5.09e-6, rel=1e-3)

    def test_binarize_threshold_is_strict(self):
        np.testing.assert_array_equal(binarize(np.array([0.5, 0.50001, 0.2])), [0, 1, 0])

    def test_empty_code_mask_is_skipped(self, desk_data):
        samples, codes = desk_data
        net = build_surrogate(SurrogateConfig.desk())
        blank = IrisCode(codes[0].bits, np.zeros_like(codes[0].code_mask), codes[0].n_filters)
        errors, skipped = per_sample_bit_errors(net, samples[:2], [blank, codes[1]])
        assert skipped == [0] and errors.size == 1


class TestTraining:
    def test_single_sample_overfit(self, desk_data):
        samples, codes = desk_data
        cfg = SurrogateConfig.desk(batch_size=1, epochs=200, lr=5e-3)
        net, _ = train_surrogate(cfg, samples[:1], codes[:1], seed=0)
        assert bit_error_rate(net, samples[:1], codes[:1]) < 0.01

    def test_mismatched_dataset_rejected(self, desk_data):
        samples, codes = desk_data
        with pytest.raises(ValueError):
            train_surrogate(SurrogateConfig.desk(epochs=1), samples, codes[:3])
        with pytest.raises(ValueError):
            train_surrogate(SurrogateConfig.desk(epochs=1, n_filters=4), samples, codes)

    def test_non_finite_loss_aborts_with_position(self, desk_data):
        samples, codes = desk_data
        net = build_surrogate(SurrogateConfig.desk())
        net.params["deconv0.beta"].data[:] = np.nan
        with pytest.raises(TrainingError, match="epoch 0, batch 0"):
            train_surrogate(SurrogateConfig.desk(epochs=1), samples, codes, net=net)

    def test_zero_epochs_keeps_initial_weights(self, desk_data):
        samples, codes = desk_data
        net, curve = train_surrogate(SurrogateConfig.desk(epochs=0), samples, codes, seed=3)
        ref = build_surrogate(SurrogateConfig.desk(), 3)
        assert curve == []
        for k in ref.params:
            np.testing.assert_array_equal(net.params[k].data, ref.params[k].data)


class TestGradientFlow:
    @pytest.fixture
    def tiny(self):
        cfg = SurrogateConfig(height=8, width=16, n_filters=2, levels=2, channel_divisor=16)
        return build_surrogate(cfg, seed=0).astype(np.float64)

    def test_weights_through_reconstruction_loss(self, tiny):
        rng = np.random.default_rng(0)
        iris, mask = rng.uniform(size=(2, 8, 16)), (rng.uniform(size=(2, 8, 16)) < 0.9).astype(float)
        target = Tensor(rng.integers(0, 2, (2, 16, 16)).astype(float))
        names = sorted(tiny.params)

        def fn(params):
            net = Surrogate(tiny.config, dict(zip(names, params)), tiny.stats)
            return reconstruction_loss(target, net.forward(Tensor(iris), Tensor(mask), training=True))

        # batch statistics only, so repeated forwards see the same function
        assert finite_diff_check(fn, [tiny.params[k] for k in names]) < 1e-4

    def test_input_gradient_in_eval_mode(self, tiny):
        rng = np.random.default_rng(1)
        for s in tiny.stats.values():
            s.running_mean[:] = rng.normal(0, 0.1, s.running_mean.shape)
            s.running_var[:] = rng.uniform(0.5, 2.0, s.running_var.shape)
        iris = Tensor(rng.uniform(size=(1, 8, 16)))
        mask = Tensor(np.ones((1, 8, 16)))
        target = Tensor(rng.integers(0, 2, (1, 16, 16)).astype(float))
        fn = lambda p: reconstruction_loss(target, tiny.forward(p[0], mask, training=False))
        assert finite_diff_check(fn, [iris]) < 1e-4


class TestDeskTraining:
    def test_loss_curve_non_increasing(self, desk_run):
        curve = desk_run.report.curve
        assert len(curve) == desk_run.config.surrogate_config(2).epochs
        rises = sum(b > a for a, b in zip(curve[1:], curve[2:]))
        assert rises <= 1

    def test_checkpoint_reproduces_reported_error(self, desk_run):
        _, test = desk_run.corpus.split()
        ber = bit_error_rate(desk_run.net, [r.sample for r in test], [r.code for r in test])
        assert ber == desk_run.report.bit_error

    def test_untrained_is_chance(self, desk_run):
        assert abs(desk_run.report.untrained_bit_error - 0.5) <= 0.05
