"""
训练模块测试：损失、优化器、梯度检查、训练循环与并行评估
"""

import math

import numpy as np
import pytest

from src.core import data as D
from src.core.errors import DataError, DimensionError, DivergenceError
from src.core.layers import ModelConfig, Variant, init_params, model_backward
from src.core.training import (
    OPTIMIZERS,
    TrainHyper,
    adam_step,
    create_optim_state,
    cross_entropy,
    evaluate,
    grad_check,
    sgd_momentum_step,
    toy_config,
    train,
)


@pytest.fixture(scope="module")
def overfit_set():
    """4 类 × 8 个样本，取自低噪声合成场景"""
    scene = D.synth_scene(D.SceneConfig(num_classes=4, height=32, width=32, modality_bands=(3,), noise=0.05, seed=1))
    image = D.concat_modalities(scene.stacks).as_hwc()
    dataset = D.build_dataset(image, scene.labels, np.ones(image.shape[:2], dtype=bool))
    picks = np.concatenate([np.flatnonzero(dataset.labels == c)[:8] for c in range(1, 5)])
    return D.normalize(dataset.subset(picks))


@pytest.fixture
def small_config():
    return ModelConfig(bands=3, num_classes=4, token_segment=16, hidden_dim=8, mixer_ffn_dim=8, num_blocks=1)


class TestCrossEntropy:
    def test_uniform(self):
        probs = np.full((2, 4), 0.25)
        assert cross_entropy(probs, np.array([0, 3])) == pytest.approx(math.log(4), abs=1e-15)

    def test_probability_floor(self):
        probs = np.array([[1.0, 0.0]])
        assert cross_entropy(probs, np.array([1])) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(np.full((1, 3), 1 / 3), np.array([3]))


class TestOptimizers:
    def _state(self, kind, params, **hyper):
        return create_optim_state(kind, params, TrainHyper(optimizer=kind, **hyper))

    def test_registry(self):
        assert set(OPTIMIZERS) == {"adam", "sgd_momentum"}

    def test_adam_first_step_is_lr_sized(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.array([0.5, -4.0, 1e-3])}
        new, state = adam_step(params, grads, self._state("adam", params, lr=0.1))
        np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), atol=1e-5)
        assert state.step == 1

    def test_adam_leaves_inputs_untouched(self):
        params = {"w": np.ones(3)}
        state = self._state("adam", params)
        adam_step(params, {"w": np.ones(3)}, state)
        np.testing.assert_array_equal(params["w"], 1.0)
        assert state.step == 0 and not state.moments["w"][0].any()

    def test_zero_lr_is_identity(self, rng):
        params = {"w": rng.normal(size=(3, 4))}
        for kind in OPTIMIZERS:
            new, _ = OPTIMIZERS[kind](params, {"w": rng.normal(size=(3, 4))}, self._state(kind, params, lr=0.0))
            np.testing.assert_array_equal(new["w"], params["w"])

    def test_sgd_momentum_accumulates(self):
        params = {"w": np.zeros(1)}
        state = self._state("sgd_momentum", params, lr=1.0, momentum=0.5)
        params, state = sgd_momentum_step(params, {"w": np.ones(1)}, state)
        params, state = sgd_momentum_step(params, {"w": np.ones(1)}, state)
        np.testing.assert_allclose(params["w"], [-(1.0 + 1.5)])

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        with pytest.raises(DimensionError):
            adam_step(params, {"w": np.zeros(4)}, self._state("adam", params))

    def test_unknown_optimizer(self):
        with pytest.raises(DataError):
            create_optim_state("rmsprop", {"w": np.zeros(1)}, TrainHyper())


class TestGradCheck:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_all_variants_pass(self, variant):
        report = grad_check(toy_config(variant), seed=0)
        assert report.passed, report.format()
        assert set(report.errors) == set(init_params(toy_config(variant), 0).named_tensors())

    def test_two_blocks(self):
        assert grad_check(toy_config(Variant.SGU_MLP, num_blocks=2), seed=1).passed

    def test_toy_config_extents(self):
        config = toy_config(Variant.SGU_MLP)
        assert config.flat_length == 243
        assert config.token_count == 16

    def test_sabotaged_backward_is_caught(self):
        def wrong(params, cache, d_logits):
            return model_backward(params, cache, d_logits).map(lambda t: t * 1.01)

        report = grad_check(toy_config(Variant.MLP), seed=0, backward=wrong)
        assert not report.passed
        name, err = report.worst()
        assert err > 1e-3 and name in report.errors


class TestTrain:
    def test_overfits_one_batch(self, overfit_set, small_config):
        assert len(overfit_set) == 32
        hyper = TrainHyper(lr=1e-2, batch_size=32, epochs=200, dtype="float64")
        run = train(overfit_set, small_config, hyper, seed=0)
        assert len(run.loss_curve) == 200
        assert run.final_metrics["train_oa"] >= 0.99
        assert run.loss_curve[-1] < run.loss_curve[0]

    def test_deterministic(self, overfit_set, small_config):
        hyper = TrainHyper(batch_size=8, epochs=3)
        a = train(overfit_set, small_config, hyper, seed=7)
        b = train(overfit_set, small_config, hyper, seed=7)
        assert a.loss_curve == b.loss_curve
        for name, value in a.params.named_tensors().items():
            assert value.tobytes() == b.params.named_tensors()[name].tobytes()

    def test_zero_lr_keeps_init(self, overfit_set, small_config):
        run = train(overfit_set, small_config, TrainHyper(lr=0.0, batch_size=16, epochs=2), seed=3)
        initial = init_params(small_config, 3, np.float32).named_tensors()
        for name, value in run.params.named_tensors().items():
            np.testing.assert_array_equal(value, initial[name])

    def test_loss_curve_length(self, overfit_set, small_config):
        run = train(overfit_set, small_config, TrainHyper(batch_size=10, epochs=2), seed=0)
        assert len(run.loss_curve) == 2 * 4

    def test_non_finite_input_diverges(self, overfit_set, small_config):
        bad = overfit_set.subset(np.arange(4))
        bad.patches = bad.patches.copy()
        bad.patches[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as exc:
            train(bad, small_config, TrainHyper(batch_size=4, epochs=1), seed=0)
        assert exc.value.epoch == 1 and exc.value.batch == 0

    def test_writes_checkpoint(self, tmp_path, overfit_set, small_config):
        run = train(overfit_set, small_config, TrainHyper(epochs=1), seed=0, checkpoint_path=tmp_path / "c.sguw")
        assert run.checkpoint_path.is_file()


class TestEvaluate:
    def test_parallel_matches_sequential(self, overfit_set, small_config):
        params = init_params(small_config, 0, np.float32)
        one = evaluate(params, small_config, overfit_set, batch_size=5, workers=1)
        many = evaluate(params, small_config, overfit_set, batch_size=5, workers=4)
        np.testing.assert_array_equal(one.counts, many.counts)
        assert one.total == len(overfit_set)
