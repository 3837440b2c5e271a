import numpy as np
import pytest

from ancmatch.autodiff import Variable
from ancmatch.conv4d import anc_config
from ancmatch.errors import FormatError, InvalidArgumentError, NumericError
from ancmatch.features import GridTransform, pair_annotation, synth_pair
from ancmatch.losses import LossConfig
from ancmatch.model import ModelConfig, init_model_params
from ancmatch.self_similarity import SelfSimConfig
from ancmatch.tensor_core import Rng
from ancmatch.training import (
    Adam,
    TrainConfig,
    TrainingPair,
    checkpoint_load,
    checkpoint_save,
    init_train_state,
    run_training,
    train_epoch,
)


def small_model_cfg(alpha=0.001, dtype="float64"):
    return ModelConfig(
        selfsim=SelfSimConfig(window=3),
        anc=anc_config("d", (1, 2, 2, 1)),
        loss=LossConfig(alpha=alpha, gaussian_kernel=3),
        stride=8,
        dtype=dtype,
    )


def tiny_dataset(seed=0, n=2, h=4, w=4, d=8, noise=0.0, stride=8):
    pairs = []
    root = Rng(seed)
    for idx in range(n):
        p = synth_pair(root.child(idx), h, w, d,
                       GridTransform("translate", dx=idx % 2), 3, noise, stride=stride)
        pairs.append(TrainingPair(p.source, p.target, pair_annotation(p)))
    return pairs


class TestAdam:
    def test_zero_grad_keeps_params(self):
        p = Variable(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.001)
        opt.step()
        assert opt.t == 1
        assert np.array_equal(p.value, [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = Variable(np.array([0.0]), requires_grad=True)
        p.grad[...] = 1.0
        opt = Adam([("p", p)], lr=0.001)
        opt.step()
        # bias-corrected first step: -lr * 1 / (1 + eps)
        assert np.isclose(p.value[0], -0.001 / (1.0 + 1e-8), rtol=1e-12)
        assert np.array_equal(p.grad, [0.0])

    def test_second_identical_step_magnitude(self):
        p = Variable(np.array([0.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.001)
        p.grad[...] = 1.0
        opt.step()
        first = p.value[0]
        p.grad[...] = 1.0
        opt.step()
        second = p.value[0] - first
        assert abs(abs(second) - 0.001) < 1e-6

    def test_non_finite_gradient_aborts(self):
        p = Variable(np.array([0.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.001)
        p.grad[...] = np.nan
        with pytest.raises(NumericError):
            opt.step()
        assert opt.t == 0 and p.value[0] == 0.0


class TestSchedule:
    def test_kernel_per_epoch(self):
        cfg = TrainConfig(phases=((2, 5), (2, 3), (1, 0)))
        assert [cfg.kernel_for_epoch(e) for e in range(1, 6)] == [5, 5, 3, 3, 0]
        assert cfg.total_epochs == 5

    def test_invalid_phases(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(phases=((0, 5),))
        with pytest.raises(InvalidArgumentError):
            TrainConfig(phases=((1, 4),))


class TestTrainEpoch:
    def test_empty_dataset_rejected(self):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 3),), seed=0)
        state = init_train_state(cfg, tc)
        with pytest.raises(InvalidArgumentError):
            train_epoch([], state, cfg, tc)

    def test_loss_decreases_on_easy_pair(self):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((20, 0),), lr=0.01, seed=3)
        dataset = tiny_dataset(seed=5, n=1, noise=0.0)
        state = init_train_state(cfg, tc)
        reports = []
        for _ in range(6):
            reports.append(train_epoch(dataset, state, cfg, tc))
        lks = [r.mean_l_k for r in reports]
        assert all(lks[i + 1] < lks[i] for i in range(4))

    def test_same_seed_bit_identical(self):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((2, 3),), seed=9)
        dataset = tiny_dataset(seed=2, n=3, noise=0.2)

        def run():
            state = init_train_state(cfg, tc)
            for _ in range(2):
                train_epoch(dataset, state, cfg, tc)
            return state

        s1, s2 = run(), run()
        assert [r.mean_l_k for r in s1.reports] == [r.mean_l_k for r in s2.reports]
        for (n1, p1), (n2, p2) in zip(s1.params.named(), s2.params.named()):
            assert n1 == n2
            assert np.array_equal(p1.value, p2.value)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 3),), seed=1)
        dataset = tiny_dataset(seed=1, n=2)
        state = init_train_state(cfg, tc)
        train_epoch(dataset, state, cfg, tc)
        checkpoint_save(tmp_path, state, cfg, tc)
        back = checkpoint_load(tmp_path, cfg, tc)
        assert back.epoch == state.epoch
        assert back.optimizer.t == state.optimizer.t
        for (name, p), (_, q) in zip(state.params.named(), back.params.named()):
            assert np.array_equal(p.value, q.value)
            assert np.array_equal(state.optimizer.m[name], back.optimizer.m[name])

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((3, 3),), seed=7)
        dataset = tiny_dataset(seed=4, n=2, noise=0.1)

        straight = init_train_state(cfg, tc)
        for _ in range(3):
            train_epoch(dataset, straight, cfg, tc)

        partial = init_train_state(cfg, tc)
        for _ in range(2):
            train_epoch(dataset, partial, cfg, tc)
        checkpoint_save(tmp_path, partial, cfg, tc)
        resumed = checkpoint_load(tmp_path, cfg, tc)
        train_epoch(dataset, resumed, cfg, tc)

        for (n1, p1), (_, p2) in zip(straight.params.named(), resumed.params.named()):
            assert np.array_equal(p1.value, p2.value), n1

    def test_missing_tensor_rejected(self, tmp_path):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 3),), seed=1)
        state = init_train_state(cfg, tc)
        checkpoint_save(tmp_path, state, cfg, tc)
        (tmp_path / "param.selfsim.k1.tns").unlink()
        with pytest.raises(FormatError):
            checkpoint_load(tmp_path, cfg, tc)

    def test_version_mismatch_rejected(self, tmp_path):
        import json

        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 3),), seed=1)
        checkpoint_save(tmp_path, init_train_state(cfg, tc), cfg, tc)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["checkpoint_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            checkpoint_load(tmp_path, cfg, tc)

    def test_config_mismatch_rejected(self, tmp_path):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 3),), seed=1)
        checkpoint_save(tmp_path, init_train_state(cfg, tc), cfg, tc)
        other = small_model_cfg(alpha=0.5)
        with pytest.raises(FormatError):
            checkpoint_load(tmp_path, other, tc)


class TestRunTraining:
    def test_phase_schedule_respected(self):
        cfg = small_model_cfg()
        tc = TrainConfig(phases=((1, 5), (1, 3), (1, 0)), seed=2)
        dataset = tiny_dataset(seed=3, n=2)
        state = run_training(dataset, cfg, tc)
        assert [r.kernel for r in state.reports] == [5, 3, 0]
        assert all(np.isfinite(r.mean_l_k) for r in state.reports)
