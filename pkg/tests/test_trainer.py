import numpy as np
import pytest

from evalnet import tensor as T
from evalnet.evaluator import metrics_from_arrays
from evalnet.model import EvalNet, ModelConfig
from evalnet.patches import split_of
from evalnet.synthetic import synthetic_patches
from evalnet.trainer import (
    NumericalError,
    OptimState,
    TrainConfig,
    TrainingError,
    _dataset_loss,
    adam_step,
    history_csv,
    predict_records,
    select_best,
    train_stage1,
    train_stage2,
    validate,
)


SMALL = dict(
    encoder_channels=[8, 8, 16, 16, 16],
    decoder_channels=[16, 16, 16, 8, 8],
    dfr_channels=4,
    dfr_blocks_low=1,
    dfr_blocks_high=1,
    dfr_blocks_fused=1,
    scale_ratio=2,
)


@pytest.fixture(scope="module")
def data():
    return synthetic_patches(10, 32, ratio=2, n_val=2, seed=0)


def small_model(**kw):
    return EvalNet(ModelConfig(**{**SMALL, **kw}))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = OptimState.zeros_like([p])
        adam_step([p], state, 0.1)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])
        assert state.t == 1

    def test_single_step_closed_form(self):
        with T.precision(np.float64):
            p = T.Tensor(np.zeros(1), requires_grad=True)
            p.grad = np.ones(1)
            adam_step([p], OptimState.zeros_like([p]), 0.1)
            assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)

    def test_missing_grad(self):
        p = T.Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(TrainingError):
            adam_step([p], OptimState.zeros_like([p]), 0.1)

    def test_second_moment_non_negative(self):
        rng = np.random.default_rng(0)
        p = T.Tensor(np.zeros(5), requires_grad=True)
        state = OptimState.zeros_like([p])
        for _ in range(5):
            p.grad = rng.standard_normal(5)
            adam_step([p], state, 0.01)
        assert (state.v[0] >= 0).all() and state.t == 5


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_stage1=0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_round_trip(self):
        cfg = TrainConfig(lr_stage1=3e-4, seed=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestSelection:
    def test_argmin(self):
        assert select_best([(1, 0.9), (2, 0.5), (3, 0.7)])[0] == 2

    def test_tie_keeps_earliest(self):
        assert select_best([(1, 0.5), (2, 0.5)])[0] == 1

    def test_empty(self):
        with pytest.raises(TrainingError):
            select_best([])


class TestValidate:
    def test_perfect_and_offset(self, data):
        model = small_model()
        val = split_of(data, "val")
        pred = predict_records(model, val, 1)
        exact = [r.__class__(**{**r.__dict__, "target": p[0]}) for r, p in zip(val, pred)]
        assert validate(model, exact) == 0
        shifted = [r.__class__(**{**r.__dict__, "target": p[0] - np.float32(0.25)}) for r, p in zip(val, pred)]
        assert validate(model, shifted) == pytest.approx(0.25, abs=1e-6)

    def test_matches_evaluator(self, data):
        model = small_model()
        val = split_of(data, "val")
        pred = predict_records(model, val, 1)
        y = np.stack([r.target for r in val])
        assert abs(validate(model, val) - metrics_from_arrays(y, pred[:, 0]).rmse) < 1e-10

    def test_empty(self):
        with pytest.raises(TrainingError):
            validate(small_model(), [])


class TestStages:
    def test_overfit_eight_patches(self, data):
        model = small_model()
        res = train_stage1(model, data, TrainConfig(lr_stage1=1e-3, epochs_stage1=250))
        final = _dataset_loss(model, split_of(data, "train"), 1, "mse", 4)
        assert len(split_of(data, "train")) == 8
        assert final <= res.initial_train_loss / 100

    def test_empty_train(self, data):
        with pytest.raises(TrainingError):
            train_stage1(small_model(), split_of(data, "val"), TrainConfig(epochs_stage1=1))

    def test_recorded_rmse_matches_fresh_validate(self, data, tmp_path):
        model = small_model()
        cfg = TrainConfig(lr_stage1=1e-3, epochs_stage1=3, checkpoint_dir=str(tmp_path))
        res = train_stage1(model, data, cfg)
        fresh = validate(res.best.build_model(), split_of(data, "val"))
        assert abs(fresh - res.best.validation_rmse_log) < 1e-7
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["stage1_best.evckpt", "stage1_epoch001.evckpt", "stage1_epoch002.evckpt", "stage1_epoch003.evckpt"]
        assert [h["epoch"] for h in res.history] == [0, 1, 2, 3]

    def test_stage2_freezes_backbone(self, data):
        model = small_model()
        before = {n: p.data.tobytes() for n, p in model.named_parameters()}
        backbone = {id(p) for p in model.backbone_parameters()}
        res = train_stage2(model, data, TrainConfig(lr_stage2=1e-3, epochs_stage2=2))
        changed = 0
        for n, p in model.named_parameters():
            if id(p) in backbone:
                assert p.data.tobytes() == before[n], n
            else:
                changed += p.data.tobytes() != before[n]
        assert changed > 0
        assert res.best.stage == 2

    def test_stage2_train_l1_not_worse(self, data):
        model = small_model()
        res = train_stage2(model, data, TrainConfig(lr_stage2=1e-4, epochs_stage2=3))
        final = _dataset_loss(model, split_of(data, "train"), 2, "l1", 4)
        initial = _dataset_loss(small_model(), split_of(data, "train"), 1, "l1", 4)
        assert res.initial_train_loss == pytest.approx(initial, rel=1e-12)
        assert final <= initial

    def test_stage2_needs_dfr(self, data):
        with pytest.raises(TrainingError):
            train_stage2(small_model(dfr_enabled=False), data, TrainConfig())

    def test_identical_runs_identical_trajectories(self, data):
        cfg = TrainConfig(lr_stage1=1e-3, epochs_stage1=2, seed=3)
        a, b = small_model(), small_model()
        ra, rb = train_stage1(a, data, cfg), train_stage1(b, data, cfg)
        assert [h["train_loss"] for h in ra.history] == [h["train_loss"] for h in rb.history]
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_non_finite_loss_aborts(self, data):
        model = small_model()
        model.decoder.head.bias.data[...] = np.inf
        with pytest.raises(NumericalError):
            train_stage1(model, data, TrainConfig(epochs_stage1=1))

    def test_history_csv(self):
        text = history_csv([{"epoch": 0, "stage": 1, "train_loss": 0.5, "val_rmse_log": 0.25, "wall_seconds": 0.0}])
        assert text.splitlines() == ["epoch,stage,train_loss,val_rmse_log,wall_seconds", "0,1,0.5,0.25,0.000"]
