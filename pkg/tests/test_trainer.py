import math

import numpy as np
import pytest
import torch

from modules import trainer as trainer_module
from modules.data import AugmentConfig, SegSample
from modules.errors import InvalidInputError, TrainingDivergedError
from modules.losses import LossConfig, LossKind
from modules.model import build_model
from modules.trainer import (
    LRSchedule,
    OptimizerKind,
    PostprocessConfig,
    TrainConfig,
    build_optimizer,
    build_scheduler,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    optimizer_step,
    postprocess_mask,
    predict_mask,
    train,
)


def _train_cfg(**overrides) -> TrainConfig:
    base = dict(epochs=2, batch_size=4, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


def _params(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def test_defaults_mirror_training_setup():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (0.01, 0.9, 1e-4, 8, 10)
    assert cfg.optimizer is OptimizerKind.SGD_MOMENTUM
    assert cfg.loss_kind is LossKind.ADAPTIVE_FOCAL


# ==============================
# Entrenamiento
# ==============================

def test_train_logs_one_row_per_epoch(tiny_samples, tiny_model_cfg, loss_cfg):
    model = build_model(tiny_model_cfg, seed=7)
    _, logs = train(model, tiny_samples, _train_cfg(), loss_cfg, tiny_model_cfg, AugmentConfig(seed=7))
    assert [log.epoch for log in logs] == [1, 2]
    assert all(math.isfinite(log.mean_loss) and log.mean_loss > 0 for log in logs)
    assert all(len(log.batch_digest) == 40 for log in logs)
    assert logs[0].batch_digest != logs[1].batch_digest


def test_same_seed_is_bit_identical(tiny_samples, tiny_model_cfg, loss_cfg):
    runs = []
    for _ in range(2):
        model = build_model(tiny_model_cfg, seed=7)
        model, logs = train(model, tiny_samples, _train_cfg(), loss_cfg, tiny_model_cfg, AugmentConfig(seed=7))
        runs.append((logs, _params(model)))
    (logs_a, params_a), (logs_b, params_b) = runs
    assert [(l.epoch, l.mean_loss, l.batch_digest) for l in logs_a] == [
        (l.epoch, l.mean_loss, l.batch_digest) for l in logs_b
    ]
    assert all(torch.equal(params_a[k], params_b[k]) for k in params_a)


def test_resume_matches_straight_run(tmp_path, tiny_samples, tiny_model_cfg, loss_cfg):
    cfg = _train_cfg(epochs=3, lr_schedule=LRSchedule.POLY)
    aug = AugmentConfig(seed=7)

    straight, logs_straight = train(
        build_model(tiny_model_cfg, seed=7), tiny_samples, cfg, loss_cfg, tiny_model_cfg, aug, run_dir=tmp_path / "a"
    )
    assert (tmp_path / "a" / "checkpoints" / "epoch_001.pt").is_file()
    assert (tmp_path / "a" / "checkpoints" / "last.pt").is_file()

    resumed, logs_resumed = train(
        build_model(tiny_model_cfg, seed=99),
        tiny_samples,
        cfg,
        loss_cfg,
        tiny_model_cfg,
        aug,
        run_dir=tmp_path / "b",
        resume_from=tmp_path / "a" / "checkpoints" / "epoch_001.pt",
    )
    assert [l.mean_loss for l in logs_resumed] == [l.mean_loss for l in logs_straight]
    a, b = _params(straight), _params(resumed)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_extends_poly_horizon(tmp_path, tiny_samples, tiny_model_cfg, loss_cfg):
    # k épocas declarando el horizonte k+j y luego reanudar hasta k+j == corrida directa de k+j
    aug = AugmentConfig(seed=7)
    straight, logs_straight = train(
        build_model(tiny_model_cfg, seed=7), tiny_samples, _train_cfg(lr_schedule=LRSchedule.POLY),
        loss_cfg, tiny_model_cfg, aug,
    )
    train(
        build_model(tiny_model_cfg, seed=7), tiny_samples, _train_cfg(epochs=1, schedule_epochs=2, lr_schedule=LRSchedule.POLY),
        loss_cfg, tiny_model_cfg, aug, run_dir=tmp_path / "k",
    )
    resumed, logs_resumed = train(
        build_model(tiny_model_cfg, seed=99), tiny_samples, _train_cfg(lr_schedule=LRSchedule.POLY),
        loss_cfg, tiny_model_cfg, aug, resume_from=tmp_path / "k" / "checkpoints" / "epoch_001.pt",
    )
    key = lambda log: (log.epoch, log.mean_loss, log.batch_digest)
    assert [key(l) for l in logs_resumed] == [key(l) for l in logs_straight]
    a, b = _params(straight), _params(resumed)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_rebuilds_poly_schedule_from_new_total(tmp_path, tiny_samples, tiny_model_cfg, loss_cfg):
    cfg = _train_cfg(epochs=1, lr_schedule=LRSchedule.POLY)
    train(build_model(tiny_model_cfg, seed=7), tiny_samples, cfg, loss_cfg, tiny_model_cfg, run_dir=tmp_path / "k")
    ckpt_path = tmp_path / "k" / "checkpoints" / "epoch_001.pt"
    ckpt = load_checkpoint(ckpt_path)
    # el horizonte de 1 época terminó en lr 0
    assert ckpt["optimizer_state"]["param_groups"][0]["lr"] == 0.0

    model = build_model(tiny_model_cfg, seed=99)
    model.load_state_dict(ckpt["model_state"])
    before = _params(model)
    resumed, logs = train(
        build_model(tiny_model_cfg, seed=99), tiny_samples, cfg.model_copy(update={"epochs": 2}),
        loss_cfg, tiny_model_cfg, resume_from=ckpt_path,
    )
    assert [l.epoch for l in logs] == [1, 2]
    after = _params(resumed)
    assert any(not torch.equal(before[k], after[k]) for k in before)


def test_batch_order_is_independent_of_loss_kind(tiny_samples, tiny_model_cfg, loss_cfg):
    digests = {}
    for kind in LossKind:
        model = build_model(tiny_model_cfg, seed=7)
        _, logs = train(model, tiny_samples, _train_cfg(loss_kind=kind, epochs=1), loss_cfg, tiny_model_cfg)
        digests[kind] = logs[0].batch_digest
    assert len(set(digests.values())) == 1


def test_zero_learning_rate_leaves_parameters(tiny_samples, tiny_model_cfg, loss_cfg):
    cfg = _train_cfg(epochs=1).model_copy(update={"learning_rate": 0.0})
    model = build_model(tiny_model_cfg, seed=7)
    before = _params(model)
    model, _ = train(model, tiny_samples, cfg, loss_cfg, tiny_model_cfg)
    after = _params(model)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_combined_dice_and_adam_run(tiny_samples, tiny_model_cfg, loss_cfg):
    cfg = _train_cfg(epochs=1, combine_dice=True, optimizer=OptimizerKind.ADAM, learning_rate=1e-3)
    _, logs = train(build_model(tiny_model_cfg), tiny_samples, cfg, loss_cfg, tiny_model_cfg)
    assert math.isfinite(logs[0].mean_loss)


def test_non_finite_logits_abort_training(tiny_samples, tiny_model_cfg, loss_cfg):
    model = build_model(tiny_model_cfg)
    with torch.no_grad():
        model.full_head.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as exc:
        train(model, tiny_samples, _train_cfg(epochs=1), loss_cfg, tiny_model_cfg)
    assert exc.value.epoch == 1
    assert exc.value.batch == 1
    assert "epoch=1" in str(exc.value)


def test_empty_dataset_is_rejected(tiny_model_cfg, loss_cfg):
    with pytest.raises(InvalidInputError):
        train(build_model(tiny_model_cfg), [], _train_cfg(), loss_cfg, tiny_model_cfg)


# ==============================
# Optimizador
# ==============================

def test_optimizer_step_rejects_non_finite_gradients():
    w = torch.nn.Parameter(torch.ones(3))
    opt = build_optimizer([w], TrainConfig())
    w.grad = torch.tensor([1.0, float("inf"), 0.0])
    with pytest.raises(TrainingDivergedError):
        optimizer_step(opt, epoch=2, batch=3)


def test_sgd_momentum_update_rule():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    cfg = TrainConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.1)
    opt = build_optimizer([w], cfg)
    for _ in range(2):
        w.grad = torch.tensor([2.0])
        optimizer_step(opt)
    # v1 = 2 + 0.1·1 = 2.1 ; w1 = 1 − 0.21 = 0.79
    # v2 = 0.5·2.1 + (2 + 0.079) = 3.129 ; w2 = 0.79 − 0.3129
    assert float(w) == pytest.approx(0.79 - 0.3129, abs=1e-6)


def test_poly_schedule_decays_to_zero():
    w = torch.nn.Parameter(torch.ones(1))
    cfg = TrainConfig(lr_schedule=LRSchedule.POLY, poly_power=1.0)
    opt = build_optimizer([w], cfg)
    sched = build_scheduler(opt, cfg, total_steps=4)
    lrs = []
    for _ in range(4):
        w.grad = torch.zeros(1)
        optimizer_step(opt)
        sched.step()
        lrs.append(opt.param_groups[0]["lr"])
    assert lrs == pytest.approx([0.0075, 0.005, 0.0025, 0.0])
    assert build_scheduler(opt, TrainConfig(), 4) is None


# ==============================
# Checkpoints
# ==============================

def test_checkpoint_roundtrip_predictions(tmp_path, tiny_samples, tiny_model_cfg, loss_cfg):
    model, _ = train(
        build_model(tiny_model_cfg), tiny_samples, _train_cfg(epochs=1), loss_cfg, tiny_model_cfg, run_dir=tmp_path
    )
    ckpt = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    assert ckpt["epoch"] == 1
    assert ckpt["configs"]["loss"]["kernel_size"] == loss_cfg.kernel_size
    restored = model_from_checkpoint(ckpt)
    image = tiny_samples[0].image
    assert np.array_equal(predict_mask(model, image), predict_mask(restored, image))


def test_load_checkpoint_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"format": "otra-cosa"}, tmp_path / "bad.pt")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "bad.pt")


# ==============================
# Inferencia y evaluación
# ==============================

def test_postprocess_mask():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[1:6, 1:6] = 1
    mask[8, 8] = 1
    assert postprocess_mask(mask, PostprocessConfig(opening=True))[8, 8] == 0
    kept = postprocess_mask(mask, PostprocessConfig(largest_component=True))
    assert kept.sum() == 25 and kept[8, 8] == 0
    assert np.array_equal(postprocess_mask(mask), mask)


def test_predict_mask_is_binary(tiny_model_cfg):
    model = build_model(tiny_model_cfg)
    pred = predict_mask(model, np.random.default_rng(0).random((32, 32)))
    assert pred.shape == (32, 32)
    assert set(np.unique(pred)) <= {0, 1}


def test_evaluate_rows_and_mean(tiny_samples, tiny_model_cfg):
    model = build_model(tiny_model_cfg)
    report = evaluate(model, tiny_samples)
    assert [c.case_id for c in report.cases] == ["case000", "case001"]
    assert report.overall.case_id == "Mean"
    assert report.overall.mean_dice == pytest.approx(np.mean([c.mean_dice for c in report.cases]))
    assert report.overall.slice_count == len(tiny_samples)
    assert set(report.predictions) == {s.stem for s in tiny_samples}


def test_evaluate_perfect_prediction(monkeypatch, tiny_model_cfg):
    samples = []
    for i in range(4):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[8 + i:20, 6:24 - i] = 1
        samples.append(SegSample(f"case{i // 2:03d}", i % 2, mask * 0.9 + 0.05, mask, mask.copy()))
    monkeypatch.setattr(
        trainer_module, "predict_mask", lambda model, image, threshold=0.5, postprocess_cfg=None: (image > 0.5).astype(np.uint8)
    )
    report = evaluate(build_model(tiny_model_cfg), samples)
    assert report.overall.mean_dice == 1.0
    assert report.overall.mean_hd95 == 0.0
    assert len(report.cases) == 2


def test_evaluate_rejects_empty(tiny_model_cfg):
    with pytest.raises(InvalidInputError):
        evaluate(build_model(tiny_model_cfg), [])


def test_plain_gradient_descent_and_decay_only_steps():
    w = torch.nn.Parameter(torch.tensor([2.0]))
    opt = build_optimizer([w], TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    w.grad = torch.tensor([3.0])
    optimizer_step(opt)
    assert float(w) == pytest.approx(2.0 - 0.3)

    w = torch.nn.Parameter(torch.tensor([2.0]))
    opt = build_optimizer([w], TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.5))
    w.grad = torch.zeros(1)
    optimizer_step(opt)
    assert float(w) == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_plain_gradient_descent_on_quadratic_is_geometric():
    # f(w) = ½w², ∇f = w: cada paso multiplica w por (1 − lr)
    lr = 0.1
    w = torch.nn.Parameter(torch.tensor([4.0], dtype=torch.float64))
    opt = build_optimizer([w], TrainConfig(learning_rate=lr, momentum=0.0, weight_decay=0.0))
    values = [float(w)]
    for _ in range(50):
        w.grad = w.detach().clone()
        optimizer_step(opt)
        values.append(float(w))
    for prev, cur in zip(values, values[1:]):
        assert cur / prev == pytest.approx(1 - lr, rel=1e-12)
    assert values[-1] == pytest.approx(4.0 * (1 - lr) ** 50, rel=1e-10)
    assert 0.5 * values[-1] ** 2 < 0.5 * values[0] ** 2 * 1e-4


def test_constant_gradient_velocity():
    w = torch.nn.Parameter(torch.tensor([0.0]))
    opt = build_optimizer([w], TrainConfig(learning_rate=1.0, momentum=0.5, weight_decay=0.0))
    for _ in range(2):
        w.grad = torch.tensor([1.0])
        optimizer_step(opt)
    assert float(opt.state[w]["momentum_buffer"]) == pytest.approx(1.0 * (1 + 0.5))


def test_predict_all_above_threshold(tiny_model_cfg):
    model = build_model(tiny_model_cfg)
    with torch.no_grad():
        model.full_head.weight.zero_()
        model.full_head.bias.fill_(5.0)
    assert predict_mask(model, np.zeros((32, 32))).all()


def test_largest_component_keeps_big_blob():
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[0:10, 0:10] = 1
    mask[15, 15:18] = 1
    kept = postprocess_mask(mask, PostprocessConfig(largest_component=True))
    assert kept.sum() == 100


def test_overall_is_mean_over_cases(monkeypatch, tiny_model_cfg):
    # caso A: 1 corte con DSC 0.9 ; caso B: 3 cortes con DSC 0.8
    from modules.metrics import CaseMetrics

    rows = iter([CaseMetrics("A", 0.9, 1.0, 1), CaseMetrics("B", 0.8, 3.0, 3)])
    monkeypatch.setattr(trainer_module, "evaluate_case", lambda *a, **k: next(rows))
    samples = [
        SegSample(cid, i, np.zeros((32, 32)), np.zeros((32, 32), dtype=np.uint8), np.zeros((32, 32), dtype=np.uint8))
        for cid, i in (("A", 0), ("B", 0), ("B", 1), ("B", 2))
    ]
    report = evaluate(build_model(tiny_model_cfg), samples)
    assert report.overall.mean_dice == pytest.approx(0.85)
    assert report.overall.mean_hd95 == pytest.approx(2.0)
