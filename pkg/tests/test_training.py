import math

import numpy as np
import pytest

from hglora import autodiff as ad
from hglora import training
from hglora.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from hglora.config import TrainConfig, parse_config
from hglora.data import generate, split_dataset
from hglora.model import DualEncoderModel
from hglora.training import AdamState, TrainingDiverged, adamw_step, lr_at, restore_model


def tiny_run_config(**over):
    overrides = {
        "synth.num_classes": 2, "synth.pairs_per_class": 4, "synth.side": 2,
        "synth.patch_dim": 4, "synth.motif_patches_per_class": 1,
        "synth.vocab_size": 24, "synth.tokens_per_class": 2, "synth.text_len": 4,
        "model.dim": 8, "model.mlp_hidden": 12, "model.dprime": 4, "model.rank": 2,
        "model.k": 2, "train.epochs": 2, "train.batch_size": 4,
    }
    overrides.update(over)
    return parse_config("", overrides=overrides)


def scalar_param(value):
    return {"p": ad.Tensor(np.array([value]), trainable=True, name="p")}


def test_adamw_zero_grad_zero_decay_no_change():
    params = scalar_param(1.5)
    state = AdamState.init(params)
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step(params, {"p": np.array([0.0])}, state, lr=0.1, cfg=cfg)
    np.testing.assert_allclose(params["p"].data, [1.5])


def test_adamw_single_step_scalar_recurrence():
    # g=1, beta=(0.9, 0.999), wd=0: m_hat/sqrt(v_hat) = 1, so theta drops by ~lr
    params = scalar_param(1.0)
    state = AdamState.init(params)
    cfg = TrainConfig(weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    adamw_step(params, {"p": np.array([1.0])}, state, lr=0.1, cfg=cfg)
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(params["p"].data, [expected])
    assert abs(params["p"].data[0] - 0.9) < 1e-6


def test_adamw_pure_decay():
    params = scalar_param(2.0)
    state = AdamState.init(params)
    cfg = TrainConfig(weight_decay=1.0)
    adamw_step(params, {"p": np.array([0.0])}, state, lr=0.1, cfg=cfg)
    np.testing.assert_allclose(params["p"].data, [0.9 * 2.0])


def test_adamw_multi_step_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    params = scalar_param(0.7)
    state = AdamState.init(params)
    cfg = TrainConfig(weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    theta = 0.7
    m = v = 0.0
    for t in range(1, 8):
        g = float(rng.normal())
        adamw_step(params, {"p": np.array([g])}, state, lr=0.05, cfg=cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        theta = theta - 0.05 * mh / (math.sqrt(vh) + 1e-8) - 0.05 * 0.01 * theta
    np.testing.assert_allclose(params["p"].data, [theta], rtol=1e-12)


def test_adamw_rejects_nan_gradient_by_name():
    params = scalar_param(1.0)
    state = AdamState.init(params)
    with pytest.raises(FloatingPointError, match="p"):
        adamw_step(params, {"p": np.array([np.nan])}, state, 0.1, TrainConfig())


def test_adamw_requires_full_grad_cover():
    params = scalar_param(1.0)
    with pytest.raises(ValueError):
        adamw_step(params, {}, AdamState.init(params), 0.1, TrainConfig())


def test_lr_schedule_endpoints():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(10, 100, 10, 1e-3) == pytest.approx(1e-3)
    mid = 10 + (100 - 10) // 2
    assert lr_at(mid, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(101, 100, 10, 1e-3) == 0.0


def test_lr_schedule_continuous_at_warmup_boundary():
    base = 1e-3
    warm, total = 12, 240
    before = lr_at(warm - 1, total, warm, base)
    at = lr_at(warm, total, warm, base)
    after = lr_at(warm + 1, total, warm, base)
    assert before < at and abs(at - base) < 1e-15
    assert at - after < base * 2 * math.pi / (2 * (total - warm))  # cosine slope bound


def test_train_zero_epochs_returns_init(tmp_path):
    cfg = tiny_run_config(**{"train.epochs": 0})
    samples = generate(cfg.synth)
    res = training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
    init_model = DualEncoderModel(cfg.model)
    init_params = init_model.trainables()
    for name, arr in res.final_checkpoint.tensors.items():
        np.testing.assert_array_equal(arr, init_params[name].data)
    assert res.final_checkpoint.step == 0


def test_train_determinism_bit_identical(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    r1 = training.train(cfg.model, cfg.train, samples, out_dir=tmp_path / "a")
    r2 = training.train(cfg.model, cfg.train, samples, out_dir=tmp_path / "b")
    assert r1.log_lines == r2.log_lines
    assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()


def test_train_frozen_weights_conserved():
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    model_before = DualEncoderModel(cfg.model)
    baseline = [np.array(a, copy=True) for a in model_before.image_stack.weight_arrays()]
    baseline += [np.array(a, copy=True) for a in model_before.text_stack.weight_arrays()]
    res = training.train(cfg.model, cfg.train, samples)
    current = list(res.model.image_stack.weight_arrays())
    current += list(res.model.text_stack.weight_arrays())
    for b, c in zip(baseline, current):
        np.testing.assert_array_equal(b, c)


def test_train_loss_decreases():
    cfg = tiny_run_config(**{"train.epochs": 16, "synth.pairs_per_class": 8})
    samples = generate(cfg.synth)
    res = training.train(cfg.model, cfg.train, samples)
    # tiny batches make single epochs noisy; compare smoothed ends
    start = np.mean(res.epoch_losses[:3])
    end = np.mean(res.epoch_losses[-3:])
    assert end < start


def test_train_divergence_aborts_with_checkpoint(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    model = DualEncoderModel(cfg.model)
    with pytest.raises(TrainingDiverged) as exc_info:
        # poison the temperature so the first loss is NaN
        import hglora.training as tr

        original = tr.DualEncoderModel

        class Poisoned(original):
            def __init__(self, cfg_):
                super().__init__(cfg_)
                self.temperature.s.data = np.array(np.nan)

        tr.DualEncoderModel = Poisoned
        try:
            training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
        finally:
            tr.DualEncoderModel = original
    assert exc_info.value.checkpoint_path is not None
    assert exc_info.value.checkpoint_path.exists()


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    res = training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
    first = (tmp_path / "last.ckpt").read_bytes()
    ckpt = load_checkpoint(tmp_path / "last.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", ckpt)
    assert (tmp_path / "again.ckpt").read_bytes() == first


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
    raw = bytearray((tmp_path / "last.ckpt").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_rejects_truncation_and_bad_magic(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
    raw = (tmp_path / "last.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    swapped = b"XXXX" + raw[4:]
    (tmp_path / "magic.ckpt").write_bytes(swapped)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg_full = tiny_run_config(**{"train.epochs": 4})
    samples = generate(cfg_full.synth)
    full = training.train(cfg_full.model, cfg_full.train, samples, out_dir=tmp_path / "full")

    # same schedule, interrupted after two epochs, then resumed
    training.train(cfg_full.model, cfg_full.train, samples, out_dir=tmp_path / "half",
                   stop_after_epochs=2)
    half_ckpt = load_checkpoint(tmp_path / "half/last.ckpt")
    assert half_ckpt.epoch == 2
    resumed = training.train(
        cfg_full.model, cfg_full.train, samples, out_dir=tmp_path / "resumed",
        resume=half_ckpt,
    )
    for name, arr in full.final_checkpoint.tensors.items():
        np.testing.assert_array_equal(arr, resumed.final_checkpoint.tensors[name])
    assert (tmp_path / "full/last.ckpt").read_bytes() == (
        tmp_path / "resumed/last.ckpt"
    ).read_bytes()


def test_restore_model_mismatch_rejected(tmp_path):
    cfg = tiny_run_config()
    samples = generate(cfg.synth)
    training.train(cfg.model, cfg.train, samples, out_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "last.ckpt")
    del ckpt.tensors["temperature.s"]
    with pytest.raises(ValueError):
        restore_model(ckpt)


def test_split_then_train_smoke():
    cfg = tiny_run_config(**{"synth.pairs_per_class": 6})
    samples = generate(cfg.synth)
    train_s, val_s, test_s = split_dataset(samples, (0.7, 0.15, 0.15), seed=0)
    res = training.train(cfg.model, cfg.train, train_s)
    assert len(res.epoch_losses) == cfg.train.epochs
