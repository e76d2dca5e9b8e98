"""Deterministic fine-tuning loop: AdamW, warmup-cosine schedule, checkpoints.

Everything derives from the single config seed: model init, batch
shuffling, and therefore every logged loss and the final checkpoint.
Frozen encoder weights never change; only the adapter / context-module /
temperature tensors are updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import EmbeddingBatch, clip_loss, label_guided_infonce
from .model import DualEncoderModel, ModelConfig


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Path | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros(t.shape) for n, t in params.items()},
            v={n: np.zeros(t.shape) for n, t in params.items()},
            step=0,
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """Decoupled-weight-decay update; frozen tensors are never touched."""
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"adamw_step: gradients missing for {sorted(missing)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adamw_step: non-finite gradient for {name}")
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = p.data - lr * update - lr * cfg.weight_decay * p.data


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("lr_at: total_steps must be >= 1")
    if step > total_steps:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return 0.0 if step >= total_steps else base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: DualEncoderModel
    epoch_losses: list[float]
    log_lines: list[str]
    final_checkpoint: Checkpoint
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _batch_loss(model: DualEncoderModel, samples, loss_kind: str):
    img, txt, labels = model.embed_pairs(samples)
    batch = EmbeddingBatch(image=img, text=txt, labels=labels)
    if loss_kind == "clip":
        return clip_loss(batch, model.temperature)
    return label_guided_infonce(batch, model.temperature)


def _snapshot(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: dict[str, Tensor],
    state: AdamState,
    step: int,
    epoch: int,
) -> Checkpoint:
    return Checkpoint(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        tensors={n: np.array(t.data, copy=True) for n, t in params.items()},
        adam_m={n: np.array(a, copy=True) for n, a in state.m.items()},
        adam_v={n: np.array(a, copy=True) for n, a in state.v.items()},
        adam_step=state.step,
        rng_state={"scheme": "per-epoch-derived", "seed": train_cfg.seed, "next_epoch": epoch},
        step=step,
        epoch=epoch,
    )


def restore_model(ckpt: Checkpoint) -> DualEncoderModel:
    """Rebuild the model from the config snapshot and load trainable values."""
    model = DualEncoderModel(ckpt.model_cfg)
    params = model.trainables()
    if set(params) != set(ckpt.tensors):
        raise ValueError(
            f"checkpoint parameters do not match model: "
            f"{sorted(set(params) ^ set(ckpt.tensors))}"
        )
    for name, tensor in params.items():
        stored = ckpt.tensors[name]
        if stored.shape != tensor.shape:
            raise ValueError(f"shape mismatch for {name}: {stored.shape} vs {tensor.shape}")
        tensor.data = np.array(stored, copy=True)
    return model


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    samples,
    out_dir: Path | str | None = None,
    resume: Checkpoint | None = None,
    stop_after_epochs: int | None = None,
) -> TrainResult:
    """Run (or continue) training; ``stop_after_epochs`` bounds this session
    without changing the overall schedule, simulating an interruption."""
    if not samples:
        raise ValueError("train: dataset is empty")
    if not model_cfg.has_trainables:
        raise ValueError("train: model has no trainable parameters")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        if resume.model_cfg != model_cfg or resume.train_cfg != train_cfg:
            raise ValueError("train: resume checkpoint config does not match")
        model = restore_model(resume)
        params = model.trainables()
        state = AdamState(
            m={n: np.array(a, copy=True) for n, a in resume.adam_m.items()},
            v={n: np.array(a, copy=True) for n, a in resume.adam_v.items()},
            step=resume.adam_step,
        )
        start_epoch = resume.epoch
    else:
        model = DualEncoderModel(model_cfg)
        params = model.trainables()
        state = AdamState.init(params)
        start_epoch = 0

    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    ckpt = _snapshot(model_cfg, train_cfg, params, state,
                     start_epoch * steps_per_epoch, start_epoch)
    ckpt_path = None
    if out_path is not None:
        ckpt_path = out_path / "last.ckpt"
        save_checkpoint(ckpt_path, ckpt)

    end_epoch = train_cfg.epochs
    if stop_after_epochs is not None:
        end_epoch = min(end_epoch, start_epoch + stop_after_epochs)

    log_lines: list[str] = []
    epoch_losses: list[float] = []
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng([train_cfg.seed, 4, epoch]).permutation(len(samples))
        batch_losses: list[float] = []
        for lo in range(0, len(samples), train_cfg.batch_size):
            batch = [samples[int(i)] for i in order[lo:lo + train_cfg.batch_size]]
            lr = lr_at(step, total_steps, warmup_steps, train_cfg.base_lr)
            loss = _batch_loss(model, batch, train_cfg.loss)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} step {step}", ckpt_path
                )
            grad_record = ad.backward(loss)
            grads = {
                name: grad_record.get(t, np.zeros(t.shape)) for name, t in params.items()
            }
            adamw_step(params, grads, state, lr, train_cfg)
            batch_losses.append(loss_val)
            log_lines.append(f"{epoch},{step},{lr!r},{loss_val!r}")
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        ckpt = _snapshot(model_cfg, train_cfg, params, state, step, epoch + 1)
        if out_path is not None:
            save_checkpoint(ckpt_path, ckpt)

    log_path = None
    if out_path is not None:
        log_path = out_path / "train_log.csv"
        log_path.write_text("epoch,step,lr,loss\n" + "\n".join(log_lines) + "\n")
    return TrainResult(
        model=model,
        epoch_losses=epoch_losses,
        log_lines=log_lines,
        final_checkpoint=ckpt,
        checkpoint_path=ckpt_path,
        log_path=log_path,
    )
