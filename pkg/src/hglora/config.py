"""Canonical key-value config text and the run-level config bundle.

Format: one ``section.key = value`` per line, ``#`` comments, sorted keys
when rendered.  A single top-level ``seed`` feeds every random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import SynthConfig
from .model import ModelConfig

_BOOL = {"true": True, "false": False}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "label_guided"  # or "clip"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("label_guided", "clip"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig
    model: ModelConfig
    train: TrainConfig

    def seed(self) -> int:
        return self.train.seed


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() not in _BOOL:
            raise ValueError(f"expected true/false, got {raw!r}")
        return _BOOL[raw.lower()]
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


_FIELD_TYPES = {"int": int, "float": float, "bool": bool, "str": str}

# keys derived from the synth section or the top-level seed, never read
# from model.* lines
_DERIVED_MODEL_KEYS = ("side", "patch_dim", "vocab_size", "seed")


def render_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.train.seed}"]
    for f in fields(SynthConfig):
        if f.name != "seed":
            lines.append(f"synth.{f.name} = {_render_value(getattr(cfg.synth, f.name))}")
    for f in fields(ModelConfig):
        if f.name not in _DERIVED_MODEL_KEYS:
            lines.append(f"model.{f.name} = {_render_value(getattr(cfg.model, f.name))}")
    for f in fields(TrainConfig):
        if f.name != "seed":
            lines.append(f"train.{f.name} = {_render_value(getattr(cfg.train, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _section(cls, kv: dict[str, str], prefix: str, skip=()):
    values = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        key = f"{prefix}.{f.name}"
        if key in kv:
            typ = _FIELD_TYPES[f.type] if isinstance(f.type, str) else f.type
            values[f.name] = _coerce(kv.pop(key), typ)
    return values


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from key-value text; unknown keys are rejected."""
    kv = parse_kv_text(text)
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items()})
    seed = int(kv.pop("seed", "0"))
    synth_vals = _section(SynthConfig, kv, "synth", skip=("seed",))
    model_vals = _section(ModelConfig, kv, "model", skip=_DERIVED_MODEL_KEYS)
    train_vals = _section(TrainConfig, kv, "train", skip=("seed",))
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    synth = SynthConfig(seed=seed, **synth_vals)
    model = ModelConfig(
        side=synth.side,
        patch_dim=synth.patch_dim,
        vocab_size=synth.vocab_size,
        seed=seed,
        **model_vals,
    )
    train = TrainConfig(seed=seed, **train_vals)
    if model.max_len < synth.text_len:
        raise ValueError(
            f"model.max_len {model.max_len} cannot hold synth.text_len {synth.text_len}"
        )
    return RunConfig(synth=synth, model=model, train=train)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides=overrides)


def default_config(seed: int = 0) -> RunConfig:
    cfg = parse_config("", overrides=None)
    return with_seed(cfg, seed)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return RunConfig(
        synth=replace(cfg.synth, seed=seed),
        model=replace(cfg.model, seed=seed),
        train=replace(cfg.train, seed=seed),
    )


def render_model_train(model: ModelConfig, train: TrainConfig) -> str:
    """Config snapshot stored inside checkpoints (model + train sections)."""
    lines = [f"seed = {train.seed}"]
    for f in fields(ModelConfig):
        if f.name != "seed":
            lines.append(f"model.{f.name} = {_render_value(getattr(model, f.name))}")
    for f in fields(TrainConfig):
        if f.name != "seed":
            lines.append(f"train.{f.name} = {_render_value(getattr(train, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_model_train(text: str) -> tuple[ModelConfig, TrainConfig]:
    kv = parse_kv_text(text)
    seed = int(kv.pop("seed", "0"))
    model_vals = _section(ModelConfig, kv, "model", skip=("seed",))
    train_vals = _section(TrainConfig, kv, "train", skip=("seed",))
    if kv:
        raise ValueError(f"unknown snapshot keys: {sorted(kv)}")
    return ModelConfig(seed=seed, **model_vals), TrainConfig(seed=seed, **train_vals)
