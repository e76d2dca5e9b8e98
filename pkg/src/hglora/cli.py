"""Command-line entry point: synth, train, eval, gradcheck, sweep, simmap.

Every command writes its outputs under a run directory together with a
manifest (resolved config, input hashes, output hashes) so runs can be
replayed and compared byte for byte.  All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from .checkpoint import load_checkpoint
from .config import RunConfig, default_config, load_config, render_config, with_seed
from .data import generate, load_dataset, save_dataset, split_dataset, vocab_layout
from .lora import count_trainable, lora_parameter_count
from .model import VARIANTS, DualEncoderModel, ModelConfig
from .training import restore_model, train

log = logging.getLogger("hglora")

SPLIT_FRACTIONS = (0.7, 0.15, 0.15)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig | None,
                    inputs: dict[str, Path], outputs: list[Path]) -> Path:
    lines = [f"#hglora-manifest v=1 command={command}"]
    if cfg is not None:
        lines.append("[config]")
        lines.extend(render_config(cfg).rstrip("\n").split("\n"))
    lines.append("[inputs]")
    for name, path in sorted(inputs.items()):
        lines.append(f"{name} = {_sha256(Path(path))}")
    lines.append("[outputs]")
    for path in sorted(outputs, key=lambda p: p.name):
        lines.append(f"{path.name} = {_sha256(path)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = default_config()
    cfg = with_seed(cfg, args.seed)
    model_over = {}
    train_over = {}
    if getattr(args, "loss", None):
        train_over["loss"] = args.loss
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    for key, attr in (("variant", "variant"), ("k", "k"), ("rank", "r"),
                      ("dprime", "dprime")):
        value = getattr(args, attr, None)
        if value is not None:
            model_over[key] = value
    for toggle in ("hgnn_image", "hgnn_text", "use_lora"):
        value = getattr(args, toggle, None)
        if value is not None:
            model_over[toggle] = value
    return RunConfig(
        synth=cfg.synth,
        model=replace(cfg.model, **model_over) if model_over else cfg.model,
        train=replace(cfg.train, **train_over) if train_over else cfg.train,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    samples = generate(cfg.synth)
    outputs = []
    if args.fractions:
        fracs = tuple(float(x) for x in args.fractions.split(","))
        if len(fracs) != 3:
            raise ValueError("--fractions needs three comma-separated values")
        names = ("train", "val", "test")
        for name, subset in zip(names, split_dataset(samples, fracs, cfg.train.seed)):
            path = out / f"{name}.txt"
            save_dataset(subset, cfg.synth, path)
            outputs.append(path)
            print(f"{name}: {len(subset)} samples")
    else:
        path = out / "dataset.txt"
        save_dataset(samples, cfg.synth, path)
        outputs.append(path)
    counts = {}
    for s in samples:
        counts[s.label] = counts.get(s.label, 0) + 1
    for label in sorted(counts):
        print(f"class {label}: {counts[label]} samples")
    _write_manifest(out, "synth", cfg, {}, outputs)
    return 0


def _load_samples(path: Path):
    samples, synth_cfg = load_dataset(path)
    return samples, synth_cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    data_path = Path(args.data)
    samples, synth_cfg = _load_samples(data_path)
    if synth_cfg.side != cfg.synth.side or synth_cfg.patch_dim != cfg.synth.patch_dim \
            or synth_cfg.vocab_size != cfg.synth.vocab_size:
        raise ValueError("dataset geometry does not match the model config")
    cfg = RunConfig(synth=synth_cfg, model=cfg.model, train=cfg.train)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.model_cfg != cfg.model or resume.train_cfg != cfg.train:
            raise ValueError("resume checkpoint config does not match this run")
    result = train(cfg.model, cfg.train, samples, out_dir=out, resume=resume)
    for epoch, loss in enumerate(result.epoch_losses):
        start = resume.epoch if resume else 0
        print(f"epoch {start + epoch}: mean loss {loss:.6f}")
    outputs = [result.checkpoint_path, result.log_path]
    _write_manifest(out, "train", cfg, {"dataset": data_path}, outputs)
    print(f"trainable parameters: {count_trainable(result.model)}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _model_from_checkpoint(path: Path) -> tuple[DualEncoderModel, ModelConfig]:
    ckpt = load_checkpoint(path)
    return restore_model(ckpt), ckpt.model_cfg


def _evaluate(model: DualEncoderModel, samples, synth_cfg) -> ev.EvalReport:
    blocks = vocab_layout(synth_cfg)["class_blocks"]
    templates = ev.default_templates(synth_cfg)
    return ev.evaluate_zero_shot(
        [s.image for s in samples], [s.label for s in samples], blocks, templates, model,
    )


def cmd_eval(args) -> int:
    out = _out_dir(args)
    data_path = Path(args.data)
    samples, synth_cfg = _load_samples(data_path)
    if args.checkpoint:
        model, _ = _model_from_checkpoint(Path(args.checkpoint))
        inputs = {"dataset": data_path, "checkpoint": Path(args.checkpoint)}
    else:
        cfg = _resolve_config(args)
        model = DualEncoderModel(replace(
            cfg.model, side=synth_cfg.side, patch_dim=synth_cfg.patch_dim,
            vocab_size=synth_cfg.vocab_size,
        ))
        inputs = {"dataset": data_path}
    report = _evaluate(model, samples, synth_cfg)
    text = ev.format_report(report)
    report_path = out / "eval_report.txt"
    report_path.write_text(text)
    print(f"accuracy = {report.accuracy:.4f}")
    print(f"auc = {report.auc:.4f}")
    _write_manifest(out, "eval", None, inputs, [report_path])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import DEFAULT_SEEDS, STRICT_GROUPS, run_gradcheck

    out = _out_dir(args)
    seeds = DEFAULT_SEEDS[: args.seeds] if args.seeds <= len(DEFAULT_SEEDS) \
        else range(args.seeds)
    results = run_gradcheck(
        seeds=seeds,
        epsilon=args.epsilon,
        corrupt_op=args.corrupt_backward,
        seed_base=args.seed,
    )
    lines = []
    failed = False
    for group, err in sorted(results.items()):
        if group in STRICT_GROUPS:
            status = "ok" if err < 1e-5 else "FAIL"
            failed = failed or err >= 1e-5
        else:
            status = "info"  # shift-invariant coordinates, no strict bound
        lines.append(f"{group}: max rel err {err:.3e} [{status}]")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    (out / "gradcheck.txt").write_text(text)
    _write_manifest(out, "gradcheck", None, {}, [out / "gradcheck.txt"])
    if failed:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    return 0


def _component_rows():
    # (label, use_lora, hgnn, label_guided)
    return [
        ("base", False, False, False),
        ("lora", True, False, False),
        ("lora+hgnn", True, True, False),
        ("lora+label", True, False, True),
        ("full", True, True, True),
    ]


def sweep_points(cfg: RunConfig, axis: str, values: list[str] | None):
    n = cfg.synth.side ** 2
    if axis == "k":
        vals = [int(v) for v in values] if values else [1, cfg.model.k, n]
        return [(str(v), RunConfig(cfg.synth, replace(cfg.model, k=v), cfg.train))
                for v in vals]
    if axis == "r":
        vals = [int(v) for v in values] if values else [1, 2, cfg.model.rank, 8]
        return [(str(v), RunConfig(cfg.synth, replace(cfg.model, rank=v), cfg.train))
                for v in vals]
    if axis == "variant":
        vals = values or list(VARIANTS)
        return [(v, RunConfig(cfg.synth, replace(cfg.model, variant=v), cfg.train))
                for v in vals]
    if axis == "components":
        rows = []
        for label, use_lora, hgnn, guided in _component_rows():
            model = replace(cfg.model, use_lora=use_lora, hgnn_image=hgnn, hgnn_text=hgnn)
            tr = replace(cfg.train, loss="label_guided" if guided else "clip")
            rows.append((label, RunConfig(cfg.synth, model, tr)))
        return rows
    if axis == "encoder_toggle":
        rows = []
        for img_on, txt_on in ((False, False), (True, False), (False, True), (True, True)):
            label = f"img={'on' if img_on else 'off'},txt={'on' if txt_on else 'off'}"
            model = replace(cfg.model, hgnn_image=img_on, hgnn_text=txt_on)
            rows.append((label, RunConfig(cfg.synth, model, cfg.train)))
        return rows
    raise ValueError(f"unknown sweep axis {axis!r}")


def run_sweep_point(cfg: RunConfig, samples) -> tuple[float, float]:
    """Train (when there is anything to train) and evaluate one configuration."""
    train_s, _va, test_s = split_dataset(samples, SPLIT_FRACTIONS, cfg.train.seed)
    if cfg.model.has_trainables and cfg.train.epochs > 0:
        result = train(cfg.model, cfg.train, train_s)
        model = result.model
    else:
        model = DualEncoderModel(cfg.model)
    report = _evaluate(model, test_s, cfg.synth)
    return report.accuracy, report.auc


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    data_path = Path(args.data)
    samples, synth_cfg = _load_samples(data_path)
    cfg = RunConfig(synth=synth_cfg, model=cfg.model, train=cfg.train)
    rows = []
    for label, point_cfg in sweep_points(cfg, args.axis, args.values):
        acc, auc_value = run_sweep_point(point_cfg, samples)
        rows.append((label, acc, auc_value))
        log.info("sweep %s=%s: acc=%.4f auc=%.4f", args.axis, label, acc, auc_value)
    header = f"{args.axis:<18} {'ACC':>8} {'AUC':>8}"
    lines = [header] + [f"{label:<18} {acc:>8.4f} {auc_value:>8.4f}"
                        for label, acc, auc_value in rows]
    table = "\n".join(lines) + "\n"
    print(table, end="")
    (out / "sweep.txt").write_text(table)
    _write_manifest(out, "sweep", cfg, {"dataset": data_path}, [out / "sweep.txt"])
    return 0


def cmd_simmap(args) -> int:
    out = _out_dir(args)
    data_path = Path(args.data)
    samples, synth_cfg = _load_samples(data_path)
    model, _ = _model_from_checkpoint(Path(args.checkpoint))
    if not (0 <= args.sample < len(samples)):
        raise ValueError(f"sample index {args.sample} out of range")
    sample = samples[args.sample]
    query_class = args.query_class if args.query_class is not None else sample.label
    template = ev.default_templates(synth_cfg)[0]
    block = vocab_layout(synth_cfg)["class_blocks"][query_class]
    raw, norm = ev.similarity_map(sample.image, template.realize(tuple(block)), model)
    raw_path = out / f"simmap_{args.sample}_class{query_class}.txt"
    raw_path.write_text(
        "\n".join(" ".join(repr(float(x)) for x in row) for row in raw) + "\n"
    )
    pgm_path = out / f"simmap_{args.sample}_class{query_class}.pgm"
    ev.write_pgm(pgm_path, norm)
    print(f"sample {args.sample} (label {sample.label}) vs class {query_class}")
    print(f"wrote {raw_path.name}, {pgm_path.name}")
    _write_manifest(out, "simmap",
                    None, {"dataset": data_path, "checkpoint": Path(args.checkpoint)},
                    [raw_path, pgm_path])
    return 0


def cmd_dump_incidence(args) -> int:
    from . import hypergraph as hg

    out = _out_dir(args)
    data_path = Path(args.data)
    samples, _synth_cfg = _load_samples(data_path)
    model, model_cfg = _model_from_checkpoint(Path(args.checkpoint))
    sample = samples[args.sample]
    with ad.no_grad():
        if args.modality == "image":
            trace = model.image_trace(sample.image)
        else:
            trace = model.text_trace(sample.tokens)
        agg = hg.aggregate_attention(trace.attention[-1], mask=trace.mask)
        aff = hg.build_affinity(agg, trace.tokens, mask=trace.mask)
        inc = hg.build_incidence(aff, model_cfg.k)
    lines = [f"# incidence sample={args.sample} modality={args.modality} k={inc.k}"]
    for i, support in enumerate(inc.supports):
        lines.append(f"# row {i} support: {','.join(str(j) for j in support) or '-'}")
    for row in inc.matrix.data:
        lines.append(" ".join(f"{x:.6f}" for x in row))
    path = out / f"incidence_{args.modality}_{args.sample}.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    _write_manifest(out, "dump-incidence", None,
                    {"dataset": data_path, "checkpoint": Path(args.checkpoint)}, [path])
    return 0


def _add_common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hglora",
        description="Low-rank adapters + hypergraph context enhancement for "
                    "dual-encoder contrastive models, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--fractions", help="train,val,test fractions; writes three files")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="fine-tune on a dataset file")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss", choices=["label_guided", "clip"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--k", type=int)
    p.add_argument("--r", type=int, dest="r")
    p.add_argument("--dprime", type=int)
    p.add_argument("--hgnn-image", type=lambda s: s.lower() == "true", dest="hgnn_image")
    p.add_argument("--hgnn-text", type=lambda s: s.lower() == "true", dest="hgnn_text")
    p.add_argument("--lora", type=lambda s: s.lower() == "true", dest="use_lora")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="omit to evaluate the frozen init model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="backward pass vs finite differences")
    _add_common(p, config=False)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=3e-5)
    p.add_argument("--corrupt-backward", dest="corrupt_backward",
                   help="op name; negative control proving detection works")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train+eval across one config axis")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True,
                   choices=["k", "r", "components", "variant", "encoder_toggle"])
    p.add_argument("--values", nargs="*", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=["label_guided", "clip"])
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("simmap", help="cross-modal similarity map for one sample")
    _add_common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--query-class", type=int, dest="query_class")
    p.set_defaults(fn=cmd_simmap)

    p = sub.add_parser("dump-incidence", help="textual dump of one incidence matrix")
    _add_common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--modality", choices=["image", "text"], default="image")
    p.set_defaults(fn=cmd_dump_incidence)

    p = sub.add_parser("params", help="trainable-parameter accounting for a shape")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--dprime", type=int, default=64)
    p.set_defaults(fn=cmd_params)

    return parser


def cmd_params(args) -> int:
    lora_total = lora_parameter_count(args.layers, args.layers, args.dim, args.dim, args.r)
    hgnn_total = 2 * 4 * args.dim * args.dprime
    print(f"lora = {lora_total}")
    print(f"hgnn (d'={args.dprime}) = {hgnn_total}")
    print(f"temperature = 1")
    print(f"total = {lora_total + hgnn_total + 1}")
    return 0


def main(argv=None) -> int:
    level = os.environ.get("HGLORA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
