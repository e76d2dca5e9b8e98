#!/usr/bin/env python3
"""Ablation tables at desk scale: component toggles, context-module
variants, k sweep, rank sweep, per-encoder integration.

Each table is a train+eval per row with a shared seed, averaged over
--seeds runs. Expect a few minutes per table with the reduced config.
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from hglora.cli import sweep_points
from hglora.config import default_config, with_seed
from hglora.data import generate, split_dataset, vocab_layout
from hglora import evaluation as ev
from hglora import training
from hglora.model import DualEncoderModel

ROOT = Path(__file__).resolve().parent.parent

# reduced scale keeps one row under ~15 s
REDUCED = dict(pairs_per_class=24, motif_strength=4.0, noise_std=0.25, tokens_per_class=5)


def run_point(cfg):
    samples = generate(cfg.synth)
    train_s, _val_s, test_s = split_dataset(samples, (0.7, 0.15, 0.15), cfg.train.seed)
    if cfg.model.has_trainables and cfg.train.epochs > 0:
        model = training.train(cfg.model, cfg.train, train_s).model
    else:
        model = DualEncoderModel(cfg.model)
    blocks = vocab_layout(cfg.synth)["class_blocks"]
    report = ev.evaluate_zero_shot(
        [s.image for s in test_s], [s.label for s in test_s],
        blocks, ev.default_templates(cfg.synth), model,
    )
    return report.accuracy, report.auc


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--axis", default="components",
                        choices=["components", "variant", "k", "r", "encoder_toggle"])
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=12)
    args = parser.parse_args()

    base = default_config()
    base = type(base)(
        synth=replace(base.synth, **REDUCED),
        model=replace(base.model, dprime=8),
        train=replace(base.train, epochs=args.epochs, batch_size=8),
    )
    rows = {}
    for seed in range(args.seeds):
        cfg = with_seed(base, seed)
        for label, point in sweep_points(cfg, args.axis, None):
            acc, auc_value = run_point(point)
            rows.setdefault(label, []).append((acc, auc_value))
            print(f"seed {seed} {label:18s} ACC={acc:.3f} AUC={auc_value:.3f}", flush=True)

    print(f"\n{args.axis:<18} {'ACC':>8} {'AUC':>8}   (mean over {args.seeds} seeds)")
    for label, vals in rows.items():
        accs, aucs = zip(*vals)
        print(f"{label:<18} {np.mean(accs):>8.3f} {np.mean(aucs):>8.3f}")


if __name__ == "__main__":
    main()
