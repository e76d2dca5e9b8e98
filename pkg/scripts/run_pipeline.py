#!/usr/bin/env python3
"""Full pipeline demo: synthesize data, train, evaluate, dump artifacts.

Writes everything under runs/pipeline_<seed>/ using the repo defaults.
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def sh(*argv):
    print("+", " ".join(str(a) for a in argv))
    subprocess.run([sys.executable, "-m", "hglora.cli", *map(str, argv)], check=True)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=None)
    args = parser.parse_args()

    base = ROOT / "runs" / f"pipeline_{args.seed}"
    cfg = ROOT / "configs" / "defaults.cfg"
    sh("synth", "--config", cfg, "--seed", args.seed, "--out", base / "data",
       "--fractions", "0.7,0.15,0.15")
    train_args = ["train", "--config", cfg, "--seed", args.seed,
                  "--out", base / "run", "--data", base / "data" / "train.txt"]
    if args.epochs is not None:
        train_args += ["--epochs", args.epochs]
    sh(*train_args)
    sh("eval", "--seed", args.seed, "--out", base / "eval",
       "--data", base / "data" / "test.txt",
       "--checkpoint", base / "run" / "last.ckpt")
    sh("simmap", "--out", base / "maps", "--data", base / "data" / "test.txt",
       "--checkpoint", base / "run" / "last.ckpt", "--sample", "0")
    print(f"\nartifacts under {base}")


if __name__ == "__main__":
    main()
