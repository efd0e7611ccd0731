"""Padding or pooling comparison on a synthetic variable-length store.

Runs ``synth``, ``split`` and ``compare`` through the CLI with a desk-scale
Adam configuration; pass ``--set`` to override any config key.
"""
import argparse
import sys
from pathlib import Path

from tmdnet.cli import main as tmdnet

DESK_SCALE = ["synth.n_per_class=20", "synth.length_min=100", "synth.length_max=1024",
              "train.optimizer=adam", "train.learning_rate=1e-2", "train.weight_decay=0",
              "train.batch_size=16", "train.max_epochs=15", "train.patience=5",
              "train.dtype=float32"]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("axis", choices=("padding", "pooling"))
    p.add_argument("--out-dir", default="runs/synthetic_compare")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = p.parse_args(argv)
    out = Path(args.out_dir)
    flags = [f"--set={s}" for s in DESK_SCALE + args.set] + ["--seed", str(args.seed)]
    steps = [
        [*flags, "--out-dir", str(out / "synth"), "synth"],
        [*flags, "--out-dir", str(out / "split"), "split", str(out / "synth" / "store")],
        [*flags, "--out-dir", str(out), "compare", args.axis, str(out / "synth" / "store"),
         str(out / "split"), "--n-seeds", str(args.n_seeds)],
    ]
    for step in steps:
        code = tmdnet(step)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
