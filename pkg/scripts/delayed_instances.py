"""Delayed-label 5-way stream: instance-level accuracy, reset ablation and sigma(beta) report.

    python scripts/delayed_instances.py [--steps N] [--out runs/delayed_srwm] [--checkpoint path]
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from srwm.cli import main as srwm
from srwm.config import load_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "delayed_srwm.cfg"


def total(out: Path) -> float:
    with open(out / "eval_instance.csv") as f:
        return float(next(csv.DictReader(f))["total"])


def first_instance_baseline(episodes) -> float:
    vals = []
    for ep in episodes:
        seen = set()
        for t in np.flatnonzero(ep.loss_mask):
            if int(ep.target[t]) not in seen:
                vals.append(1.0 / (ep.num_classes - len(seen)))
                seen.add(int(ep.target[t]))
    return float(np.mean(vals))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs/delayed_srwm")
    ap.add_argument("--checkpoint", help="skip training and evaluate this checkpoint")
    a = ap.parse_args()
    out = Path(a.out)
    base = ["--config", str(CONFIG), "--out-dir", str(out)]
    ckpt = a.checkpoint
    if ckpt is None:
        if srwm(["train", *base, *(["--steps", str(a.steps)] if a.steps else [])]) != 0:
            raise SystemExit("training failed")
        ckpt = str(out / "final.ckpt")

    rc = load_config(CONFIG)
    span = rc["train"]["bptt_span"]
    print("carried state:")
    srwm(["eval", *base, "--checkpoint", ckpt])
    carry = total(out)
    print(f"\nfirst-instance baseline (guess among unseen labels): "
          f"{100 * first_instance_baseline(rc.eval_episodes(rc['train']['seed'])):.1f}")
    print(f"\nstate reset every {span} tokens:")
    srwm(["eval", *base, "--checkpoint", ckpt, "--reset-every", str(span)])
    print(f"\nreset ablation costs {100 * (carry - total(out)):.1f} points of total accuracy\n")
    srwm(["inspect", *base, "--checkpoint", ckpt])
