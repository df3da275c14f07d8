"""Two-task delayed-label stream with a switch in the middle: per-position accuracy curve.

    python scripts/task_switch.py [--steps N] [--out runs/multitask_srwm] [--init runs/delayed_srwm/final.ckpt]

The model is fine-tuned from a delayed-label checkpoint (run scripts/delayed_instances.py first).

Prints the accuracy around the switch; the full curve is in eval_positions.csv.
"""
import argparse
import csv
from pathlib import Path

from srwm.cli import main as srwm
from srwm.config import load_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "multitask_srwm.cfg"

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs/multitask_srwm")
    ap.add_argument("--init", default="runs/delayed_srwm/final.ckpt")
    a = ap.parse_args()
    out = Path(a.out)
    base = ["--config", str(CONFIG), "--out-dir", str(out)]
    extra = ["--init-checkpoint", a.init] + (["--steps", str(a.steps)] if a.steps else [])
    if srwm(["train", *base, *extra]) != 0:
        raise SystemExit("training failed")
    srwm(["eval", *base, "--checkpoint", str(out / "final.ckpt")])
    with open(out / "eval_positions.csv") as f:
        acc = [float(r["accuracy"]) for r in csv.DictReader(f)]
    rc = load_config(CONFIG)
    switch = rc["data"]["N"] * rc["data"]["max_instances_per_class"]
    print(f"\ntask switch at position {switch}")
    for p in range(max(0, switch - 10), min(len(acc), switch + 30), 2):
        bar = "#" * round(40 * acc[p])
        print(f"{p - switch:+4d} {100 * acc[p]:5.1f} {bar}")
