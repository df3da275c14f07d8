"""5-way 1-shot with synchronous labels: SRWM against the Fake-SR ablation.

    python scripts/sync_few_shot.py [--steps N] [--out runs]
"""
import argparse
import csv
from pathlib import Path

from srwm.cli import main as srwm

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(cfg: str, out: Path, steps) -> float:
    extra = ["--steps", str(steps)] if steps else []
    base = ["--config", str(CONFIGS / cfg), "--out-dir", str(out)]
    if srwm(["train", *base, *extra]) != 0:
        raise SystemExit(f"training {cfg} failed")
    srwm(["eval", *base, "--checkpoint", str(out / "final.ckpt")])
    with open(out / "eval_instance.csv") as f:
        return float(next(csv.DictReader(f))["total"])


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs")
    a = ap.parse_args()
    out = Path(a.out)
    srwm_acc = run("sync_srwm.cfg", out / "sync_srwm", a.steps)
    fake_acc = run("sync_fake_sr.cfg", out / "sync_fake_sr", a.steps)
    print(f"\nquery accuracy  SRWM {100 * srwm_acc:.1f}%   Fake-SR {100 * fake_acc:.1f}%   (chance 20%)")
