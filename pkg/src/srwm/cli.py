"""Command-line interface: ``srwm {train,eval,gradcheck,gen-episodes,inspect}``.

Exit codes: 0 ok, 2 configuration, 3 numeric divergence, 4 I/O, 5 verification failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, ConfigMismatchError, checkpoint_load, checkpoint_save, config_hash
from .config import ALL_SECTIONS, ConfigError, RunConfig, load_config, parse_config
from .episodes import FeatureFileError, write_episode_dump
from .layers import LayerKind
from .model import Model
from .numerics import NumericError, Rng
from .oracle import gradcheck
from .training import INSTANCE_COLUMNS, Metrics, Trainer, evaluate, learning_rate, run_episodes

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_VERIFY = 0, 2, 3, 4, 5

RESOLVED_NAME = "resolved.cfg"
METRICS_NAME = "metrics.csv"
FINAL_CKPT = "final.ckpt"
PARAM_SEED_STREAM = 0


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.10g}"


def _overrides(args) -> dict[tuple[str, str], str]:
    pairs = {
        ("train", "seed"): getattr(args, "seed", None),
        ("train", "threads"): getattr(args, "threads", None),
        ("train", "total_steps"): getattr(args, "steps", None),
        ("train", "init_checkpoint"): getattr(args, "init_checkpoint", None),
        ("data", "protocol"): getattr(args, "protocol", None),
        ("data", "N"): getattr(args, "N", None),
        ("data", "K"): getattr(args, "K", None),
        ("model", "layer_kind"): getattr(args, "kind", None),
        ("output", "out_dir"): getattr(args, "out_dir", None),
    }
    return {k: str(v) for k, v in pairs.items() if v is not None}


def _load_run_config(args, sections=ALL_SECTIONS, header: dict | None = None) -> RunConfig:
    if args.config:
        return load_config(args.config, _overrides(args), sections)
    if header is not None and "run_config" in header:
        return parse_config(header["run_config"].replace("\\n", "\n"), _overrides(args), sections)
    raise ConfigError("no --config given (and no run config stored in the checkpoint)")


def _metrics_header(model: Model) -> list[str]:
    cols = ["step", "loss", "total_acc"] + [f"acc_k{k}" for k in INSTANCE_COLUMNS] + ["lr"]
    cols += [f"beta_mean_layer{i}" for i, b in enumerate(model.cfg.blocks) if _has_beta(b.layer_kind)]
    return cols


def _has_beta(kind) -> bool:
    return LayerKind(kind) in (LayerKind.SRWM, LayerKind.SR_DELTA)


def _metrics_row(step: int, m: Metrics, lr: float, model: Model) -> list[str]:
    row = [str(step), _fmt(m.loss), _fmt(m.total_accuracy)]
    row += [_fmt(m.instance_accuracy.get(k, float("nan"))) for k in INSTANCE_COLUMNS]
    row.append(_fmt(lr))
    row += [_fmt(m.beta_mean.get(i, float("nan"))) for i, b in enumerate(model.cfg.blocks) if _has_beta(b.layer_kind)]
    return row


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    mcfg, tcfg = rc.model_config(), rc.train_config()
    out = Path(rc["output"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    resolved = rc.to_ini()
    (out / RESOLVED_NAME).write_text(resolved)

    model = Model(mcfg)
    trainer = Trainer(model, model.init_params(Rng(tcfg.seed, PARAM_SEED_STREAM)), tcfg, rc.source(rc.pools("train")))
    if rc["train"]["init_checkpoint"] and not args.checkpoint:
        trainer.params = checkpoint_load(rc["train"]["init_checkpoint"], expected_hash=config_hash(mcfg)).params
    if args.checkpoint:
        ck = checkpoint_load(args.checkpoint, expected_hash=config_hash(mcfg))
        trainer.params, trainer.opt, trainer.step = ck.params, ck.opt, ck.step
        trainer.data_rng = Rng.from_state(ck.rng_state)
        if ck.cursors is not None:
            trainer.cursors = ck.cursors

    header = {"run_config": resolved.replace("\n", "\\n")}
    metrics_path = out / METRICS_NAME
    resume = bool(args.checkpoint) and metrics_path.exists()
    eval_set = rc.eval_episodes(tcfg.seed) if tcfg.eval_every else None
    log_every = rc["train"]["log_every"]
    ckpt_every = rc["train"]["checkpoint_every"]

    def save(path):
        checkpoint_save(path, mcfg, trainer.params, trainer.opt, trainer.data_rng.get_state(), trainer.step,
                        trainer.cursors, header)

    with open(metrics_path, "a" if resume else "w", encoding="utf-8") as log:
        if not resume:
            log.write(",".join(_metrics_header(model)) + "\n")
        eval_log = open(out / "eval.csv", "a" if resume else "w", encoding="utf-8") if eval_set else None
        if eval_log is not None and not resume:
            eval_log.write(",".join(_metrics_header(model)) + "\n")
        try:
            while trainer.step < tcfg.total_steps:
                m = trainer.train_step()
                step = trainer.step
                if not math.isfinite(m.loss) and m.scored:
                    raise NumericError(f"non-finite training loss at step {step}")
                if step % log_every == 0 or step == tcfg.total_steps:
                    log.write(",".join(_metrics_row(step, m, learning_rate(tcfg, step), model)) + "\n")
                    log.flush()
                if eval_log is not None and step % tcfg.eval_every == 0:
                    ev = evaluate(model, trainer.params, eval_set)
                    eval_log.write(",".join(_metrics_row(step, ev, learning_rate(tcfg, step), model)) + "\n")
                    eval_log.flush()
                if ckpt_every and step % ckpt_every == 0:
                    save(out / f"step_{step:07d}.ckpt")
        finally:
            if eval_log is not None:
                eval_log.close()
    save(out / FINAL_CKPT)
    print(f"trained to step {trainer.step}; outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def format_instance_table(m: Metrics) -> str:
    head = [f"k={k}" for k in INSTANCE_COLUMNS] + ["Total"]
    vals = [m.instance_accuracy.get(k) for k in INSTANCE_COLUMNS] + [m.total_accuracy]
    cells = ["-" if v is None else f"{100 * v:.1f}" for v in vals]
    return "  ".join(f"{h:>7}" for h in head) + "\n" + "  ".join(f"{c:>7}" for c in cells)


def _load_for_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ck = checkpoint_load(args.checkpoint)
    rc = _load_run_config(args, header=ck.header)
    mcfg = rc.model_config()
    if config_hash(mcfg) != ck.config_hash:
        raise ConfigMismatchError(
            f"refusing {args.checkpoint}: model config hash {config_hash(mcfg):016x} "
            f"does not match checkpoint {ck.config_hash:016x}")
    return rc, Model(mcfg), ck.params


def cmd_eval(args) -> int:
    rc, model, params = _load_for_eval(args)
    episodes = rc.eval_episodes(rc["train"]["seed"])
    m = evaluate(model, params, episodes, reset_every=args.reset_every)
    out = Path(rc["output"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    table = format_instance_table(m)
    print(table)
    with open(out / "eval_instance.csv", "w", encoding="utf-8") as f:
        f.write(",".join([f"k{k}" for k in INSTANCE_COLUMNS] + ["total", "loss"]) + "\n")
        vals = [m.instance_accuracy.get(k, float("nan")) for k in INSTANCE_COLUMNS] + [m.total_accuracy, m.loss]
        f.write(",".join(_fmt(v) for v in vals) + "\n")
    with open(out / "eval_positions.csv", "w", encoding="utf-8") as f:
        f.write("position,accuracy\n")
        for t, a in enumerate(m.position_accuracy):
            if math.isfinite(a):
                f.write(f"{t},{_fmt(a)}\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect
# --------------------------------------------------------------------------

COMPONENT_NAMES = {1: ("beta",), 4: ("y", "q", "k", "beta")}
HIST_BINS = 10


def beta_report(model: Model, params, episodes) -> str | None:
    """Histogram and min/mean/max of sigma(beta) per (layer, component); ``None`` without SRWM layers."""
    values: dict[int, list[np.ndarray]] = {}
    for _, _, cache in run_episodes(model, params, episodes):
        for layer, s in model.beta_sigmoids(cache).items():
            values.setdefault(layer, []).append(s.reshape(-1, s.shape[-1]))
    if not values:
        return None
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    lines = []
    for layer in sorted(values):
        v = np.concatenate(values[layer])
        for c, name in enumerate(COMPONENT_NAMES[v.shape[1]]):
            x = v[:, c]
            hist, _ = np.histogram(x, bins=edges)
            lines.append(f"[layer {layer} / {name}] n={x.size} min={x.min():.6f} mean={x.mean():.6f} max={x.max():.6f}")
            for lo, hi, n in zip(edges[:-1], edges[1:], hist):
                lines.append(f"  [{lo:.1f}, {hi:.1f}{']' if hi == 1.0 else ')'} {n}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if args.checkpoint:
        rc, model, params = _load_for_eval(args)
    else:
        rc = _load_run_config(args)
        model = Model(rc.model_config())
        params = model.init_params(Rng(rc["train"]["seed"], PARAM_SEED_STREAM))
    episodes = rc.eval_episodes(rc["train"]["seed"])[: args.episodes]
    report = beta_report(model, params, episodes)
    if report is None:
        kinds = ",".join(sorted({b.layer_kind.value for b in model.cfg.blocks}))
        print(f"inspect: model has no self-referential (srwm or sr_delta) layers (kinds: {kinds}); "
              "nothing to report", file=sys.stderr)
        return EXIT_CONFIG
    print(report)
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck / gen-episodes
# --------------------------------------------------------------------------

GRADCHECK_KINDS = ("srwm", "delta_net", "sr_delta", "fake_sr")


def cmd_gradcheck(args) -> int:
    kinds = GRADCHECK_KINDS if args.kind == "all" else (args.kind,)
    for k in kinds:
        if k not in GRADCHECK_KINDS:
            raise ConfigError(f"unknown layer kind {k!r}")
    ok = True
    for k in kinds:
        report = gradcheck(k, d_model=args.d_model, num_heads=args.heads, T=args.T, seed=args.seed or 0,
                           tolerance=args.tol, lr_mode=args.lr_mode)
        print(report.table())
        ok &= report.passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_gen_episodes(args) -> int:
    if args.config:
        rc = load_config(args.config, _overrides(args), sections=())
    else:
        missing = [f for f in ("protocol", "N", "K") if getattr(args, f) is None]
        if missing:
            raise ConfigError("without --config, gen-episodes needs " + ", ".join(f"--{m}" for m in missing))
        rc = parse_config("", _overrides(args), sections=())
    seed = args.seed if args.seed is not None else 0
    src = rc.source(rc.pools(args.split))
    rng = Rng(seed, 4)
    episodes = [src(rng, i) for i in range(args.count)]
    if args.out and args.out != "-":
        with open(args.out, "w", encoding="utf-8") as f:
            write_episode_dump(episodes, f)
    else:
        write_episode_dump(episodes, sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srwm", description="Self-referential weight matrix experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="INI run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--protocol")
        sp.add_argument("--N", type=int)
        sp.add_argument("--K", type=int)
        sp.add_argument("--kind")

    sp = sub.add_parser("train", help="train a model")
    common(sp, config_required=True)
    sp.add_argument("--init-checkpoint", dest="init_checkpoint", help="start from these parameters")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--reset-every", type=int, default=None, help="force a state reset every n tokens")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="sigma(beta) statistics")
    common(sp)
    sp.add_argument("--episodes", type=int, default=50)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--kind", default="srwm", help="layer kind or 'all'")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr-mode", default="single", choices=("single", "per_submatrix_4"))
    sp.add_argument("--d-model", type=int, default=8)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--T", type=int, default=8)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-episodes", help="write an episode dump")
    common(sp)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--split", choices=("train", "test"), default="train")
    sp.add_argument("--out", help="output file (default stdout)")
    sp.set_defaults(func=cmd_gen_episodes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatchError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CheckpointError, FeatureFileError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
