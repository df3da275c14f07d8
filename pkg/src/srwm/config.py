"""Run configuration: an INI file with ``[model]``, ``[data]``, ``[train]`` and ``[output]`` sections.

Every key is declared in :data:`SCHEMA`.  Unknown sections or keys, missing
required keys and unparsable values raise :class:`ConfigError`, so a typo
never silently falls back to a default.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from typing import Any, Callable

from .episodes import (
    ClassPool,
    Episode,
    EpisodeSpec,
    MultiTaskStreamConfig,
    SegmentSpec,
    SyntheticTaskConfig,
    gen_synthetic_classes,
    load_feature_file,
    sample_episode,
    sample_multitask_stream,
)
from .layers import LayerKind
from .model import BlockConfig, ModelConfig
from .numerics import Rng
from .training import TrainConfig


class ConfigError(ValueError):
    pass


PROTOCOL_ALIASES = {"sync": "synchronous", "synchronous": "synchronous", "delayed": "delayed"}

_REQUIRED = object()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _protocol(s: str) -> str:
    try:
        return PROTOCOL_ALIASES[s.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown protocol {s!r} (expected sync, synchronous or delayed)") from None


def _kind(s: str) -> str:
    return LayerKind(s.strip()).value


def _str(s: str) -> str:
    return s.strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "model": {
        "layer_kind": (_kind, _REQUIRED),
        "num_layers": (int, _REQUIRED),
        "d_model": (int, _REQUIRED),
        "num_heads": (int, _REQUIRED),
        "d_ff": (int, 0),  # 0 means 2 * d_model
        "dropout": (float, 0.0),
        "norm_placement": (_str, "pre"),
        "lr_mode": (_str, "single"),
        "input_activation": (_str, "identity"),
    },
    "data": {
        "protocol": (_protocol, _REQUIRED),
        "N": (int, _REQUIRED),
        "K": (int, _REQUIRED),
        "max_instances_per_class": (int, 15),
        "feature_dim": (int, 16),
        "train_classes": (int, 200),
        "test_classes": (int, 50),
        "noise_std": (float, 0.1),
        "prototype_scale": (float, 1.0),
        "pool_seed": (int, 0),
        "train_feature_file": (_str, ""),
        "test_feature_file": (_str, ""),
        "multitask": (_bool, False),
        "task2_noise_std": (float, 0.3),
        "task2_prototype_scale": (float, 2.0),
        "trim_lo": (int, 1),
        "trim_hi": (int, 60),
        "eval_episodes": (int, 500),
    },
    "train": {
        "total_steps": (int, _REQUIRED),
        "learning_rate": (float, 3e-4),
        "warmup_steps": (int, 0),
        "batch_size": (int, 32),
        "bptt_span": (int, 50),
        "grad_clip_norm": (float, 1.0),
        "seed": (int, 0),
        "threads": (int, 1),
        "eval_every": (int, 0),
        "checkpoint_every": (int, 0),
        "log_every": (int, 1),
        "init_checkpoint": (_str, ""),  # start from these parameters (fresh optimizer and step)
    },
    "output": {
        "out_dir": (_str, "run"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    # ---- derived configs --------------------------------------------------

    def model_config(self) -> ModelConfig:
        m, d = self["model"], self["data"]
        block = BlockConfig(
            layer_kind=m["layer_kind"],
            d_model=m["d_model"],
            num_heads=m["num_heads"],
            d_ff=m["d_ff"] or 2 * m["d_model"],
            dropout_p=m["dropout"],
            norm_placement=m["norm_placement"],
            lr_mode=m["lr_mode"],
            input_activation=m["input_activation"],
        )
        return ModelConfig(d["feature_dim"], d["N"], (block,) * m["num_layers"])

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(
            learning_rate=t["learning_rate"], warmup_steps=t["warmup_steps"], batch_size=t["batch_size"],
            bptt_span=t["bptt_span"], total_steps=t["total_steps"], grad_clip_norm=t["grad_clip_norm"],
            seed=t["seed"], eval_every=t["eval_every"], threads=t["threads"],
        )

    def episode_spec(self) -> EpisodeSpec:
        d = self["data"]
        return EpisodeSpec(d["N"], d["K"], d["protocol"], d["max_instances_per_class"])

    def stream_config(self) -> MultiTaskStreamConfig:
        d = self["data"]
        seg = d["max_instances_per_class"]
        return MultiTaskStreamConfig((SegmentSpec(0, seg), SegmentSpec(1, seg)), d["trim_lo"], d["trim_hi"])

    # ---- data -------------------------------------------------------------

    def pools(self, split: str) -> list[ClassPool]:
        """Class pools for ``split`` ("train" or "test"); one per task.

        Train and test pools come from different rng streams, so test classes
        are never seen in training.
        """
        d = self["data"]
        path = d[f"{split}_feature_file"]
        if path and not d["multitask"]:
            return [load_feature_file(path)]
        n = d[f"{split}_classes"]
        stream = 0 if split == "train" else 1
        tasks = [(d["noise_std"], d["prototype_scale"])]
        if d["multitask"]:
            tasks.append((d["task2_noise_std"], d["task2_prototype_scale"]))
        return [
            gen_synthetic_classes(SyntheticTaskConfig(n, d["feature_dim"], ns, ps, task_id=i),
                                  Rng(d["pool_seed"], 100 + 10 * i + stream))
            for i, (ns, ps) in enumerate(tasks)
        ]

    def source(self, pools: list[ClassPool], trim: bool = True) -> Callable[[Rng, int], Episode]:
        spec = self.episode_spec()
        if self["data"]["multitask"]:
            stream = self.stream_config()
            return lambda rng, i: sample_multitask_stream(stream, pools, spec, rng, i, trim)
        return lambda rng, i: sample_episode(spec, pools[0], rng)

    def eval_episodes(self, seed: int) -> list[Episode]:
        """Fixed evaluation set from the test pools (untrimmed multitask streams)."""
        src = self.source(self.pools("test"), trim=False)
        rng = Rng(seed, 3)
        return [src(rng, i) for i in range(self["data"]["eval_episodes"])]

    # ---- serialization ----------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in self.values.items():
            cp[section] = {k: _fmt(v) for k, v in keys.items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _validate(rc: RunConfig, sections) -> None:
    try:
        if "model" in sections:
            rc.model_config()
        if "train" in sections:
            rc.train_config()
            if rc["train"]["threads"] < 1:
                raise ValueError("threads must be >= 1")
        spec = rc.episode_spec()
        if rc["data"]["multitask"]:
            rc.stream_config()
            if spec.protocol != "delayed":
                raise ValueError("multitask streams require protocol = delayed")
        if spec.N > rc["data"]["test_classes"] or spec.N > rc["data"]["train_classes"]:
            raise ValueError(f"N={spec.N} exceeds the number of classes in a pool")
        if rc["data"]["eval_episodes"] < 1:
            raise ValueError("eval_episodes must be >= 1")
    except ValueError as e:
        raise ConfigError(str(e)) from e


ALL_SECTIONS = ("model", "data", "train")


def parse_config(text: str, overrides: dict[tuple[str, str], str] | None = None,
                 sections: tuple[str, ...] = ALL_SECTIONS) -> RunConfig:
    """Parse INI ``text``; ``overrides`` maps (section, key) to a raw string value.

    Required keys are enforced only for the listed ``sections`` (``data`` is
    always needed); elsewhere a missing required key is stored as ``None``.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from e
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
    raw = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SCHEMA}
    for (section, key), value in (overrides or {}).items():
        raw[section][key] = value
    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            if key in raw[section]:
                try:
                    values[section][key] = parse(raw[section][key])
                except ValueError as e:
                    raise ConfigError(f"[{section}] {key}: {e}") from e
            elif default is _REQUIRED and section not in sections and section != "data":
                values[section][key] = None
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key '{key}' in [{section}]")
            else:
                values[section][key] = default
    rc = RunConfig(values)
    _validate(rc, sections)
    return rc


def load_config(path, overrides=None, sections: tuple[str, ...] = ALL_SECTIONS) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), overrides, sections)
