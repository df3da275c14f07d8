"""Binary checkpoints: parameters, Adam state, RNG state and step counter.

Layout (all integers little-endian)::

    b"SRWMCKP1" | u32 version | u64 config hash
    u32 header length | header text (key=value lines)
    per parameter, in declaration order: u64 count | count x f64
    u64 adam step | f64 beta1, beta2, eps | first moments | second moments (same framing)
    u32 length | rng state JSON
    u64 training step
    u32 cursor flag | (if 1) u32 length | cursor JSON | tagged arrays

The trailing cursor section stores TBPTT stream positions and the carried
model state so an interrupted delayed-label run resumes exactly.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .episodes import Episode
from .layers import ROW_LAYOUT, DeltaNetState, SrwmState
from .model import ModelConfig, ModelState
from .training import AdamState, Cursor, CursorBatch

MAGIC = b"SRWMCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def config_hash(cfg: ModelConfig) -> int:
    text = json.dumps(_config_dict(cfg), sort_keys=True)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for b in d["blocks"]:
        b["layer_kind"] = str(b["layer_kind"].value)
    return d


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt: AdamState
    rng_state: dict
    step: int
    header: dict[str, str]
    config_hash: int
    cursors: CursorBatch | None = None


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CorruptCheckpointError(f"checkpoint truncated at byte {self.off} (wanted {n} more)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64_array(self, shape) -> np.ndarray:
        (count,) = self.unpack("<Q")
        if count != int(np.prod(shape)):
            raise CorruptCheckpointError(f"array length {count} does not match header shape {shape}")
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def _write_text(f, s: str):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _write_f64(f, a: np.ndarray):
    a = np.ascontiguousarray(a, dtype="<f8")
    f.write(struct.pack("<Q", a.size))
    f.write(a.tobytes())


_TAGS = {"f": "<f8", "i": "<i8", "b": "|b1"}


def _write_tagged(f, a: np.ndarray):
    kind = np.asarray(a).dtype.kind
    a = np.ascontiguousarray(a, dtype=_TAGS[kind])
    f.write(kind.encode())
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes())


def _read_tagged(r: _Reader) -> np.ndarray:
    kind = r.take(1).decode()
    if kind not in _TAGS:
        raise CorruptCheckpointError(f"unknown array tag {kind!r}")
    (ndim,) = r.unpack("<I")
    shape = r.unpack(f"<{ndim}Q")
    dt = np.dtype(_TAGS[kind])
    n = int(np.prod(shape))
    return np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()


def _state_arrays(state):
    """Flatten a ModelState into (descriptor, arrays)."""
    desc, arrays = [], []
    for s in state.layers:
        if s is None:
            desc.append("none")
        elif isinstance(s, SrwmState):
            desc.append("srwm")
            arrays += [s.W, s.step_count]
        elif isinstance(s, DeltaNetState):
            desc.append("delta")
            arrays += [s.W, s.step_count]
        else:
            desc.append("sr_delta")
            arrays += [s[0].W, s[0].step_count, s[1].W, s[1].step_count]
    return desc, arrays


def _state_from(desc, arrays) -> ModelState:
    it = iter(arrays)
    layers = []
    for d in desc:
        if d == "none":
            layers.append(None)
        elif d == "srwm":
            layers.append(SrwmState(next(it), next(it)))
        elif d == "delta":
            layers.append(DeltaNetState(next(it), next(it)))
        else:
            layers.append((SrwmState(next(it), next(it)), DeltaNetState(next(it), next(it))))
    return ModelState(layers)


def _write_cursors(f, cb: CursorBatch):
    meta = {"batches_drawn": cb.batches_drawn, "cursors": [], "state": None}
    arrays = []
    for c in cb.cursors:
        if c.episode is None:
            meta["cursors"].append(None)
            continue
        ep = c.episode
        meta["cursors"].append({"pos": c.pos, "protocol": ep.protocol, "num_classes": ep.num_classes,
                                "boundaries": list(ep.boundaries)})
        arrays += [ep.features, ep.label_in, ep.target, ep.loss_mask, ep.task_id, c.instance]
    if cb.state is not None:
        meta["state"], st = _state_arrays(cb.state)
        arrays += st
    _write_text(f, json.dumps(meta))
    f.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        _write_tagged(f, a)


def _read_cursors(r: _Reader) -> CursorBatch:
    meta = json.loads(r.text())
    (n,) = r.unpack("<I")
    arrays = iter([_read_tagged(r) for _ in range(n)])
    cursors = []
    for c in meta["cursors"]:
        if c is None:
            cursors.append(Cursor())
            continue
        feats, li, tg, mask, task, inst = (next(arrays) for _ in range(6))
        ep = Episode(feats, li, tg, mask, task, c["protocol"], c["num_classes"], tuple(c["boundaries"]))
        cursors.append(Cursor(ep, c["pos"], inst))
    state = None if meta["state"] is None else _state_from(meta["state"], list(arrays))
    return CursorBatch(cursors, state, meta["batches_drawn"])


def checkpoint_save(path, cfg: ModelConfig, params: dict[str, np.ndarray], opt: AdamState, rng_state: dict,
                    step: int, cursors: CursorBatch | None = None, extra_header: dict[str, str] | None = None):
    header = {
        "layout": ROW_LAYOUT,
        "d_model": str(cfg.d_model),
        "feature_dim": str(cfg.feature_dim),
        "num_classes": str(cfg.num_classes),
        "layer_kinds": ",".join(b.layer_kind.value for b in cfg.blocks),
        "lr_mode": ",".join(b.lr_mode for b in cfg.blocks),
        "num_heads": ",".join(str(b.num_heads) for b in cfg.blocks),
        "config": json.dumps(_config_dict(cfg), sort_keys=True),
        "params": ";".join(f"{k}:{'x'.join(map(str, v.shape))}" for k, v in params.items()),
    }
    header.update(extra_header or {})
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<IQ", VERSION, config_hash(cfg)))
    _write_text(f, "\n".join(f"{k}={v}" for k, v in header.items()))
    for v in params.values():
        _write_f64(f, v)
    f.write(struct.pack("<Q", opt.step))
    f.write(struct.pack("<3d", opt.beta1, opt.beta2, opt.eps))
    for k in params:
        _write_f64(f, opt.m[k])
    for k in params:
        _write_f64(f, opt.v[k])
    _write_text(f, json.dumps(rng_state, sort_keys=True))
    f.write(struct.pack("<Q", step))
    f.write(struct.pack("<I", int(cursors is not None)))
    if cursors is not None:
        _write_cursors(f, cursors)
    Path(path).write_bytes(f.getvalue())


def _parse_shape(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split("x")) if s else ()


def checkpoint_load(path, expected_hash: int | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, h = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if expected_hash is not None and h != expected_hash:
        raise ConfigMismatchError(f"{path}: config hash {h:016x} does not match expected {expected_hash:016x}")
    header = dict(line.split("=", 1) for line in r.text().split("\n") if line)
    shapes = {}
    for item in header.get("params", "").split(";"):
        name, shape = item.rsplit(":", 1)
        shapes[name] = _parse_shape(shape)
    params = {k: r.f64_array(s) for k, s in shapes.items()}
    (adam_step,) = r.unpack("<Q")
    b1, b2, eps = r.unpack("<3d")
    m = {k: r.f64_array(s) for k, s in shapes.items()}
    v = {k: r.f64_array(s) for k, s in shapes.items()}
    try:
        rng_state = json.loads(r.text())
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{path}: rng state unreadable") from e
    (step,) = r.unpack("<Q")
    (has_cursors,) = r.unpack("<I")
    cursors = _read_cursors(r) if has_cursors else None
    if r.off != len(r.data):
        raise CorruptCheckpointError(f"{path}: {len(r.data) - r.off} trailing bytes")
    return Checkpoint(params, AdamState(m, v, adam_step, b1, b2, eps), rng_state, step, header, h, cursors)


def model_config_from_header(header: dict[str, str]) -> ModelConfig:
    from .model import BlockConfig

    d = json.loads(header["config"])
    d["blocks"] = tuple(BlockConfig(**b) for b in d["blocks"])
    return ModelConfig(**d)
