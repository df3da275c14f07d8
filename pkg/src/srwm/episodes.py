"""Few-shot episodes over class pools.

Two label protocols are supported.  In the synchronous one every support
token carries its own label and only the final, unlabelled query is scored.
In the delayed one the label of token ``t`` arrives with token ``t + 1`` and
every token is scored.  Multi-task streams concatenate delayed segments drawn
from different pools.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .numerics import Rng

NO_LABEL = -1
FEATURE_MAGIC = b"FWPFEAT1"


class PoolTooSmallError(ValueError):
    pass


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class InconsistentDimsError(FeatureFileError):
    pass


class EmptyPoolError(FeatureFileError):
    pass


# --------------------------------------------------------------------------
# class pools
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_classes: int = 20
    feature_dim: int = 16
    noise_std: float = 0.1
    prototype_scale: float = 1.0
    task_id: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("SyntheticTaskConfig: need at least 2 classes")
        if self.feature_dim < 2:
            raise ValueError("SyntheticTaskConfig: feature_dim must be >= 2")
        if self.noise_std < 0:
            raise ValueError("SyntheticTaskConfig: noise_std must be >= 0")


class ClassPool:
    num_classes: int
    feature_dim: int
    task_id: int = 0

    def draw(self, cls: int, n: int, rng: Rng) -> np.ndarray:
        """``n`` distinct samples of class ``cls`` as an (n, feature_dim) array."""
        raise NotImplementedError


@dataclass
class SyntheticPool(ClassPool):
    prototypes: np.ndarray  # (C, F)
    noise_std: float
    task_id: int = 0

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def draw(self, cls, n, rng):
        return self.prototypes[cls] + rng.normal((n, self.feature_dim), self.noise_std)


@dataclass
class FeaturePool(ClassPool):
    class_ids: list[int]
    samples: list[np.ndarray]  # one (n_c, F) array per class
    task_id: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.samples)

    @property
    def feature_dim(self) -> int:
        return self.samples[0].shape[1]

    def draw(self, cls, n, rng):
        avail = self.samples[cls]
        if n > avail.shape[0]:
            raise PoolTooSmallError(f"class {self.class_ids[cls]} has {avail.shape[0]} samples, need {n}")
        return avail[rng.gen.choice(avail.shape[0], n, replace=False)]


def gen_synthetic_classes(cfg: SyntheticTaskConfig, rng: Rng) -> SyntheticPool:
    while True:
        protos = rng.normal((cfg.num_classes, cfg.feature_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        gaps = np.linalg.norm(protos[:, None] - protos[None], axis=-1) + np.eye(cfg.num_classes)
        if gaps.min() > 1e-9:
            return SyntheticPool(protos * cfg.prototype_scale, cfg.noise_std, cfg.task_id)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeSpec:
    N: int = 5
    K: int = 1
    protocol: str = "synchronous"  # "synchronous" | "delayed"
    max_instances_per_class: int = 15

    def __post_init__(self):
        if self.protocol not in ("synchronous", "delayed"):
            raise ValueError(f"EpisodeSpec: unknown protocol {self.protocol!r}")
        if self.N < 1 or self.K < 1 or self.max_instances_per_class < 1:
            raise ValueError("EpisodeSpec: N, K and max_instances_per_class must be positive")


@dataclass
class Episode:
    features: np.ndarray  # (T, F)
    label_in: np.ndarray  # (T,), NO_LABEL for none
    target: np.ndarray  # (T,), NO_LABEL for none
    loss_mask: np.ndarray  # (T,) bool
    task_id: np.ndarray  # (T,)
    protocol: str
    num_classes: int
    boundaries: tuple[int, ...] = (0,)

    def __len__(self) -> int:
        return self.features.shape[0]


def _check_spec(spec: EpisodeSpec, pool: ClassPool):
    if spec.N > pool.num_classes:
        raise PoolTooSmallError(f"{spec.N}-way episode needs {spec.N} classes, pool has {pool.num_classes}")


def _delayed_shift(target: np.ndarray) -> np.ndarray:
    label_in = np.empty_like(target)
    label_in[0] = NO_LABEL
    label_in[1:] = target[:-1]
    return label_in


def sample_episode(spec: EpisodeSpec, pool: ClassPool, rng: Rng) -> Episode:
    _check_spec(spec, pool)
    g = rng.gen
    classes = g.choice(pool.num_classes, spec.N, replace=False)
    labels = g.permutation(spec.N)
    if spec.protocol == "synchronous":
        query = int(g.integers(spec.N))
        feats, labs = [], []
        for i, c in enumerate(classes):
            x = pool.draw(int(c), spec.K + (i == query), rng)
            feats.append(x[: spec.K])
            labs += [labels[i]] * spec.K
            if i == query:
                query_x = x[spec.K]
        order = g.permutation(spec.N * spec.K)
        features = np.concatenate(feats)[order]
        target = np.asarray(labs)[order]
        features = np.vstack([features, query_x])
        target = np.append(target, labels[query])
        label_in = target.copy()
        label_in[-1] = NO_LABEL
        mask = np.zeros(len(target), dtype=bool)
        mask[-1] = True
    else:
        M = spec.max_instances_per_class
        feats = [pool.draw(int(c), M, rng) for c in classes]
        order = g.permutation(spec.N * M)
        features = np.concatenate(feats)[order]
        target = np.repeat(labels, M)[order]
        label_in = _delayed_shift(target)
        mask = np.ones(len(target), dtype=bool)
    T = len(target)
    return Episode(features, label_in.astype(np.int64), target.astype(np.int64), mask,
                   np.full(T, pool.task_id, dtype=np.int64), spec.protocol, spec.N)


@dataclass(frozen=True)
class SegmentSpec:
    task: int
    max_instances_per_class: int = 15


@dataclass(frozen=True)
class MultiTaskStreamConfig:
    segments: tuple[SegmentSpec, ...] = (SegmentSpec(0), SegmentSpec(1))
    trim_lo: int = 1
    trim_hi: int = 60
    alternate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if len(self.segments) < 2:
            raise ValueError("MultiTaskStreamConfig: need at least two segments")
        if not 0 <= self.trim_lo <= self.trim_hi:
            raise ValueError(f"MultiTaskStreamConfig: invalid trim range [{self.trim_lo}, {self.trim_hi}]")

    def order(self, batch_index: int) -> tuple[SegmentSpec, ...]:
        """Segment order for a batch; alternates with the batch index when enabled."""
        if self.alternate and batch_index % 2:
            return self.segments[::-1]
        return self.segments


def sample_multitask_stream(cfg: MultiTaskStreamConfig, pools: Sequence[ClassPool], spec: EpisodeSpec, rng: Rng,
                            batch_index: int = 0, trim: bool = True) -> Episode:
    """Concatenated delayed-label segments, one per ``cfg`` segment.

    Non-final segments lose a uniformly drawn number of trailing positions in
    ``[trim_lo, trim_hi]`` when ``trim`` is set (never the whole segment).
    No boundary signal reaches the tokens; boundaries are recorded for
    metrics only.
    """
    parts = []
    segs = cfg.order(batch_index)
    for j, seg in enumerate(segs):
        s = EpisodeSpec(spec.N, spec.K, "delayed", seg.max_instances_per_class)
        ep = sample_episode(s, pools[seg.task], rng)
        if trim and j < len(segs) - 1:
            n = int(rng.gen.integers(cfg.trim_lo, cfg.trim_hi + 1))
            keep = max(len(ep) - n, 1)
            ep = Episode(ep.features[:keep], ep.label_in[:keep], ep.target[:keep], ep.loss_mask[:keep],
                         ep.task_id[:keep], ep.protocol, ep.num_classes)
        parts.append(ep)
    target = np.concatenate([p.target for p in parts])
    starts = np.cumsum([0] + [len(p) for p in parts[:-1]])
    return Episode(
        np.concatenate([p.features for p in parts]),
        _delayed_shift(target),
        target,
        np.concatenate([p.loss_mask for p in parts]),
        np.concatenate([p.task_id for p in parts]),
        "delayed",
        spec.N,
        tuple(int(s) for s in starts),
    )


def _instance_counts(episode: Episode) -> np.ndarray:
    counts = np.zeros(len(episode), dtype=np.int64)
    edges = list(episode.boundaries) + [len(episode)]
    for lo, hi in zip(edges[:-1], edges[1:]):
        seen: dict[int, int] = {}
        for t in range(lo, hi):
            c = int(episode.target[t])
            seen[c] = seen.get(c, 0) + 1
            counts[t] = seen[c]
    return counts


def instance_index_annotate(episode: Episode) -> np.ndarray:
    """1-based occurrence index of each token's class within its segment."""
    if episode.protocol != "delayed":
        raise ValueError("instance_index_annotate: only defined for delayed-label episodes")
    return _instance_counts(episode)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def write_feature_file(path, class_ids: Sequence[int], samples: Sequence[np.ndarray]) -> None:
    if not samples:
        raise EmptyPoolError("write_feature_file: no classes")
    dim = samples[0].shape[1]
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", len(samples), dim))
        for cid, x in zip(class_ids, samples):
            x = np.asarray(x, dtype="<f4")
            if x.ndim != 2 or x.shape[1] != dim:
                raise InconsistentDimsError(f"class {cid}: samples of shape {x.shape}, expected (n, {dim})")
            f.write(struct.pack("<II", cid, x.shape[0]))
            f.write(x.tobytes())


def load_feature_file(path, task_id: int = 0) -> FeaturePool:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (bad magic)")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: header truncated")
    n_classes, dim = struct.unpack_from("<II", data, 8)
    if n_classes == 0:
        raise EmptyPoolError(f"{path}: class list is empty")
    if dim == 0:
        raise InconsistentDimsError(f"{path}: feature dimension is zero")
    off = 16
    ids, samples = [], []
    for _ in range(n_classes):
        if off + 8 > len(data):
            raise TruncatedFileError(f"{path}: truncated before class {len(ids)} header")
        cid, n = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = n * dim * 4
        if off + nbytes > len(data):
            raise TruncatedFileError(f"{path}: class {cid} payload truncated")
        if n == 0:
            raise InconsistentDimsError(f"{path}: class {cid} has no samples")
        x = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
        off += nbytes
        ids.append(int(cid))
        samples.append(x.astype(np.float64))
    if off != len(data):
        raise InconsistentDimsError(f"{path}: {len(data) - off} trailing bytes after declared payload")
    if len(set(ids)) != len(ids):
        raise FeatureFileError(f"{path}: duplicate class ids")
    return FeaturePool(ids, samples, task_id)


def write_episode_dump(episodes: Sequence[Episode], out: IO[str]) -> None:
    """One line per token: ``task_id,instance_idx,label_in,target,loss_mask,f0,f1,...``."""
    for ep in episodes:
        inst = _instance_counts(ep)
        for t in range(len(ep)):
            feats = ",".join(repr(float(v)) for v in ep.features[t])
            out.write(f"{ep.task_id[t]},{inst[t]},{ep.label_in[t]},{ep.target[t]},{int(ep.loss_mask[t])},{feats}\n")


@dataclass
class DumpRecord:
    task_id: int
    instance_idx: int
    label_in: int
    target: int
    loss_mask: int
    features: np.ndarray = field(repr=False)


def read_episode_dump(lines) -> list[DumpRecord]:
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        a = [int(p) for p in parts[:5]]
        out.append(DumpRecord(*a, np.array([float(p) for p in parts[5:]])))
    return out
