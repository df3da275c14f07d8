"""Loss, optimiser, truncated-BPTT training loop and evaluation metrics."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .episodes import Episode, _instance_counts
from .model import Model, ModelState, encode_labels
from .numerics import Rng, ShapeError, softmax

INSTANCE_COLUMNS = (1, 2, 3, 5, 10)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    warmup_steps: int = 0
    batch_size: int = 32
    bptt_span: int = 50
    total_steps: int = 1000
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.bptt_span < 1:
            raise ValueError("TrainConfig: batch_size and bptt_span must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("TrainConfig: learning_rate and grad_clip_norm must be positive")
        if self.threads < 1:
            raise ValueError("TrainConfig: threads must be >= 1")


# --------------------------------------------------------------------------
# loss and optimiser
# --------------------------------------------------------------------------


def cross_entropy(logits, target):
    """Per-row loss ``-log softmax(logits)[target]`` and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    C = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= C):
        raise ValueError(f"cross_entropy: target out of range for {C} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, target[..., None], axis=-1)[..., 0]
    loss = log_z - picked
    grad = softmax(logits)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
    return (float(loss) if loss.ndim == 0 else loss), grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Bias-corrected Adam; returns new ``(params, state)`` without mutating inputs."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("adam_step: parameter, gradient and moment keys differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant rate, or the inverse-square-root warmup schedule peaking at ``learning_rate``.

    ``step`` is 1-based.
    """
    if cfg.warmup_steps <= 0:
        return cfg.learning_rate
    w = cfg.warmup_steps
    return cfg.learning_rate * math.sqrt(w) * min(step**-0.5, step * w**-1.5)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(max_norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


# --------------------------------------------------------------------------
# batch-axis helpers for layer states
# --------------------------------------------------------------------------


def _map_state(state, fn):
    if state is None:
        return None
    if isinstance(state, ModelState):
        return ModelState([_map_state(s, fn) for s in state.layers])
    if isinstance(state, tuple):
        return tuple(_map_state(s, fn) for s in state)
    if is_dataclass(state):
        return type(state)(**{f.name: fn(getattr(state, f.name)) for f in fields(state)})
    raise TypeError(f"cannot map over state of type {type(state)}")


def slice_state(state, sl: slice):
    return _map_state(state, lambda a: a[sl])


def concat_states(states: list):
    first = states[0]
    if first is None:
        return None
    if isinstance(first, ModelState):
        return ModelState([concat_states([s.layers[i] for s in states]) for i in range(len(first.layers))])
    if isinstance(first, tuple):
        return tuple(concat_states([s[i] for s in states]) for i in range(len(first)))
    return type(first)(**{f.name: np.concatenate([getattr(s, f.name) for s in states]) for f in fields(first)})


# --------------------------------------------------------------------------
# stream cursors
# --------------------------------------------------------------------------


EpisodeSource = Callable[[Rng, int], Episode]


@dataclass
class Cursor:
    episode: Episode | None = None
    pos: int = 0
    instance: np.ndarray | None = None


@dataclass
class Span:
    tokens: np.ndarray  # (T, B, input_dim)
    target: np.ndarray  # (T, B), -1 where unscored
    mask: np.ndarray  # (T, B) bool
    resets: np.ndarray  # (T, B) bool
    instance: np.ndarray  # (T, B)
    task_id: np.ndarray  # (T, B)


@dataclass
class CursorBatch:
    """Per-sequence stream positions plus the batched carried model state."""

    cursors: list[Cursor]
    state: ModelState | None = None
    batches_drawn: int = 0

    @classmethod
    def fresh(cls, batch_size: int) -> "CursorBatch":
        return cls([Cursor() for _ in range(batch_size)])

    def next_span(self, source: EpisodeSource, span: int, rng: Rng, num_classes: int) -> Span:
        B = len(self.cursors)
        feats, target = [], np.full((span, B), -1, dtype=np.int64)
        label_in = np.full((span, B), -1, dtype=np.int64)
        mask = np.zeros((span, B), dtype=bool)
        resets = np.zeros((span, B), dtype=bool)
        inst = np.zeros((span, B), dtype=np.int64)
        task = np.zeros((span, B), dtype=np.int64)
        feat_dim = None
        rows: list[list[np.ndarray]] = [[] for _ in range(B)]
        for b, cur in enumerate(self.cursors):
            t = 0
            while t < span:
                if cur.episode is None or cur.pos >= len(cur.episode):
                    cur.episode = source(rng, self.batches_drawn)
                    cur.pos = 0
                    cur.instance = _instance_counts(cur.episode)
                    resets[t, b] = True
                ep = cur.episode
                n = min(span - t, len(ep) - cur.pos)
                sl = slice(cur.pos, cur.pos + n)
                rows[b].append(ep.features[sl])
                target[t : t + n, b] = ep.target[sl]
                label_in[t : t + n, b] = ep.label_in[sl]
                mask[t : t + n, b] = ep.loss_mask[sl]
                inst[t : t + n, b] = cur.instance[sl]
                task[t : t + n, b] = ep.task_id[sl]
                cur.pos += n
                t += n
            feats.append(np.concatenate(rows[b]))
            feat_dim = feats[-1].shape[1]
        self.batches_drawn += 1
        features = np.stack(feats, axis=1).reshape(span, B, feat_dim)
        tokens = encode_labels(features, label_in, num_classes)
        return Span(tokens, np.where(mask, target, -1), mask, resets, inst, task)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class Metrics:
    loss: float = float("nan")
    total_accuracy: float = float("nan")
    instance_accuracy: dict[int, float] = field(default_factory=dict)
    instance_counts: dict[int, int] = field(default_factory=dict)
    task_accuracy: dict[int, float] = field(default_factory=dict)
    position_accuracy: np.ndarray | None = None
    beta_mean: dict[int, float] = field(default_factory=dict)
    scored: int = 0


def _bucket(correct: np.ndarray, keys: np.ndarray) -> tuple[dict[int, float], dict[int, int]]:
    acc, cnt = {}, {}
    for k in np.unique(keys):
        sel = keys == k
        acc[int(k)] = float(correct[sel].mean())
        cnt[int(k)] = int(sel.sum())
    return acc, cnt


def summarize(correct, instance, task, loss_sum=float("nan")) -> Metrics:
    correct = np.asarray(correct, dtype=bool)
    if correct.size == 0:
        raise ValueError("no scored tokens")
    inst_acc, inst_cnt = _bucket(correct, np.asarray(instance))
    task_acc, _ = _bucket(correct, np.asarray(task))
    return Metrics(loss_sum / correct.size, float(correct.mean()), inst_acc, inst_cnt, task_acc, scored=correct.size)


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------


def masked_loss(logits, target, mask):
    """Mean cross-entropy over scored tokens plus its gradient wrt ``logits``."""
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    loss, grad = cross_entropy(logits, np.where(mask, target, 0))
    loss = float(np.where(mask, loss, 0.0).sum())
    grad = grad * mask[..., None]
    return loss, grad, n


class Trainer:
    def __init__(self, model: Model, params: dict[str, np.ndarray], cfg: TrainConfig, source: EpisodeSource,
                 opt: AdamState | None = None, data_rng: Rng | None = None, step: int = 0,
                 cursors: CursorBatch | None = None):
        self.model = model
        self.params = params
        self.cfg = cfg
        self.source = source
        self.opt = opt if opt is not None else AdamState.zeros_like(params)
        self.data_rng = data_rng if data_rng is not None else Rng(cfg.seed, 1)
        self.step = step
        self.cursors = cursors if cursors is not None else CursorBatch.fresh(cfg.batch_size)

    def _dropout_rng(self, chunk: int) -> Rng:
        return Rng(self.cfg.seed, (2 << 32) + self.step * 1024 + chunk)

    def _chunk(self, span: Span, state, sl: slice, chunk: int):
        tokens = span.tokens[:, sl]
        logits, new_state, cache = self.model.forward(
            self.params, tokens, state, span.resets[:, sl], self._dropout_rng(chunk)
        )
        loss, g, _ = masked_loss(logits, span.target[:, sl], span.mask[:, sl])
        return logits, new_state, cache, loss, g

    def train_step(self) -> Metrics:
        """One TBPTT span per cursor, one optimiser update."""
        cfg = self.cfg
        span = self.cursors.next_span(self.source, cfg.bptt_span, self.data_rng, self.model.cfg.num_classes)
        B = span.tokens.shape[1]
        state = self.cursors.state
        if state is None:
            state = self.model.initial_state(self.params, B)
        n_scored = max(int(span.mask.sum()), 1)
        bounds = np.linspace(0, B, min(cfg.threads, B) + 1).astype(int)
        slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

        def work(i):
            sl = slices[i]
            logits, st, cache, loss, g = self._chunk(span, slice_state(state, sl), sl, i)
            grads = self.model.backward(self.params, cache, g / n_scored)
            betas = self.model.beta_sigmoids(cache)
            return logits, st, loss, grads, betas

        if len(slices) == 1:
            results = [work(0)]
        else:
            with ThreadPoolExecutor(len(slices)) as pool:
                results = list(pool.map(work, range(len(slices))))
        grads = {k: sum((r[3][k] for r in results[1:]), results[0][3][k]) for k in self.params}
        loss = sum(r[2] for r in results)
        logits = np.concatenate([r[0] for r in results], axis=1)
        self.cursors.state = concat_states([r[1] for r in results])

        grads, _ = clip_grad_norm(grads, cfg.grad_clip_norm)
        self.step += 1
        self.params, self.opt = adam_step(self.opt, self.params, grads, learning_rate(cfg, self.step))

        correct = (np.argmax(logits, axis=-1) == span.target)[span.mask]
        m = summarize(correct, span.instance[span.mask], span.task_id[span.mask], loss) if span.mask.any() else Metrics()
        for layer_idx in results[0][4]:
            m.beta_mean[layer_idx] = float(np.mean(np.concatenate([r[4][layer_idx] for r in results], axis=1)))
        return m


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def run_episodes(model: Model, params, episodes: Sequence[Episode], reset_every: int | None = None,
                 batch_size: int = 256):
    """Forward every episode from a fresh state.

    Yields ``(episode_indices, logits (T, B, C), cache)`` per batch of equal-length episodes.
    ``reset_every`` forces a state reset every that many tokens.
    """
    C = model.cfg.num_classes
    by_len: dict[int, list[int]] = {}
    for i, ep in enumerate(episodes):
        by_len.setdefault(len(ep), []).append(i)
    for T, idx in sorted(by_len.items()):
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            feats = np.stack([episodes[i].features for i in chunk], axis=1)
            labels = np.stack([episodes[i].label_in for i in chunk], axis=1)
            tokens = encode_labels(feats, labels, C)
            resets = None
            if reset_every:
                resets = np.zeros((T, len(chunk)), dtype=bool)
                resets[::reset_every] = True
            logits, _, cache = model.forward(params, tokens, None, resets)
            yield chunk, logits, cache


def evaluate(model: Model, params, episodes: Sequence[Episode], reset_every: int | None = None,
             batch_size: int = 256) -> Metrics:
    """Accuracy over scored tokens, bucketed by instance index and task.

    ``position_accuracy`` holds the mean accuracy at each stream position
    (over episodes long enough to reach it).
    """
    if not episodes:
        raise ValueError("evaluate: empty episode set")
    correct_all, inst_all, task_all = [], [], []
    loss_sum = 0.0
    max_T = max(len(ep) for ep in episodes)
    pos_hits = np.zeros(max_T)
    pos_count = np.zeros(max_T)
    beta_sum: dict[int, float] = {}
    beta_n: dict[int, int] = {}
    for chunk, logits, cache in run_episodes(model, params, episodes, reset_every, batch_size):
        for j, i in enumerate(chunk):
            ep = episodes[i]
            lg = logits[:, j]
            m = ep.loss_mask
            loss, _, _ = masked_loss(lg, ep.target, m)
            loss_sum += loss
            hit = np.argmax(lg, axis=-1) == ep.target
            correct_all.append(hit[m])
            inst_all.append(_instance_counts(ep)[m])
            task_all.append(ep.task_id[m])
            T = len(ep)
            pos_hits[:T] += np.where(m, hit, 0)
            pos_count[:T] += m
        for layer_idx, s in model.beta_sigmoids(cache).items():
            beta_sum[layer_idx] = beta_sum.get(layer_idx, 0.0) + float(s.sum())
            beta_n[layer_idx] = beta_n.get(layer_idx, 0) + s.size
    m = summarize(np.concatenate(correct_all), np.concatenate(inst_all), np.concatenate(task_all), loss_sum)
    with np.errstate(invalid="ignore", divide="ignore"):
        m.position_accuracy = np.where(pos_count > 0, pos_hits / np.maximum(pos_count, 1), np.nan)
    m.beta_mean = {k: beta_sum[k] / beta_n[k] for k in beta_sum}
    return m
