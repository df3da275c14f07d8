"""Sequence classifier built from FWP layers.

Tokens are ``[feature | one-hot(label_in) | no-label flag]``.  Each block is
a Transformer block with its self-attention replaced by an FWP layer::

    pre-norm:  h = h + drop(layer(LN(h)));  h = h + drop(ff(LN(h)))
    post-norm: h = LN(h + drop(layer(h)));  h = LN(h + drop(ff(h)))

followed (pre-norm only) by a final LN and a linear classifier head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import FwpLayer, LayerKind, make_layer
from .numerics import Rng, ShapeError, layer_norm_backward, layer_norm_forward


@dataclass(frozen=True)
class BlockConfig:
    layer_kind: LayerKind = LayerKind.SRWM
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 64
    dropout_p: float = 0.0
    norm_placement: str = "pre"
    lr_mode: str = "single"
    input_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_kind", LayerKind(self.layer_kind))
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_ff < self.d_model:
            raise ValueError(f"d_ff={self.d_ff} must be >= d_model={self.d_model}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p={self.dropout_p} outside [0, 1)")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError(f"norm_placement must be 'pre' or 'post', got {self.norm_placement!r}")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    blocks: tuple[BlockConfig, ...]
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("ModelConfig needs at least one block")
        if len({b.d_model for b in self.blocks}) != 1:
            raise ValueError("all blocks must share d_model")
        if len({b.norm_placement for b in self.blocks}) != 1:
            raise ValueError("all blocks must share norm_placement")

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.num_classes + 1

    @property
    def d_model(self) -> int:
        return self.blocks[0].d_model

    @property
    def pre_norm(self) -> bool:
        return self.blocks[0].norm_placement == "pre"


def encode_token(feature, label_in: int | None, num_classes: int) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    tail = np.zeros(num_classes + 1)
    if label_in is None or label_in < 0:
        tail[-1] = 1.0
    elif label_in >= num_classes:
        raise ValueError(f"label {label_in} out of range for {num_classes} classes")
    else:
        tail[label_in] = 1.0
    return np.concatenate([feature, tail])


def decode_token(token, num_classes: int) -> tuple[np.ndarray, int | None]:
    token = np.asarray(token)
    feature, tail = token[: -(num_classes + 1)], token[-(num_classes + 1) :]
    if tail[-1] == 1.0:
        return feature, None
    return feature, int(np.argmax(tail[:-1]))


def encode_labels(features: np.ndarray, label_in: np.ndarray, num_classes: int) -> np.ndarray:
    """Vectorised ``encode_token`` over arrays with matching leading axes; label -1 means none."""
    label_in = np.asarray(label_in)
    if np.any(label_in >= num_classes) or np.any(label_in < -1):
        raise ValueError(f"labels out of range for {num_classes} classes")
    tail = np.zeros(label_in.shape + (num_classes + 1,))
    idx = np.where(label_in < 0, num_classes, label_in)
    np.put_along_axis(tail, idx[..., None], 1.0, axis=-1)
    return np.concatenate([np.asarray(features, dtype=np.float64), tail], axis=-1)


def predict(logits) -> int | np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.shape[-1] == 0:
        raise ValueError("predict: empty logits")
    out = np.argmax(logits, axis=-1)
    return int(out) if out.ndim == 0 else out


@dataclass
class ModelState:
    layers: list = field(default_factory=list)


def _relu(x):
    return np.maximum(x, 0.0)


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layers: list[FwpLayer] = [
            make_layer(b.layer_kind, b.d_model, b.num_heads, lr_mode=b.lr_mode, input_activation=b.input_activation)
            for b in cfg.blocks
        ]

    # -- parameters and state ------------------------------------------------

    def init_params(self, rng: Rng) -> dict[str, np.ndarray]:
        cfg = self.cfg
        D = cfg.d_model
        p: dict[str, np.ndarray] = {}
        p["in.W"] = rng.normal((D, cfg.input_dim), 1.0 / np.sqrt(cfg.input_dim))
        p["in.b"] = np.zeros(D)
        for i, (b, layer) in enumerate(zip(cfg.blocks, self.layers)):
            pre = f"blocks.{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(D), np.zeros(D)
            for name, value in layer.init_params(rng).items():
                p[pre + "layer." + name] = value
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(D), np.zeros(D)
            p[pre + "ff.W1"] = rng.normal((b.d_ff, D), 1.0 / np.sqrt(D))
            p[pre + "ff.b1"] = np.zeros(b.d_ff)
            p[pre + "ff.W2"] = rng.normal((D, b.d_ff), 1.0 / np.sqrt(b.d_ff))
            p[pre + "ff.b2"] = np.zeros(D)
        if cfg.pre_norm:
            p["ln_f.g"], p["ln_f.b"] = np.ones(D), np.zeros(D)
        p["out.W"] = rng.normal((cfg.num_classes, D), 1.0 / np.sqrt(D))
        p["out.b"] = np.zeros(cfg.num_classes)
        return p

    def layer_params(self, params, i: int) -> dict[str, np.ndarray]:
        pre = f"blocks.{i}.layer."
        return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}

    def initial_state(self, params, batch: int) -> ModelState:
        return ModelState([layer.initial_state(self.layer_params(params, i), batch)
                           for i, layer in enumerate(self.layers)])

    def reset(self, params, state: ModelState | None, batch: int) -> ModelState:
        """A fresh state; resetting twice is the same as resetting once."""
        return self.initial_state(params, batch)

    # -- forward / backward -----------------------------------------------

    def forward(self, params, tokens, state: ModelState | None = None, resets=None, dropout_rng: Rng | None = None):
        """Run ``tokens`` (T, B, input_dim) and return ``(logits, state', cache)``.

        ``resets[t, b]`` restores sequence ``b`` to its initial state before
        step ``t``.  Dropout is applied only when ``dropout_rng`` is given.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3 or tokens.shape[2] != cfg.input_dim:
            raise ShapeError(f"model: tokens must be (T, B, {cfg.input_dim}), got {tokens.shape}")
        eps = cfg.ln_eps
        h = tokens @ params["in.W"].T + params["in.b"]
        caches = []
        new_states = []
        for i, (b, layer) in enumerate(zip(cfg.blocks, self.layers)):
            pre = f"blocks.{i}."
            lp = self.layer_params(params, i)
            st = None if state is None else state.layers[i]
            c = {}
            if cfg.pre_norm:
                a, c["ln1"] = layer_norm_forward(h, params[pre + "ln1.g"], params[pre + "ln1.b"], eps)
            else:
                a = h
            out, st, c["layer"] = layer.forward(lp, a, st, resets)
            new_states.append(st)
            c["m1"] = _dropout_mask(out.shape, b.dropout_p, dropout_rng)
            s = h + (out if c["m1"] is None else out * c["m1"])
            if not cfg.pre_norm:
                s, c["ln1"] = layer_norm_forward(s, params[pre + "ln1.g"], params[pre + "ln1.b"], eps)
            if cfg.pre_norm:
                bn, c["ln2"] = layer_norm_forward(s, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)
            else:
                bn = s
            c["ff_in"] = bn
            z = bn @ params[pre + "ff.W1"].T + params[pre + "ff.b1"]
            c["z"] = z
            r = _relu(z)
            f = r @ params[pre + "ff.W2"].T + params[pre + "ff.b2"]
            c["m2"] = _dropout_mask(f.shape, b.dropout_p, dropout_rng)
            h = s + (f if c["m2"] is None else f * c["m2"])
            if not cfg.pre_norm:
                h, c["ln2"] = layer_norm_forward(h, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)
            caches.append(c)
        if cfg.pre_norm:
            hf, lnf = layer_norm_forward(h, params["ln_f.g"], params["ln_f.b"], eps)
        else:
            hf, lnf = h, None
        logits = hf @ params["out.W"].T + params["out.b"]
        cache = {"tokens": tokens, "blocks": caches, "ln_f": lnf, "h_final": hf}
        return logits, ModelState(new_states), cache

    def backward(self, params, cache, g_logits) -> dict[str, np.ndarray]:
        cfg = self.cfg
        grads: dict[str, np.ndarray] = {}
        g_logits = np.asarray(g_logits, dtype=np.float64)
        D = cfg.d_model
        hf = cache["h_final"]
        grads["out.W"] = g_logits.reshape(-1, cfg.num_classes).T @ hf.reshape(-1, D)
        grads["out.b"] = g_logits.sum(axis=(0, 1))
        gh = g_logits @ params["out.W"]
        if cfg.pre_norm:
            gh, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward(gh, params["ln_f.g"], cache["ln_f"])
        for i in range(len(cfg.blocks) - 1, -1, -1):
            pre = f"blocks.{i}."
            c = cache["blocks"][i]
            layer = self.layers[i]
            if not cfg.pre_norm:
                gh, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(
                    gh, params[pre + "ln2.g"], c["ln2"])
            gs = gh
            gf = gh if c["m2"] is None else gh * c["m2"]
            z = c["z"]
            r = _relu(z)
            d_ff = z.shape[-1]
            grads[pre + "ff.W2"] = gf.reshape(-1, D).T @ r.reshape(-1, d_ff)
            grads[pre + "ff.b2"] = gf.sum(axis=(0, 1))
            gz = (gf @ params[pre + "ff.W2"]) * (z > 0)
            grads[pre + "ff.W1"] = gz.reshape(-1, d_ff).T @ c["ff_in"].reshape(-1, D)
            grads[pre + "ff.b1"] = gz.sum(axis=(0, 1))
            gbn = gz @ params[pre + "ff.W1"]
            if cfg.pre_norm:
                gbn, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(
                    gbn, params[pre + "ln2.g"], c["ln2"])
            gs = gs + gbn
            if not cfg.pre_norm:
                gs, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(
                    gs, params[pre + "ln1.g"], c["ln1"])
            gout = gs if c["m1"] is None else gs * c["m1"]
            ga, lgrads = layer.backward(self.layer_params(params, i), c["layer"], gout)
            for name, g in lgrads.items():
                grads[pre + "layer." + name] = g
            if cfg.pre_norm:
                ga, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(
                    ga, params[pre + "ln1.g"], c["ln1"])
            gh = gs + ga
        tokens = cache["tokens"]
        grads["in.W"] = gh.reshape(-1, D).T @ tokens.reshape(-1, cfg.input_dim)
        grads["in.b"] = gh.sum(axis=(0, 1))
        return {k: grads[k] for k in params}

    def beta_sigmoids(self, cache) -> dict[int, np.ndarray]:
        """sigma(beta) arrays (T, B, H, L) for every block with a self-referential layer."""
        out = {}
        for i, layer in enumerate(self.layers):
            s = layer.beta_sigmoids(cache["blocks"][i]["layer"])
            if s is not None:
                out[i] = s
        return out


def _dropout_mask(shape, p: float, rng: Rng | None):
    if rng is None or p == 0.0:
        return None
    return (rng.gen.random(shape) >= p) / (1.0 - p)


def model_forward(params, cfg: ModelConfig, state: ModelState | None, tokens):
    model = Model(cfg)
    logits, state, _ = model.forward(params, tokens, state)
    return logits, state
