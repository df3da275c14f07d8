"""Fast weight programmer layers: DeltaNet, SRWM, Fake-SR and SR-DeltaNet.

All sequence arrays are laid out ``(T, B, width)``: time first, then an
independent-sequence batch axis.  Per-head matrices carry a ``(B, H, ...)``
prefix.  Every layer exposes ``forward`` returning a trace and a matching
``backward`` that computes exact gradients from it.

SRWM row layout per head (``R = o + 2d + L`` rows, ``d`` columns)::

    [ y rows (o) | q rows (d) | k rows (d) | beta rows (L) ]

with ``L = 1`` for a single self-invented learning rate and ``L = 4`` when each
of the four row blocks gets its own.  DeltaNet slow projections are laid out
``[k | v | q | beta]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import (
    NumericError,
    Rng,
    ShapeError,
    as_float,
    sigmoid,
    softmax,
    softmax_backward,
)

ROW_LAYOUT = "y,q,k,beta"
DIVERGENCE_BOUND = 1e6


class DivergenceError(NumericError):
    pass


class LayerKind(str, Enum):
    DELTA_NET = "delta_net"
    SRWM = "srwm"
    FAKE_SR = "fake_sr"
    SR_DELTA = "sr_delta"


def _check_weights(W: np.ndarray, step: int, what: str) -> None:
    peak = np.abs(W).max() if W.size else 0.0
    if peak <= DIVERGENCE_BOUND:
        return
    bad = ~np.isfinite(W) | (np.abs(W) > DIVERGENCE_BOUND)
    head = int(np.argwhere(bad)[0][1])
    if not np.isfinite(peak):
        raise NumericError(f"{what}: non-finite weights at step {step}, head {head}", head=head, step=step)
    raise DivergenceError(
        f"{what}: |W| = {peak:.3g} exceeds {DIVERGENCE_BOUND:g} at step {step}, head {head}",
        head=head,
        step=step,
    )


def _matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    # (..., R, d) x (..., d) -> (..., R)
    return np.matmul(W, x[..., None])[..., 0]


def _rmatvec(W: np.ndarray, g: np.ndarray) -> np.ndarray:
    # (..., R, d)^T x (..., R) -> (..., d)
    return np.matmul(g[..., None, :], W)[..., 0, :]


def _check_seq(x_seq: np.ndarray, width: int, name: str) -> np.ndarray:
    x_seq = as_float(x_seq)
    if x_seq.ndim != 3 or x_seq.shape[2] != width:
        raise ShapeError(f"{name}: expected input of shape (T, B, {width}), got {x_seq.shape}")
    return x_seq


# --------------------------------------------------------------------------
# SRWM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SrwmConfig:
    d_in: int
    d_out: int
    num_heads: int = 1
    lr_mode: str = "single"  # "single" | "per_submatrix_4"
    input_activation: str = "identity"  # "identity" | "softmax"

    def __post_init__(self):
        if self.num_heads < 1 or self.d_in < 1 or self.d_out < 1:
            raise ValueError("SrwmConfig: dimensions and head count must be positive")
        if self.d_in % self.num_heads or self.d_out % self.num_heads:
            raise ValueError(
                f"SrwmConfig: d_in={self.d_in} and d_out={self.d_out} must be divisible by H={self.num_heads}"
            )
        if self.lr_mode not in ("single", "per_submatrix_4"):
            raise ValueError(f"SrwmConfig: unknown lr_mode {self.lr_mode!r}")
        if self.input_activation not in ("identity", "softmax"):
            raise ValueError(f"SrwmConfig: unknown input_activation {self.input_activation!r}")

    @property
    def d(self) -> int:
        return self.d_in // self.num_heads

    @property
    def o(self) -> int:
        return self.d_out // self.num_heads

    @property
    def n_lr(self) -> int:
        return 1 if self.lr_mode == "single" else 4

    @property
    def rows(self) -> int:
        return self.o + 2 * self.d + self.n_lr

    @property
    def block_starts(self) -> np.ndarray:
        if self.n_lr == 1:
            return np.array([0])
        return np.array([0, self.o, self.o + self.d, self.o + 2 * self.d])

    @property
    def row_block(self) -> np.ndarray:
        """Index into the learning-rate vector for every row of W."""
        idx = np.zeros(self.rows, dtype=np.intp)
        if self.n_lr == 4:
            o, d = self.o, self.d
            idx[o : o + d] = 1
            idx[o + d : o + 2 * d] = 2
            idx[o + 2 * d :] = 3
        return idx

    @property
    def param_shape(self) -> tuple[int, int, int]:
        return (self.num_heads, self.rows, self.d)


@dataclass
class SrwmState:
    W: np.ndarray  # (B, H, R, d)
    step_count: np.ndarray  # (B,) steps since the last reset

    def copy(self) -> "SrwmState":
        return SrwmState(self.W.copy(), self.step_count.copy())


@dataclass
class StepTrace:
    """Per-step quantities an exact backward needs; every field is (B, H, .)."""

    phi_x: np.ndarray
    k: np.ndarray
    q: np.ndarray
    beta_raw: np.ndarray
    phi_k: np.ndarray
    phi_q: np.ndarray
    v: np.ndarray
    v_bar: np.ndarray


@dataclass
class SrwmTrace:
    steps: list[StepTrace]
    W_final: np.ndarray
    fresh_start: bool
    resets: np.ndarray | None = None
    pre_reset: dict[int, np.ndarray] = field(default_factory=dict)
    states: list[np.ndarray] | None = None  # W_{t-1} per step, debug mode only


def init_srwm_params(cfg: SrwmConfig, rng: Rng) -> np.ndarray:
    H, R, d = cfg.param_shape
    W0 = rng.normal((H, R, d), 1.0 / np.sqrt(d))
    W0[:, cfg.o + 2 * cfg.d :, :] = 0.0
    return W0


def srwm_initial_state(cfg: SrwmConfig, W0: np.ndarray, batch: int = 1) -> SrwmState:
    if W0.shape != cfg.param_shape:
        raise ShapeError(f"SRWM W0 has shape {W0.shape}, config wants {cfg.param_shape}")
    W = np.broadcast_to(W0, (batch,) + W0.shape).copy()
    return SrwmState(W, np.zeros(batch, dtype=np.int64))


def _srwm_input(cfg: SrwmConfig, x: np.ndarray) -> np.ndarray:
    xh = x.reshape(x.shape[0], cfg.num_heads, cfg.d)
    return softmax(xh) if cfg.input_activation == "softmax" else xh


def _srwm_step(cfg: SrwmConfig, W: np.ndarray, x: np.ndarray, t: int = 0):
    B = x.shape[0]
    o, d = cfg.o, cfg.d
    phi_x = _srwm_input(cfg, x)
    out = _matvec(W, phi_x)
    y, q, k, beta = out[..., :o], out[..., o : o + d], out[..., o + d : o + 2 * d], out[..., o + 2 * d :]
    phi_k, phi_q = softmax(k), softmax(q)
    reads = np.matmul(W, np.stack([phi_k, phi_q], axis=-1))
    v_bar, v = reads[..., 0], reads[..., 1]
    lr = sigmoid(beta)[..., cfg.row_block]
    W_new = W + (lr * (v - v_bar))[..., :, None] * phi_k[..., None, :]
    _check_weights(W_new, t, "srwm")
    trace = StepTrace(phi_x, k, q, beta, phi_k, phi_q, v, v_bar)
    return y.reshape(B, cfg.d_out), W_new, trace


def _srwm_update(cfg: SrwmConfig, st: StepTrace) -> np.ndarray:
    """The rank-1 increment ``W_t - W_{t-1}`` recorded in a step trace."""
    lr = sigmoid(st.beta_raw)[..., cfg.row_block]
    return (lr * (st.v - st.v_bar))[..., :, None] * st.phi_k[..., None, :]


def _srwm_step_backward(cfg: SrwmConfig, st: StepTrace, W_prev: np.ndarray, gW: np.ndarray, gy: np.ndarray):
    """Pull ``gW`` (grad wrt W_t) and ``gy`` back through one step.

    Returns ``(gx, gW_prev)``.
    """
    B = gy.shape[0]
    s = sigmoid(st.beta_raw)
    lr = s[..., cfg.row_block]
    delta = st.v - st.v_bar
    g_u = _matvec(gW, st.phi_k)
    g_pk = _rmatvec(gW, lr * delta)
    g_s = np.add.reduceat(g_u * delta, cfg.block_starts, axis=-1)
    g_beta = g_s * s * (1.0 - s)
    g_delta = g_u * lr

    # v = W phi(q), v_bar = W phi(k)
    wt_gd = _rmatvec(W_prev, g_delta)
    g_q = softmax_backward(st.phi_q, wt_gd)
    g_k = softmax_backward(st.phi_k, g_pk - wt_gd)

    g_out = np.concatenate([gy.reshape(B, cfg.num_heads, cfg.o), g_q, g_k, g_beta], axis=-1)
    g_px = _rmatvec(W_prev, g_out)
    gW_prev = (
        gW
        + g_delta[..., :, None] * (st.phi_q - st.phi_k)[..., None, :]
        + g_out[..., :, None] * st.phi_x[..., None, :]
    )
    if cfg.input_activation == "softmax":
        g_px = softmax_backward(st.phi_x, g_px)
    return g_px.reshape(B, cfg.d_in), gW_prev


def srwm_step(cfg: SrwmConfig, state: SrwmState, x: np.ndarray):
    """One SRWM step on a batch of inputs ``x`` of shape (B, d_in).

    y is read from W_{t-1}; the self-update then produces W_t.
    """
    x = as_float(x)
    if x.ndim != 2 or x.shape[1] != cfg.d_in or x.shape[0] != state.W.shape[0]:
        raise ShapeError(f"srwm_step: input {x.shape} does not match state {state.W.shape} / d_in={cfg.d_in}")
    if state.W.shape[1:] != cfg.param_shape:
        raise ShapeError(f"srwm_step: state {state.W.shape} does not match config {cfg.param_shape}")
    y, W_new, trace = _srwm_step(cfg, state.W, x, int(state.step_count.max(initial=0)))
    return y, SrwmState(W_new, state.step_count + 1), trace


def _apply_reset(W, mask, value):
    return np.where(mask[:, None, None, None], value, W)


def srwm_forward(
    cfg: SrwmConfig,
    W0: np.ndarray,
    x_seq: np.ndarray,
    initial_state: SrwmState | None = None,
    resets: np.ndarray | None = None,
    store_states: bool = False,
):
    """Fold ``srwm_step`` over ``x_seq`` (T, B, d_in).

    ``resets[t, b]`` restores sequence ``b`` to ``W0`` before step ``t``.
    Without ``initial_state`` the sequence starts fresh from ``W0`` and the
    backward pass credits the initial state gradient to ``W0``; a carried
    state is treated as a constant.
    """
    x_seq = _check_seq(x_seq, cfg.d_in, "srwm_forward")
    T, B, _ = x_seq.shape
    fresh = initial_state is None
    state = srwm_initial_state(cfg, W0, B) if fresh else initial_state
    if state.W.shape != (B,) + cfg.param_shape:
        raise ShapeError(f"srwm_forward: state {state.W.shape} incompatible with batch {B} / {cfg.param_shape}")
    W, counts = state.W, state.step_count.copy()
    ys = np.empty((T, B, cfg.d_out), dtype=np.result_type(W0, x_seq))
    steps: list[StepTrace] = []
    pre_reset: dict[int, np.ndarray] = {}
    states = [] if store_states else None
    for t in range(T):
        if resets is not None and resets[t].any():
            pre_reset[t] = W
            W = _apply_reset(W, resets[t], W0[None])
            counts = np.where(resets[t], 0, counts)
        if store_states:
            states.append(W)
        ys[t], W, st = _srwm_step(cfg, W, x_seq[t], t)
        steps.append(st)
        counts = counts + 1
    trace = SrwmTrace(steps, W, fresh, None if resets is None else np.asarray(resets, bool), pre_reset, states)
    return ys, SrwmState(W, counts), trace


def srwm_backward(
    cfg: SrwmConfig,
    W0: np.ndarray,
    trace: SrwmTrace,
    grad_y_seq: np.ndarray,
    grad_final_W: np.ndarray | None = None,
    replay: bool = True,
):
    """Exact gradients wrt every input and ``W0``.

    With ``replay`` the pre-step matrices are recovered by subtracting the
    recorded rank-1 updates; otherwise the states stored by a
    ``store_states=True`` forward are used.
    """
    T = len(trace.steps)
    grad_y_seq = as_float(grad_y_seq)
    if grad_y_seq.shape[0] != T or (T and grad_y_seq.shape[2] != cfg.d_out):
        raise ShapeError(f"srwm_backward: grad_y shape {grad_y_seq.shape} does not match trace length {T}")
    if not replay and trace.states is None:
        raise ValueError("srwm_backward: replay=False needs a forward run with store_states=True")
    W = trace.W_final
    B = W.shape[0]
    gW = np.zeros_like(W) if grad_final_W is None else np.array(grad_final_W)
    if gW.shape != W.shape:
        raise ShapeError(f"srwm_backward: grad_final_W {gW.shape} vs state {W.shape}")
    gW0 = np.zeros(cfg.param_shape)
    gx = np.empty((T, B, cfg.d_in))
    for t in range(T - 1, -1, -1):
        st = trace.steps[t]
        W_prev = trace.states[t] if not replay else W - _srwm_update(cfg, st)
        gx[t], gW = _srwm_step_backward(cfg, st, W_prev, gW, grad_y_seq[t])
        if t in trace.pre_reset:
            m = trace.resets[t]
            gW0 += gW[m].sum(axis=0)
            gW = np.where(m[:, None, None, None], 0.0, gW)
            W_prev = trace.pre_reset[t]
        W = W_prev
    if trace.fresh_start:
        gW0 += gW.sum(axis=0)
    return gx, gW0


# --------------------------------------------------------------------------
# Fake-SR: the y block of W0, no self-modification
# --------------------------------------------------------------------------


def fake_sr_step(cfg: SrwmConfig, W0: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = as_float(x)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ShapeError(f"fake_sr_step: expected (B, {cfg.d_in}), got {x.shape}")
    if W0.shape != cfg.param_shape:
        raise ShapeError(f"fake_sr_step: W0 {W0.shape} vs config {cfg.param_shape}")
    return _matvec(W0[None, :, : cfg.o, :], _srwm_input(cfg, x)).reshape(x.shape[0], cfg.d_out)


def fake_sr_forward(cfg: SrwmConfig, W0: np.ndarray, x_seq: np.ndarray):
    x_seq = _check_seq(x_seq, cfg.d_in, "fake_sr_forward")
    T, B, _ = x_seq.shape
    phi_x = _srwm_input(cfg, x_seq.reshape(T * B, cfg.d_in))  # (TB, H, d)
    y = np.einsum("hrd,nhd->nhr", W0[:, : cfg.o, :], phi_x)
    return y.reshape(T, B, cfg.d_out), phi_x


def fake_sr_backward(cfg: SrwmConfig, W0: np.ndarray, phi_x: np.ndarray, grad_y_seq: np.ndarray):
    T, B, _ = grad_y_seq.shape
    gy = grad_y_seq.reshape(T * B, cfg.num_heads, cfg.o)
    gW0 = np.zeros(cfg.param_shape)
    gW0[:, : cfg.o, :] = np.einsum("nhr,nhd->hrd", gy, phi_x)
    g_px = np.einsum("hrd,nhr->nhd", W0[:, : cfg.o, :], gy)
    if cfg.input_activation == "softmax":
        g_px = softmax_backward(phi_x, g_px)
    return g_px.reshape(T, B, cfg.d_in), gW0


# --------------------------------------------------------------------------
# Delta rule core shared by DeltaNet and SR-DeltaNet
# --------------------------------------------------------------------------


@dataclass
class DeltaNetState:
    W: np.ndarray  # (B, H, o, dk)
    step_count: np.ndarray

    def copy(self) -> "DeltaNetState":
        return DeltaNetState(self.W.copy(), self.step_count.copy())


@dataclass
class DeltaStepTrace:
    phi_k: np.ndarray
    phi_q: np.ndarray
    v: np.ndarray
    v_bar: np.ndarray
    beta_raw: np.ndarray  # (B, H)


@dataclass
class DeltaTrace:
    steps: list[DeltaStepTrace]
    W_final: np.ndarray
    resets: np.ndarray | None = None
    pre_reset: dict[int, np.ndarray] = field(default_factory=dict)


def _delta_core_step(W, k, v, q, beta, t=0):
    phi_k, phi_q = softmax(k), softmax(q)
    v_bar = _matvec(W, phi_k)
    s = sigmoid(beta)
    W_new = W + (s[..., None] * (v - v_bar))[..., :, None] * phi_k[..., None, :]
    _check_weights(W_new, t, "delta")
    y = _matvec(W_new, phi_q)
    return y, W_new, DeltaStepTrace(phi_k, phi_q, v, v_bar, beta)


def _delta_update(st: DeltaStepTrace) -> np.ndarray:
    return (sigmoid(st.beta_raw)[..., None] * (st.v - st.v_bar))[..., :, None] * st.phi_k[..., None, :]


def _delta_core_forward(W, k, v, q, beta, resets=None):
    """k, q: (T, B, H, dk); v: (T, B, H, o); beta: (T, B, H)."""
    T = k.shape[0]
    ys = np.empty(v.shape, dtype=v.dtype)
    steps = []
    pre_reset = {}
    for t in range(T):
        if resets is not None and resets[t].any():
            pre_reset[t] = W
            W = _apply_reset(W, resets[t], 0.0)
        ys[t], W, st = _delta_core_step(W, k[t], v[t], q[t], beta[t], t)
        steps.append(st)
    return ys, W, DeltaTrace(steps, W, None if resets is None else np.asarray(resets, bool), pre_reset)


def _delta_core_backward(trace: DeltaTrace, gy, gW=None):
    """Returns grads (gk, gv, gq, gbeta) shaped like the forward inputs."""
    T = len(trace.steps)
    W = trace.W_final
    gW = np.zeros_like(W) if gW is None else np.array(gW)
    B, H, o, dk = W.shape
    gk = np.empty((T, B, H, dk))
    gq = np.empty((T, B, H, dk))
    gv = np.empty((T, B, H, o))
    gbeta = np.empty((T, B, H))
    for t in range(T - 1, -1, -1):
        st = trace.steps[t]
        s = sigmoid(st.beta_raw)
        delta = st.v - st.v_bar
        gWt = gW + gy[t][..., :, None] * st.phi_q[..., None, :]
        g_pq = _rmatvec(W, gy[t])
        g_u = _matvec(gWt, st.phi_k)
        g_pk = _rmatvec(gWt, s[..., None] * delta)
        g_delta = s[..., None] * g_u
        W_prev = W - _delta_update(st)
        g_pk -= _rmatvec(W_prev, g_delta)
        gW = gWt - g_delta[..., :, None] * st.phi_k[..., None, :]
        gk[t] = softmax_backward(st.phi_k, g_pk)
        gq[t] = softmax_backward(st.phi_q, g_pq)
        gv[t] = g_delta
        gbeta[t] = (g_u * delta).sum(axis=-1) * s * (1.0 - s)
        if t in trace.pre_reset:
            m = trace.resets[t]
            gW = np.where(m[:, None, None, None], 0.0, gW)
            W_prev = trace.pre_reset[t]
        W = W_prev
    return gk, gv, gq, gbeta


# --------------------------------------------------------------------------
# DeltaNet
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaNetConfig:
    d_in: int
    d_out: int
    d_key: int
    num_heads: int = 1

    def __post_init__(self):
        if min(self.d_in, self.d_out, self.d_key, self.num_heads) < 1:
            raise ValueError("DeltaNetConfig: dimensions and head count must be positive")
        if self.d_out % self.num_heads or self.d_key % self.num_heads:
            raise ValueError("DeltaNetConfig: d_out and d_key must be divisible by num_heads")

    @property
    def proj_rows(self) -> int:
        return self.d_out + 2 * self.d_key + 1

    @property
    def head_out(self) -> int:
        return self.d_out // self.num_heads

    @property
    def head_key(self) -> int:
        return self.d_key // self.num_heads

    @property
    def param_shape(self) -> tuple[int, int]:
        return (self.proj_rows, self.d_in)


def init_delta_params(cfg: DeltaNetConfig, rng: Rng) -> np.ndarray:
    W = rng.normal(cfg.param_shape, 1.0 / np.sqrt(cfg.d_in))
    W[-1, :] = 0.0
    return W


def delta_initial_state(cfg: DeltaNetConfig, batch: int = 1) -> DeltaNetState:
    return DeltaNetState(
        np.zeros((batch, cfg.num_heads, cfg.head_out, cfg.head_key)), np.zeros(batch, dtype=np.int64)
    )


def _delta_split(cfg: DeltaNetConfig, proj: np.ndarray):
    lead = proj.shape[:-1]
    H, dk, o = cfg.num_heads, cfg.d_key, cfg.d_out
    k = proj[..., :dk].reshape(lead + (H, cfg.head_key))
    v = proj[..., dk : dk + o].reshape(lead + (H, cfg.head_out))
    q = proj[..., dk + o : 2 * dk + o].reshape(lead + (H, cfg.head_key))
    beta = np.broadcast_to(proj[..., -1:], lead + (H,))
    return k, v, q, beta


def delta_step(cfg: DeltaNetConfig, W_slow: np.ndarray, state: DeltaNetState, x: np.ndarray):
    x = as_float(x)
    if W_slow.shape != cfg.param_shape or x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ShapeError(f"delta_step: W_slow {W_slow.shape}, x {x.shape}, config {cfg.param_shape}")
    k, v, q, beta = _delta_split(cfg, x @ W_slow.T)
    y, W_new, st = _delta_core_step(state.W, k, v, q, beta, int(state.step_count.max(initial=0)))
    return y.reshape(x.shape[0], cfg.d_out), DeltaNetState(W_new, state.step_count + 1), st


def delta_forward(
    cfg: DeltaNetConfig,
    W_slow: np.ndarray,
    x_seq: np.ndarray,
    initial_state: DeltaNetState | None = None,
    resets: np.ndarray | None = None,
):
    x_seq = _check_seq(x_seq, cfg.d_in, "delta_forward")
    T, B, _ = x_seq.shape
    state = delta_initial_state(cfg, B) if initial_state is None else initial_state
    k, v, q, beta = _delta_split(cfg, x_seq @ W_slow.T)
    ys, W, core = _delta_core_forward(state.W, k, v, q, beta, resets)
    counts = state.step_count.copy()
    for t in range(T):
        counts = np.where(resets[t], 1, counts + 1) if resets is not None else counts + 1
    return ys.reshape(T, B, cfg.d_out), DeltaNetState(W, counts), (x_seq, core)


def delta_backward(cfg: DeltaNetConfig, W_slow: np.ndarray, trace, grad_y_seq, grad_final_W=None):
    x_seq, core = trace
    T, B, _ = x_seq.shape
    gy = as_float(grad_y_seq).reshape(T, B, cfg.num_heads, cfg.head_out)
    gk, gv, gq, gbeta = _delta_core_backward(core, gy, grad_final_W)
    g_proj = np.concatenate(
        [gk.reshape(T, B, -1), gv.reshape(T, B, -1), gq.reshape(T, B, -1), gbeta.sum(axis=-1)[..., None]],
        axis=-1,
    )
    gW_slow = g_proj.reshape(T * B, -1).T @ x_seq.reshape(T * B, -1)
    return g_proj @ W_slow, gW_slow


# --------------------------------------------------------------------------
# SR-DeltaNet: an SRWM produces the DeltaNet projections
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SrDeltaConfig:
    srwm: SrwmConfig
    d_fw_out: int
    d_fw_key: int

    def __post_init__(self):
        H = self.srwm.num_heads
        if self.d_fw_out % H or self.d_fw_key % H:
            raise ValueError("SrDeltaConfig: fast-weight widths must be divisible by the head count")
        need = H * (self.d_fw_out // H + 2 * (self.d_fw_key // H) + 1)
        if self.srwm.d_out != need:
            raise ValueError(
                f"SrDeltaConfig: SRWM d_out={self.srwm.d_out} must equal the per-head projection width total {need}"
            )

    @classmethod
    def square(cls, d_model: int, num_heads: int, lr_mode: str = "single", input_activation: str = "identity"):
        d = d_model // num_heads
        srwm = SrwmConfig(d_model, num_heads * (3 * d + 1), num_heads, lr_mode, input_activation)
        return cls(srwm, d_model, d_model)

    @property
    def num_heads(self) -> int:
        return self.srwm.num_heads

    @property
    def head_out(self) -> int:
        return self.d_fw_out // self.num_heads

    @property
    def head_key(self) -> int:
        return self.d_fw_key // self.num_heads

    def split(self, proj: np.ndarray):
        """Per-head [k | v | q | beta] split of SRWM outputs (..., d_out)."""
        lead = proj.shape[:-1]
        p = proj.reshape(lead + (self.num_heads, -1))
        dk, o = self.head_key, self.head_out
        return p[..., :dk], p[..., dk : dk + o], p[..., dk + o : 2 * dk + o], p[..., -1]


def sr_delta_initial_state(cfg: SrDeltaConfig, W0: np.ndarray, batch: int = 1):
    fast = DeltaNetState(
        np.zeros((batch, cfg.num_heads, cfg.head_out, cfg.head_key)), np.zeros(batch, dtype=np.int64)
    )
    return srwm_initial_state(cfg.srwm, W0, batch), fast


def sr_delta_step(cfg: SrDeltaConfig, srwm_state: SrwmState, delta_state: DeltaNetState, x: np.ndarray):
    proj, srwm_state, srwm_trace = srwm_step(cfg.srwm, srwm_state, x)
    k, v, q, beta = cfg.split(proj)
    y, W_new, st = _delta_core_step(delta_state.W, k, v, q, beta, int(delta_state.step_count.max(initial=0)))
    delta_state = DeltaNetState(W_new, delta_state.step_count + 1)
    return y.reshape(x.shape[0], cfg.d_fw_out), srwm_state, delta_state, (srwm_trace, st)


def sr_delta_forward(cfg: SrDeltaConfig, W0, x_seq, initial_state=None, resets=None, store_states=False):
    srwm_state, fast = (None, None) if initial_state is None else initial_state
    proj, srwm_state, srwm_trace = srwm_forward(cfg.srwm, W0, x_seq, srwm_state, resets, store_states)
    T, B = proj.shape[:2]
    if fast is None:
        fast = sr_delta_initial_state(cfg, W0, B)[1]
    k, v, q, beta = cfg.split(proj)
    ys, W, core = _delta_core_forward(fast.W, k, v, q, beta, resets)
    counts = fast.step_count.copy()
    for t in range(T):
        counts = np.where(resets[t], 1, counts + 1) if resets is not None else counts + 1
    return ys.reshape(T, B, cfg.d_fw_out), (srwm_state, DeltaNetState(W, counts)), (srwm_trace, core)


def sr_delta_backward(cfg: SrDeltaConfig, W0, trace, grad_y_seq, grad_final=None, replay=True):
    srwm_trace, core = trace
    T = len(core.steps)
    g_srwm_W, g_fast_W = (None, None) if grad_final is None else grad_final
    B = core.W_final.shape[0]
    gy = as_float(grad_y_seq).reshape(T, B, cfg.num_heads, cfg.head_out)
    gk, gv, gq, gbeta = _delta_core_backward(core, gy, g_fast_W)
    g_proj = np.concatenate([gk, gv, gq, gbeta[..., None]], axis=-1).reshape(T, B, cfg.srwm.d_out)
    return srwm_backward(cfg.srwm, W0, srwm_trace, g_proj, g_srwm_W, replay)


# --------------------------------------------------------------------------
# Uniform layer wrappers used by the model
# --------------------------------------------------------------------------


class FwpLayer:
    """Common surface: params dict in, (T, B, d_model) sequences through."""

    kind: LayerKind
    d_model: int
    num_heads: int

    def init_params(self, rng: Rng) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def initial_state(self, params, batch: int):
        return None

    def forward(self, params, x_seq, state=None, resets=None):
        raise NotImplementedError

    def backward(self, params, trace, gy_seq):
        raise NotImplementedError

    def beta_sigmoids(self, trace) -> np.ndarray | None:
        """sigma(beta) of the self-referential part as (T, B, H, L), if any."""
        return None


class SrwmLayer(FwpLayer):
    kind = LayerKind.SRWM

    def __init__(self, d_model: int, num_heads: int, lr_mode: str = "single", input_activation: str = "identity"):
        self.d_model, self.num_heads = d_model, num_heads
        self.cfg = SrwmConfig(d_model, d_model, num_heads, lr_mode, input_activation)

    def init_params(self, rng):
        return {"W0": init_srwm_params(self.cfg, rng)}

    def initial_state(self, params, batch):
        return srwm_initial_state(self.cfg, params["W0"], batch)

    def forward(self, params, x_seq, state=None, resets=None):
        return srwm_forward(self.cfg, params["W0"], x_seq, state, resets)

    def backward(self, params, trace, gy_seq):
        gx, gW0 = srwm_backward(self.cfg, params["W0"], trace, gy_seq)
        return gx, {"W0": gW0}

    def beta_sigmoids(self, trace):
        if not trace.steps:
            return np.empty((0, 0, self.num_heads, self.cfg.n_lr))
        return sigmoid(np.stack([st.beta_raw for st in trace.steps]))


class FakeSrLayer(SrwmLayer):
    kind = LayerKind.FAKE_SR

    def initial_state(self, params, batch):
        return None

    def forward(self, params, x_seq, state=None, resets=None):
        y, phi_x = fake_sr_forward(self.cfg, params["W0"], x_seq)
        return y, None, phi_x

    def backward(self, params, trace, gy_seq):
        gx, gW0 = fake_sr_backward(self.cfg, params["W0"], trace, gy_seq)
        return gx, {"W0": gW0}

    def beta_sigmoids(self, trace):
        return None


class DeltaNetLayer(FwpLayer):
    kind = LayerKind.DELTA_NET

    def __init__(self, d_model: int, num_heads: int, **_):
        self.d_model, self.num_heads = d_model, num_heads
        self.cfg = DeltaNetConfig(d_model, d_model, d_model, num_heads)

    def init_params(self, rng):
        return {"W_slow": init_delta_params(self.cfg, rng)}

    def initial_state(self, params, batch):
        return delta_initial_state(self.cfg, batch)

    def forward(self, params, x_seq, state=None, resets=None):
        return delta_forward(self.cfg, params["W_slow"], x_seq, state, resets)

    def backward(self, params, trace, gy_seq):
        gx, gW = delta_backward(self.cfg, params["W_slow"], trace, gy_seq)
        return gx, {"W_slow": gW}


class SrDeltaLayer(FwpLayer):
    kind = LayerKind.SR_DELTA

    def __init__(self, d_model: int, num_heads: int, lr_mode: str = "single", input_activation: str = "identity"):
        self.d_model, self.num_heads = d_model, num_heads
        self.cfg = SrDeltaConfig.square(d_model, num_heads, lr_mode, input_activation)

    def init_params(self, rng):
        W0 = init_srwm_params(self.cfg.srwm, rng)
        # the projected delta learning rate is the last y row of each head
        W0[:, self.cfg.srwm.o - 1, :] = 0.0
        return {"W0": W0}

    def initial_state(self, params, batch):
        return sr_delta_initial_state(self.cfg, params["W0"], batch)

    def forward(self, params, x_seq, state=None, resets=None):
        return sr_delta_forward(self.cfg, params["W0"], x_seq, state, resets)

    def backward(self, params, trace, gy_seq):
        gx, gW0 = sr_delta_backward(self.cfg, params["W0"], trace, gy_seq)
        return gx, {"W0": gW0}

    def beta_sigmoids(self, trace):
        steps = trace[0].steps
        if not steps:
            return np.empty((0, 0, self.num_heads, self.cfg.srwm.n_lr))
        return sigmoid(np.stack([st.beta_raw for st in steps]))


def make_layer(kind: LayerKind | str, d_model: int, num_heads: int, lr_mode: str = "single",
               input_activation: str = "identity") -> FwpLayer:
    kind = LayerKind(kind)
    cls = {
        LayerKind.SRWM: SrwmLayer,
        LayerKind.FAKE_SR: FakeSrLayer,
        LayerKind.DELTA_NET: DeltaNetLayer,
        LayerKind.SR_DELTA: SrDeltaLayer,
    }[kind]
    return cls(d_model, num_heads, lr_mode=lr_mode, input_activation=input_activation)
