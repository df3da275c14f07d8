"""Reference implementations used to check the layers.

The naive forwards run one head, one step at a time, with one line per
update equation.  They import nothing from :mod:`srwm.layers`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import DTYPE, NumericError, Rng, ShapeError, matvec, outer, sigmoid, softmax


def naive_srwm_forward(W0, x_seq, d_out: int, lr_mode: str = "single", input_activation: str = "identity"):
    """Single-head SRWM. ``W0`` is (d_out + 2d + L, d); ``x_seq`` is (T, d).

    Returns ``(y_seq, W_seq)`` where ``W_seq[0]`` is ``W0`` and ``W_seq[t]``
    the matrix after step ``t``.
    """
    W = np.array(W0, dtype=DTYPE)
    d = W.shape[1]
    n_lr = 1 if lr_mode == "single" else 4
    if W.shape[0] != d_out + 2 * d + n_lr:
        raise ShapeError(f"naive_srwm_forward: W0 {W.shape} inconsistent with d_out={d_out}, L={n_lr}")
    blocks = [(0, W.shape[0])] if n_lr == 1 else [
        (0, d_out), (d_out, d_out + d), (d_out + d, d_out + 2 * d), (d_out + 2 * d, W.shape[0])
    ]
    ys, Ws = [], [W.copy()]
    for x in np.asarray(x_seq, dtype=DTYPE).reshape(-1, d):
        phi_x = softmax(x) if input_activation == "softmax" else x
        out = matvec(W, phi_x)
        y, q, k, beta = out[:d_out], out[d_out:d_out + d], out[d_out + d:d_out + 2 * d], out[d_out + 2 * d:]
        v_bar = matvec(W, softmax(k))
        v = matvec(W, softmax(q))
        W_new = W.copy()
        for j, (lo, hi) in enumerate(blocks):
            W_new[lo:hi] = W[lo:hi] + sigmoid(beta[j]) * outer(v[lo:hi] - v_bar[lo:hi], softmax(k))
        W = W_new
        ys.append(y)
        Ws.append(W.copy())
    return np.array(ys).reshape(-1, d_out), Ws


def naive_delta_forward(W_slow, x_seq, d_out: int, d_key: int):
    """Single-head DeltaNet; ``W_slow`` rows are ordered [k | v | q | beta]."""
    W_slow = np.asarray(W_slow, dtype=DTYPE)
    W = np.zeros((d_out, d_key))
    ys, Ws = [], [W.copy()]
    for x in np.asarray(x_seq, dtype=DTYPE).reshape(-1, W_slow.shape[1]):
        p = matvec(W_slow, x)
        k, v, q, beta = p[:d_key], p[d_key:d_key + d_out], p[d_key + d_out:2 * d_key + d_out], p[-1]
        v_bar = matvec(W, softmax(k))
        W = W + sigmoid(beta) * outer(v - v_bar, softmax(k))
        ys.append(matvec(W, softmax(q)))
        Ws.append(W.copy())
    return np.array(ys).reshape(-1, d_out), Ws


def finite_diff(loss_fn: Callable[[np.ndarray], float], theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``rel_step * max(1, |theta_i|)``.

    ``theta`` keeps its floating dtype, so passing ``np.longdouble`` values
    evaluates ``loss_fn`` in extended precision where the platform has it.
    """
    theta = np.array(theta, dtype=np.result_type(theta, DTYPE))
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        up = loss_fn(theta)
        flat[i] = orig - h
        down = loss_fn(theta)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"finite_diff: non-finite loss at coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(theta.shape)


def relative_error(a, f) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    f = np.asarray(f, dtype=DTYPE)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def add(self, name: str, analytic, numeric) -> None:
        err = relative_error(analytic, numeric)
        i = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        self.max_rel_error[name] = float(err.max()) if err.size else 0.0
        self.worst_index[name] = tuple(int(j) for j in i)

    def table(self) -> str:
        lines = [f"{'group':<24}{'max rel err':>14}  {'worst coord':<18}status"]
        for name, e in self.max_rel_error.items():
            status = "ok" if e <= self.tolerance else "FAIL"
            lines.append(f"{name:<24}{e:>14.3e}  {str(self.worst_index[name]):<18}{status}")
        lines.append(f"tolerance {self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def gradcheck(kind: str = "srwm", d_model: int = 8, num_heads: int = 2, T: int = 8, batch: int = 1,
              seed: int = 0, tolerance: float = 1e-5, lr_mode: str = "single",
              input_activation: str = "identity") -> GradCheckReport:
    """Check a layer's analytic backward against central differences.

    The scalar loss is a fixed random linear read-out of every output.  The
    analytic pass runs in float64; the differences are taken in
    ``np.longdouble`` so their roundoff stays well below the tolerance even
    on coordinates whose gradient is ~1e-6.
    """
    from .layers import make_layer  # the layer under test, not used by the references above

    layer = make_layer(kind, d_model, num_heads, lr_mode=lr_mode, input_activation=input_activation)
    rng = Rng(seed, 11)
    params = {k: v + rng.normal(v.shape, 0.1) for k, v in layer.init_params(rng).items()}
    x = rng.normal((T, batch, d_model), 1.0)
    y, _, trace = layer.forward(params, x)
    c = rng.normal(y.shape, 1.0)

    ext = np.longdouble
    params_ext = {k: v.astype(ext) for k, v in params.items()}
    c_ext, x_ext = c.astype(ext), x.astype(ext)

    def loss_of(p, xx):
        return np.sum(c_ext * layer.forward(p, xx)[0])

    gx, grads = layer.backward(params, trace, c)
    report = GradCheckReport(tolerance)
    for name, value in params_ext.items():
        num = finite_diff(lambda th: loss_of({**params_ext, name: th}, x_ext), value)
        report.add(f"{kind}.{name}", grads[name], num)
    report.add(f"{kind}.x", gx, finite_diff(lambda xx: loss_of(params_ext, xx), x_ext))
    return report
