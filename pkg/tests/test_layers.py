import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srwm.layers import (
    ROW_LAYOUT,
    DeltaNetConfig,
    DivergenceError,
    LayerKind,
    SrDeltaConfig,
    SrwmConfig,
    SrwmState,
    _srwm_update,
    delta_forward,
    delta_step,
    fake_sr_forward,
    fake_sr_step,
    init_delta_params,
    init_srwm_params,
    make_layer,
    sr_delta_forward,
    sr_delta_initial_state,
    sr_delta_step,
    srwm_backward,
    srwm_forward,
    srwm_initial_state,
    srwm_step,
)
from srwm.numerics import NumericError, Rng, ShapeError, sigmoid

PROPERTY_CASES = 500

dims = st.sampled_from([1, 2, 4, 8])
heads = st.sampled_from([1, 2, 4])
lr_modes = st.sampled_from(["single", "per_submatrix_4"])
seeds = st.integers(0, 2**31 - 1)


def random_srwm(d, o, H, lr_mode, seed, beta_shift=0.0, act="identity"):
    cfg = SrwmConfig(d * H, o * H, H, lr_mode, act)
    rng = Rng(seed, 5)
    W0 = init_srwm_params(cfg, rng)
    W0[:, cfg.o + 2 * cfg.d :, :] = rng.normal(W0[:, cfg.o + 2 * cfg.d :, :].shape) + beta_shift
    return cfg, W0, rng


# ---- configuration and shapes ----------------------------------------------


def test_row_layout_and_param_shape():
    assert ROW_LAYOUT == "y,q,k,beta"
    cfg = SrwmConfig(8, 8, 2)
    assert cfg.param_shape == (2, 4 + 2 * 4 + 1, 4)
    cfg4 = SrwmConfig(8, 8, 2, "per_submatrix_4")
    assert cfg4.rows == 4 + 8 + 4
    assert list(cfg4.row_block) == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4


def test_config_validation():
    with pytest.raises(ValueError):
        SrwmConfig(7, 8, 2)
    with pytest.raises(ValueError):
        SrwmConfig(8, 8, 2, lr_mode="two")
    with pytest.raises(ValueError):
        SrwmConfig(8, 8, 2, input_activation="tanh")
    with pytest.raises(ValueError):
        SrDeltaConfig(SrwmConfig(8, 10, 2), 8, 8)


def test_init_beta_rows_are_zero():
    cfg = SrwmConfig(8, 8, 2, "per_submatrix_4")
    W0 = init_srwm_params(cfg, Rng(0))
    assert np.all(W0[:, cfg.o + 2 * cfg.d :, :] == 0.0)
    x = Rng(1).normal((1, 8))
    _, _, trace = srwm_step(cfg, srwm_initial_state(cfg, W0), x)
    assert np.all(sigmoid(trace.beta_raw) == 0.5)


def test_step_shape_errors():
    cfg = SrwmConfig(8, 8, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    with pytest.raises(ShapeError):
        srwm_step(cfg, srwm_initial_state(cfg, W0, 2), np.zeros((2, 7)))
    with pytest.raises(ShapeError):
        srwm_initial_state(cfg, np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        srwm_forward(cfg, W0, np.zeros((3, 8)))


def test_empty_sequence_keeps_state():
    cfg = SrwmConfig(8, 8, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    y, state, trace = srwm_forward(cfg, W0, np.zeros((0, 3, 8)))
    assert y.shape == (0, 3, 8)
    np.testing.assert_array_equal(state.W, np.broadcast_to(W0, state.W.shape))
    gx, gW0 = srwm_backward(cfg, W0, trace, np.zeros((0, 3, 8)))
    assert gx.shape == (0, 3, 8) and np.all(gW0 == 0)


@pytest.mark.parametrize("kind", list(LayerKind))
def test_layer_wrappers_preserve_width(kind):
    layer = make_layer(kind, 8, 2)
    params = layer.init_params(Rng(0))
    x = Rng(1).normal((5, 3, 8))
    y, state, trace = layer.forward(params, x)
    assert y.shape == (5, 3, 8)
    gx, grads = layer.backward(params, trace, np.ones_like(y))
    assert gx.shape == x.shape
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)


def test_step_count_tracks_resets():
    cfg = SrwmConfig(4, 4, 1)
    W0 = init_srwm_params(cfg, Rng(0))
    resets = np.zeros((6, 2), dtype=bool)
    resets[3, 1] = True
    _, state, _ = srwm_forward(cfg, W0, Rng(1).normal((6, 2, 4)), resets=resets)
    assert list(state.step_count) == [6, 3]


# ---- structural invariants (property suites) ---------------------------------


@settings(max_examples=PROPERTY_CASES)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds)
def test_update_is_rank_one_per_head(d, o, H, lr_mode, seed):
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed)
    state = srwm_initial_state(cfg, W0, 1)
    _, new, _ = srwm_step(cfg, state, rng.normal((1, cfg.d_in)))
    for h in range(H):
        dW = new.W[0, h] - state.W[0, h]
        s = np.linalg.svd(dW, compute_uv=False)
        assert s[1:].max(initial=0.0) <= 1e-10 * max(1.0, s[0])


@settings(max_examples=PROPERTY_CASES)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds)
def test_retrieval_shift_identity(d, o, H, lr_mode, seed):
    # (W_t - W_{t-1}) phi(k) = sigma(beta) (v - v_bar) ||phi(k)||^2
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed)
    state = srwm_initial_state(cfg, W0, 2)
    state = srwm_step(cfg, state, rng.normal((2, cfg.d_in)))[1]
    _, new, tr = srwm_step(cfg, state, rng.normal((2, cfg.d_in)))
    lhs = np.einsum("bhrd,bhd->bhr", new.W - state.W, tr.phi_k)
    lr = sigmoid(tr.beta_raw)[..., cfg.row_block]
    rhs = lr * (tr.v - tr.v_bar) * np.sum(tr.phi_k**2, axis=-1, keepdims=True)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


@settings(max_examples=PROPERTY_CASES)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds, act=st.sampled_from(["identity", "softmax"]))
def test_phi_outputs_are_normalized(d, o, H, lr_mode, seed, act):
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed, act=act)
    _, _, tr = srwm_step(cfg, srwm_initial_state(cfg, W0, 2), 3.0 * rng.normal((2, cfg.d_in)))
    for p in (tr.phi_k, tr.phi_q) + ((tr.phi_x,) if act == "softmax" else ()):
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=PROPERTY_CASES)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds, T=st.integers(1, 12))
def test_degenerate_beta_reduces_to_fake_sr(d, o, H, lr_mode, seed, T):
    # beta rows at -40 with softmax inputs: sigma(beta) ~ 4e-18, so W never moves
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed, act="softmax")
    W0[:, cfg.o + 2 * cfg.d :, :] = -40.0
    x = rng.normal((T, 2, cfg.d_in))
    y, state, _ = srwm_forward(cfg, W0, x)
    y_fake, _ = fake_sr_forward(cfg, W0, x)
    np.testing.assert_allclose(y, y_fake, atol=1e-12)
    np.testing.assert_allclose(state.W, np.broadcast_to(W0, state.W.shape), atol=1e-12)


@settings(max_examples=PROPERTY_CASES)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds, T=st.integers(0, 16),
       cuts=st.lists(st.integers(0, 16), max_size=4))
def test_carry_equivalence_under_segmentation(d, o, H, lr_mode, seed, T, cuts):
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed)
    x = rng.normal((T, 2, cfg.d_in))
    y_full, s_full, _ = srwm_forward(cfg, W0, x)
    bounds = sorted({0, T, *[c for c in cuts if c <= T]})
    state, parts = None, []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        y, state, _ = srwm_forward(cfg, W0, x[lo:hi], state)
        parts.append(y)
    y_seg = np.concatenate(parts) if parts else np.zeros_like(y_full)
    np.testing.assert_allclose(y_seg, y_full, atol=1e-12, rtol=0)
    if state is not None:
        np.testing.assert_allclose(state.W, s_full.W, atol=1e-12, rtol=0)


@settings(max_examples=100)
@given(d=dims, o=dims, H=heads, lr_mode=lr_modes, seed=seeds)
def test_step_equals_forward_of_length_one(d, o, H, lr_mode, seed):
    cfg, W0, rng = random_srwm(d, o, H, lr_mode, seed)
    x = rng.normal((1, 3, cfg.d_in))
    y1, s1, _ = srwm_step(cfg, srwm_initial_state(cfg, W0, 3), x[0])
    y2, s2, _ = srwm_forward(cfg, W0, x)
    np.testing.assert_array_equal(y1, y2[0])
    np.testing.assert_array_equal(s1.W, s2.W)


def test_output_reads_previous_matrix():
    cfg = SrwmConfig(4, 4, 1)
    W0 = init_srwm_params(cfg, Rng(0))
    W0[:, cfg.o + 2 * cfg.d :, :] = 1.0
    x = Rng(1).normal((1, 4))
    y, _, _ = srwm_step(cfg, srwm_initial_state(cfg, W0), x)
    np.testing.assert_allclose(y[0], W0[0, : cfg.o] @ x[0])


def test_update_recorded_in_trace_matches_state_difference():
    cfg = SrwmConfig(8, 4, 2, "per_submatrix_4")
    W0 = init_srwm_params(cfg, Rng(3))
    s0 = srwm_initial_state(cfg, W0, 2)
    _, s1, tr = srwm_step(cfg, s0, Rng(4).normal((2, 8)))
    np.testing.assert_allclose(_srwm_update(cfg, tr), s1.W - s0.W, atol=1e-15)


# ---- resets ------------------------------------------------------------------


def test_reset_restores_initial_matrix():
    cfg = SrwmConfig(8, 8, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    x = Rng(1).normal((10, 2, 8))
    resets = np.zeros((10, 2), dtype=bool)
    resets[4, 0] = True
    y, _, _ = srwm_forward(cfg, W0, x, resets=resets)
    y_fresh, _, _ = srwm_forward(cfg, W0, x[4:, :1])
    np.testing.assert_allclose(y[4:, 0], y_fresh[:, 0], atol=1e-13)
    y_noreset, _, _ = srwm_forward(cfg, W0, x)
    np.testing.assert_array_equal(y[:, 1], y_noreset[:, 1])


def test_reset_on_delta_zeroes_fast_weights():
    cfg = DeltaNetConfig(8, 8, 8, 2)
    W = init_delta_params(cfg, Rng(0))
    x = Rng(1).normal((9, 1, 8))
    resets = np.zeros((9, 1), dtype=bool)
    resets[5] = True
    y, _, _ = delta_forward(cfg, W, x, resets=resets)
    y_fresh, _, _ = delta_forward(cfg, W, x[5:])
    np.testing.assert_allclose(y[5:], y_fresh, atol=1e-13)


# ---- divergence --------------------------------------------------------------


def test_divergence_raises_with_location():
    # the update mixes W's own columns, so only non-finite inputs can break it
    cfg = SrwmConfig(4, 4, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    x = Rng(1).normal((6, 1, 4))
    x[3, 0, 3] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericError) as exc:
        srwm_forward(cfg, W0, x)
    assert exc.value.step == 3 and exc.value.head == 1


def test_magnitude_bound_raises_divergence():
    cfg = SrwmConfig(4, 4, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    W0[1] *= 1e7
    with pytest.raises(DivergenceError) as exc:
        srwm_forward(cfg, W0, Rng(1).normal((3, 1, 4)))
    assert exc.value.step == 0 and exc.value.head == 1


# ---- backward modes ----------------------------------------------------------


@pytest.mark.parametrize("lr_mode", ["single", "per_submatrix_4"])
def test_replay_and_stored_backward_agree(lr_mode):
    cfg = SrwmConfig(8, 8, 2, lr_mode)
    rng = Rng(7)
    W0 = init_srwm_params(cfg, rng) + rng.normal(cfg.param_shape, 0.1)
    x = rng.normal((12, 3, 8))
    resets = np.zeros((12, 3), dtype=bool)
    resets[5, 1] = resets[9, 2] = True
    y, _, trace = srwm_forward(cfg, W0, x, resets=resets, store_states=True)
    gy = rng.normal(y.shape)
    a = srwm_backward(cfg, W0, trace, gy, replay=True)
    b = srwm_backward(cfg, W0, trace, gy, replay=False)
    np.testing.assert_allclose(a[0], b[0], atol=1e-10)
    np.testing.assert_allclose(a[1], b[1], atol=1e-10)


def test_stored_backward_requires_states():
    cfg = SrwmConfig(4, 4, 1)
    W0 = init_srwm_params(cfg, Rng(0))
    y, _, trace = srwm_forward(cfg, W0, Rng(1).normal((3, 1, 4)))
    with pytest.raises(ValueError):
        srwm_backward(cfg, W0, trace, np.ones_like(y), replay=False)


def test_carried_state_gets_no_initial_gradient():
    # a carried state is a constant: perturbing the inputs that produced it
    # leaves the gradient of the next segment unchanged
    cfg = SrwmConfig(8, 8, 2)
    rng = Rng(9)
    W0 = init_srwm_params(cfg, rng) + rng.normal(cfg.param_shape, 0.1)
    x1, x2 = rng.normal((5, 1, 8)), rng.normal((5, 1, 8))
    _, s1, _ = srwm_forward(cfg, W0, x1)
    y, _, tr = srwm_forward(cfg, W0, x2, s1)
    gy = rng.normal(y.shape)
    g_a = srwm_backward(cfg, W0, tr, gy)[1]
    # FD wrt W0 with the carried state frozen
    eps = 1e-6
    num = np.zeros_like(W0)
    for i in np.ndindex(W0.shape):
        Wp, Wm = W0.copy(), W0.copy()
        Wp[i] += eps
        Wm[i] -= eps
        up = np.sum(gy * srwm_forward(cfg, Wp, x2, s1.copy())[0])
        dn = np.sum(gy * srwm_forward(cfg, Wm, x2, s1.copy())[0])
        num[i] = (up - dn) / (2 * eps)
    np.testing.assert_allclose(g_a, num, atol=1e-6)
    # y does not depend on W0 at all here: the carried state supplies every matrix
    assert np.abs(g_a).max() < 1e-12


# ---- other layer kinds ---------------------------------------------------------


def test_fake_sr_step_matches_forward_and_has_no_state():
    cfg = SrwmConfig(8, 8, 2)
    W0 = init_srwm_params(cfg, Rng(0))
    x = Rng(1).normal((4, 2, 8))
    y, _ = fake_sr_forward(cfg, W0, x)
    for t in range(4):
        np.testing.assert_allclose(fake_sr_step(cfg, W0, x[t]), y[t], atol=1e-14)
    layer = make_layer("fake_sr", 8, 2)
    assert layer.initial_state(layer.init_params(Rng(0)), 2) is None


def test_delta_step_matches_forward():
    cfg = DeltaNetConfig(8, 8, 8, 2)
    W = init_delta_params(cfg, Rng(0))
    x = Rng(1).normal((6, 2, 8))
    y, state, _ = delta_forward(cfg, W, x)
    s = None
    from srwm.layers import delta_initial_state

    s = delta_initial_state(cfg, 2)
    for t in range(6):
        yt, s, _ = delta_step(cfg, W, s, x[t])
        np.testing.assert_allclose(yt, y[t], atol=1e-13)
    np.testing.assert_allclose(s.W, state.W, atol=1e-13)


def test_delta_zero_initialized_fast_weights():
    cfg = DeltaNetConfig(8, 8, 8, 2)
    from srwm.layers import delta_initial_state

    assert np.all(delta_initial_state(cfg, 3).W == 0)


def test_sr_delta_step_matches_forward():
    cfg = SrDeltaConfig.square(8, 2, "per_submatrix_4")
    W0 = init_srwm_params(cfg.srwm, Rng(0))
    x = Rng(1).normal((6, 2, 8))
    y, _, _ = sr_delta_forward(cfg, W0, x)
    s, f = sr_delta_initial_state(cfg, W0, 2)
    for t in range(6):
        yt, s, f, _ = sr_delta_step(cfg, s, f, x[t])
        np.testing.assert_allclose(yt, y[t], atol=1e-13)


def test_sr_delta_geometry():
    cfg = SrDeltaConfig.square(16, 4)
    assert cfg.srwm.d_out == 4 * (3 * 4 + 1)
    assert cfg.head_out == cfg.head_key == 4
    layer = make_layer("sr_delta", 16, 4)
    p = layer.init_params(Rng(0))["W0"]
    assert p.shape == cfg.srwm.param_shape


def test_srwm_state_copy_is_independent():
    s = SrwmState(np.zeros((1, 1, 2, 2)), np.zeros(1, dtype=np.int64))
    c = s.copy()
    c.W[...] = 1
    assert np.all(s.W == 0)
