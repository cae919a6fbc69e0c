import copy

import numpy as np
import pytest

from remotedet import scan2d, tensor
from remotedet.cfm import (CfmConfig, cfm_backward, cfm_forward,
                           cfm_forward_cached, init_cfm, zeros_cfm)
from remotedet.errors import ShapeError
from remotedet.params import flatten_params
from remotedet.s6 import s6_forward_sequential, zero_readout
from remotedet.scan2d import ALL_DIRECTIONS, BIDIRECTIONAL, ScanDirection
from remotedet.tensor import finite_diff_grad


def small_config():
    return CfmConfig(channels=4, expand=2, dw_kernel=3, ffn_hidden=8, state_size=2)


def straight_line_reference(f1, f2, w):
    """Independent re-composition of the block from the primitive ops, using
    the sequential scan kernel and no caching machinery."""
    cfg = w.config
    _, h, wd = f1.shape
    mixed = []
    for m, f in enumerate((f1, f2)):
        tokens = scan2d.flatten(f, ScanDirection.ROW_MAJOR)
        t = tensor.layer_norm(tokens, w.ln_in[m].gamma, w.ln_in[m].beta)
        t = tensor.linear(t, w.proj_in[m].weight, w.proj_in[m].bias)
        fmap = scan2d.unflatten(t, ScanDirection.ROW_MAJOR, h, wd)
        fmap = tensor.depthwise_conv2d(fmap, w.dw[m].weight, w.dw[m].bias,
                                       (cfg.dw_kernel - 1) // 2)
        mixed.append(tensor.silu(fmap))
    acc = np.zeros((cfg.inner, h, wd))
    for d in ALL_DIRECTIONS:
        fused = scan2d.flatten(mixed[0], d) + scan2d.flatten(mixed[1], d)
        y = s6_forward_sequential(fused, w.s6[d.value])
        acc = acc + scan2d.unflatten(y, d, h, wd)
    tokens = scan2d.flatten(acc, ScanDirection.ROW_MAJOR)
    tokens = tensor.linear(tokens, w.proj_out.weight, w.proj_out.bias)
    fused_map = scan2d.unflatten(tokens, ScanDirection.ROW_MAJOR, h, wd)
    outs = []
    for m, f in enumerate((f1, f2)):
        resid = f + fused_map
        t = scan2d.flatten(resid, ScanDirection.ROW_MAJOR)
        t = tensor.layer_norm(t, w.ln_out[m].gamma, w.ln_out[m].beta)
        t = tensor.gelu(tensor.linear(t, w.ffn[m].w1, w.ffn[m].b1))
        t = tensor.linear(t, w.ffn[m].w2, w.ffn[m].b2)
        outs.append(resid + scan2d.unflatten(t, ScanDirection.ROW_MAJOR, h, wd))
    return outs


def randomize(w, seed):
    """Fill every weight (including the zero-initialized residual exits) with
    random values so tests exercise the full data path."""
    rng = np.random.default_rng(seed)
    for _, arr in flatten_params(w).items():
        arr[...] = rng.uniform(-0.5, 0.5, size=arr.shape)
    for p in w.s6:
        p.log_A[...] = rng.uniform(-1.0, 1.0, size=p.log_A.shape)
    return w


def test_zero_inputs_zero_outputs():
    w = init_cfm(small_config(), np.random.default_rng(0))
    z = np.zeros((4, 3, 3))
    o1, o2 = cfm_forward(z, z, w)
    np.testing.assert_array_equal(o1, z)
    np.testing.assert_array_equal(o2, z)


def test_zero_weights_is_identity():
    w = zeros_cfm(small_config())
    rng = np.random.default_rng(1)
    f1, f2 = rng.normal(size=(2, 4, 3, 3))
    o1, o2 = cfm_forward(f1, f2, w)
    np.testing.assert_array_equal(o1, f1)
    np.testing.assert_array_equal(o2, f2)


def test_zeroed_scan_readout_and_ffn_is_pure_residual():
    w = init_cfm(small_config(), np.random.default_rng(2))
    w.s6 = [zero_readout(p) for p in w.s6]
    for f in w.ffn:
        f.w2[...] = 0.0
        f.b2[...] = 0.0
    w.proj_out.bias[...] = 0.0
    rng = np.random.default_rng(3)
    f1, f2 = rng.normal(size=(2, 4, 3, 3))
    o1, o2 = cfm_forward(f1, f2, w)
    np.testing.assert_array_equal(o1, f1)
    np.testing.assert_array_equal(o2, f2)


def test_matches_straight_line_reference():
    w = randomize(init_cfm(CfmConfig(channels=8, state_size=4), np.random.default_rng(4)), 5)
    rng = np.random.default_rng(6)
    f1, f2 = rng.normal(size=(2, 8, 4, 4))
    got1, got2 = cfm_forward(f1, f2, w)
    want1, want2 = straight_line_reference(f1, f2, w)
    np.testing.assert_allclose(got1, want1, atol=1e-10)
    np.testing.assert_allclose(got2, want2, atol=1e-10)


def test_fresh_init_reduces_to_addition_fusion():
    # zero output projection + zero second FFN layer => exact pass-through
    w = init_cfm(small_config(), np.random.default_rng(7))
    rng = np.random.default_rng(8)
    f1, f2 = rng.normal(size=(2, 4, 5, 5))
    o1, o2 = cfm_forward(f1, f2, w)
    np.testing.assert_array_equal(o1 + o2, f1 + f2)


def test_modality_symmetry_with_tied_prefusion_weights():
    w = randomize(init_cfm(small_config(), np.random.default_rng(9)), 10)
    w.ln_in[1] = copy.deepcopy(w.ln_in[0])
    w.proj_in[1] = copy.deepcopy(w.proj_in[0])
    w.dw[1] = copy.deepcopy(w.dw[0])
    rng = np.random.default_rng(11)
    f1, f2 = rng.normal(size=(2, 4, 3, 4))
    _, cache_a = cfm_forward_cached(f1, f2, w)
    _, cache_b = cfm_forward_cached(f2, f1, w)
    np.testing.assert_allclose(cache_a["fused_map"], cache_b["fused_map"], atol=1e-10)


def test_both_outputs_share_one_fused_intermediate():
    w = randomize(init_cfm(small_config(), np.random.default_rng(12)), 13)
    for f in w.ffn:  # silence the tails so out_m - f_m isolates the shared map
        f.w2[...] = 0.0
        f.b2[...] = 0.0
    rng = np.random.default_rng(14)
    f1, f2 = rng.normal(size=(2, 4, 3, 3))
    (o1, o2), cache = cfm_forward_cached(f1, f2, w)
    np.testing.assert_allclose(o1 - f1, cache["fused_map"], atol=1e-12)
    np.testing.assert_allclose(o2 - f2, cache["fused_map"], atol=1e-12)
    np.testing.assert_allclose(o1 - f1, o2 - f2, atol=1e-12)


def test_bidirectional_subset_matches_zeroed_rear_directions():
    w = randomize(init_cfm(small_config(), np.random.default_rng(15)), 16)
    rng = np.random.default_rng(17)
    f1, f2 = rng.normal(size=(2, 4, 4, 4))
    bid = cfm_forward(f1, f2, w, directions=BIDIRECTIONAL)
    w_zeroed = copy.deepcopy(w)
    w_zeroed.s6[2] = zero_readout(w_zeroed.s6[2])
    w_zeroed.s6[3] = zero_readout(w_zeroed.s6[3])
    full = cfm_forward(f1, f2, w_zeroed)
    np.testing.assert_allclose(bid[0], full[0], atol=1e-10)
    np.testing.assert_allclose(bid[1], full[1], atol=1e-10)


def test_output_shape_contract():
    for c, h, wd in [(2, 1, 1), (4, 2, 5), (6, 3, 3)]:
        cfg = CfmConfig(channels=c, state_size=2)
        w = init_cfm(cfg, np.random.default_rng(18))
        f1 = np.random.default_rng(19).normal(size=(c, h, wd))
        o1, o2 = cfm_forward(f1, f1, w)
        assert o1.shape == (c, h, wd) and o2.shape == (c, h, wd)
        assert np.isfinite(o1).all() and np.isfinite(o2).all()


def test_shape_mismatch_rejected():
    w = init_cfm(small_config(), np.random.default_rng(20))
    with pytest.raises(ShapeError):
        cfm_forward(np.zeros((4, 3, 3)), np.zeros((4, 3, 4)), w)


class TestBackward:
    def test_zero_grad_out(self):
        w = randomize(init_cfm(small_config(), np.random.default_rng(21)), 22)
        rng = np.random.default_rng(23)
        f1, f2 = rng.normal(size=(2, 4, 3, 3))
        z = np.zeros_like(f1)
        g1, g2, grads = cfm_backward(f1, f2, w, z, z)
        np.testing.assert_array_equal(g1, z)
        np.testing.assert_array_equal(g2, z)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_zero_weights_residual_jacobian(self):
        w = zeros_cfm(small_config())
        rng = np.random.default_rng(24)
        f1, f2, go1, go2 = rng.normal(size=(4, 4, 3, 3))
        g1, g2, _ = cfm_backward(f1, f2, w, go1, go2)
        np.testing.assert_array_equal(g1, go1)
        np.testing.assert_array_equal(g2, go2)

    def test_grad_keys_cover_every_weight(self):
        w = init_cfm(small_config(), np.random.default_rng(25))
        rng = np.random.default_rng(26)
        f1, f2 = rng.normal(size=(2, 4, 2, 2))
        _, _, grads = cfm_backward(f1, f2, w, f1, f2)
        assert set(grads) == set(flatten_params(w))

    def test_gradients_match_finite_differences(self):
        w = randomize(init_cfm(small_config(), np.random.default_rng(27)), 28)
        rng = np.random.default_rng(29)
        f1, f2 = rng.normal(size=(2, 4, 3, 3))
        go1, go2 = rng.normal(size=(2, 4, 3, 3))
        g1, g2, grads = cfm_backward(f1, f2, w, go1, go2)

        def objective():
            o1, o2 = cfm_forward(f1, f2, w)
            return float(np.sum(o1 * go1) + np.sum(o2 * go2))

        params = flatten_params(w)
        for name, arr in params.items():
            def f_param(vals, arr=arr):
                saved = arr.copy()
                arr[...] = vals
                try:
                    return objective()
                finally:
                    arr[...] = saved
            fd = finite_diff_grad(f_param, arr)
            err = np.abs(grads[name] - fd)
            tol = 1e-4 * np.maximum(1e-3, np.maximum(np.abs(fd), np.abs(grads[name])))
            assert np.all(err <= tol), f"{name}: max err {err.max():.2e}"

        fd1 = finite_diff_grad(
            lambda a: float(np.sum(cfm_forward(a, f2, w)[0] * go1)
                            + np.sum(cfm_forward(a, f2, w)[1] * go2)), f1)
        tol = 1e-4 * np.maximum(1e-3, np.maximum(np.abs(fd1), np.abs(g1)))
        assert np.all(np.abs(g1 - fd1) <= tol)
        fd2 = finite_diff_grad(
            lambda a: float(np.sum(cfm_forward(f1, a, w)[0] * go1)
                            + np.sum(cfm_forward(f1, a, w)[1] * go2)), f2)
        tol = 1e-4 * np.maximum(1e-3, np.maximum(np.abs(fd2), np.abs(g2)))
        assert np.all(np.abs(g2 - fd2) <= tol)

    def test_bid_mode_leaves_rear_direction_grads_zero(self):
        w = randomize(init_cfm(small_config(), np.random.default_rng(30)), 31)
        rng = np.random.default_rng(32)
        f1, f2 = rng.normal(size=(2, 4, 2, 2))
        _, _, grads = cfm_backward(f1, f2, w, f1, f2, directions=BIDIRECTIONAL)
        assert np.all(grads["s6.2.W_C"] == 0.0)
        assert np.all(grads["s6.3.log_A"] == 0.0)
        assert np.any(grads["s6.0.W_C"] != 0.0)
