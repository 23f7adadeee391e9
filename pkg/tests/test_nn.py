import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xtcine.nn import (BN_EPS, BatchNorm, Conv2d, MaxPool, ReLU, UNet, UNetConfig, Upsample, bilinear_matrix,
                       build_unet, concat_skip, gradient_check, load_checkpoint, loss_l2, loss_l2_grad,
                       save_checkpoint, split_skip, zero_trunk)


def numeric_input_grad(f, x, dout, eps=1e-6):
    """Central differences of sum(dout * f(x)) with respect to every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        p = np.sum(dout * f(x))
        flat[i] = old - eps
        m = np.sum(dout * f(x))
        flat[i] = old
        g.reshape(-1)[i] = (p - m) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def param_count_oracle(E, C, F, cin=1, cout=1):
    """Closed-form parameter count of the U-net layout."""
    conv = lambda i, o, k=3: k * k * i * o + o
    feats = [F * 2 ** s for s in range(E)]
    total, c = 0, cin
    for f in feats:
        total += conv(c, f) + (C - 1) * conv(f, f) + 2 * f * C
        c = f
    for s in range(E - 2, -1, -1):
        f = feats[s]
        total += conv(feats[s + 1], f) + conv(2 * f, f) + (C - 1) * conv(f, f) + 2 * f * C
    return total + conv(feats[0], cout, 1)


# -- convolution ------------------------------------------------------------------------

def naive_conv(x, w, b):
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    out[n, o, i, j] = b[o] + sum(w[o, c, u, v] * xp[n, c, i + u, j + v]
                                                 for c in range(cin) for u in range(k) for v in range(k))
    return out


def test_conv_center_tap_is_identity():
    conv = Conv2d(1, 1)
    conv.params["weight"][...] = 0
    conv.params["weight"][0, 0, 1, 1] = 1
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    assert np.array_equal(conv.forward(x), x)


def test_conv_all_ones_kernel_on_constant():
    conv = Conv2d(1, 1)
    conv.params["weight"][...] = 1
    out = conv.forward(np.full((1, 1, 6, 5), 2.0))
    assert np.all(out[0, 0, 1:-1, 1:-1] == 18.0)
    assert out[0, 0, 0, 0] == 8.0


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(1)
    conv = Conv2d(3, 2, rng=rng)
    conv.params["bias"] = rng.normal(size=2)
    x = rng.normal(size=(2, 3, 5, 5))
    assert np.max(np.abs(conv.forward(x) - naive_conv(x, conv.params["weight"], conv.params["bias"]))) < 1e-12


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    conv = Conv2d(2, 3, rng=rng)
    x = rng.normal(size=(2, 2, 4, 5))
    dout = rng.normal(size=(2, 3, 4, 5))
    conv.forward(x)
    dx = conv.backward(dout)
    assert rel_err(dx, numeric_input_grad(conv.forward, x, dout)) < 1e-7
    w = conv.params["weight"]
    num_w = numeric_input_grad(lambda _: conv.forward(x), w, dout)
    assert rel_err(conv.grads["weight"], num_w) < 1e-7
    assert np.allclose(conv.grads["bias"], dout.sum(axis=(0, 2, 3)))


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        Conv2d(2, 1).forward(np.zeros((1, 3, 4, 4)))


# -- batch norm, relu, pooling, upsampling --------------------------------------------------

def test_batchnorm_standardized_input_is_nearly_unchanged():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = BatchNorm(2).forward(x)
    assert np.allclose(out, x / np.sqrt(1 + BN_EPS), atol=1e-14)
    assert np.allclose(out, x, atol=1e-4)


def test_batchnorm_constant_input_gives_shift():
    bn = BatchNorm(2)
    bn.params["shift"] = np.array([0.3, -1.2])
    out = bn.forward(np.full((3, 2, 4, 4), 7.0))
    assert np.allclose(out[:, 0], 0.3) and np.allclose(out[:, 1], -1.2)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode):
    rng = np.random.default_rng(4)
    bn = BatchNorm(3)
    bn.params["scale"] = rng.uniform(0.5, 2, 3)
    bn.params["shift"] = rng.normal(size=3)
    bn.buffers["running_mean"] = rng.normal(size=3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(3, 3, 4, 2))
    dout = rng.normal(size=x.shape)
    saved = {k: v.copy() for k, v in bn.buffers.items()}

    def f(inp):
        out = bn.forward(inp, mode)
        bn.buffers.update({k: v.copy() for k, v in saved.items()})
        return out

    f(x)
    bn.zero_grad()
    dx = bn.backward(dout)
    assert rel_err(dx, numeric_input_grad(f, x, dout)) < 1e-4
    num_scale = numeric_input_grad(lambda _: f(x), bn.params["scale"], dout)
    assert rel_err(bn.grads["scale"], num_scale) < 1e-4


def test_batchnorm_running_stats_update():
    bn = BatchNorm(1)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    bn.forward(x, "train")
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * 3.5)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))
    before = bn.buffers["running_mean"].copy()
    bn.forward(x, "eval")
    assert np.array_equal(bn.buffers["running_mean"], before)
    with pytest.raises(ValueError):
        BatchNorm(1).forward(np.ones((1, 1, 1, 1)), "train")


def test_relu():
    r = ReLU()
    assert not r.forward(-np.ones((1, 1, 2, 2)) - 1e-3).any()
    x = np.random.default_rng(5).uniform(0.1, 1, (1, 2, 3, 3))
    assert np.array_equal(r.forward(x), x)
    x = np.array([[[[-1.0, 0.0, 2.0]]]])
    r.forward(x)
    assert r.backward(np.ones_like(x)).tolist() == [[[[0.0, 0.0, 1.0]]]]
    x = np.random.default_rng(6).normal(size=(2, 2, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    d = np.random.default_rng(7).normal(size=x.shape)
    r.forward(x)
    assert rel_err(r.backward(d), numeric_input_grad(r.forward, x, d)) < 1e-8


def test_maxpool_examples():
    out = MaxPool((2, 1)).forward(np.full((1, 1, 6, 3), 4.0))
    assert out.shape == (1, 1, 3, 3) and np.all(out == 4.0)
    col = np.arange(8.0).reshape(1, 1, 8, 1)
    assert MaxPool((2, 1)).forward(col).ravel().tolist() == [1.0, 3.0, 5.0, 7.0]
    assert MaxPool((2, 2)).forward(np.zeros((1, 1, 4, 6))).shape == (1, 1, 2, 3)
    with pytest.raises(ValueError):
        MaxPool((2, 2)).forward(np.zeros((1, 1, 5, 4)))


def test_maxpool_tie_goes_to_first_index():
    pool = MaxPool((2, 2))
    pool.forward(np.ones((1, 1, 2, 2)))
    assert pool.backward(np.ones((1, 1, 1, 1)))[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.permutation(64).astype(float).reshape(1, 2, 8, 4)  # distinct values, no ties
    d = rng.normal(size=(1, 2, 4, 4))
    pool = MaxPool((2, 1))
    pool.forward(x)
    g = pool.backward(d)
    assert rel_err(g, numeric_input_grad(pool.forward, x, d, eps=1e-3)) < 1e-9
    assert np.count_nonzero(g) == d.size


def test_upsample_examples():
    up = Upsample((2, 1))
    assert np.allclose(up.forward(np.full((1, 1, 3, 4), 2.5)), 2.5)
    x = np.random.default_rng(9).normal(size=(2, 1, 3, 4))
    assert np.array_equal(Upsample((1, 1)).forward(x), x)
    with pytest.raises(ValueError):
        Upsample((0, 1))


def test_upsample_of_averaged_ramp_reproduces_interior():
    n = 16
    ramp = 0.3 * np.arange(n) - 1.0
    coarse = ramp.reshape(n // 2, 2).mean(axis=1)
    fine = bilinear_matrix(n // 2, 2) @ coarse
    # half-pixel centres: interior samples are exact, the clamped edge samples are not
    assert np.max(np.abs(fine[1:-1] - ramp[1:-1])) < 1e-12


def test_upsample_backward_is_transpose():
    rng = np.random.default_rng(10)
    up = Upsample((2, 2))
    x = rng.normal(size=(1, 2, 3, 4))
    d = rng.normal(size=(1, 2, 6, 8))
    up.forward(x)
    assert rel_err(up.backward(d), numeric_input_grad(up.forward, x, d)) < 1e-8


def test_concat_and_split():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 5, 4, 4))
    c = concat_skip(a, b)
    assert c.shape[1] == 8
    ga, gb = split_skip(c, 3)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    d = rng.normal(size=c.shape)
    num = numeric_input_grad(lambda t: concat_skip(t, b), a, d)
    assert np.allclose(split_skip(d, 3)[0], num, atol=1e-8)


# -- network ----------------------------------------------------------------------------------

def test_single_stage_network_has_no_pooling():
    net = build_unet(UNetConfig(1, 8, 64, (2, 1)))
    assert net.pools == [] and net.ups == []
    assert sum(isinstance(l, Conv2d) for l in net.layers()) == 9


def test_reference_architecture_layout():
    net = build_unet(UNetConfig(3, 4, 64, (2, 1)))
    enc_convs = [[l for l in blk if isinstance(l, Conv2d)] for blk in net.encoder]
    assert [len(c) for c in enc_convs] == [4, 4, 4]
    assert [c[0].params["weight"].shape[0] for c in enc_convs] == [64, 128, 256]
    assert len(net.pools) == 2 and all(p.pool == (2, 1) for p in net.pools)
    assert net.head.params["weight"].shape == (1, 64, 1, 1)


@pytest.mark.parametrize("E,C,F", [(1, 1, 4), (1, 8, 64), (2, 2, 8), (3, 4, 64), (4, 4, 64), (5, 2, 64)])
def test_parameter_count_matches_closed_form(E, C, F):
    assert build_unet(UNetConfig(E, C, F, (2, 1))).n_parameters() == param_count_oracle(E, C, F)


def test_shallow_versus_deep_parameter_ratio():
    # Direct counting gives a ratio of about 63, well above the often-quoted order of 10.
    small = build_unet(UNetConfig(1, 8, 64, (2, 1))).n_parameters()
    large = build_unet(UNetConfig(4, 4, 64, (2, 1))).n_parameters()
    assert (small, large) == (260225, 16385601)
    assert 60 < large / small < 65


def test_zero_trunk_is_identity():
    net = build_unet(UNetConfig(2, 2, 4, (2, 1)))
    zero_trunk(net)
    x = np.random.default_rng(12).normal(size=(2, 1, 8, 6))
    assert np.array_equal(net.forward(x, "train"), x)
    assert np.array_equal(net.forward(x, "eval"), x)
    net.zero_grad()
    d = np.random.default_rng(13).normal(size=x.shape)
    assert np.array_equal(net.backward(d), d)
    for name, layer, k in net.parameters():
        if layer is net.head and k == "bias":
            assert net.head.grads["bias"][0] == pytest.approx(d.sum())
        else:
            assert not layer.grads[k].any(), name


def test_backward_is_linear_in_output_gradient():
    rng = np.random.default_rng(14)
    net = build_unet(UNetConfig(2, 1, 4, (2, 2)), seed=1)
    x = rng.normal(size=(2, 1, 8, 8))
    d1, d2 = rng.normal(size=x.shape), rng.normal(size=x.shape)

    def grads(d):
        net.forward(x, "eval")
        net.zero_grad()
        gx = net.backward(d)
        return gx, [layer.grads[k].copy() for _, layer, k in net.parameters()]

    gx1, p1 = grads(d1)
    gx2, p2 = grads(d2)
    gx3, p3 = grads(2 * d1 - d2)
    assert np.allclose(gx3, 2 * gx1 - gx2, atol=1e-12)
    assert all(np.allclose(c, 2 * a - b, atol=1e-12) for a, b, c in zip(p1, p2, p3))


def test_forward_backward_determinism():
    x = np.random.default_rng(15).normal(size=(2, 1, 8, 4))
    results = []
    for _ in range(2):
        net = build_unet(UNetConfig(2, 2, 4, (2, 1)), seed=3)
        out = net.forward(x, "train")
        net.zero_grad()
        net.backward(out - x)
        results.append((out, [layer.grads[k] for _, layer, k in net.parameters()]))
    assert np.array_equal(results[0][0], results[1][0])
    assert all(np.array_equal(a, b) for a, b in zip(results[0][1], results[1][1]))


def test_network_input_validation():
    net = build_unet(UNetConfig(3, 1, 4, (2, 1)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 6, 4)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 2, 8, 4)))
    with pytest.raises(ValueError):
        UNetConfig(0, 1)
    with pytest.raises(ValueError):
        UNetConfig(1, 1, 4, (2, 2), 2, 1, True)


def _warm(net, x, steps=3):
    for _ in range(steps):
        net.forward(x + np.random.default_rng(_).normal(0, 0.1, x.shape), "train")


@pytest.mark.parametrize("E,C", [(1, 1), (1, 2), (2, 1), (2, 2)])
def test_full_network_gradient_check(E, C):
    rng = np.random.default_rng(16)
    net = build_unet(UNetConfig(E, C, 4, (2, 1)), seed=E * 10 + C)
    x = rng.normal(size=(2, 1, 8, 6))
    label = rng.normal(size=x.shape)
    _warm(net, x)
    assert gradient_check(net, x, label, eps=1e-5, n_params=200, mode="eval") < 1e-4


def test_gradient_check_error_grows_with_step():
    rng = np.random.default_rng(17)
    net = build_unet(UNetConfig(1, 1, 4, (2, 1)), seed=2)
    x = rng.normal(size=(2, 1, 8, 6))
    label = rng.normal(size=x.shape)
    _warm(net, x)
    errs = [gradient_check(net, x, label, eps=e, n_params=200) for e in (1e-5, 1e-4, 1e-3, 1e-2)]
    assert errs[0] < 1e-4
    assert errs[-1] > errs[1]


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(18)
    net = build_unet(UNetConfig(2, 2, 4, (2, 1)), seed=4)
    x = rng.normal(size=(2, 1, 8, 6))
    _warm(net, x)
    save_checkpoint(net, tmp_path / "c.xtcn", {"step": 12.0})
    back, extra = load_checkpoint(tmp_path / "c.xtcn")
    assert extra == {"step": 12.0}
    assert back.config == net.config
    assert np.array_equal(back.forward(x, "eval"), net.forward(x, "eval"))
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


# -- loss -----------------------------------------------------------------------------------

def test_loss_examples():
    rng = np.random.default_rng(19)
    p = rng.normal(size=(3, 1, 4, 5))
    assert loss_l2(p, p) == 0.0
    assert loss_l2(p, np.zeros_like(p)) == pytest.approx(np.sum(p ** 2) / 3, rel=1e-14)
    y = rng.normal(size=p.shape)
    oracle = sum(sum(float(v) ** 2 for v in (p[b] - y[b]).ravel()) for b in range(3)) / 3
    assert abs(loss_l2(p, y) - oracle) < 1e-12
    with pytest.raises(ValueError):
        loss_l2(p, y[:2])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_loss_gradient_matches_finite_differences(b, seed):
    rng = np.random.default_rng(seed)
    p, y = rng.normal(size=(b, 1, 3, 2)), rng.normal(size=(b, 1, 3, 2))
    num = numeric_input_grad(lambda t: np.array(loss_l2(t, y)), p, np.array(1.0))
    assert np.allclose(loss_l2_grad(p, y), num, atol=1e-6)
