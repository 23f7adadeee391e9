"""A small reverse-mode network engine for 2D U-nets.

Tensors are numpy arrays laid out (batch, channels, height, width). Every
layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``grads`` during ``backward``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.zero_grad()


class Conv2d(Layer):
    """Cross-correlation with a square kernel and 'same' zero padding."""

    def __init__(self, c_in, c_out, kernel=3, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.kernel = kernel
        self.params["weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel))
        self.params["bias"] = np.zeros(c_out)
        self.zero_grad()

    def forward(self, x, mode="train"):
        w = self.params["weight"]
        c_out, c_in, k, _ = w.shape
        if x.shape[1] != c_in:
            raise ValueError(f"conv expects {c_in} channels, got {x.shape[1]}")
        b, _, h, wd = x.shape
        p = k // 2
        # im2col in channels-last order (B, H, W, ky, kx, C)
        xl = x.transpose(0, 2, 3, 1)
        xp = np.pad(xl, ((0, 0), (p, p), (p, p), (0, 0))) if p else xl
        cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(b * h * wd, -1)
        self._cache = (cols, x.shape)
        wm = w.transpose(0, 2, 3, 1).reshape(c_out, -1)
        out = cols @ wm.T + self.params["bias"]
        return out.reshape(b, h, wd, c_out).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, shape = self._cache
        w = self.params["weight"]
        c_out, c_in, k, _ = w.shape
        b, _, h, wd = shape
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
        self.grads["weight"] += (d2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        self.grads["bias"] += d2.sum(axis=0)
        dcols = (d2 @ w.transpose(0, 2, 3, 1).reshape(c_out, -1)).reshape(b, h, wd, k, k, c_in)
        p = k // 2
        dxp = np.zeros((b, h + 2 * p, wd + 2 * p, c_in), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
        return dx.transpose(0, 3, 1, 2)


class BatchNorm(Layer):
    def __init__(self, channels):
        super().__init__()
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x, mode="train"):
        g = self.params["scale"][None, :, None, None]
        s = self.params["shift"][None, :, None, None]
        if mode == "train":
            n = x.size // x.shape[1]
            if n < 2:
                raise ValueError("batch norm needs >= 2 elements per channel in train mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mean
            self.buffers["running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var * n / (n - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, mode)
        return g * xhat + s

    def backward(self, dout):
        xhat, inv, mode = self._cache
        self.grads["scale"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["shift"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["scale"][None, :, None, None]
        inv = inv[None, :, None, None]
        if mode != "train":
            return dxhat * inv
        n = dout.size // dout.shape[1]
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv * (dxhat - sum_d / n - xhat * sum_dx / n)


class ReLU(Layer):
    def forward(self, x, mode="train"):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0).astype(dout.dtype, copy=False)


class MaxPool(Layer):
    """Non-overlapping max pooling; ties go to the first (row-major) index."""

    def __init__(self, pool=(2, 2)):
        super().__init__()
        self.pool = tuple(pool)

    def forward(self, x, mode="train"):
        ph, pw = self.pool
        b, c, h, w = x.shape
        if h % ph or w % pw:
            raise ValueError(f"input {h}x{w} not divisible by pool {self.pool}")
        win = x.reshape(b, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, h // ph, w // pw, ph * pw)
        idx = win.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        idx, shape = self._cache
        ph, pw = self.pool
        b, c, h, w = shape
        win = np.zeros(dout.shape + (ph * pw,), dtype=dout.dtype)
        np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
        return win.reshape(b, c, h // ph, w // pw, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor x n_in) linear interpolation matrix, half-pixel centers,
    edge samples clamped."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


class Upsample(Layer):
    def __init__(self, factor=(2, 2)):
        super().__init__()
        self.factor = tuple(factor)
        if min(self.factor) < 1:
            raise ValueError("upsampling factor must be >= 1")

    def forward(self, x, mode="train"):
        mh = bilinear_matrix(x.shape[2], self.factor[0]).astype(x.dtype)
        mw = bilinear_matrix(x.shape[3], self.factor[1]).astype(x.dtype)
        self._cache = (mh, mw)
        return mh @ x @ mw.T

    def backward(self, dout):
        mh, mw = self._cache
        return mh.T @ dout @ mw


def concat_skip(a, b):
    return np.concatenate([a, b], axis=1)


def split_skip(grad, channels_a):
    return grad[:, :channels_a], grad[:, channels_a:]


@dataclass(frozen=True)
class UNetConfig:
    stages: int = 3
    convs_per_stage: int = 4
    base_features: int = 64
    pool_shape: tuple[int, int] = (2, 2)
    in_channels: int = 1
    out_channels: int = 1
    residual_connection: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pool_shape", tuple(int(p) for p in self.pool_shape))
        if self.stages < 1 or self.convs_per_stage < 1 or self.base_features < 1:
            raise ValueError("stages, convs_per_stage and base_features must be >= 1")
        if self.residual_connection and self.in_channels != self.out_channels:
            raise ValueError("a residual connection needs in_channels == out_channels")

    def check_input(self, h, w):
        ph, pw = self.pool_shape
        fh, fw = ph ** (self.stages - 1), pw ** (self.stages - 1)
        if h % fh or w % fw:
            raise ValueError(f"input {h}x{w} must be divisible by {fh}x{fw} for {self.stages} stages")


class UNet:
    """Encoder/decoder with skip concatenations and optional residual output.

    Each stage is ``convs_per_stage`` x (3x3 conv, batch norm, ReLU). The
    decoder upsamples bilinearly, applies an unactivated 3x3 conv, then
    concatenates (upsampled, skip) before its block. A 1x1 conv produces the
    output.
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        feats = [cfg.base_features * 2 ** s for s in range(cfg.stages)]
        self.encoder = []
        c = cfg.in_channels
        for f in feats:
            self.encoder.append(self._block(c, f, cfg.convs_per_stage, rng))
            c = f
        self.pools = [MaxPool(cfg.pool_shape) for _ in range(cfg.stages - 1)]
        self.ups, self.up_convs, self.decoder = [], [], []
        for s in range(cfg.stages - 2, -1, -1):
            self.ups.append(Upsample(cfg.pool_shape))
            self.up_convs.append(Conv2d(feats[s + 1], feats[s], 3, rng))
            self.decoder.append(self._block(2 * feats[s], feats[s], cfg.convs_per_stage, rng))
        self.head = Conv2d(feats[0], cfg.out_channels, 1, rng)

    @staticmethod
    def _block(c_in, c_out, n, rng):
        layers = []
        for i in range(n):
            layers += [Conv2d(c_in if i == 0 else c_out, c_out, 3, rng), BatchNorm(c_out), ReLU()]
        return layers

    def layers(self):
        """All layers in a fixed order (used for checkpoints)."""
        out = []
        for blk in self.encoder:
            out += blk
        for up, conv, blk in zip(self.ups, self.up_convs, self.decoder):
            out += [up, conv] + blk
        out += self.pools + [self.head]
        return out

    def parameters(self):
        """(name, layer, key) triples for every trainable array."""
        return [(f"{i}.{k}", layer, k) for i, layer in enumerate(self.layers()) for k in layer.params]

    def n_parameters(self) -> int:
        return sum(layer.params[k].size for _, layer, k in self.parameters())

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers():
            layer.astype(dtype)
        return self

    def forward(self, x, mode="train"):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {x.shape}")
        self.config.check_input(*x.shape[2:])
        skips = []
        h = x
        for s, blk in enumerate(self.encoder):
            for layer in blk:
                h = layer.forward(h, mode)
            if s < len(self.pools):
                skips.append(h)
                h = self.pools[s].forward(h, mode)
        self._skip_channels = []
        for up, conv, blk in zip(self.ups, self.up_convs, self.decoder):
            h = conv.forward(up.forward(h, mode), mode)
            self._skip_channels.append(h.shape[1])
            h = concat_skip(h, skips.pop())
            for layer in blk:
                h = layer.forward(h, mode)
        out = self.head.forward(h, mode)
        return x + out if self.config.residual_connection else out

    def backward(self, dout):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        g = self.head.backward(dout)
        skip_grads = []
        for up, conv, blk, ca in zip(self.ups[::-1], self.up_convs[::-1], self.decoder[::-1],
                                     self._skip_channels[::-1]):
            for layer in reversed(blk):
                g = layer.backward(g)
            g, gs = split_skip(g, ca)
            skip_grads.append(gs)
            g = up.backward(conv.backward(g))
        for s in range(len(self.encoder) - 1, -1, -1):
            if s < len(self.pools):
                g = self.pools[s].backward(g) + skip_grads.pop()
            for layer in reversed(self.encoder[s]):
                g = layer.backward(g)
        return g + dout if self.config.residual_connection else g

    def __call__(self, x, mode="eval"):
        return self.forward(x, mode)


def build_unet(config: UNetConfig, seed: int = 0) -> UNet:
    return UNet(config, seed)


def zero_trunk(net: UNet):
    """Zero every conv weight and bias, BN to identity; a residual net then
    computes the identity map."""
    for layer in net.layers():
        if isinstance(layer, Conv2d):
            layer.params["weight"][...] = 0
            layer.params["bias"][...] = 0
        elif isinstance(layer, BatchNorm):
            layer.params["scale"][...] = 1
            layer.params["shift"][...] = 0


# -- losses and gradient checking ---------------------------------------------

def loss_l2(pred, label):
    """Mean over the batch of the squared Euclidean norm of the error."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {label.shape}")
    d = pred - label
    return float(np.sum(d * d) / pred.shape[0])


def loss_l2_grad(pred, label):
    return 2.0 * (pred - label) / pred.shape[0]


def gradient_check(net: UNet, x, label, eps: float = 1e-5, n_params: int = 200, mode: str = "eval",
                   seed: int = 0) -> float:
    """Max relative error between backprop and central differences over a
    random subset of parameter entries."""
    saved = [{k: v.copy() for k, v in layer.buffers.items()} for layer in net.layers()]

    def restore():
        for layer, buf in zip(net.layers(), saved):
            for k, v in buf.items():
                layer.buffers[k] = v.copy()

    def output():
        out = net.forward(x, mode)
        restore()
        return out

    net.zero_grad()
    pred = output()
    net.backward(loss_l2_grad(pred, label))
    entries = [(layer, k, i) for _, layer, k in net.parameters() for i in range(layer.params[k].size)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(entries), size=min(n_params, len(entries)), replace=False)
    worst = 0.0
    for j in pick:
        layer, k, i = entries[j]
        flat = layer.params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        op = output()
        flat[i] = old - eps
        om = output()
        flat[i] = old
        # L(op) - L(om) factored to avoid cancelling two large sums
        numeric = np.sum((op - om) * (op + om - 2 * label)) / x.shape[0] / (2 * eps)
        analytic = layer.grads[k].reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"XTCN"


def save_checkpoint(net: UNet, path, extra: dict[str, float] | None = None):
    """Header (config and extra scalars as key=value text), then every
    parameter and buffer in layer order as little-endian float64."""
    cfg = asdict(net.config)
    cfg["pool_shape"] = "x".join(map(str, net.config.pool_shape))
    header = ";".join(f"{k}={v}" for k, v in cfg.items())
    if extra:
        header += "|" + ";".join(f"{k}={v!r}" for k, v in extra.items())
    blob = header.encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for layer in net.layers():
            for d in (layer.params, layer.buffers):
                for k in sorted(d):
                    fh.write(np.ascontiguousarray(d[k], dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[UNet, dict[str, float]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = raw[8:8 + n].decode()
    cfg_text, _, extra_text = header.partition("|")
    kv = dict(item.split("=", 1) for item in cfg_text.split(";"))
    config = UNetConfig(
        stages=int(kv["stages"]), convs_per_stage=int(kv["convs_per_stage"]),
        base_features=int(kv["base_features"]),
        pool_shape=tuple(int(p) for p in kv["pool_shape"].split("x")),
        in_channels=int(kv["in_channels"]), out_channels=int(kv["out_channels"]),
        residual_connection=kv["residual_connection"] == "True")
    extra = {k: float(v) for k, v in (item.split("=", 1) for item in extra_text.split(";") if item)}
    net = UNet(config)
    data = np.frombuffer(raw[8 + n:], dtype="<f8")
    pos = 0
    for layer in net.layers():
        for d in (layer.params, layer.buffers):
            for k in sorted(d):
                size = d[k].size
                d[k] = data[pos:pos + size].reshape(d[k].shape).astype(dtype)
                pos += size
        layer.zero_grad()
    if pos != data.size:
        raise ValueError(f"{path}: checkpoint size does not match its config")
    return net, extra
