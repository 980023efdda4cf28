"""Fully-convolutional ×4 super-resolution network with hand-written backprop.

Pipeline for ``depth`` hidden layers::

    [conv k×k (same, zero pad) -> leaky ReLU -> dropout (train only)] × depth
        with a bilinear ×2 upsampling after each layer listed in upsample_after
    conv k×k to one channel -> softmax over the whole output raster

Activations are stored channel-last, ``(batch, rows, cols, channels)``, so that
every convolution is a single im2col matrix product.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import upsample2, upsample2_adjoint
from .tensorio import FormatError, encode_tensor, read_tensor

WEIGHTS_MAGIC = b"QSRW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    depth: int = 25
    filters: int = 50
    kernel: int = 5
    leaky_slope: float = 0.05
    dropout_rate: float = 0.01
    upsample_after: tuple[int, ...] = (5, 10)
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "upsample_after", tuple(int(i) for i in self.upsample_after))
        if self.depth < 1 or self.filters < 1:
            raise ValueError("depth and filters must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        ups = self.upsample_after
        if any(b <= a for a, b in zip(ups, ups[1:])):
            raise ValueError("upsample_after must be strictly increasing")
        if any(not 1 <= i < self.depth for i in ups):
            raise ValueError("upsample_after entries must lie in [1, depth)")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.input_channels != 1 or self.output_channels != 1:
            raise ValueError("only single-channel input and output are supported")

    @property
    def scale(self) -> int:
        return 2 ** len(self.upsample_after)

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        k, f = self.kernel, self.filters
        chans = [self.input_channels] + [f] * self.depth + [self.output_channels]
        return [(chans[i + 1], chans[i], k, k) for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsample_after"] = list(self.upsample_after)
        return d


PRESETS = {
    "paper": NetConfig(),
    "toy": NetConfig(depth=8, filters=12, upsample_after=(6, 7)),
    "tiny": NetConfig(depth=3, filters=2, upsample_after=(1, 2)),
}


@dataclass
class Params:
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    @classmethod
    def from_tensors(cls, tensors) -> "Params":
        tensors = list(tensors)
        return cls(tensors[0::2], tensors[1::2])

    def copy(self) -> "Params":
        return Params.from_tensors(t.copy() for t in self.tensors())

    def zeros_like(self) -> "Params":
        return Params.from_tensors(np.zeros_like(t) for t in self.tensors())

    @property
    def dtype(self):
        return self.weights[0].dtype

    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def astype(self, dtype) -> "Params":
        return Params.from_tensors(t.astype(dtype) for t in self.tensors())


def count_params(config: NetConfig) -> int:
    return sum(o * i * k * kk + o for o, i, k, kk in config.layer_shapes())


def init_params(rng: np.random.Generator, config: NetConfig, dtype=np.float64) -> Params:
    """He initialization for leaky ReLU: std = sqrt(2 / ((1 + slope²) fan_in)); zero biases."""
    gain = 2.0 / (1.0 + config.leaky_slope ** 2)
    params = Params()
    for shape in config.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params.weights.append(w.astype(dtype))
        params.biases.append(np.zeros(shape[0], dtype=dtype))
    return params


def check_params(params: Params, config: NetConfig) -> None:
    shapes = config.layer_shapes()
    if len(params.weights) != len(shapes) or len(params.biases) != len(shapes):
        raise ValueError(
            f"parameter set has {len(params.weights)} layers, config expects {len(shapes)}")
    for i, (w, b, shape) in enumerate(zip(params.weights, params.biases, shapes)):
        if w.shape != shape or b.shape != (shape[0],):
            raise ValueError(
                f"layer {i}: weight {w.shape} / bias {b.shape} do not match config {shape}")


_BLOCK_ELEMS = 1 << 18


def _row_blocks(x: np.ndarray, k: int):
    """Yield ``(image, row0, rows, columns)`` im2col blocks of an NHWC batch.

    Blocks are sized to stay cache resident; the im2col copy of a whole batch
    would otherwise dominate the run time.
    """
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # column order (u, v, c) keeps the innermost copy contiguous
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    rows = max(1, min(h, _BLOCK_ELEMS // (w * c * k * k)))
    buf = np.empty((rows, w, k, k, c), dtype=x.dtype)
    for i in range(n):
        for r in range(0, h, rows):
            m = min(rows, h - r)
            np.copyto(buf[:m], win[i, r:r + m])
            yield i, r, m, buf[:m].reshape(m * w, c * k * k)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """'Same' cross-correlation of an NHWC batch with an (out, in, k, k) kernel."""
    n, h, wd, c = x.shape
    f, k = w.shape[0], w.shape[-1]
    if f < c:
        # few outputs: multiply the padded input once, then shift-add k*k planes
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        y = (xp.reshape(-1, c) @ w.transpose(1, 2, 3, 0).reshape(c, -1))
        y = y.reshape(n, h + 2 * p, wd + 2 * p, k, k, f)
        out = np.zeros((n, h, wd, f), dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                out += y[:, u:u + h, v:v + wd, u, v, :]
    else:
        wm = w.transpose(0, 2, 3, 1).reshape(f, -1).T
        out = np.empty((n, h, wd, f), dtype=x.dtype)
        for i, r, m, cols in _row_blocks(x, k):
            np.matmul(cols, wm, out=out[i, r:r + m].reshape(m * wd, f))
    if b is not None:
        out += b
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of :func:`_conv` w.r.t. the (out, in, k, k) kernel."""
    n, h, wd, c = x.shape
    f = g.shape[3]
    if f < c:
        # dW[f, c, u, v] = sum over padded pixels q of xp[q, c] * g[q - (u, v)]
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
        win = sliding_window_view(gp, (k, k), axis=(1, 2))[..., ::-1, ::-1]
        shifted = win.reshape(-1, f * k * k)
        acc = (xp.reshape(-1, c).T @ shifted).reshape(c, f, k * k)
        return np.ascontiguousarray(acc.transpose(1, 0, 2)).reshape(f, c, k, k)
    acc = np.zeros((f, k * k * c), dtype=x.dtype)
    for i, r, m, cols in _row_blocks(x, k):
        acc += g[i, r:r + m].reshape(m * wd, f).T @ cols
    return np.ascontiguousarray(acc.reshape(f, k, k, c).transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    # adjoint of a zero-padded same correlation: correlate with the flipped,
    # channel-transposed kernel
    return _conv(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def _upsample(x: np.ndarray) -> np.ndarray:
    return upsample2(upsample2(x, 1), 2)


def _upsample_adjoint(g: np.ndarray) -> np.ndarray:
    return upsample2_adjoint(upsample2_adjoint(g, 1), 2)


def softmax_global(logits) -> np.ndarray:
    """Softmax over all pixels of each image (last two axes)."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite logits")
    shifted = logits - logits.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=(-2, -1), keepdims=True)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]      # input to each conv layer (NHWC)
    slopes: list[np.ndarray]      # leaky-ReLU derivative per hidden layer
    masks: list[np.ndarray | None]  # inverted-dropout multipliers
    output: np.ndarray            # softmax output (N, H, W)
    batched: bool


def forward(params: Params, config: NetConfig, image, train: bool = False,
            rng: np.random.Generator | None = None):
    """Run the network on one image ``(H, W)`` or a batch ``(N, H, W)``.

    Returns ``(output, cache)``. ``cache`` is ``None`` in eval mode. Train mode
    draws dropout masks from ``rng`` and records what :func:`backward` needs.
    """
    check_params(params, config)
    x = np.asarray(image, dtype=params.dtype)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) input, got shape {np.shape(image)}")
    if min(x.shape[1:]) < config.kernel:
        raise ValueError(f"input {x.shape[1:]} is smaller than the {config.kernel}px kernel")
    if train and config.dropout_rate > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")

    h = x[..., None]
    keep = 1.0 - config.dropout_rate
    cache = ForwardCache([], [], [], None, batched) if train else None
    for layer in range(config.depth):
        if train:
            cache.inputs.append(h)
        z = _conv(h, params.weights[layer], params.biases[layer])
        slope = np.where(z > 0, 1.0, config.leaky_slope).astype(z.dtype)
        h = z * slope
        mask = None
        if train and config.dropout_rate > 0:
            mask = ((rng.random(z.shape) < keep) / keep).astype(z.dtype)
            h = h * mask
        if train:
            cache.slopes.append(slope)
            cache.masks.append(mask)
        if layer + 1 in config.upsample_after:
            h = _upsample(h)
    if train:
        cache.inputs.append(h)
    logits = _conv(h, params.weights[-1], params.biases[-1])[..., 0]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("network produced non-finite logits")
    out = softmax_global(logits)
    if train:
        cache.output = out
    return (out if batched else out[0]), cache


def backward(params: Params, config: NetConfig, cache: ForwardCache, output_grad,
             input_grad: bool = True):
    """Reverse pass from the gradient w.r.t. the softmax output.

    Returns ``(grads, input_gradient)`` where ``grads`` is a :class:`Params`
    holding gradients summed over the batch.
    """
    if cache is None or cache.output is None:
        raise ValueError("backward needs the cache of a train-mode forward pass")
    check_params(params, config)
    if len(cache.inputs) != config.depth + 1:
        raise ValueError("cache does not match the network depth")
    p = cache.output
    g = np.asarray(output_grad, dtype=p.dtype)
    if not cache.batched:
        g = g[None]
    if g.shape != p.shape:
        raise ValueError(f"output_grad shape {g.shape} does not match output {p.shape}")

    grads = params.zeros_like()
    # softmax Jacobian-vector product
    dz = p * (g - (p * g).sum(axis=(1, 2), keepdims=True))
    dz = dz[..., None]
    for layer in range(config.depth, -1, -1):
        x = cache.inputs[layer]
        w = params.weights[layer]
        flat = dz.reshape(-1, dz.shape[-1])
        grads.weights[layer] = _conv_weight_grad(x, dz, config.kernel)
        grads.biases[layer] = flat.sum(axis=0)
        if layer == 0 and not input_grad:
            return grads, None
        dh = _conv_input_grad(dz, w)
        if layer == 0:
            break
        if layer in config.upsample_after:
            dh = _upsample_adjoint(dh)
        mask = cache.masks[layer - 1]
        if mask is not None:
            dh = dh * mask
        dz = dh * cache.slopes[layer - 1]
    dx = dh[..., 0]
    return grads, (dx if cache.batched else dx[0])


def save_weights(path, params: Params, config: NetConfig) -> None:
    """Write ``.qsrw``: magic, version, u32-length JSON config, then tensors in layer order."""
    check_params(params, config)
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [WEIGHTS_MAGIC, struct.pack("<BI", WEIGHTS_VERSION, len(cfg)), cfg]
    parts += [encode_tensor(t) for t in params.tensors()]
    Path(path).write_bytes(b"".join(parts))


def load_weights(path, config: NetConfig | None = None) -> tuple[Params, NetConfig]:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad weights magic {buf[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(buf) < 9:
        raise FormatError(f"{path}: truncated header: expected 9 bytes, got {len(buf)}")
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    if len(buf) < 9 + n:
        raise FormatError(f"{path}: truncated config block: expected {n} bytes, got {len(buf) - 9}")
    stored = NetConfig(**json.loads(buf[9:9 + n]))
    if config is not None and config != stored:
        raise ValueError(
            f"{path}: shape mismatch, stored config {stored} does not match requested {config}")
    pos = 9 + n
    tensors = []
    for _ in range(2 * (stored.depth + 1)):
        t, pos = read_tensor(buf, pos)
        tensors.append(t)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after the last tensor")
    params = Params.from_tensors(tensors)
    check_params(params, stored)
    return params, stored
