"""Differentiable layers and the optimizer for desk-scale training.

Every forward returns ``(output, ctx)`` and the matching backward consumes
``ctx``; parameters live in plain dicts of numpy arrays so the optimizer
and checkpoint code stay generic. Computation preserves the input dtype
(f32 for training, f64 for gradient checks); losses always accumulate in
f64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NonFiniteError, ShapeError

SPCK_MAGIC = b"SPCK"
SPCK_VERSION = 1
_ARRAY_TAG = 1


def conv_out_size(size, k, stride, padding):
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output collapses: input {size}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _im2col(x, kh, kw, stride, padding):
    """Patch matrix (n*ho*wo, kh*kw*c) gathered in channels-last order.

    Staging the padded input as (n, h, w, c) first makes every gathered
    patch row a run of short contiguous chunks, which is markedly faster
    than slicing windows out of the channels-first layout.
    """
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return np.ascontiguousarray(col), ho, wo


def conv_forward(x, weight, bias, stride=1, padding=0):
    """2D convolution via im2col plus one matrix multiply.

    ``weight`` is (out_channels, in_channels, kH, kW); output spatial size
    is floor((in + 2*pad - k)/stride) + 1 and must stay >= 1.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4, got rank {x.ndim}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv bias shape {bias.shape} != ({cout},)")
    n = x.shape[0]
    col, ho, wo = _im2col(x, kh, kw, stride, padding)
    wmat = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(-1, cout)
    y = col @ wmat + bias
    y = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    ctx = {
        "col": col,
        "weight": weight,
        "x_shape": x.shape,
        "stride": stride,
        "padding": padding,
        "out_hw": (ho, wo),
    }
    return np.ascontiguousarray(y), ctx


def conv_backward(grad_y, ctx, need_input_grad=True):
    """Gradients of conv_forward; returns (grad_x, grad_w, grad_b).

    ``need_input_grad=False`` skips the column-to-image scatter and returns
    None for grad_x; callers whose convolution reads raw data use this to
    avoid the most expensive part of the backward pass.
    """
    weight = ctx["weight"]
    cout, cin, kh, kw = weight.shape
    n, c, h, w = ctx["x_shape"]
    stride, padding = ctx["stride"], ctx["padding"]
    ho, wo = ctx["out_hw"]
    if grad_y.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"grad_y shape {grad_y.shape} != expected {(n, cout, ho, wo)}"
        )
    gy = np.ascontiguousarray(grad_y.transpose(0, 2, 3, 1)).reshape(-1, cout)
    grad_b = gy.sum(axis=0)
    gw = gy.T @ ctx["col"]
    grad_w = np.ascontiguousarray(
        gw.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    )
    if not need_input_grad:
        return None, grad_w, grad_b

    wmat = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(-1, cout)
    grad_col = gy @ wmat.T
    gcol = grad_col.reshape(n, ho, wo, kh, kw, cin)
    hp, wp = h + 2 * padding, w + 2 * padding
    gx = np.zeros((n, hp, wp, cin), dtype=grad_col.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, p:p + stride * ho:stride, q:q + stride * wo:stride, :] += gcol[:, :, :, p, q, :]
    if padding:
        gx = gx[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), grad_w, grad_b


def relu_forward(x):
    y = np.maximum(x, 0)
    return y, {"gate": x > 0}


def relu_backward(grad_y, ctx):
    # Gradient is defined as 0 at exactly 0.
    return grad_y * ctx["gate"]


def dense_forward(x, weight, bias):
    """y = x W^T + b for a batch of row vectors."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"dense input must be rank 2, got rank {x.ndim}")
    out_dim, in_dim = weight.shape
    if x.shape[1] != in_dim:
        raise ShapeError(f"dense expects width {in_dim}, got {x.shape[1]}")
    if bias.shape != (out_dim,):
        raise ShapeError(f"dense bias shape {bias.shape} != ({out_dim},)")
    y = x @ weight.T + bias
    return y, {"x": x, "weight": weight}


def dense_backward(grad_y, ctx):
    x, weight = ctx["x"], ctx["weight"]
    if grad_y.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(
            f"grad_y shape {grad_y.shape} != expected {(x.shape[0], weight.shape[0])}"
        )
    grad_x = grad_y @ weight
    grad_w = grad_y.T @ x
    grad_b = grad_y.sum(axis=0)
    return grad_x, grad_w, grad_b


def avgpool2_forward(x):
    """2x2 stride-2 average downsample; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    y = (x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2]
         + x[:, :, 1::2, 0::2] + x[:, :, 1::2, 1::2]) * 0.25
    return y, {"x_shape": x.shape}


def avgpool2_backward(grad_y, ctx):
    n, c, h, w = ctx["x_shape"]
    if grad_y.shape != (n, c, h // 2, w // 2):
        raise ShapeError(
            f"grad_y shape {grad_y.shape} != expected {(n, c, h // 2, w // 2)}"
        )
    g = (grad_y * 0.25)[:, :, :, None, :, None]
    gx = np.broadcast_to(g, (n, c, h // 2, 2, w // 2, 2))
    return gx.reshape(n, c, h, w).copy()


def softmax(logits):
    """Row-wise softmax with max-shift stabilization, in f64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Uses the log-sum-exp identity so large logits cannot overflow; the
    gradient is (softmax - onehot)/N, returned in the dtype of ``logits``.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be rank 2, got rank {logits.ndim}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    logp = z - lse
    loss = -float(np.mean(logp[np.arange(n), labels]))
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    grad = (probs / n).astype(logits.dtype)
    return loss, grad


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with classical momentum: v <- m v + g; p <- p - lr v."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError(f"seed must fit in u64, got {self.seed}")


def sgd_step(params, grads, state, config):
    """Update ``params`` in place from ``grads``; velocities live in ``state``.

    A non-finite gradient raises NonFiniteError so the caller can abort the
    run instead of training on garbage.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = config.momentum * v + g.astype(p.dtype, copy=False)
        p -= config.learning_rate * v
        state[name] = v
    return params, state


def he_conv(rng, cout, cin, kh, kw, dtype=np.float32):
    """Fan-in scaled Gaussian init for a conv weight, zero bias."""
    fan_in = cin * kh * kw
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw))
    return w.astype(dtype), np.zeros(cout, dtype=dtype)


def he_dense(rng, out_dim, in_dim, dtype=np.float32):
    w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
    return w.astype(dtype), np.zeros(out_dim, dtype=dtype)


def save_checkpoint(path, params):
    """Write parameters as a versioned SPCK binary.

    Header: magic ``SPCK``, u16 version, u32 entry count. Each manifest
    entry: u8 array tag, u16 name length, utf-8 name, u8 ndim, ndim u32
    dims. Payloads follow in manifest order as little-endian f32.
    """
    names = list(params)
    chunks = [SPCK_MAGIC, struct.pack("<HI", SPCK_VERSION, len(names))]
    for name in names:
        arr = params[name]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<BH", _ARRAY_TAG, len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        chunks.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read an SPCK file back into a dict of f32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != SPCK_MAGIC:
        raise FormatError(f"{path}: not an SPCK checkpoint")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != SPCK_VERSION:
        raise FormatError(f"{path}: unsupported SPCK version {version}")
    offset = 10
    manifest = []
    try:
        for _ in range(count):
            tag, name_len = struct.unpack_from("<BH", raw, offset)
            offset += 3
            if tag != _ARRAY_TAG:
                raise FormatError(f"{path}: unknown manifest tag {tag}")
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            manifest.append((name, shape))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated SPCK manifest") from exc
    params = {}
    for name, shape in manifest:
        size = int(np.prod(shape)) if shape else 1
        end = offset + 4 * size
        if end > len(raw):
            raise FormatError(f"{path}: truncated SPCK payload for {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return params
