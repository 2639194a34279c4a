"""Rank-4 activation tensors and their per-channel statistics.

Tensors are plain numpy arrays laid out (batch, channel, height, width),
row-major. All reductions accumulate in float64 regardless of the storage
dtype, using numpy's pairwise summation over row-major spatial order; that
order is fixed so results are bit-reproducible for identical inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeError

SPT4_MAGIC = b"SPT4"
SPT4_VERSION = 1
_SPT4_HEADER = struct.Struct("<4sH4IB")
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


def check_finite(arr, name="array"):
    """Raise NonFiniteError if ``arr`` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite values")


def check_tensor4(x, name="x"):
    """Validate a (N, C, H, W) activation tensor and return it as an ndarray.

    Requires rank 4, every dimension >= 1, floating dtype and finite values.
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have rank 4 (N, C, H, W), got rank {arr.ndim}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    check_finite(arr, name)
    return arr


@dataclass(frozen=True)
class ChannelStats:
    """Per-(image, channel) spatial mean, population std and outlier threshold.

    ``threshold = mean + lam * std`` elementwise, so std == 0 implies
    threshold == mean. All arrays are float64 of shape (N, C).
    """

    mean: np.ndarray
    std: np.ndarray
    threshold: np.ndarray
    lam: float


def channel_stats(x, lam=2.0):
    """Compute per-image, per-channel mean, population std, and threshold.

    The std divides by H*W (population form), which stays defined for a
    single spatial location. Accumulation is float64 two-pass.
    """
    x = check_tensor4(x)
    lam = float(lam)
    if not np.isfinite(lam):
        raise ValueError("lam must be finite")
    mean = x.mean(axis=(2, 3), dtype=np.float64)
    centered = x.astype(np.float64, copy=False) - mean[:, :, None, None]
    var = np.mean(centered * centered, axis=(2, 3), dtype=np.float64)
    std = np.sqrt(var)
    threshold = mean + lam * std
    return ChannelStats(mean=mean, std=std, threshold=threshold, lam=lam)


def reduce_spatial_mean(x):
    """Mean over the spatial dimensions; returns an (N, C) float64 matrix."""
    x = check_tensor4(x)
    return x.mean(axis=(2, 3), dtype=np.float64)


def reduce_spatial_max(x):
    """Spatial maximum per (image, channel).

    Returns ``(values, argmax)`` where ``argmax`` holds flat row-major
    spatial indices in [0, H*W); ties resolve to the first such index.
    """
    x = check_tensor4(x)
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    argmax = flat.argmax(axis=2)
    values = np.take_along_axis(flat, argmax[:, :, None], axis=2)[:, :, 0]
    return values.astype(np.float64), argmax


def write_spt4(path, x):
    """Write a tensor to ``path`` in the flat SPT4 binary format.

    Layout: magic ``SPT4``, u16 version, four u32 dims (N, C, H, W), a u8
    dtype tag (0 = f32, 1 = f64), then the row-major payload, all
    little-endian.
    """
    x = check_tensor4(x)
    kind = x.dtype.str.lstrip("<>=|")
    if kind not in _TAG_FOR_KIND:
        raise FormatError(f"SPT4 stores f32 or f64 tensors, not {x.dtype}")
    tag = _TAG_FOR_KIND[kind]
    header = _SPT4_HEADER.pack(SPT4_MAGIC, SPT4_VERSION, *x.shape, tag)
    payload = np.ascontiguousarray(x, dtype=_DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_spt4(path):
    """Read an SPT4 tensor file written by :func:`write_spt4`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _SPT4_HEADER.size:
        raise FormatError(f"{path}: truncated SPT4 header")
    magic, version, n, c, h, w, tag = _SPT4_HEADER.unpack_from(raw)
    if magic != SPT4_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SPT4_VERSION:
        raise FormatError(f"{path}: unsupported SPT4 version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    if min(n, c, h, w) < 1:
        raise FormatError(f"{path}: empty dimension in shape {(n, c, h, w)}")
    expected = n * c * h * w * dtype.itemsize
    payload = raw[_SPT4_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(n, c, h, w)
    data = data.astype(dtype.newbyteorder("="))
    check_finite(data, path)
    return data
