"""Global pooling operators: average, max, outlier, and dynamic outlier.

Forward passes reduce an (N, C, H, W) activation tensor to an (N, C)
feature matrix. Backward passes treat the selection state captured at
forward time (argmax locations, indicator masks, channel thresholds) as
constants, mirroring standard max-pooling practice; once its mask is
frozen every operator is linear in the activations.

Outlier pooling averages only the spatial locations whose activation
reaches the per-image, per-channel threshold mean + lam * std. When no
location reaches it (possible for near-uniform channels, where the largest
z-score can sit below lam) the operator falls back to the channel maximum
with a singleton mask, so the backward pass stays well defined. Dynamic
outlier pooling blends the above- and below-threshold sums with epoch
schedule weights and needs no fallback because its denominator is the full
spatial area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import channel_stats, check_finite, check_tensor4, reduce_spatial_max

POOL_KINDS = ("avg", "max", "outlier", "dynamic")

_KIND_ALIASES = {
    "avg": "avg",
    "average": "avg",
    "mean": "avg",
    "max": "max",
    "outlier": "outlier",
    "dynamic": "dynamic",
}


@dataclass(frozen=True)
class PoolMode:
    """Selects one of the four pooling operators.

    ``lam`` is the threshold multiplier for the outlier and dynamic kinds;
    the other kinds carry it inertly.
    """

    kind: str
    lam: float = 2.0

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ConfigurationError(
                f"unknown pool kind {self.kind!r}; expected one of {POOL_KINDS}"
            )
        lam = float(self.lam)
        if not np.isfinite(lam) or lam < 0:
            raise ConfigurationError(f"lam must be finite and >= 0, got {self.lam}")
        object.__setattr__(self, "lam", lam)

    @property
    def needs_schedule(self):
        return self.kind == "dynamic"

    @classmethod
    def parse(cls, text, lam=2.0):
        """Build a PoolMode from a CLI/config token such as ``"avg"``."""
        kind = _KIND_ALIASES.get(str(text).strip().lower())
        if kind is None:
            raise ConfigurationError(
                f"unknown pool mode {text!r}; expected one of {POOL_KINDS}"
            )
        return cls(kind=kind, lam=lam)


def schedule_weights(current_epoch, total_epochs):
    """Epoch-schedule weights (w1, w2) for dynamic outlier pooling.

    w1 = 1 + current/total rises from 1 to 2; w2 = 1 - current/total falls
    from 1 to 0. Epochs are 0-indexed, so epoch 0 gives (1, 1) and the
    operator starts out exactly equal to average pooling.
    """
    current_epoch = int(current_epoch)
    total_epochs = int(total_epochs)
    if total_epochs < 1:
        raise ConfigurationError(f"total_epochs must be >= 1, got {total_epochs}")
    if current_epoch < 0:
        raise ConfigurationError(f"current_epoch must be >= 0, got {current_epoch}")
    if current_epoch > total_epochs:
        raise ConfigurationError(
            f"schedule exhausted: epoch {current_epoch} > total {total_epochs}"
        )
    frac = current_epoch / total_epochs
    return 1.0 + frac, 1.0 - frac


@dataclass(frozen=True)
class Schedule:
    """Position within a training run, in whole 0-indexed epochs."""

    current_epoch: int
    total_epochs: int

    def __post_init__(self):
        schedule_weights(self.current_epoch, self.total_epochs)

    @property
    def w1(self):
        return schedule_weights(self.current_epoch, self.total_epochs)[0]

    @property
    def w2(self):
        return schedule_weights(self.current_epoch, self.total_epochs)[1]

    def weights(self):
        return schedule_weights(self.current_epoch, self.total_epochs)


@dataclass
class PoolContext:
    """Forward state consumed by pool_backward.

    ``mask`` is the boolean indicator over spatial locations (outlier and
    dynamic kinds), already rewritten to the singleton fallback where the
    threshold selected nothing. ``count`` is the mask sum per (image,
    channel) after fallback, so it is >= 1 for the outlier kind. ``empty``
    flags (image, channel) pairs whose raw indicator was all-zero, whether
    or not a fallback rewrite happened.
    """

    mode: PoolMode
    shape: tuple
    mask: np.ndarray | None = None
    count: np.ndarray | None = None
    empty: np.ndarray | None = None
    argmax: np.ndarray | None = None
    w1: float | None = None
    w2: float | None = None

    def fallback_rate(self):
        """Fraction of (image, channel) pairs with an empty outlier set."""
        if self.empty is None:
            return 0.0
        return float(np.mean(self.empty))


def _onehot_mask(argmax, shape):
    n, c, h, w = shape
    flat = np.zeros((n, c, h * w), dtype=bool)
    np.put_along_axis(flat, argmax[:, :, None], True, axis=2)
    return flat.reshape(n, c, h, w)


def _check_mode_schedule(mode, schedule):
    if not isinstance(mode, PoolMode):
        raise ConfigurationError(f"mode must be a PoolMode, got {type(mode).__name__}")
    if mode.needs_schedule and schedule is None:
        raise ConfigurationError("dynamic pooling requires a schedule")
    if not mode.needs_schedule and schedule is not None:
        raise ConfigurationError(f"{mode.kind} pooling takes no schedule")


def pool_forward(x, mode, schedule=None):
    """Pool an (N, C, H, W) tensor down to an (N, C) feature matrix.

    Returns ``(features, ctx)`` where ``ctx`` carries the selection state
    for :func:`pool_backward`. ``schedule`` is required for the dynamic
    kind and rejected for every other kind.
    """
    _check_mode_schedule(mode, schedule)
    x = check_tensor4(x)
    n, c, h, w = x.shape
    area = h * w

    if mode.kind == "avg":
        feats = np.sum(x, axis=(2, 3), dtype=np.float64) / area
        return feats, PoolContext(mode=mode, shape=x.shape)

    if mode.kind == "max":
        values, argmax = reduce_spatial_max(x)
        return values, PoolContext(mode=mode, shape=x.shape, argmax=argmax)

    stats = channel_stats(x, mode.lam)
    mask = x >= stats.threshold[:, :, None, None]
    count = np.sum(mask, axis=(2, 3), dtype=np.int64)
    empty = count == 0
    masked_sum = np.sum(np.where(mask, x, 0.0), axis=(2, 3), dtype=np.float64)

    if mode.kind == "outlier":
        if empty.any():
            values, argmax = reduce_spatial_max(x)
            mask = np.where(empty[:, :, None, None], _onehot_mask(argmax, x.shape), mask)
            count = np.where(empty, 1, count)
            masked_sum = np.where(empty, values, masked_sum)
        feats = masked_sum / count
        ctx = PoolContext(
            mode=mode,
            shape=x.shape,
            mask=mask,
            count=count.astype(np.float64),
            empty=empty,
        )
        return feats, ctx

    w1, w2 = schedule.weights()
    unmasked_sum = np.sum(np.where(mask, 0.0, x), axis=(2, 3), dtype=np.float64)
    feats = (w1 * masked_sum + w2 * unmasked_sum) / area
    ctx = PoolContext(
        mode=mode,
        shape=x.shape,
        mask=mask,
        count=count.astype(np.float64),
        empty=empty,
        w1=w1,
        w2=w2,
    )
    return feats, ctx


def pool_forward_fixed(x, ctx):
    """Re-evaluate the pooled output with the selection state frozen.

    With masks, argmax indices, counts and schedule weights taken from
    ``ctx`` instead of recomputed, every kind is linear in ``x``; this is
    the function the finite-difference gradient checks perturb.
    """
    x = check_tensor4(x)
    if x.shape != ctx.shape:
        raise ShapeError(f"x shape {x.shape} does not match ctx shape {ctx.shape}")
    n, c, h, w = ctx.shape
    area = h * w
    kind = ctx.mode.kind

    if kind == "avg":
        return np.sum(x, axis=(2, 3), dtype=np.float64) / area
    if kind == "max":
        flat = x.reshape(n, c, -1)
        picked = np.take_along_axis(flat, ctx.argmax[:, :, None], axis=2)[:, :, 0]
        return picked.astype(np.float64)

    masked_sum = np.sum(np.where(ctx.mask, x, 0.0), axis=(2, 3), dtype=np.float64)
    if kind == "outlier":
        return masked_sum / ctx.count
    unmasked_sum = np.sum(np.where(ctx.mask, 0.0, x), axis=(2, 3), dtype=np.float64)
    return (ctx.w1 * masked_sum + ctx.w2 * unmasked_sum) / area


def pool_backward(grad_out, ctx, input_shape=None):
    """Backpropagate (N, C) feature gradients to the input tensor.

    The mask/argmax recorded in ``ctx`` is treated as constant: average
    spreads the gradient uniformly, max routes it to the recorded argmax,
    outlier splits it equally over the masked locations (fallback channels
    behave like max), and dynamic scales masked locations by w1 and the
    rest by w2, all divided by the spatial area.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, c, h, w = ctx.shape
    if grad_out.shape != (n, c):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match ctx features ({n}, {c})"
        )
    if input_shape is not None and tuple(input_shape) != tuple(ctx.shape):
        raise ShapeError(
            f"input_shape {tuple(input_shape)} does not match ctx shape {ctx.shape}"
        )
    check_finite(grad_out, "grad_out")
    area = h * w
    kind = ctx.mode.kind

    if kind == "avg":
        return np.broadcast_to((grad_out / area)[:, :, None, None], ctx.shape).copy()
    if kind == "max":
        flat = np.zeros((n, c, area), dtype=np.float64)
        np.put_along_axis(flat, ctx.argmax[:, :, None], grad_out[:, :, None], axis=2)
        return flat.reshape(ctx.shape)
    if kind == "outlier":
        per = (grad_out / ctx.count)[:, :, None, None]
        return np.where(ctx.mask, per, 0.0)
    hot = ((ctx.w1 / area) * grad_out)[:, :, None, None]
    cold = ((ctx.w2 / area) * grad_out)[:, :, None, None]
    return np.where(ctx.mask, hot, cold)
