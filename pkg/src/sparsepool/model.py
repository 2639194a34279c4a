"""Crop-pooling classification models.

A model is one or two convolutional trunks feeding a single dense head.
The global branch sees one low-resolution view per image; the local branch
runs the same trunk (shared weights) over four higher-resolution crops and
pools their final feature maps jointly, treating the union of the crops'
spatial locations as one pooling domain so strong evidence inside any
single crop keeps full weight. With both branches present the pooled
feature vectors are concatenated global-then-local.

Cross-crop reductions combine per-crop partial sums in value-sorted order,
which makes the pooled features (and hence local-branch logits) invariant
to the order the crops are supplied in, bit for bit, while staying within
rounding distance of pooling the spatially concatenated maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError
from .layers import (
    avgpool2_backward,
    avgpool2_forward,
    conv_forward,
    conv_backward,
    dense_backward,
    dense_forward,
    he_conv,
    he_dense,
    relu_backward,
    relu_forward,
)
from .pooling import (
    PoolContext,
    PoolMode,
    _check_mode_schedule,
    pool_backward,
    pool_forward,
    pool_forward_fixed,
)
from .tensor import check_tensor4

MODEL_KINDS = ("global", "local", "multires")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture configuration: branches, sizes, pooling, trunk widths.

    ``kind`` selects the branch structure: "global" (one low-res view),
    "local" (four crops, shared trunk), or "multires" (both). The trunk is
    one 3x3 same-padded conv block per width, with a 2x2 average
    downsample after every block except the last, so an input of side s
    produces a final map of side s / 2**(len(widths) - 1).
    """

    kind: str
    num_classes: int
    global_input_size: int = 32
    local_crop_size: int = 32
    crops_per_image: int = 4
    pool_mode: PoolMode = PoolMode("avg")
    trunk_widths: tuple = (16,)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(
                f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.uses_local and self.crops_per_image != 4:
            raise ConfigurationError(
                f"local branch uses exactly 4 crops, got {self.crops_per_image}"
            )
        widths = tuple(int(v) for v in self.trunk_widths)
        if not widths or any(v < 1 for v in widths):
            raise ConfigurationError(f"trunk_widths must be positive, got {widths}")
        object.__setattr__(self, "trunk_widths", widths)
        factor = 2 ** (len(widths) - 1)
        for name, size in (
            ("global_input_size", self.global_input_size),
            ("local_crop_size", self.local_crop_size),
        ):
            if size < factor or size % factor:
                raise ConfigurationError(
                    f"{name} must be a positive multiple of {factor}, got {size}"
                )
        if not isinstance(self.pool_mode, PoolMode):
            raise ConfigurationError("pool_mode must be a PoolMode")

    @property
    def uses_global(self):
        return self.kind in ("global", "multires")

    @property
    def uses_local(self):
        return self.kind in ("local", "multires")

    @property
    def feature_dim(self):
        return (int(self.uses_global) + int(self.uses_local)) * self.trunk_widths[-1]


@dataclass
class ModelInputs:
    """One batch: the low-res views and/or the stacked local crops.

    ``global_view`` is (N, 3, g, g); ``crops`` is (4, N, 3, s, s) in crop
    order. Either may be None when the spec's kind does not use it.
    """

    global_view: np.ndarray | None = None
    crops: np.ndarray | None = None


def init_params(spec, seed):
    """He-initialized parameter dict; draw order is fixed by construction."""
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, used in (("g", spec.uses_global), ("l", spec.uses_local)):
        if not used:
            continue
        cin = 3
        for i, width in enumerate(spec.trunk_widths):
            w, b = he_conv(rng, width, cin, 3, 3)
            params[f"{prefix}.conv{i}.w"] = w
            params[f"{prefix}.conv{i}.b"] = b
            cin = width
    w, b = he_dense(rng, spec.num_classes, spec.feature_dim)
    params["head.w"] = w
    params["head.b"] = b
    return params


def _trunk_forward(x, params, prefix, widths):
    blocks = []
    h = x
    for i in range(len(widths)):
        h, conv_ctx = conv_forward(
            h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"],
            stride=1, padding=1,
        )
        h, relu_ctx = relu_forward(h)
        pool_ctx = None
        if i < len(widths) - 1:
            h, pool_ctx = avgpool2_forward(h)
        blocks.append({"conv": conv_ctx, "relu": relu_ctx, "pool": pool_ctx})
    return h, blocks


def _trunk_backward(grad_map, blocks, prefix, grads):
    g = grad_map
    for i in reversed(range(len(blocks))):
        blk = blocks[i]
        if blk["pool"] is not None:
            g = avgpool2_backward(g, blk["pool"])
        g = relu_backward(g, blk["relu"])
        # The first block reads raw pixels, so its input gradient is dead.
        g, gw, gb = conv_backward(g, blk["conv"], need_input_grad=i > 0)
        for key, value in ((f"{prefix}.conv{i}.w", gw), (f"{prefix}.conv{i}.b", gb)):
            if key in grads:
                grads[key] = grads[key] + value
            else:
                grads[key] = value
    return g


def _trunk_forward_fixed(x, params, prefix, widths, blocks):
    # Replays the trunk with fresh parameters but the recorded rectifier
    # gates, so the map is linear in the parameters of each layer.
    h = x
    for i, blk in enumerate(blocks):
        h, _ = conv_forward(
            h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"],
            stride=1, padding=1,
        )
        h = np.where(blk["relu"]["gate"], h, 0)
        if blk["pool"] is not None:
            h, _ = avgpool2_forward(h)
    return h


def _sorted_sum(parts):
    """Sum of per-crop partials, combined in value-sorted order.

    Sorting first makes the result independent of crop order even at the
    bit level; equal partials sum identically in any order.
    """
    return np.sort(parts, axis=0).sum(axis=0)


@dataclass
class CropPoolContext:
    """Selection state for cross_crop_backward; mirrors PoolContext."""

    mode: PoolMode
    crop_shape: tuple
    num_crops: int
    masks: np.ndarray | None = None
    count: np.ndarray | None = None
    empty: np.ndarray | None = None
    argmax_crop: np.ndarray | None = None
    argmax_flat: np.ndarray | None = None
    w1: float | None = None
    w2: float | None = None

    def fallback_rate(self):
        if self.empty is None:
            return 0.0
        return float(np.mean(self.empty))


def _validate_crop_maps(crop_features):
    maps = [check_tensor4(m, f"crop {i}") for i, m in enumerate(crop_features)]
    if len(maps) < 1:
        raise ShapeError("cross_crop_pool needs at least one map")
    shape = maps[0].shape
    for i, m in enumerate(maps[1:], start=1):
        if m.shape != shape:
            raise ShapeError(
                f"crop {i} shape {m.shape} does not match crop 0 shape {shape}"
            )
    return maps, shape


def cross_crop_pool(crop_features, mode, schedule=None):
    """Pool several crops' feature maps as one spatial domain.

    Statistics, masks, and sums run over the union of all crops' locations
    (K * h * w per image/channel), matching pool_forward applied to the
    spatially concatenated maps up to summation-order rounding.
    """
    _check_mode_schedule(mode, schedule)
    maps, shape = _validate_crop_maps(crop_features)
    k = len(maps)
    n, c, h, w = shape
    area = k * h * w
    stack = np.stack(maps)
    per_sum = np.sum(stack, axis=(3, 4), dtype=np.float64)
    total = _sorted_sum(per_sum)

    if mode.kind == "avg":
        return total / area, CropPoolContext(mode=mode, crop_shape=shape, num_crops=k)

    flat = stack.reshape(k, n, c, h * w)
    per_arg = flat.argmax(axis=3)
    per_max = np.take_along_axis(flat, per_arg[..., None], axis=3)[..., 0]
    union_max = per_max.max(axis=0).astype(np.float64)
    argmax_crop = per_max.argmax(axis=0)
    argmax_flat = np.take_along_axis(per_arg, argmax_crop[None], axis=0)[0]

    if mode.kind == "max":
        ctx = CropPoolContext(
            mode=mode, crop_shape=shape, num_crops=k,
            argmax_crop=argmax_crop, argmax_flat=argmax_flat,
        )
        return union_max, ctx

    mean = total / area
    centered = stack.astype(np.float64) - mean[None, :, :, None, None]
    moment = _sorted_sum(np.sum(centered * centered, axis=(3, 4)))
    std = np.sqrt(moment / area)
    threshold = mean + mode.lam * std
    masks = stack >= threshold[None, :, :, None, None]
    count = masks.sum(axis=(0, 3, 4))
    empty = count == 0
    masked = _sorted_sum(np.sum(np.where(masks, stack, 0.0), axis=(3, 4), dtype=np.float64))

    if mode.kind == "outlier":
        if empty.any():
            flat_masks = masks.reshape(k, n, c, h * w)
            rows, cols = np.nonzero(empty)
            flat_masks[argmax_crop[rows, cols], rows, cols, argmax_flat[rows, cols]] = True
            masks = flat_masks.reshape(k, n, c, h, w)
            count = np.where(empty, 1, count)
            masked = np.where(empty, union_max, masked)
        ctx = CropPoolContext(
            mode=mode, crop_shape=shape, num_crops=k, masks=masks,
            count=count.astype(np.float64), empty=empty,
            argmax_crop=argmax_crop, argmax_flat=argmax_flat,
        )
        return masked / count, ctx

    w1, w2 = schedule.weights()
    unmasked = _sorted_sum(np.sum(np.where(masks, 0.0, stack), axis=(3, 4), dtype=np.float64))
    feats = (w1 * masked + w2 * unmasked) / area
    ctx = CropPoolContext(
        mode=mode, crop_shape=shape, num_crops=k, masks=masks,
        count=count.astype(np.float64), empty=empty, w1=w1, w2=w2,
    )
    return feats, ctx


def cross_crop_pool_fixed(crop_features, ctx):
    """Re-pool crops with the selection state frozen from ``ctx``."""
    maps, shape = _validate_crop_maps(crop_features)
    if shape != ctx.crop_shape or len(maps) != ctx.num_crops:
        raise ShapeError(
            f"crop stack {len(maps)}x{shape} does not match ctx "
            f"{ctx.num_crops}x{ctx.crop_shape}"
        )
    k = len(maps)
    n, c, h, w = shape
    area = k * h * w
    stack = np.stack(maps)
    kind = ctx.mode.kind

    if kind == "avg":
        return _sorted_sum(np.sum(stack, axis=(3, 4), dtype=np.float64)) / area
    if kind == "max":
        flat = stack.reshape(k, n, c, h * w)
        per_crop = np.take_along_axis(flat, ctx.argmax_flat[None, :, :, None], axis=3)[..., 0]
        picked = np.take_along_axis(per_crop, ctx.argmax_crop[None], axis=0)[0]
        return picked.astype(np.float64)

    masked = _sorted_sum(np.sum(np.where(ctx.masks, stack, 0.0), axis=(3, 4), dtype=np.float64))
    if kind == "outlier":
        return masked / ctx.count
    unmasked = _sorted_sum(np.sum(np.where(ctx.masks, 0.0, stack), axis=(3, 4), dtype=np.float64))
    return (ctx.w1 * masked + ctx.w2 * unmasked) / area


def cross_crop_backward(grad_out, ctx):
    """Route (N, C) feature gradients back to a (K, N, C, h, w) stack."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k = ctx.num_crops
    n, c, h, w = ctx.crop_shape
    if grad_out.shape != (n, c):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match features ({n}, {c})"
        )
    area = k * h * w
    kind = ctx.mode.kind

    if kind == "avg":
        per = grad_out / area
        return np.broadcast_to(per[None, :, :, None, None], (k, n, c, h, w)).copy()
    if kind == "max":
        flat = np.zeros((k, n, c, h * w), dtype=np.float64)
        rows, cols = np.indices((n, c)).reshape(2, -1)
        flat[ctx.argmax_crop[rows, cols], rows, cols, ctx.argmax_flat[rows, cols]] = (
            grad_out[rows, cols]
        )
        return flat.reshape(k, n, c, h, w)
    if kind == "outlier":
        per = (grad_out / ctx.count)[None, :, :, None, None]
        return np.where(ctx.masks, per, 0.0)
    hot = ((ctx.w1 / area) * grad_out)[None, :, :, None, None]
    cold = ((ctx.w2 / area) * grad_out)[None, :, :, None, None]
    return np.where(ctx.masks, hot, cold)


@dataclass
class ModelCtx:
    spec: ModelSpec
    head_ctx: dict
    map_dtype: np.dtype
    g_blocks: list | None = None
    g_pool: PoolContext | None = None
    l_blocks: list | None = None
    l_pool: CropPoolContext | None = None

    def fallback_rate(self):
        """Mean empty-outlier-set rate across the branches in use."""
        rates = []
        if self.g_pool is not None:
            rates.append(self.g_pool.fallback_rate())
        if self.l_pool is not None:
            rates.append(self.l_pool.fallback_rate())
        return float(np.mean(rates)) if rates else 0.0


def _validate_inputs(inputs, spec):
    n = None
    if spec.uses_global:
        gx = inputs.global_view
        if gx is None:
            raise ShapeError(f"kind {spec.kind!r} needs inputs.global_view")
        s = spec.global_input_size
        if gx.ndim != 4 or gx.shape[1:] != (3, s, s):
            raise ShapeError(
                f"global_view shape {gx.shape} != (N, 3, {s}, {s})"
            )
        n = gx.shape[0]
    if spec.uses_local:
        crops = inputs.crops
        if crops is None:
            raise ShapeError(f"kind {spec.kind!r} needs inputs.crops")
        s = spec.local_crop_size
        if crops.ndim != 5 or crops.shape[0] != spec.crops_per_image or crops.shape[2:] != (3, s, s):
            raise ShapeError(
                f"crops shape {crops.shape} != ({spec.crops_per_image}, N, 3, {s}, {s})"
            )
        if n is not None and crops.shape[1] != n:
            raise ShapeError(
                f"crops batch {crops.shape[1]} != global batch {n}"
            )
        n = crops.shape[1]
    return n


def model_forward(inputs, spec, params, schedule=None):
    """Forward pass; returns (logits, ctx) for model_backward."""
    _check_mode_schedule(spec.pool_mode, schedule)
    _validate_inputs(inputs, spec)
    parts = []
    g_blocks = g_pool = l_blocks = l_pool = None
    map_dtype = None

    if spec.uses_global:
        gmap, g_blocks = _trunk_forward(
            inputs.global_view, params, "g", spec.trunk_widths
        )
        gfeat, g_pool = pool_forward(gmap, spec.pool_mode, schedule)
        map_dtype = gmap.dtype
        parts.append(gfeat.astype(map_dtype))
    if spec.uses_local:
        maps, l_blocks = [], []
        for i in range(spec.crops_per_image):
            m, blocks = _trunk_forward(inputs.crops[i], params, "l", spec.trunk_widths)
            maps.append(m)
            l_blocks.append(blocks)
        lfeat, l_pool = cross_crop_pool(maps, spec.pool_mode, schedule)
        map_dtype = maps[0].dtype
        parts.append(lfeat.astype(map_dtype))

    feats = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    logits, head_ctx = dense_forward(feats, params["head.w"], params["head.b"])
    ctx = ModelCtx(
        spec=spec, head_ctx=head_ctx, map_dtype=map_dtype,
        g_blocks=g_blocks, g_pool=g_pool, l_blocks=l_blocks, l_pool=l_pool,
    )
    return logits, ctx


def model_forward_fixed(inputs, spec, params, ctx):
    """Replay the forward pass with rectifier gates and pooling masks frozen.

    The result is linear in every parameter tensor individually, which is
    what the finite-difference checks need from a piecewise-smooth model.
    """
    _validate_inputs(inputs, spec)
    parts = []
    if spec.uses_global:
        gmap = _trunk_forward_fixed(
            inputs.global_view, params, "g", spec.trunk_widths, ctx.g_blocks
        )
        parts.append(pool_forward_fixed(gmap, ctx.g_pool).astype(gmap.dtype))
    if spec.uses_local:
        maps = [
            _trunk_forward_fixed(
                inputs.crops[i], params, "l", spec.trunk_widths, ctx.l_blocks[i]
            )
            for i in range(spec.crops_per_image)
        ]
        parts.append(cross_crop_pool_fixed(maps, ctx.l_pool).astype(maps[0].dtype))
    feats = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    logits, _ = dense_forward(feats, params["head.w"], params["head.b"])
    return logits


def model_backward(grad_logits, ctx):
    """Parameter gradients for a model_forward call.

    The local trunk's gradient is the sum over the four crops (shared
    weights); the returned dict covers exactly the keys of the parameter
    dict the forward pass consumed.
    """
    spec = ctx.spec
    grads = {}
    gfeats, gw, gb = dense_backward(grad_logits, ctx.head_ctx)
    grads["head.w"] = gw
    grads["head.b"] = gb

    width = spec.trunk_widths[-1]
    offset = 0
    if spec.uses_global:
        gslice = gfeats[:, :width]
        offset = width
        gmap_grad = pool_backward(gslice, ctx.g_pool).astype(ctx.map_dtype)
        _trunk_backward(gmap_grad, ctx.g_blocks, "g", grads)
    if spec.uses_local:
        lslice = gfeats[:, offset:offset + width]
        crop_grads = cross_crop_backward(lslice, ctx.l_pool).astype(ctx.map_dtype)
        for i in reversed(range(spec.crops_per_image)):
            _trunk_backward(crop_grads[i], ctx.l_blocks[i], "l", grads)
    return grads


def resized_dims(height, width, target):
    """Dims after a shortest-side resize to ``target`` (aspect preserved)."""
    if height <= width:
        return target, int(round(width * target / height))
    return int(round(height * target / width)), target


@dataclass(frozen=True)
class CropPlan:
    """Geometry of every view taken from one source image.

    Origins are (x, y) = (column, row) into the resized image; a view of
    size s covers rows y:y+s and columns x:x+s. Flips apply to the global
    view only.
    """

    global_resize: int | None = None
    global_resized: tuple | None = None
    global_origin: tuple | None = None
    global_size: int | None = None
    flip_h: bool = False
    flip_v: bool = False
    local_resize: int | None = None
    local_resized: tuple | None = None
    local_origins: tuple | None = None
    local_size: int | None = None


def make_crop_plan(image_size, spec, mode, rng_seed):
    """Plan the resizes, crop origins, and flips for one image.

    Train mode samples crop origins uniformly over the valid range and
    coin-flips the global flips; test mode takes center crops and the four
    quadrants of the center 2s x 2s region, with no flips.
    """
    if mode not in ("train", "test"):
        raise ConfigurationError(f"crop plan mode must be train or test, got {mode!r}")
    height, width = int(image_size[0]), int(image_size[1])
    targets = []
    if spec.uses_global:
        targets.append(spec.global_input_size)
    if spec.uses_local:
        targets.append(2 * spec.local_crop_size)
    smallest = min(targets)
    short_name, short_value = ("height", height) if height <= width else ("width", width)
    if short_value < smallest:
        raise DataError(
            f"image {short_name} {short_value} is smaller than the "
            f"resize target {smallest}"
        )
    rng = np.random.default_rng(rng_seed)
    fields = {}

    if spec.uses_global:
        g = spec.global_input_size
        rh, rw = resized_dims(height, width, g)
        if mode == "train":
            ox = int(rng.integers(0, rw - g + 1))
            oy = int(rng.integers(0, rh - g + 1))
            flip_h = bool(rng.integers(0, 2))
            flip_v = bool(rng.integers(0, 2))
        else:
            ox, oy = (rw - g) // 2, (rh - g) // 2
            flip_h = flip_v = False
        fields.update(
            global_resize=g, global_resized=(rh, rw), global_origin=(ox, oy),
            global_size=g, flip_h=flip_h, flip_v=flip_v,
        )

    if spec.uses_local:
        s = spec.local_crop_size
        rh, rw = resized_dims(height, width, 2 * s)
        if mode == "train":
            origins = tuple(
                (int(rng.integers(0, rw - s + 1)), int(rng.integers(0, rh - s + 1)))
                for _ in range(spec.crops_per_image)
            )
        else:
            bx, by = (rw - 2 * s) // 2, (rh - 2 * s) // 2
            origins = ((bx, by), (bx + s, by), (bx, by + s), (bx + s, by + s))
        fields.update(
            local_resize=2 * s, local_resized=(rh, rw), local_origins=origins,
            local_size=s,
        )
    return CropPlan(**fields)
