"""Synthetic sparse-feature datasets and image-folder ingestion.

The generator produces the regime the pooling comparison is about: small
oriented color-striped blobs (one or two per image, each present with some
probability) scattered over a cluttered background. The diagonal stripes
are drawn so that a 2x downscale collapses both orientations onto the
same checkerboard: a downscaled whole-image view still sees the color and
the texture, but which way the stripes ran is unrecoverable, and only
full-resolution crops keep the orientation signal.

Three kinds of clutter make the pooling modes genuinely diverge, each
aimed at one failure mode. A per-image background hue tint adds diffuse
channel-specific noise that spatial averaging absorbs but threshold-based
pooling rejects. Small striped dots reuse the blob texture at half its
extent, so their interiors are indistinguishable from blob interiors and
the peak response of any local feature matches on both; max pooling has
no way to prefer the blob, while pooling that sums over the selected area
keeps a several-fold margin. Flat decoy patches carry a class's blended
color without its texture: they pull spatial averages toward the wrong
class but stay below the selection threshold of outlier-based pooling.

Folder ingestion accepts either a ``<split>/<class>/<image>`` layout or a
manifest CSV with columns (path, class, plot, split), and enforces that no
(class, plot) pair appears in both splits when plot ids are present.
"""

from __future__ import annotations

import colorsys
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .model import ModelInputs, make_crop_plan, resized_dims
from .tensor import read_spt4, write_spt4

SPLITS = ("train", "test")
_BLOB_NOISE = 0.05
_STRIPE_PERIOD = 4  # along the diagonal axis; ~2.8 px spatial period
_DOT_ATTEMPTS = 50


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample over the trailing two axes, half-pixel centers.

    Edge samples clamp to the border. An exact 2x downscale reduces to the
    mean of each 2x2 block.
    """
    *lead, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(dtype)[:, None]
    wx = (xs - x0).astype(dtype)[None, :]
    r0 = y0[:, None]
    r1 = y1[:, None]
    c0 = x0[None, :]
    c1 = x1[None, :]
    out = (
        img[..., r0, c0] * (1 - wy) * (1 - wx)
        + img[..., r0, c1] * (1 - wy) * wx
        + img[..., r1, c0] * wy * (1 - wx)
        + img[..., r1, c1] * wy * wx
    )
    return out.astype(dtype, copy=False)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic sparse-feature dataset."""

    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 64
    blob_count_range: tuple = (1, 2)
    blob_size: int = 12
    blob_visibility: float = 0.8
    background_texture_scale: int = 8
    background_tint_saturation: float = 0.25
    distractor_count_range: tuple = (3, 6)
    distractor_size: int = 6
    decoy_count_range: tuple = (2, 4)
    decoy_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("images per class must be >= 1")
        lo, hi = self.blob_count_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(
                f"blob_count_range must satisfy 1 <= min <= max, got {self.blob_count_range}"
            )
        object.__setattr__(self, "blob_count_range", (int(lo), int(hi)))
        if self.blob_size < 2 or self.blob_size > self.image_size:
            raise ConfigurationError(
                f"blob_size {self.blob_size} must fit inside image_size {self.image_size}"
            )
        if not (0.0 <= self.blob_visibility <= 1.0):
            raise ConfigurationError(
                f"blob_visibility must be a probability, got {self.blob_visibility}"
            )
        if self.background_texture_scale < 1:
            raise ConfigurationError("background_texture_scale must be >= 1")
        if self.image_size < 8:
            raise ConfigurationError(f"image_size must be >= 8, got {self.image_size}")
        if not (0.0 <= self.background_tint_saturation <= 0.5):
            raise ConfigurationError(
                "background_tint_saturation must lie in [0, 0.5], "
                f"got {self.background_tint_saturation}"
            )
        for name in ("distractor", "decoy"):
            lo_hi = getattr(self, f"{name}_count_range")
            clo, chi = lo_hi
            if not (0 <= clo <= chi):
                raise ConfigurationError(
                    f"{name}_count_range must satisfy 0 <= min <= max, got {lo_hi}"
                )
            object.__setattr__(self, f"{name}_count_range", (int(clo), int(chi)))
            size = getattr(self, f"{name}_size")
            if chi > 0 and not (1 <= size < self.blob_size):
                # Class-colored clutter must stay clearly smaller than a
                # blob, or it would carry class-scale evidence of its own.
                raise ConfigurationError(
                    f"{name}_size {size} must lie in [1, blob_size) = "
                    f"[1, {self.blob_size})"
                )

    def class_signature(self, class_id):
        """(rgb, angle_index) for a class: paired classes share the color
        and differ only in stripe orientation."""
        if not (0 <= class_id < self.num_classes):
            raise ConfigurationError(f"class id {class_id} out of range")
        hues = math.ceil(self.num_classes / 2)
        rgb = colorsys.hsv_to_rgb((class_id // 2) / hues, 0.9, 0.95)
        return np.array(rgb, dtype=np.float64), class_id % 2


def _blob_patch(rng, rgb, angle_index, size):
    yy, xx = np.mgrid[0:size, 0:size]
    diag = xx + yy if angle_index == 0 else xx - yy
    phase = int(rng.integers(0, _STRIPE_PERIOD))
    on = ((diag + phase) % _STRIPE_PERIOD) < (_STRIPE_PERIOD // 2)
    bright = rgb.reshape(3, 1, 1)
    dark = 0.25 * bright + 0.05
    patch = np.where(on[None, :, :], bright, dark)
    return patch + rng.normal(0.0, _BLOB_NOISE, size=patch.shape)


def _synth_image(rng, spec, class_id):
    s = spec.image_size
    cells = s // spec.background_texture_scale + 2
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells))
    background = 0.3 + 0.3 * bilinear_resize(coarse, s, s)
    tint = colorsys.hsv_to_rgb(
        rng.uniform(), rng.uniform(0.0, spec.background_tint_saturation), 1.0
    )
    img = background[None, :, :] * np.reshape(tint, (3, 1, 1))
    img = img + rng.normal(0.0, 0.02, size=img.shape)

    lo, hi = spec.blob_count_range
    count = int(rng.integers(lo, hi + 1))
    b = spec.blob_size
    boxes = []
    for index in range(count):
        for _attempt in range(200):
            x = int(rng.integers(0, s - b + 1))
            y = int(rng.integers(0, s - b + 1))
            if all(abs(x - ox) >= b or abs(y - oy) >= b for ox, oy in boxes):
                boxes.append((x, y))
                break
        else:
            raise DataError(
                f"could not place blob {index + 1} of {count} "
                f"(size {b} on a {s}x{s} image): packing is infeasible"
            )

    rgb, angle = spec.class_signature(class_id)
    visible = []
    for x, y in boxes:
        if rng.uniform() < spec.blob_visibility:
            img[:, y:y + b, x:x + b] = _blob_patch(rng, rgb, angle, b)
            visible.append((x, y))

    _place_clutter(rng, spec, img, boxes)

    img = np.clip(img, 0.0, 1.0)
    # Snap to the 8-bit grid so a PNG round trip is exact.
    img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32), tuple(visible)


def blended_color(rgb):
    """Mean color of the striped blob texture (half bright, half dark)."""
    return 0.625 * np.asarray(rgb) + 0.025


def _place_clutter(rng, spec, img, blob_boxes):
    """Stamp striped mini-dots and flat decoy patches outside the blobs.

    Clutter that cannot find free space within the attempt budget is
    dropped; clutter density is a distribution, not a contract.
    """
    s = spec.image_size
    occupied = [(x, y, spec.blob_size) for x, y in blob_boxes]

    def placements(count_range, size):
        lo, hi = count_range
        if hi == 0:
            return
        for _ in range(int(rng.integers(lo, hi + 1))):
            for _attempt in range(_DOT_ATTEMPTS):
                x = int(rng.integers(0, s - size + 1))
                y = int(rng.integers(0, s - size + 1))
                if all(
                    x + size <= ox or ox + osz <= x
                    or y + size <= oy or oy + osz <= y
                    for ox, oy, osz in occupied
                ):
                    occupied.append((x, y, size))
                    yield x, y
                    break

    d = spec.distractor_size
    for x, y in placements(spec.distractor_count_range, d):
        rgb, angle = spec.class_signature(int(rng.integers(0, spec.num_classes)))
        img[:, y:y + d, x:x + d] = _blob_patch(rng, rgb, angle, d)

    e = spec.decoy_size
    for x, y in placements(spec.decoy_count_range, e):
        rgb, _ = spec.class_signature(int(rng.integers(0, spec.num_classes)))
        flat = blended_color(rgb).reshape(3, 1, 1)
        img[:, y:y + e, x:x + e] = flat + rng.normal(0.0, _BLOB_NOISE, size=(3, e, e))


@dataclass
class SynthDataset:
    """Generated images plus oracle blob locations, before any file IO."""

    spec: SynthSpec
    classes: tuple
    train_images: list
    train_labels: np.ndarray
    train_blobs: list
    test_images: list
    test_labels: np.ndarray
    test_blobs: list


def generate(spec):
    """Generate the dataset described by ``spec``, reproducibly.

    Train and test come from disjoint sub-seeds of the spec seed, so the
    splits never share an image.
    """
    root = np.random.SeedSequence(spec.seed)
    train_ss, test_ss = root.spawn(2)
    classes = tuple(f"class{k:02d}" for k in range(spec.num_classes))

    def build(split_ss, per_class):
        children = split_ss.spawn(spec.num_classes * per_class)
        images, labels, blobs = [], [], []
        i = 0
        for k in range(spec.num_classes):
            for _ in range(per_class):
                rng = np.random.default_rng(children[i])
                i += 1
                img, vis = _synth_image(rng, spec, k)
                images.append(img)
                labels.append(k)
                blobs.append(vis)
        return images, np.array(labels, dtype=np.int64), blobs

    train_images, train_labels, train_blobs = build(train_ss, spec.train_per_class)
    test_images, test_labels, test_blobs = build(test_ss, spec.test_per_class)
    return SynthDataset(
        spec=spec, classes=classes,
        train_images=train_images, train_labels=train_labels, train_blobs=train_blobs,
        test_images=test_images, test_labels=test_labels, test_blobs=test_blobs,
    )


@dataclass(frozen=True)
class IndexRecord:
    path: str
    cls: str
    split: str
    plot: str | None = None
    date: str | None = None


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple
    classes: tuple

    def split_records(self, split):
        return [r for r in self.records if r.split == split]


def channel_normalization(images):
    """Per-channel mean and population std over a list of (3, H, W) arrays."""
    total = np.zeros(3)
    count = 0
    for img in images:
        total += img.sum(axis=(1, 2), dtype=np.float64)
        count += img.shape[1] * img.shape[2]
    mean = total / count
    sq = np.zeros(3)
    for img in images:
        centered = img.astype(np.float64) - mean[:, None, None]
        sq += np.sum(centered * centered, axis=(1, 2))
    std = np.sqrt(sq / count)
    if (std < 1e-8).any():
        raise DataError("a channel has (near-)zero variance; cannot normalize")
    return mean, std


def save_dataset(dataset, out_dir, image_format="png"):
    """Write images, index.csv, and normalization.json; returns the index.

    Layout: ``<out>/<split>/<class>/img_<n>.<ext>``. Plot ids are assigned
    per (class, split) so the synthetic index is plot-disjoint by
    construction.
    """
    if image_format not in ("png", "spt4"):
        raise ConfigurationError(f"image_format must be png or spt4, got {image_format!r}")
    out = Path(out_dir)
    records = []
    parts = (
        ("train", dataset.train_images, dataset.train_labels),
        ("test", dataset.test_images, dataset.test_labels),
    )
    for split, images, labels in parts:
        counters = {}
        for img, label in zip(images, labels):
            cls = dataset.classes[label]
            n = counters.get(cls, 0)
            counters[cls] = n + 1
            rel = Path(split) / cls / f"img_{n:05d}.{image_format}"
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            if image_format == "png":
                byte_img = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(byte_img, mode="RGB").save(target)
            else:
                write_spt4(target, img[None])
            suffix = "a" if split == "train" else "b"
            records.append(
                IndexRecord(path=rel.as_posix(), cls=cls, split=split,
                            plot=f"{cls}-plot-{suffix}")
            )
    index = DatasetIndex(records=tuple(records), classes=dataset.classes)
    write_index(out / "index.csv", index)
    mean, std = channel_normalization(dataset.train_images)
    save_normalization(out / "normalization.json", mean, std)
    return index


def write_index(path, index):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class", "plot", "split"])
        for r in index.records:
            writer.writerow([r.path, r.cls, r.plot or "", r.split])


def save_normalization(path, mean, std):
    payload = {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_normalization(path):
    with open(path) as fh:
        payload = json.load(fh)
    mean = np.asarray(payload["mean"], dtype=np.float64)
    std = np.asarray(payload["std"], dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise DataError(f"{path}: normalization must carry 3 channel values")
    return mean, std


_IMAGE_SUFFIXES = (".png", ".spt4")
_JPEG_SUFFIXES = (".jpg", ".jpeg")


def _check_plot_disjoint(records):
    seen = {}
    for r in records:
        if r.plot is None:
            continue
        key = (r.cls, r.plot)
        seen.setdefault(key, set()).add(r.split)
    for (cls, plot), splits in seen.items():
        if len(splits) > 1:
            raise DataError(
                f"split leakage: class {cls!r} plot {plot!r} appears in both splits"
            )


def ingest_folder(root, manifest=None, allow_jpeg=False):
    """Build a DatasetIndex from a folder layout or a manifest CSV.

    Without a manifest, the layout is ``<split>/<class>/<files>`` and the
    class set is defined by the train split. With a manifest, rows are
    (path, class, plot, split) and the plot-disjointness invariant is
    enforced for every row that carries a plot id.
    """
    root = Path(root)
    suffixes = _IMAGE_SUFFIXES + (_JPEG_SUFFIXES if allow_jpeg else ())
    if manifest is not None:
        records = []
        with open(manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"path", "class", "plot", "split"}
            missing = required - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{manifest}: missing columns {sorted(missing)}")
            for row in reader:
                split = row["split"].strip()
                if split not in SPLITS:
                    raise DataError(f"{manifest}: unknown split {split!r}")
                path = row["path"].strip()
                if Path(path).suffix.lower() not in suffixes:
                    raise DataError(f"{manifest}: unsupported image type {path!r}")
                if not (root / path).exists():
                    raise DataError(f"{manifest}: missing image file {path!r}")
                records.append(
                    IndexRecord(
                        path=path, cls=row["class"].strip(), split=split,
                        plot=row["plot"].strip() or None,
                        date=(row.get("date") or "").strip() or None,
                    )
                )
    else:
        for split in SPLITS:
            if not (root / split).is_dir():
                raise DataError(f"{root}: missing {split!r} directory")
        train_classes = sorted(
            p.name for p in (root / "train").iterdir() if p.is_dir()
        )
        if not train_classes:
            raise DataError(f"{root}: train split has no class directories")
        records = []
        for split in SPLITS:
            for cls_dir in sorted((root / split).iterdir()):
                if not cls_dir.is_dir():
                    continue
                if cls_dir.name not in train_classes:
                    raise DataError(
                        f"{root}: unknown class directory {cls_dir.name!r} in {split!r}"
                    )
                for path in sorted(cls_dir.iterdir()):
                    if path.suffix.lower() in suffixes:
                        records.append(
                            IndexRecord(
                                path=path.relative_to(root).as_posix(),
                                cls=cls_dir.name, split=split,
                            )
                        )
    if not records:
        raise DataError(f"{root}: no images found")
    train_classes = sorted({r.cls for r in records if r.split == "train"})
    for r in records:
        if r.cls not in train_classes:
            raise DataError(f"unknown class {r.cls!r}: absent from the train split")
    _check_plot_disjoint(records)
    return DatasetIndex(records=tuple(records), classes=tuple(train_classes))


def decode_image(path):
    """Read one image file into a (3, H, W) float32 array in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".spt4":
        tensor = read_spt4(path)
        if tensor.shape[0] != 1 or tensor.shape[1] != 3:
            raise DataError(f"{path}: expected a (1, 3, H, W) tensor image")
        return tensor[0].astype(np.float32)
    try:
        with Image.open(path) as handle:
            rgb = handle.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_split(root, index, split):
    """Decode a split's images; returns (images list, labels array)."""
    root = Path(root)
    class_to_id = {cls: i for i, cls in enumerate(index.classes)}
    images, labels = [], []
    for record in index.split_records(split):
        images.append(decode_image(root / record.path))
        labels.append(class_to_id[record.cls])
    return images, np.array(labels, dtype=np.int64)


def _resize_all(arrays, target):
    sizes = {a.shape[1:] for a in arrays}
    if len(sizes) == 1:
        h, w = next(iter(sizes))
        rh, rw = resized_dims(h, w, target)
        stacked = bilinear_resize(np.stack(arrays), rh, rw)
        return [stacked[i] for i in range(len(arrays))]
    out = []
    for a in arrays:
        rh, rw = resized_dims(a.shape[1], a.shape[2], target)
        out.append(bilinear_resize(a, rh, rw))
    return out


class BatchLoader:
    """Serves normalized, resized, cropped model batches from memory.

    Images are normalized by the supplied channel statistics once, then
    resized once per branch target; per-batch work is crop slicing and
    flips only.
    """

    def __init__(self, images, labels, spec, mean, std):
        if len(images) != len(labels):
            raise DataError(f"{len(images)} images but {len(labels)} labels")
        self.spec = spec
        self.labels = np.asarray(labels, dtype=np.int64)
        self.sizes = [(img.shape[1], img.shape[2]) for img in images]
        mean32 = np.asarray(mean, dtype=np.float32)[:, None, None]
        std32 = np.asarray(std, dtype=np.float32)[:, None, None]
        normalized = [(img - mean32) / std32 for img in images]
        self.global_cache = None
        self.local_cache = None
        if spec.uses_global:
            self.global_cache = _resize_all(normalized, spec.global_input_size)
        if spec.uses_local:
            self.local_cache = _resize_all(normalized, 2 * spec.local_crop_size)

    def __len__(self):
        return len(self.labels)

    def batch(self, ids, mode, plan_seeds=None):
        """Assemble ModelInputs and labels for the given image ids."""
        if plan_seeds is None:
            plan_seeds = [0] * len(ids)
        if len(plan_seeds) != len(ids):
            raise DataError(f"{len(ids)} ids but {len(plan_seeds)} plan seeds")
        spec = self.spec
        n = len(ids)
        global_view = None
        crops = None
        if spec.uses_global:
            g = spec.global_input_size
            global_view = np.empty((n, 3, g, g), dtype=np.float32)
        if spec.uses_local:
            s = spec.local_crop_size
            crops = np.empty((spec.crops_per_image, n, 3, s, s), dtype=np.float32)
        for row, (i, seed) in enumerate(zip(ids, plan_seeds)):
            plan = make_crop_plan(self.sizes[i], spec, mode, seed)
            if spec.uses_global:
                g = spec.global_input_size
                ox, oy = plan.global_origin
                view = self.global_cache[i][:, oy:oy + g, ox:ox + g]
                if plan.flip_h:
                    view = view[:, :, ::-1]
                if plan.flip_v:
                    view = view[:, ::-1, :]
                global_view[row] = view
            if spec.uses_local:
                s = spec.local_crop_size
                for ci, (ox, oy) in enumerate(plan.local_origins):
                    crops[ci, row] = self.local_cache[i][:, oy:oy + s, ox:ox + s]
        return ModelInputs(global_view=global_view, crops=crops), self.labels[list(ids)]
