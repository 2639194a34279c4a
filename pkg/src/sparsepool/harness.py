"""Experiment orchestration: configs, training runs, ablation grids,
convergence comparisons, and report rendering.

A run is described by an INI config with sections [data], [model], [pool],
[train]. Configs round-trip through serialization, and every config has a
fingerprint (a hash of its canonical serialization with the training seed
blanked) so replicate runs of one experiment can be grouped and runs of
different experiments can never be confused.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    BatchLoader,
    SynthSpec,
    channel_normalization,
    generate,
    ingest_folder,
    load_normalization,
    load_split,
)
from .errors import ConfigurationError
from .estimator import (
    inference_schedule,
    predict_logits,
    train_classifier,
)
from .layers import SgdConfig, save_checkpoint
from .model import MODEL_KINDS, ModelSpec, init_params
from .pooling import POOL_KINDS, PoolMode

GRID_KINDS = ("global", "local", "multires")
GRID_MODES = ("avg", "max", "dynamic")
KIND_TITLES = {
    "global": "Global only",
    "local": "Local crops only",
    "multires": "Multi-resolution",
}
MODE_TITLES = {"avg": "Average", "max": "Max", "outlier": "Outlier",
               "dynamic": "Dynamic Outlier"}


def thread_count():
    """Worker cap from SPARSEPOOL_THREADS; defaults to 1 (serial)."""
    raw = os.environ.get("SPARSEPOOL_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(
            f"SPARSEPOOL_THREADS must be an integer, got {raw!r}"
        ) from None
    return max(1, value)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 64
    blob_count_min: int = 1
    blob_count_max: int = 2
    blob_size: int = 12
    blob_visibility: float = 0.8
    texture_scale: int = 8
    tint_saturation: float = 0.25
    distractor_count_min: int = 3
    distractor_count_max: int = 6
    distractor_size: int = 6
    decoy_count_min: int = 2
    decoy_count_max: int = 4
    decoy_size: int = 5
    seed: int = 0
    folder: str = ""
    manifest: str = ""


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "multires"
    global_size: int = 32
    crop_size: int = 32
    crops_per_image: int = 4
    widths: tuple = (16,)


@dataclass(frozen=True)
class PoolConfig:
    mode: str = "dynamic"
    lam: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.015
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def label(self):
        return f"{self.model.kind}-{self.pool.mode}"

    def with_cell(self, kind, mode):
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, kind=kind),
            pool=dataclasses.replace(self.pool, mode=mode),
        )

    def with_seed(self, seed):
        return dataclasses.replace(
            self, train=dataclasses.replace(self.train, seed=int(seed))
        )


_SECTIONS = (("data", DataConfig), ("model", ModelConfig),
             ("pool", PoolConfig), ("train", TrainConfig))
# INI key for each dataclass field, where they differ.
_KEY_FOR_FIELD = {"lam": "lambda"}
_FIELD_FOR_KEY = {v: k for k, v in _KEY_FOR_FIELD.items()}


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text, kind, where):
    try:
        if kind is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {text!r}") from None


def to_ini(config, omit_train_seed=False):
    """Canonical INI serialization: fixed section and key order."""
    lines = []
    for name, _cls in _SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            if omit_train_seed and name == "train" and f.name == "seed":
                continue
            key = _KEY_FOR_FIELD.get(f.name, f.name)
            lines.append(f"{key} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_ini(text):
    """Parse an INI config; unknown sections or keys are rejected and
    missing keys fall back to defaults."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"bad config syntax: {exc}") from exc
    known = {name for name, _ in _SECTIONS}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"unknown config section [{section}]")
    built = {}
    for name, cls in _SECTIONS:
        defaults = cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                fname = _FIELD_FOR_KEY.get(key, key)
                if fname not in fields:
                    raise ConfigurationError(f"unknown key {key!r} in [{name}]")
                kind = type(getattr(defaults, fname))
                values[fname] = _parse_value(raw, kind, f"[{name}] {key}")
        built[name] = cls(**values)
    return RunConfig(**built)


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_ini(text)


def fingerprint(config):
    """Stable hash of the canonical serialization, training seed excluded,
    so replicate seeds of one experiment share a fingerprint."""
    canonical = to_ini(config, omit_train_seed=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_config(config):
    if config.data.source not in ("synth", "folder"):
        raise ConfigurationError(
            f"[data] source must be synth or folder, got {config.data.source!r}"
        )
    if config.data.source == "folder" and not config.data.folder:
        raise ConfigurationError("[data] source=folder requires a folder path")
    if config.model.kind not in MODEL_KINDS:
        raise ConfigurationError(f"[model] kind must be one of {MODEL_KINDS}")
    if config.pool.mode not in POOL_KINDS and config.pool.mode not in ("average", "mean"):
        raise ConfigurationError(f"[pool] mode must be one of {POOL_KINDS}")
    t = config.train
    if t.epochs < 1:
        raise ConfigurationError(f"[train] epochs must be >= 1, got {t.epochs}")
    if t.batch_size < 1:
        raise ConfigurationError(f"[train] batch_size must be >= 1, got {t.batch_size}")
    if not (t.learning_rate > 0 and np.isfinite(t.learning_rate)):
        raise ConfigurationError(f"[train] learning_rate must be positive, got {t.learning_rate}")
    if not (0 <= t.momentum < 1):
        raise ConfigurationError(f"[train] momentum must be in [0, 1), got {t.momentum}")


def synth_spec_from_config(data):
    return SynthSpec(
        num_classes=data.classes,
        train_per_class=data.train_per_class,
        test_per_class=data.test_per_class,
        image_size=data.image_size,
        blob_count_range=(data.blob_count_min, data.blob_count_max),
        blob_size=data.blob_size,
        blob_visibility=data.blob_visibility,
        background_texture_scale=data.texture_scale,
        background_tint_saturation=data.tint_saturation,
        distractor_count_range=(data.distractor_count_min,
                                data.distractor_count_max),
        distractor_size=data.distractor_size,
        decoy_count_range=(data.decoy_count_min, data.decoy_count_max),
        decoy_size=data.decoy_size,
        seed=data.seed,
    )


@dataclass
class PreparedData:
    """Decoded images and normalization statistics, ready for loaders."""

    train_images: list
    train_labels: np.ndarray
    test_images: list
    test_labels: np.ndarray
    classes: tuple
    mean: np.ndarray
    std: np.ndarray


def prepare_data(config):
    data = config.data
    if data.source == "synth":
        ds = generate(synth_spec_from_config(data))
        mean, std = channel_normalization(ds.train_images)
        return PreparedData(
            train_images=ds.train_images, train_labels=ds.train_labels,
            test_images=ds.test_images, test_labels=ds.test_labels,
            classes=ds.classes, mean=mean, std=std,
        )
    root = Path(data.folder)
    manifest = data.manifest or None
    index = ingest_folder(root, manifest=manifest)
    train_images, train_labels = load_split(root, index, "train")
    test_images, test_labels = load_split(root, index, "test")
    sidecar = root / "normalization.json"
    if sidecar.exists():
        mean, std = load_normalization(sidecar)
    else:
        mean, std = channel_normalization(train_images)
    return PreparedData(
        train_images=train_images, train_labels=train_labels,
        test_images=test_images, test_labels=test_labels,
        classes=index.classes, mean=mean, std=std,
    )


def build_model_spec(config, num_classes):
    mode = PoolMode.parse(config.pool.mode, config.pool.lam)
    return ModelSpec(
        kind=config.model.kind, num_classes=num_classes,
        global_input_size=config.model.global_size,
        local_crop_size=config.model.crop_size,
        crops_per_image=config.model.crops_per_image,
        pool_mode=mode, trunk_widths=tuple(config.model.widths),
    )


@dataclass
class ExperimentResult:
    label: str
    fingerprint: str
    seed: int
    epochs: int
    train_loss: list
    train_accuracy: list
    fallback_rate: list
    test_accuracy: float
    per_class_accuracy: dict
    wall_clock_seconds: float
    config_ini: str

    def to_json_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, payload):
        fields = {f.name for f in dataclasses.fields(cls)}
        missing = fields - set(payload)
        if missing:
            raise ValueError(f"missing result fields: {sorted(missing)}")
        result = cls(**{k: payload[k] for k in fields})
        n = result.epochs
        curves = (result.train_loss, result.train_accuracy, result.fallback_rate)
        if any(len(c) != n for c in curves):
            raise ValueError("per-epoch curves do not match the epoch count")
        accs = [result.test_accuracy, *result.per_class_accuracy.values(),
                *result.train_accuracy, *result.fallback_rate]
        if any(not (0.0 <= a <= 1.0) for a in accs):
            raise ValueError("accuracy outside [0, 1]")
        return result


def write_json_atomic(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_checkpoint_atomic(path, params):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, params)
    os.replace(tmp, path)


class _LoaderCache:
    """Reuses BatchLoaders across grid cells that share branch layout."""

    def __init__(self, prepared):
        self.prepared = prepared
        self._cache = {}

    def get(self, spec):
        key = (spec.uses_global and spec.global_input_size,
               spec.uses_local and (spec.local_crop_size, spec.crops_per_image))
        if key not in self._cache:
            p = self.prepared
            train = BatchLoader(p.train_images, p.train_labels, spec, p.mean, p.std)
            test = BatchLoader(p.test_images, p.test_labels, spec, p.mean, p.std)
            self._cache[key] = (train, test)
        return self._cache[key]


def run_training(config, prepared=None, loaders=None):
    """Train one model per the config; returns (ExperimentResult, params).

    ``prepared``/``loaders`` let callers amortize dataset generation and
    resize caches across runs; results are identical either way.
    """
    validate_config(config)
    started = time.perf_counter()
    if prepared is None:
        prepared = prepare_data(config)
    spec = build_model_spec(config, len(prepared.classes))
    if loaders is None:
        loaders = _LoaderCache(prepared)
    train_loader, test_loader = loaders.get(spec)
    sgd = SgdConfig(learning_rate=config.train.learning_rate,
                    momentum=config.train.momentum, seed=config.train.seed)
    params, history = train_classifier(
        spec, train_loader, epochs=config.train.epochs,
        batch_size=config.train.batch_size, sgd_config=sgd,
    )
    schedule = inference_schedule(spec, config.train.epochs)
    logits = predict_logits(spec, params, test_loader,
                            config.train.batch_size, schedule)
    preds = np.argmax(logits, axis=1)
    labels = prepared.test_labels
    test_accuracy = float(np.mean(preds == labels))
    per_class = {}
    for k, name in enumerate(prepared.classes):
        member = labels == k
        per_class[name] = float(np.mean(preds[member] == k)) if member.any() else 0.0
    result = ExperimentResult(
        label=config.label, fingerprint=fingerprint(config),
        seed=config.train.seed, epochs=config.train.epochs,
        train_loss=history.train_loss, train_accuracy=history.train_accuracy,
        fallback_rate=history.fallback_rate, test_accuracy=test_accuracy,
        per_class_accuracy=per_class,
        wall_clock_seconds=time.perf_counter() - started,
        config_ini=to_ini(config),
    )
    return result, params


def cmd_train_run(config, out_dir):
    """Train and persist the checkpoint plus result JSON atomically."""
    result, params = run_training(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint_atomic(out / "model.spck", params)
    write_json_atomic(out / "result.json", result.to_json_dict())
    return result


def _grid_jobs(config, seeds):
    for kind in GRID_KINDS:
        for mode in GRID_MODES:
            for r in range(seeds):
                yield kind, mode, config.with_cell(kind, mode).with_seed(
                    config.train.seed + r)


def run_ablation(config, out_dir, seeds=5, progress=None):
    """Train the 3x3 architecture-by-pooling grid, ``seeds`` replicates per
    cell. Cell failures are recorded and the grid continues. Returns a dict
    {(kind, mode): [ExperimentResult or exception message]}."""
    validate_config(config)
    out = Path(out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_data(config)
    loaders = _LoaderCache(prepared)
    jobs = list(_grid_jobs(config, seeds))

    def execute(job):
        kind, mode, cell_config = job
        try:
            result, _ = run_training(cell_config, prepared, loaders)
            return kind, mode, result
        except Exception as exc:  # cell failure must not kill the grid
            return kind, mode, f"{type(exc).__name__}: {exc}"

    workers = thread_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(execute, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(execute(job))
            if progress is not None:
                progress(job, outcomes[-1])

    grid = {(kind, mode): [] for kind in GRID_KINDS for mode in GRID_MODES}
    for kind, mode, outcome in outcomes:
        grid[(kind, mode)].append(outcome)
        if isinstance(outcome, ExperimentResult):
            name = f"{kind}-{mode}-seed{outcome.seed}.json"
            write_json_atomic(runs_dir / name, outcome.to_json_dict())
    write_ablation_csv(out / "ablation.csv", grid)
    (out / "ablation.md").write_text(ablation_table(grid))
    return grid


def write_ablation_csv(path, grid):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["architecture", "pooling", "seed", "test_accuracy",
                         "fingerprint", "status"])
        for (kind, mode), outcomes in grid.items():
            for outcome in outcomes:
                if isinstance(outcome, ExperimentResult):
                    writer.writerow([kind, mode, outcome.seed,
                                     f"{outcome.test_accuracy:.6f}",
                                     outcome.fingerprint, "ok"])
                else:
                    writer.writerow([kind, mode, "", "", "", outcome])


def _cell_stats(outcomes):
    accs = [o.test_accuracy for o in outcomes if isinstance(o, ExperimentResult)]
    if not accs:
        return None
    return float(np.mean(accs)), float(np.std(accs)), len(accs)


def ablation_table(grid):
    """Markdown table: architectures down, pooling modes across."""
    header = "| Architecture | " + " | ".join(
        MODE_TITLES[m] for m in GRID_MODES) + " |"
    rule = "|---" * (len(GRID_MODES) + 1) + "|"
    lines = [header, rule]
    for kind in GRID_KINDS:
        cells = []
        for mode in GRID_MODES:
            stats = _cell_stats(grid[(kind, mode)])
            if stats is None:
                failures = [o for o in grid[(kind, mode)] if not isinstance(o, ExperimentResult)]
                cells.append(f"failed ({len(failures)})")
            else:
                mean, std, _ = stats
                cells.append(f"{100 * mean:.1f}% ± {100 * std:.1f}")
        lines.append(f"| {KIND_TITLES[kind]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def epochs_to_fraction(curve, frac=0.9):
    """1-based epoch count to first reach ``frac`` of the final value."""
    final = curve[-1]
    target = frac * final
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return len(curve)


def run_convergence(config, out_dir, seeds=5):
    """Compare dynamic against static outlier pooling on one architecture.

    Writes per-epoch train-accuracy curves (CSV with a header row, one row
    per epoch, and a trailing row of epochs-to-90% stats), an SVG plot, and
    per-run result JSONs. Returns {"dynamic": [...], "outlier": [...]} of
    ExperimentResults plus the stats."""
    validate_config(config)
    out = Path(out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_data(config)
    loaders = _LoaderCache(prepared)
    variants = ("dynamic", "outlier")
    results = {v: [] for v in variants}
    for r in range(seeds):
        for variant in variants:
            cell = config.with_cell(config.model.kind, variant).with_seed(
                config.train.seed + r)
            result, _ = run_training(cell, prepared, loaders)
            results[variant].append(result)
            name = f"{cell.label}-seed{result.seed}.json"
            write_json_atomic(runs_dir / name, result.to_json_dict())
    stats = {
        v: [epochs_to_fraction(res.train_accuracy) for res in results[v]]
        for v in variants
    }
    epochs = config.train.epochs
    columns = [f"{v}-seed{res.seed}" for v in variants for res in results[v]]
    with open(out / "convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", *columns])
        for e in range(epochs):
            row = [e + 1]
            for v in variants:
                row.extend(f"{res.train_accuracy[e]:.6f}" for res in results[v])
            writer.writerow(row)
        tail = ["epochs_to_90pct"]
        for v in variants:
            tail.extend(str(s) for s in stats[v])
        writer.writerow(tail)
    _plot_convergence(out / "convergence.svg", results, epochs)
    return results, stats


def _plot_convergence(path, results, epochs):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(1, epochs + 1)
    colors = {"dynamic": "tab:blue", "outlier": "tab:orange"}
    for variant, runs in results.items():
        curves = np.array([r.train_accuracy for r in runs])
        for curve in curves:
            ax.plot(xs, curve, color=colors[variant], alpha=0.25, linewidth=0.8)
        ax.plot(xs, curves.mean(axis=0), color=colors[variant], linewidth=2.0,
                label=f"{variant} (mean of {len(runs)})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train accuracy")
    ax.set_title("Dynamic vs static outlier pooling")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def collect_results(results_dir):
    """Load every result JSON under a directory (recursively).

    Returns (results, warnings); malformed files are skipped with a
    warning rather than failing the report."""
    results = []
    warnings = []
    root = Path(results_dir)
    for path in sorted(root.rglob("*.json")):
        try:
            with open(path) as fh:
                payload = json.load(fh)
            results.append(ExperimentResult.from_json_dict(payload))
        except (ValueError, TypeError, OSError) as exc:
            warnings.append(f"skipping {path.relative_to(root)}: {exc}")
    return results, warnings


def _mean_std(values):
    return float(np.mean(values)), float(np.std(values))


def render_report(results_dir):
    """Aggregate result JSONs into markdown; returns (text, warnings)."""
    results, warnings = collect_results(results_dir)
    lines = ["# Experiment report", ""]
    lines.append(f"{len(results)} result file(s) loaded, "
                 f"{len(warnings)} skipped.")
    lines.append("")
    if not results:
        return "\n".join(lines) + "\n", warnings

    groups = {}
    for r in results:
        groups.setdefault(r.label, []).append(r)
    for label, members in sorted(groups.items()):
        prints = {m.fingerprint for m in members}
        if len(prints) > 1:
            warnings.append(
                f"fingerprint mismatch within {label!r}: "
                f"{len(prints)} distinct configs share this label"
            )

    lines.append("## Test accuracy")
    lines.append("")
    lines.append("| Run | Seeds | Test accuracy | Final train accuracy |")
    lines.append("|---|---|---|---|")
    for label, members in sorted(groups.items()):
        acc_m, acc_s = _mean_std([m.test_accuracy for m in members])
        train_m, _ = _mean_std([m.train_accuracy[-1] for m in members])
        lines.append(f"| {label} | {len(members)} | "
                     f"{100 * acc_m:.1f}% ± {100 * acc_s:.1f} | {100 * train_m:.1f}% |")
    lines.append("")

    grid_labels = {f"{k}-{m}" for k in GRID_KINDS for m in GRID_MODES}
    if grid_labels <= set(groups):
        grid = {(k, m): groups[f"{k}-{m}"] for k in GRID_KINDS for m in GRID_MODES}
        lines.append("## Ablation grid")
        lines.append("")
        lines.append(ablation_table(grid).rstrip())
        lines.append("")

    lines.append("## Per-class test accuracy")
    lines.append("")
    for label, members in sorted(groups.items()):
        names = list(members[0].per_class_accuracy)
        means = {
            name: np.mean([m.per_class_accuracy.get(name, 0.0) for m in members])
            for name in names
        }
        body = ", ".join(f"{name}: {100 * means[name]:.1f}%" for name in names)
        lines.append(f"- **{label}**: {body}")
    lines.append("")

    lines.append("## Outlier-pooling fallback rate by epoch")
    lines.append("")
    for label, members in sorted(groups.items()):
        rates = np.mean([m.fallback_rate for m in members], axis=0)
        series = ", ".join(f"{v:.4f}" for v in rates)
        lines.append(f"- **{label}**: `{series}`")
    lines.append("")
    return "\n".join(lines), warnings
