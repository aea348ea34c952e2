"""Experiment orchestration: config-driven training, evaluation,
fusion-weight distribution analysis, grid execution, and report tables.

A run is fully determined by its config plus a seed: dataset resolution,
corruption, parameter init, and batch order all flow from explicit seeds,
so any table cell regenerates bit-identically.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .autodiff import Tape, Tensor, optimizer_step, softmax_cross_entropy
from .corruption import CorruptionManifest, CorruptionSpec, build_corrupted_dataset
from .datasets import Dataset, load_dataset, load_driver, load_har, synth_dataset
from .models import GATED_VARIANTS, FusionModel, ModelConfig, NaNLossError

HISTOGRAM_BINS = 50
EVAL_BATCH = 512


class ConfigError(ValueError):
    """Malformed or internally inconsistent experiment configuration."""


class ChannelMismatchError(ValueError):
    """Checkpoint and dataset disagree on the channel set."""


class UnsupportedVariantError(ValueError):
    """Operation needs a gating variant (e.g. weight histograms)."""


class TrainingAborted(RuntimeError):
    """Non-finite loss stopped a run; carries the last-good checkpoint."""

    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    model: ModelConfig
    dataset: dict
    corruption: CorruptionSpec | None = None
    seeds: tuple[int, ...] = (0,)
    epochs: int = 10
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-3})
    out_dir: str | None = None
    name: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(
                f"epochs must be >= 0 and batch size >= 1, got {self.epochs}, {self.batch_size}"
            )

    @property
    def run_name(self) -> str:
        return self.name or self.model.variant

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dataset": dict(self.dataset),
            "corruption": self.corruption.to_dict() if self.corruption else "clean",
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": dict(self.optimizer),
            "out_dir": self.out_dir,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            model = ModelConfig.from_dict(d.pop("model"))
        except KeyError:
            raise ConfigError("config needs a 'model' section") from None
        except (TypeError, ValueError) as ex:
            raise ConfigError(f"bad model section: {ex}") from None
        corruption = d.pop("corruption", "clean")
        if corruption in (None, "clean"):
            corruption = None
        else:
            corruption = CorruptionSpec.from_dict(corruption)
        dataset = d.pop("dataset", None)
        if not isinstance(dataset, dict) or "kind" not in dataset:
            raise ConfigError("config needs a 'dataset' section with a 'kind'")
        known = {"seeds", "epochs", "batch_size", "optimizer", "out_dir", "name"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(model=model, dataset=dataset, corruption=corruption, **d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(raw)


def resolve_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    """Build (train, test) from a dataset spec mapping."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "synth":
        seed = int(spec.pop("seed", 0))
        n_train = int(spec.pop("n_train", 600))
        n_test = int(spec.pop("n_test", 300))
        informative = spec.pop("informative", None)
        if isinstance(informative, dict):
            informative = {int(k): float(v) for k, v in informative.items()}
        common = dict(
            k=int(spec.pop("k", 4)),
            n_classes=int(spec.pop("n_classes", 3)),
            informative=informative,
            length=int(spec.pop("length", 32)),
            noise=float(spec.pop("noise", 0.05)),
        )
        _reject_extras(spec, "synth")
        train = synth_dataset(n=n_train, seed=seed, **common)
        test = synth_dataset(n=n_test, seed=seed + 1, **common)
        return train, test
    if kind == "har":
        root = spec.pop("root", None)
        _reject_extras(spec, "har")
        if not root:
            raise ConfigError("har dataset needs a 'root' path")
        train, test, _ = load_har(root)
        return train, test
    if kind == "driver":
        csv_path = spec.pop("csv", None)
        if not csv_path:
            raise ConfigError("driver dataset needs a 'csv' path")
        kwargs = {
            key: spec.pop(key)
            for key in ("window", "stride", "features", "test_fraction")
            if key in spec
        }
        _reject_extras(spec, "driver")
        train, test, _ = load_driver(csv_path, **kwargs)
        return train, test
    if kind == "cache":
        train_path, test_path = spec.pop("train", None), spec.pop("test", None)
        _reject_extras(spec, "cache")
        if not train_path or not test_path:
            raise ConfigError("cache dataset needs 'train' and 'test' paths")
        return load_dataset(train_path), load_dataset(test_path)
    raise ConfigError(f"unknown dataset kind {kind!r}; expected synth/har/driver/cache")


def _reject_extras(leftover: dict, kind: str) -> None:
    if leftover:
        raise ConfigError(f"unknown {kind} dataset keys {sorted(leftover)}")


def _check_model_matches_data(model: ModelConfig, ds: Dataset) -> None:
    if model.n_channels != ds.n_channels:
        raise ConfigError(f"model expects {model.n_channels} channels, dataset has {ds.n_channels}")
    if model.input_length != ds.length:
        raise ConfigError(f"model expects length {model.input_length}, dataset has {ds.length}")
    if model.n_classes != ds.n_classes:
        raise ConfigError(f"model expects {model.n_classes} classes, dataset has {ds.n_classes}")


def corruption_label(spec: CorruptionSpec | None) -> str:
    if spec is None:
        return "clean"
    s = spec.scheme
    if s.kind == "fixed":
        return "fixed(" + ";".join(s.corrupted_channels) + ")"
    if s.kind == "random":
        return f"random(n_rclean={s.n_rclean})"
    return f"gen({s.train_range[0]},{s.train_range[1]})({s.test_range[0]},{s.test_range[1]})"


def _apply_corruption(
    config: ExperimentConfig, train_ds: Dataset, test_ds: Dataset
) -> tuple[Dataset, Dataset, CorruptionManifest | None, CorruptionManifest | None]:
    if config.corruption is None:
        return train_ds, test_ds, None, None
    spec = config.corruption
    train_c, m_train = build_corrupted_dataset(train_ds, spec, phase="train")
    # distinct master seed so test noise never mirrors train noise row-for-row
    test_spec = replace(spec, seed=spec.seed + 1)
    test_c, m_test = build_corrupted_dataset(test_ds, test_spec, phase="test")
    return train_c, test_c, m_train, m_test


# ----------------------------------------------------------------- inference


def _forward_inference(model: FusionModel, x) -> tuple[np.ndarray, np.ndarray | None]:
    """Main-model forward only: never touches aux heads or the target net."""
    if model.config.variant == "baseline":
        return model.forward_baseline(x).data, None
    logits, weights = model.forward_netgated(x)
    return logits.data, weights.data


def predict(model: FusionModel, ds: Dataset, batch: int = EVAL_BATCH):
    """Batched main-model logits and fusion weights over a dataset."""
    logits, weights = [], []
    for start in range(0, len(ds), batch):
        lg, w = _forward_inference(model, ds.x[start : start + batch])
        logits.append(lg)
        if w is not None:
            weights.append(w)
    if not logits:
        return np.zeros((0, ds.n_classes)), None
    return np.concatenate(logits), (np.concatenate(weights) if weights else None)


def model_accuracy(model: FusionModel, ds: Dataset) -> float:
    """Argmax-of-logits accuracy, in percent."""
    if len(ds) == 0:
        raise ValueError("cannot score an empty dataset")
    logits, _ = predict(model, ds)
    return float((logits.argmax(axis=1) == ds.y).mean() * 100.0)


def _sidecar_path(checkpoint) -> Path:
    return Path(f"{checkpoint}.json")


def save_checkpoint(model: FusionModel, path, ds: Dataset, *, inference_only=True) -> None:
    """Parameter records plus a JSON sidecar describing how to rebuild."""
    model.save(path, inference_only=inference_only)
    sidecar = {
        "model": model.config.to_dict(),
        "channel_names": list(ds.channel_names),
        "class_names": list(ds.class_names),
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    sidecar_file = _sidecar_path(path)
    if not sidecar_file.exists():
        raise ConfigError(f"{path}: missing sidecar {sidecar_file.name}")
    sidecar = json.loads(sidecar_file.read_text())
    model = FusionModel(ModelConfig.from_dict(sidecar["model"]))
    model.load(path)
    return model, sidecar


def evaluate_accuracy(checkpoint, ds: Dataset) -> float:
    """Test accuracy (percent) of a stored model on a dataset."""
    model, sidecar = load_checkpoint(checkpoint)
    if sidecar["channel_names"] != list(ds.channel_names):
        raise ChannelMismatchError(
            f"checkpoint was trained on channels {sidecar['channel_names']}, "
            f"dataset has {ds.channel_names}"
        )
    return model_accuracy(model, ds)


# ------------------------------------------------------ weight distributions


@dataclass
class WeightHistogram:
    """Fusion-weight distribution of one channel under one condition."""

    count: int
    mean: float | None
    masses: np.ndarray  # (bins,), sums to 1 when count > 0
    edges: np.ndarray  # (bins + 1,) over [0, 1]

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "masses": self.masses.tolist(),
            "edges": self.edges.tolist(),
        }


def _histogram(values: np.ndarray, bins: int) -> WeightHistogram:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    masses = counts / values.size if values.size else counts.astype(float)
    mean = float(values.mean()) if values.size else None
    return WeightHistogram(count=int(values.size), mean=mean, masses=masses, edges=edges)


def weight_histograms_for_model(
    model: FusionModel,
    ds: Dataset,
    manifest: CorruptionManifest,
    channel: str,
    bins: int = HISTOGRAM_BINS,
) -> dict[str, WeightHistogram]:
    """Per-example fusion weight of ``channel``, split by its corruption
    status from the manifest. Keys: "clean", "corrupt"."""
    if model.config.variant not in GATED_VARIANTS:
        raise UnsupportedVariantError(
            f"variant {model.config.variant!r} has no fusion weights to histogram"
        )
    if channel not in ds.channel_names:
        raise ChannelMismatchError(f"unknown channel {channel!r}; have {ds.channel_names}")
    k = ds.channel_names.index(channel)
    _, weights = predict(model, ds)
    failed = manifest.failing_mask(ds.channel_names)[:, k]
    if failed.shape[0] != weights.shape[0]:
        raise ConfigError(
            f"manifest covers {failed.shape[0]} examples, dataset has {weights.shape[0]}"
        )
    return {
        "clean": _histogram(weights[~failed, k], bins),
        "corrupt": _histogram(weights[failed, k], bins),
    }


def fusion_weight_histogram(
    checkpoint, ds: Dataset, manifest: CorruptionManifest, channel: str, bins: int = HISTOGRAM_BINS
) -> dict[str, WeightHistogram]:
    model, sidecar = load_checkpoint(checkpoint)
    if sidecar["channel_names"] != list(ds.channel_names):
        raise ChannelMismatchError(
            f"checkpoint was trained on channels {sidecar['channel_names']}, "
            f"dataset has {ds.channel_names}"
        )
    return weight_histograms_for_model(model, ds, manifest, channel, bins)


def write_histograms_csv(path, channel: str, hists: dict[str, WeightHistogram]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "condition", "count", "mean", "bin_lo", "bin_hi", "mass"])
        for condition, h in hists.items():
            mean = "" if h.mean is None else f"{h.mean:.6f}"
            for i in range(h.masses.size):
                writer.writerow(
                    [channel, condition, h.count, mean, h.edges[i], h.edges[i + 1], h.masses[i]]
                )


# ------------------------------------------------------------------ training


@dataclass
class RunReport:
    variant: str
    corruption: str
    failure: str
    seeds: list[int]
    accuracies: list[float]  # percent, one per seed
    mean_accuracy: float
    std_accuracy: float
    train_curves: list[list[float]]  # optimized objective, per seed per epoch
    test_curves: list[list[float]]  # main-model cross-entropy, per seed per epoch
    wall_clock_seconds: float
    checkpoints: list[str]
    histograms: dict[str, dict[str, dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "corruption": self.corruption,
            "failure": self.failure,
            "seeds": list(self.seeds),
            "accuracies": list(self.accuracies),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "train_curves": self.train_curves,
            "test_curves": self.test_curves,
            "wall_clock_seconds": self.wall_clock_seconds,
            "checkpoints": list(self.checkpoints),
            "histograms": self.histograms,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _mean_test_loss(model: FusionModel, ds: Dataset, batch: int = EVAL_BATCH) -> float:
    total = 0.0
    for start in range(0, len(ds), batch):
        x, y = ds.x[start : start + batch], ds.y[start : start + batch]
        logits, _ = _forward_inference(model, x)
        losses = softmax_cross_entropy(Tensor(logits), y)
        total += float(losses.data.sum())
    return total / max(len(ds), 1)


def _train_single(
    config: ExperimentConfig,
    seed: int,
    train_ds: Dataset,
    test_ds: Dataset,
    abort_dir: Path | None,
) -> tuple[FusionModel, list[float], list[float]]:
    """One seed's optimization; returns the model and per-epoch loss curves."""
    model = FusionModel(replace(config.model, seed=seed))
    params = model.parameters()
    hyper = {"kind": "adam", "lr": 1e-3, **config.optimizer}
    order_rng = np.random.default_rng([seed, 3])
    n = len(train_ds)
    train_curve: list[float] = []
    test_curve: list[float] = []
    last_good = {name: p.value.copy() for name, p in model.params.items()}

    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        batch_losses = []
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                model.zero_grad()
                with Tape() as tape:
                    loss, _ = model.training_loss(train_ds.x[idx], train_ds.y[idx])
                    tape.gradients(loss)
                optimizer_step(params, hyper)
                if model.lattice_net is not None:
                    model.lattice_net.project()
                batch_losses.append(float(loss.data))
        except NaNLossError as ex:
            for name, p in model.params.items():
                p.value[...] = last_good[name]
            checkpoint = None
            if abort_dir is not None:
                abort_dir.mkdir(parents=True, exist_ok=True)
                checkpoint = str(abort_dir / f"{config.run_name}_seed{seed}_lastgood.ckpt")
                save_checkpoint(model, checkpoint, train_ds, inference_only=False)
            raise TrainingAborted(
                f"aborted at epoch {epoch}: {ex}; parameters rolled back to the "
                f"last completed epoch" + (f" (saved to {checkpoint})" if checkpoint else ""),
                checkpoint=checkpoint,
            ) from ex
        train_curve.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        test_curve.append(_mean_test_loss(model, test_ds))
        last_good = {name: p.value.copy() for name, p in model.params.items()}
    return model, train_curve, test_curve


def train(config: ExperimentConfig) -> tuple[list[str], RunReport]:
    """Run every seed of one experiment; returns checkpoint paths + report."""
    t0 = time.perf_counter()
    base_train, base_test = resolve_dataset(config.dataset)
    _check_model_matches_data(config.model, base_train)
    train_ds, test_ds, _, m_test = _apply_corruption(config, base_train, base_test)

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    accuracies, checkpoints = [], []
    train_curves, test_curves = [], []
    histograms: dict[str, dict[str, dict]] = {}
    for i, seed in enumerate(config.seeds):
        model, tr_curve, te_curve = _train_single(config, seed, train_ds, test_ds, out_dir)
        acc = model_accuracy(model, test_ds) if len(test_ds) else 0.0
        assert 0.0 <= acc <= 100.0
        accuracies.append(acc)
        train_curves.append(tr_curve)
        test_curves.append(te_curve)
        if out_dir is not None:
            path = str(out_dir / f"{config.run_name}_seed{seed}.ckpt")
            save_checkpoint(model, path, train_ds)
            checkpoints.append(path)
        if i == 0 and m_test is not None and config.model.variant in GATED_VARIANTS:
            for channel in test_ds.channel_names:
                pair = weight_histograms_for_model(model, test_ds, m_test, channel)
                histograms[channel] = {cond: h.to_dict() for cond, h in pair.items()}

    report = RunReport(
        variant=config.model.variant,
        corruption=corruption_label(config.corruption),
        failure=config.corruption.failure.kind if config.corruption else "-",
        seeds=list(config.seeds),
        accuracies=accuracies,
        mean_accuracy=float(np.mean(accuracies)),
        std_accuracy=float(np.std(accuracies)),
        train_curves=train_curves,
        test_curves=test_curves,
        wall_clock_seconds=time.perf_counter() - t0,
        checkpoints=checkpoints,
        histograms=histograms,
    )
    if out_dir is not None:
        report.save(out_dir / f"{config.run_name}_report.json")
    return checkpoints, report


# ---------------------------------------------------------------------- grid


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_grid(path) -> list[ExperimentConfig]:
    """Grid file: optional 'defaults' mapping plus a 'runs' list of overrides."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict) or "runs" not in raw:
        raise ConfigError(f"{path}: grid file needs a 'runs' list")
    defaults = raw.get("defaults", {})
    configs = []
    for i, run in enumerate(raw["runs"]):
        merged = _deep_merge(defaults, run or {})
        try:
            configs.append(ExperimentConfig.from_dict(merged))
        except ConfigError as ex:
            raise ConfigError(f"{path}: run {i}: {ex}") from None
    return configs


def run_experiment_grid(configs: list[ExperimentConfig], out_dir=None) -> list[dict]:
    """Execute runs sequentially; individual failures are recorded as rows
    and the grid continues. Rows aggregate mean/std over seeds, keyed by
    (variant, corruption, failure)."""
    out_dir = Path(out_dir) if out_dir else None
    reports: list[RunReport] = []
    failures: list[dict] = []
    for i, config in enumerate(configs):
        run_dir = None
        if out_dir is not None:
            run_dir = out_dir / f"run_{i:03d}"
            config = replace(config, out_dir=str(run_dir))
        try:
            _, report = train(config)
            reports.append(report)
        except Exception as ex:  # grid isolation: one bad cell must not stop the rest
            failures.append(
                {
                    "variant": config.model.variant,
                    "corruption": corruption_label(config.corruption),
                    "failure": config.corruption.failure.kind if config.corruption else "-",
                    "status": f"failed: {ex}",
                }
            )
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "error.txt").write_text(f"{type(ex).__name__}: {ex}\n")
    rows = aggregate_reports(reports) + failures
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "grid_summary.json").write_text(json.dumps(rows, indent=2))
    return rows


def aggregate_reports(reports: list[RunReport]) -> list[dict]:
    """Pool per-seed accuracies of reports sharing a (variant, corruption,
    failure) cell into mean ± std rows."""
    cells: dict[tuple, list[float]] = {}
    order: list[tuple] = []
    for r in reports:
        key = (r.variant, r.corruption, r.failure)
        if key not in cells:
            cells[key] = []
            order.append(key)
        cells[key].extend(r.accuracies)
    rows = []
    for key in order:
        accs = np.array(cells[key])
        rows.append(
            {
                "variant": key[0],
                "corruption": key[1],
                "failure": key[2],
                "n_runs": int(accs.size),
                "mean_accuracy": float(accs.mean()),
                "std_accuracy": float(accs.std()),
                "status": "ok",
            }
        )
    return rows


# ------------------------------------------------------------------- reports

REPORT_COLUMNS = ["variant", "corruption", "failure", "n_runs", "mean_accuracy", "std_accuracy", "status"]


def collect_rows(results_dir) -> list[dict]:
    """Rebuild table rows from artifacts under a directory: the grid summary
    if present, otherwise every run report found recursively."""
    results_dir = Path(results_dir)
    summary = results_dir / "grid_summary.json"
    if summary.exists():
        return json.loads(summary.read_text())
    reports = []
    for path in sorted(results_dir.rglob("*_report.json")):
        d = json.loads(path.read_text())
        reports.append(
            RunReport(
                variant=d["variant"],
                corruption=d["corruption"],
                failure=d["failure"],
                seeds=d["seeds"],
                accuracies=d["accuracies"],
                mean_accuracy=d["mean_accuracy"],
                std_accuracy=d["std_accuracy"],
                train_curves=d["train_curves"],
                test_curves=d["test_curves"],
                wall_clock_seconds=d["wall_clock_seconds"],
                checkpoints=d["checkpoints"],
                histograms=d.get("histograms", {}),
            )
        )
    return aggregate_reports(reports)


def _row_cells(row: dict) -> list[str]:
    def acc(key):
        return f"{row[key]:.2f}" if key in row and row.get("status", "ok") == "ok" else ""

    return [
        str(row.get("variant", "")),
        str(row.get("corruption", "")),
        str(row.get("failure", "")),
        str(row.get("n_runs", "")),
        acc("mean_accuracy"),
        acc("std_accuracy"),
        str(row.get("status", "ok")),
    ]


def render_table(rows: list[dict], fmt: str = "csv") -> str:
    """Accuracy table as csv or markdown; accuracies to two decimals."""
    if fmt == "csv":
        lines = [",".join(REPORT_COLUMNS)]
        lines += [",".join(_row_cells(row)) for row in rows]
        return "\n".join(lines) + "\n"
    if fmt == "md":
        header = "| " + " | ".join(REPORT_COLUMNS) + " |"
        rule = "|" + "|".join(" --- " for _ in REPORT_COLUMNS) + "|"
        body = ["| " + " | ".join(_row_cells(row)) + " |" for row in rows]
        return "\n".join([header, rule, *body]) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected 'csv' or 'md'")
