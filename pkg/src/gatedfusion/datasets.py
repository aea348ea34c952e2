"""Dataset ingestion: activity-recognition signals, driver CSV logs, and a
synthetic multimodal fixture for fast tests.

Every dataset is a set of named channels; an example is a (channels x
length) slab with one integer label. All channel values live in [-1, 1]
after normalization, and normalization constants always come from the
training split alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import load_arrays, save_arrays

HAR_CHANNELS = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
]

HAR_CLASSES = ["WALKING", "WALKING_UPSTAIRS", "WALKING_DOWNSTAIRS", "SITTING", "STANDING", "LAYING"]

# The driving log has 51 columns; this is the classic 15-feature selection
# used for driver identification work on that data (override via config).
DRIVER_FEATURES = [
    "Long_Term_Fuel_Trim_Bank1",
    "Intake_air_pressure",
    "Accelerator_Pedal_value",
    "Fuel_consumption",
    "Torque_of_friction",
    "Maximum_indicated_engine_torque",
    "Engine_torque",
    "Calculated_LOAD_value",
    "Activation_of_Air_compressor",
    "Engine_coolant_temperature",
    "Transmission_oil_temperature",
    "Wheel_velocity_front_left-hand",
    "Wheel_velocity_front_right-hand",
    "Wheel_velocity_rear_left-hand",
    "Torque_converter_speed",
]


class DataFormatError(ValueError):
    """Raised for malformed dataset files; message carries file and line."""


@dataclass
class Dataset:
    x: np.ndarray  # (N, K, L) float64
    y: np.ndarray  # (N,) int64
    channel_names: list[str]
    class_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3:
            raise DataFormatError(f"examples must be (N, channels, length), got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise DataFormatError(f"{self.x.shape[0]} examples but {self.y.shape} labels")
        if self.x.shape[1] != len(self.channel_names):
            raise DataFormatError(
                f"{self.x.shape[1]} channels but {len(self.channel_names)} channel names"
            )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_channels(self) -> int:
        return self.x.shape[1]

    @property
    def length(self) -> int:
        return self.x.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        return Dataset(
            x=self.x[indices],
            y=self.y[indices],
            channel_names=list(self.channel_names),
            class_names=list(self.class_names),
            meta=dict(self.meta),
        )


@dataclass
class DatasetManifest:
    channel_names: list[str]
    class_names: list[str]
    n_train: int
    n_test: int
    normalization: dict[str, float] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["field", "value"])
            writer.writerow(["channels", ";".join(self.channel_names)])
            writer.writerow(["classes", ";".join(self.class_names)])
            writer.writerow(["n_train", self.n_train])
            writer.writerow(["n_test", self.n_test])
            for name, value in self.normalization.items():
                writer.writerow([f"norm/{name}", repr(value)])


# ------------------------------------------------------------------ caching

def save_dataset(path, dataset: Dataset) -> None:
    """Serialize to the flat binary container used for checkpoints."""
    arrays = {"data/x": dataset.x, "data/y": dataset.y.astype(np.float64)}
    for i, name in enumerate(dataset.channel_names):
        arrays[f"meta/channel/{i}/{name}"] = np.zeros(0)
    for i, name in enumerate(dataset.class_names):
        arrays[f"meta/class/{i}/{name}"] = np.zeros(0)
    for key, value in dataset.meta.items():
        if isinstance(value, (int, float)):
            arrays[f"meta/scalar/{key}"] = np.array(float(value))
    save_arrays(path, arrays)


def load_dataset(path) -> Dataset:
    arrays = load_arrays(path)
    if "data/x" not in arrays or "data/y" not in arrays:
        raise DataFormatError(f"{path}: not a dataset cache (missing data records)")
    channels: list[tuple[int, str]] = []
    classes: list[tuple[int, str]] = []
    meta: dict = {}
    for key in arrays:
        parts = key.split("/", 3)
        if key.startswith("meta/channel/"):
            channels.append((int(parts[2]), parts[3]))
        elif key.startswith("meta/class/"):
            classes.append((int(parts[2]), parts[3]))
        elif key.startswith("meta/scalar/"):
            meta[parts[2]] = float(arrays[key])
    return Dataset(
        x=arrays["data/x"],
        y=arrays["data/y"].astype(np.int64),
        channel_names=[name for _, name in sorted(channels)],
        class_names=[name for _, name in sorted(classes)],
        meta=meta,
    )


# -------------------------------------------------------------- HAR loading

def _read_signal_file(path: Path) -> np.ndarray:
    rows = []
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: missing signal file") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as ex:
            raise DataFormatError(f"{path}:{lineno}: non-numeric token ({ex})") from None
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"{path}: ragged rows")
    return arr


def _read_labels(path: Path, n_classes: int) -> np.ndarray:
    try:
        raw = path.read_text().split()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: missing label file") from None
    labels = np.array([int(tok) for tok in raw], dtype=np.int64)
    if labels.min() < 1 or labels.max() > n_classes:
        raise DataFormatError(f"{path}: labels outside 1..{n_classes}")
    return labels - 1  # 1-indexed activities to 0-based classes


def _har_split(root: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    sig_dir = root / split / "Inertial Signals"
    channels = []
    n_rows = None
    for name in HAR_CHANNELS:
        arr = _read_signal_file(sig_dir / f"{name}_{split}.txt")
        if n_rows is None:
            n_rows = arr.shape[0]
        elif arr.shape[0] != n_rows:
            raise DataFormatError(
                f"{sig_dir / name}: {arr.shape[0]} rows, other channels have {n_rows}"
            )
        channels.append(arr)
    labels = _read_labels(root / split / f"y_{split}.txt", len(HAR_CLASSES))
    if labels.shape[0] != n_rows:
        raise DataFormatError(
            f"{root / split}: {n_rows} signal rows but {labels.shape[0]} labels"
        )
    x = np.stack(channels, axis=1)  # (N, 9, 128)
    return x, labels


def load_har(root) -> tuple[Dataset, Dataset, DatasetManifest]:
    """Load the 9-channel inertial dataset from its stock text layout."""
    root = Path(root)
    x_train, y_train = _har_split(root, "train")
    x_test, y_test = _har_split(root, "test")

    # The distribution is pre-normalized; rescale defensively per channel if
    # anything exceeds [-1, 1], using training-split statistics only.
    norms: dict[str, float] = {}
    for k, name in enumerate(HAR_CHANNELS):
        peak = np.abs(x_train[:, k]).max()
        scale = peak if peak > 1.0 else 1.0
        norms[name] = float(scale)
        if scale > 1.0:
            x_train[:, k] /= scale
            x_test[:, k] /= scale
    x_test = np.clip(x_test, -1.0, 1.0)

    meta = {"source": "har"}
    train = Dataset(x_train, y_train, list(HAR_CHANNELS), list(HAR_CLASSES), dict(meta))
    test = Dataset(x_test, y_test, list(HAR_CHANNELS), list(HAR_CLASSES), dict(meta))
    manifest = DatasetManifest(
        channel_names=list(HAR_CHANNELS),
        class_names=list(HAR_CLASSES),
        n_train=len(train),
        n_test=len(test),
        normalization=norms,
    )
    return train, test, manifest


# ----------------------------------------------------------- driver loading

def load_driver(
    csv_path,
    window: int = 32,
    stride: int = 16,
    features: list[str] | None = None,
    driver_column: str = "Class",
    test_fraction: float = 0.2,
) -> tuple[Dataset, Dataset, DatasetManifest]:
    """Window the per-driver time series of a driving log CSV.

    Each selected feature becomes one channel; the trailing ``test_fraction``
    of every driver's windows forms the test split. Min-max constants come
    from the training split and map its range onto exactly [-1, 1].
    """
    features = list(features) if features is not None else list(DRIVER_FEATURES)
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataFormatError(f"{csv_path}: empty file")
        missing = [c for c in features + [driver_column] if c not in reader.fieldnames]
        if missing:
            raise DataFormatError(f"{csv_path}: unknown columns {missing}")
        series: dict[str, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                values = [float(row[c]) for c in features]
            except ValueError as ex:
                raise DataFormatError(f"{csv_path}:{lineno}: non-numeric value ({ex})") from None
            series.setdefault(row[driver_column], []).append(values)

    class_names = sorted(series)
    train_slabs, train_labels, test_slabs, test_labels = [], [], [], []
    for cls_idx, driver in enumerate(class_names):
        rows = np.array(series[driver], dtype=np.float64)  # (T, F)
        if rows.shape[0] < window:
            raise DataFormatError(
                f"{csv_path}: driver {driver!r} has {rows.shape[0]} rows, "
                f"shorter than window {window}"
            )
        starts = range(0, rows.shape[0] - window + 1, stride)
        windows = np.stack([rows[s : s + window].T for s in starts])  # (W, F, L)
        n_test = int(round(len(windows) * test_fraction))
        n_train = len(windows) - n_test
        train_slabs.append(windows[:n_train])
        test_slabs.append(windows[n_train:])
        train_labels.append(np.full(n_train, cls_idx, dtype=np.int64))
        test_labels.append(np.full(n_test, cls_idx, dtype=np.int64))

    x_train = np.concatenate(train_slabs)
    y_train = np.concatenate(train_labels)
    x_test = np.concatenate(test_slabs)
    y_test = np.concatenate(test_labels)

    norms: dict[str, float] = {}
    for k, name in enumerate(features):
        lo = x_train[:, k].min()
        hi = x_train[:, k].max()
        span = (hi - lo) or 1.0
        norms[f"{name}/min"] = float(lo)
        norms[f"{name}/max"] = float(hi)
        x_train[:, k] = 2.0 * (x_train[:, k] - lo) / span - 1.0
        x_test[:, k] = np.clip(2.0 * (x_test[:, k] - lo) / span - 1.0, -1.0, 1.0)

    meta = {"source": "driver", "window": window, "stride": stride}
    train = Dataset(x_train, y_train, features, class_names, dict(meta))
    test = Dataset(x_test, y_test, features, class_names, dict(meta))
    manifest = DatasetManifest(
        channel_names=features,
        class_names=class_names,
        n_train=len(train),
        n_test=len(test),
        normalization=norms,
    )
    return train, test, manifest


# ------------------------------------------------------------ synthetic data

def synth_dataset(
    k: int = 4,
    n_classes: int = 3,
    n: int = 2000,
    informative: dict[int, float] | list[int] | None = None,
    seed: int = 0,
    length: int = 32,
    noise: float = 0.05,
) -> Dataset:
    """Deterministic multimodal fixture.

    Informative channels carry a class-dependent sinusoid (distinct
    frequency per class) with slight amplitude jitter; uninformative
    channels are pure uniform noise, carrying no label information.
    """
    if informative is None:
        informative = {0: 1.0}
    if not isinstance(informative, dict):
        informative = {int(c): 1.0 for c in informative}
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, k, length))
    y = rng.integers(0, n_classes, size=n)
    t = np.arange(length) / length
    for i in range(n):
        freq = y[i] + 1.0
        for chan, strength in informative.items():
            wave = 0.8 * strength * np.sin(2 * np.pi * freq * t)
            x[i, chan] = np.clip(wave + noise * rng.standard_normal(length), -1.0, 1.0)
    return Dataset(
        x=x,
        y=y,
        channel_names=[f"chan_{i}" for i in range(k)],
        class_names=[f"class_{c}" for c in range(n_classes)],
        meta={"source": "synth", "seed": seed},
    )
