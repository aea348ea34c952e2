"""Sensor-failure simulation: noise models and failing-channel assignment.

A corrupted dataset keeps a configurable fraction of examples untouched and
replaces the failing channels of the rest with pure noise. Which channels
fail is governed by one of three schemes:

* fixed: one explicit channel list fails in every corrupted example;
* random: each corrupted example keeps ``n_rclean`` random channels clean;
* generation_test: the number of failing channels is drawn per example from
  a training-phase range or a (typically larger) test-phase range.

Every example owns an independent random stream derived from the master
seed and its index, so construction is reproducible and order-independent.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VALID_FAILURE_KINDS = ("uniform", "gaussian")
VALID_SCHEMES = ("fixed", "random", "generation_test")


@dataclass(frozen=True)
class FailureModel:
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in VALID_FAILURE_KINDS:
            raise ValueError(
                f"unknown failure model {self.kind!r}; expected one of {VALID_FAILURE_KINDS}"
            )


@dataclass(frozen=True)
class AssignmentScheme:
    """Which channels fail in a corrupted example.

    fixed: ``corrupted_channels`` (names) fail everywhere; ``n_fclean`` is
    the implied clean count and is validated when given. random: a uniform
    (n - n_rclean)-subset fails per example. generation_test: the failing
    count is drawn uniformly from ``train_range`` or ``test_range``
    (inclusive), then that many channels are chosen.
    """

    kind: str = "random"
    n_fclean: int | None = None
    corrupted_channels: tuple[str, ...] = ()
    n_rclean: int = 0
    train_range: tuple[int, int] = (0, 0)
    test_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in VALID_SCHEMES:
            raise ValueError(f"unknown assignment scheme {self.kind!r}; expected one of {VALID_SCHEMES}")
        object.__setattr__(self, "corrupted_channels", tuple(self.corrupted_channels))
        object.__setattr__(self, "train_range", tuple(int(v) for v in self.train_range))
        object.__setattr__(self, "test_range", tuple(int(v) for v in self.test_range))

    def validate(self, channel_names: list[str]) -> None:
        n = len(channel_names)
        if self.kind == "fixed":
            unknown = [c for c in self.corrupted_channels if c not in channel_names]
            if unknown:
                raise ValueError(f"fixed scheme names unknown channels {unknown}; have {channel_names}")
            if self.n_fclean is not None and self.n_fclean != n - len(self.corrupted_channels):
                raise ValueError(
                    f"n_fclean={self.n_fclean} inconsistent with {len(self.corrupted_channels)} "
                    f"corrupted channels out of {n}"
                )
        elif self.kind == "random":
            if not 0 <= self.n_rclean <= n:
                raise ValueError(f"n_rclean={self.n_rclean} outside [0, {n}]")
        else:
            for label, rng_ in (("train", self.train_range), ("test", self.test_range)):
                a, b = rng_
                if not (0 <= a <= b <= n):
                    raise ValueError(f"{label} failing-count range {rng_} invalid for {n} channels")


@dataclass(frozen=True)
class CorruptionSpec:
    failure: FailureModel = field(default_factory=FailureModel)
    scheme: AssignmentScheme = field(default_factory=AssignmentScheme)
    clean_fraction: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError(f"clean fraction {self.clean_fraction} outside [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        d = dict(d)
        failure = FailureModel(d.pop("failure", "uniform"))
        scheme = AssignmentScheme(**d.pop("scheme"))
        return cls(failure=failure, scheme=scheme, **d)

    def to_dict(self) -> dict:
        s = self.scheme
        scheme: dict = {"kind": s.kind}
        if s.kind == "fixed":
            scheme["corrupted_channels"] = list(s.corrupted_channels)
            if s.n_fclean is not None:
                scheme["n_fclean"] = s.n_fclean
        elif s.kind == "random":
            scheme["n_rclean"] = s.n_rclean
        else:
            scheme["train_range"] = list(s.train_range)
            scheme["test_range"] = list(s.test_range)
        return {
            "failure": self.failure.kind,
            "scheme": scheme,
            "clean_fraction": self.clean_fraction,
            "seed": self.seed,
        }


def corrupt_channel(channel: np.ndarray, model: FailureModel, rng: np.random.Generator) -> np.ndarray:
    """Replace every element with a fresh noise sample; shape preserved."""
    channel = np.asarray(channel)
    if model.kind == "uniform":
        return rng.uniform(-1.0, 1.0, size=channel.shape)
    return rng.standard_normal(channel.shape)


def assign_failing(
    scheme: AssignmentScheme,
    n: int,
    phase: str,
    rng: np.random.Generator,
    channel_names: list[str] | None = None,
) -> set[int]:
    """Failing channel indices for one example (fixed: for the dataset)."""
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    if scheme.kind == "fixed":
        if channel_names is None:
            raise ValueError("fixed scheme needs channel names to resolve its list")
        scheme.validate(channel_names)
        return {channel_names.index(c) for c in scheme.corrupted_channels}
    if scheme.kind == "random":
        if not 0 <= scheme.n_rclean <= n:
            raise ValueError(f"n_rclean={scheme.n_rclean} outside [0, {n}]")
        n_fail = n - scheme.n_rclean
    else:
        lo, hi = scheme.train_range if phase == "train" else scheme.test_range
        if not (0 <= lo <= hi <= n):
            raise ValueError(f"failing-count range ({lo}, {hi}) invalid for {n} channels")
        n_fail = int(rng.integers(lo, hi + 1))
    return set(rng.choice(n, size=n_fail, replace=False).tolist())


def _clean_count(n_examples: int, fraction: float) -> int:
    return int(round(n_examples * fraction))


def _example_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, 1, index])


@dataclass
class CorruptionManifest:
    """Per-example corruption record, written/read as CSV."""

    example_index: np.ndarray  # (N,) int
    is_clean: np.ndarray  # (N,) bool
    failing: list[tuple[str, ...]]  # failing channel names per example
    seed: int

    def failing_mask(self, channel_names: list[str]) -> np.ndarray:
        """(N, K) boolean: channel k failed in example i."""
        mask = np.zeros((len(self.failing), len(channel_names)), dtype=bool)
        lookup = {c: k for k, c in enumerate(channel_names)}
        for i, names in enumerate(self.failing):
            for c in names:
                mask[i, lookup[c]] = True
        return mask

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_index", "is_clean", "failing_channels", "seed"])
            for i, clean, names in zip(self.example_index, self.is_clean, self.failing):
                writer.writerow([int(i), int(clean), ";".join(names), self.seed])

    @classmethod
    def load(cls, path) -> "CorruptionManifest":
        idx, clean, failing, seed = [], [], [], 0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                idx.append(int(row["example_index"]))
                clean.append(bool(int(row["is_clean"])))
                names = row["failing_channels"]
                failing.append(tuple(names.split(";")) if names else ())
                seed = int(row["seed"])
        return cls(
            example_index=np.array(idx, dtype=np.int64),
            is_clean=np.array(clean, dtype=bool),
            failing=failing,
            seed=seed,
        )


def build_corrupted_dataset(dataset, spec: CorruptionSpec, phase: str = "train"):
    """Corrupted copy of ``dataset`` plus the manifest describing it.

    round(N * clean_fraction) examples, chosen from a dedicated stream of the
    master seed, stay bitwise untouched. Each remaining example draws its
    failing set and replacement noise from its own index-derived stream.
    """
    from .datasets import Dataset

    spec.scheme.validate(dataset.channel_names)
    x = dataset.x.copy()
    n_examples, n_channels, _ = x.shape
    names = dataset.channel_names

    n_clean = _clean_count(n_examples, spec.clean_fraction)
    selector = np.random.default_rng([spec.seed, 0])
    clean_idx = (
        selector.choice(n_examples, size=n_clean, replace=False) if n_examples else np.array([], dtype=int)
    )
    is_clean = np.zeros(n_examples, dtype=bool)
    is_clean[clean_idx] = True

    fixed_set: set[int] | None = None
    if spec.scheme.kind == "fixed":
        fixed_set = assign_failing(spec.scheme, n_channels, phase, selector, names)

    failing: list[tuple[str, ...]] = []
    for i in range(n_examples):
        if is_clean[i]:
            failing.append(())
            continue
        rng = _example_rng(spec.seed, i)
        fail = fixed_set if fixed_set is not None else assign_failing(spec.scheme, n_channels, phase, rng, names)
        for k in sorted(fail):
            x[i, k] = corrupt_channel(x[i, k], spec.failure, rng)
        failing.append(tuple(names[k] for k in sorted(fail)))

    manifest = CorruptionManifest(
        example_index=np.arange(n_examples, dtype=np.int64),
        is_clean=is_clean,
        failing=failing,
        seed=spec.seed,
    )
    corrupted = Dataset(
        x=x,
        y=dataset.y.copy(),
        channel_names=list(dataset.channel_names),
        class_names=list(dataset.class_names),
        meta={**dataset.meta, "corruption": spec.to_dict(), "phase": phase},
    )
    return corrupted, manifest


def dataset_digest(dataset) -> str:
    """Stable content hash of the example tensors and labels."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.x).tobytes())
    h.update(np.ascontiguousarray(dataset.y).tobytes())
    h.update(",".join(dataset.channel_names).encode())
    return h.hexdigest()
