"""Command-line entry points.

Every command exits 0 on success; failures print a single ``error: ...``
line to stderr and exit 1. All randomness flows from explicit seeds in
configs or flags, so identical invocations produce identical artifacts.
"""

from __future__ import annotations

import functools
import sys
from dataclasses import replace
from pathlib import Path

import click
import yaml

from .autodiff.checkpoint import CheckpointError
from .corruption import CorruptionManifest, CorruptionSpec, build_corrupted_dataset, dataset_digest
from .datasets import DataFormatError, load_dataset, load_driver, load_har, save_dataset, synth_dataset
from .harness import (
    ExperimentConfig,
    TrainingAborted,
    collect_rows,
    evaluate_accuracy,
    fusion_weight_histogram,
    load_grid,
    render_table,
    run_experiment_grid,
    train as train_experiment,
    write_histograms_csv,
)

_EXPECTED = (
    ValueError,  # covers ConfigError / DataFormatError / variant & channel errors
    CheckpointError,
    TrainingAborted,
    DataFormatError,
    OSError,
)


def _fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _EXPECTED as ex:
            click.echo(f"error: {ex}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Regularized-gating sensor fusion: data prep, training, evaluation."""


@main.command("prepare-data")
@click.argument("dataset", type=click.Choice(["har", "driver", "synth"]))
@click.option("--root", type=click.Path(), help="har: dataset directory; driver: log CSV.")
@click.option("--out", "out_prefix", required=True, type=click.Path(), help="Cache path prefix.")
@click.option("--window", default=32, show_default=True, help="driver: window length.")
@click.option("--stride", default=16, show_default=True, help="driver: window stride.")
@click.option("--k", default=4, show_default=True, help="synth: channel count.")
@click.option("--classes", default=3, show_default=True, help="synth: class count.")
@click.option("--n-train", default=600, show_default=True, help="synth: training examples.")
@click.option("--n-test", default=300, show_default=True, help="synth: test examples.")
@click.option("--length", default=32, show_default=True, help="synth: channel length.")
@click.option("--informative", default="0", show_default=True, help="synth: channels carrying label signal, comma-separated.")
@click.option("--seed", default=0, show_default=True)
@_fail_cleanly
def prepare_data(dataset, root, out_prefix, window, stride, k, classes, n_train, n_test, length, informative, seed):
    """Load or generate a dataset and write binary train/test caches."""
    if dataset == "har":
        if not root:
            raise click.UsageError("har needs --root pointing at the dataset directory")
        train_ds, test_ds, manifest = load_har(root)
    elif dataset == "driver":
        if not root:
            raise click.UsageError("driver needs --root pointing at the log CSV")
        train_ds, test_ds, manifest = load_driver(root, window=window, stride=stride)
    else:
        channels = [int(tok) for tok in informative.split(",") if tok.strip()]
        train_ds = synth_dataset(
            k=k, n_classes=classes, n=n_train, informative=channels, seed=seed, length=length
        )
        test_ds = synth_dataset(
            k=k, n_classes=classes, n=n_test, informative=channels, seed=seed + 1, length=length
        )
        manifest = None
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    train_path = f"{out_prefix}.train.bin"
    test_path = f"{out_prefix}.test.bin"
    save_dataset(train_path, train_ds)
    save_dataset(test_path, test_ds)
    if manifest is not None:
        manifest.save(f"{out_prefix}.manifest.csv")
    click.echo(f"train: {len(train_ds)} examples -> {train_path}")
    click.echo(f"test: {len(test_ds)} examples -> {test_path}")


@main.command("corrupt")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True), help="YAML corruption spec.")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="Input dataset cache.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Corrupted dataset cache.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(), help="Per-example manifest CSV.")
@click.option("--phase", type=click.Choice(["train", "test"]), default="train", show_default=True)
@_fail_cleanly
def corrupt(spec_path, in_path, out_path, manifest_path, phase):
    """Apply a corruption spec to a cached dataset."""
    raw = yaml.safe_load(Path(spec_path).read_text())
    if not isinstance(raw, dict):
        raise DataFormatError(f"{spec_path}: expected a mapping")
    spec = CorruptionSpec.from_dict(raw)
    ds = load_dataset(in_path)
    corrupted, manifest = build_corrupted_dataset(ds, spec, phase=phase)
    save_dataset(out_path, corrupted)
    manifest.save(manifest_path)
    click.echo(f"corrupted {int((~manifest.is_clean).sum())}/{len(ds)} examples -> {out_path}")
    click.echo(f"digest: {dataset_digest(corrupted)}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Experiment YAML.")
@click.option("--seed", type=int, default=None, help="Override the config's seed list with one seed.")
@_fail_cleanly
def train(config_path, seed):
    """Train the configured variant; writes checkpoints and a run report."""
    config = ExperimentConfig.load(config_path)
    if seed is not None:
        config = replace(config, seeds=(seed,))
    checkpoints, report = train_experiment(config)
    for s, acc in zip(report.seeds, report.accuracies):
        click.echo(f"seed {s}: accuracy {acc:.2f}")
    click.echo(f"mean: {report.mean_accuracy:.2f} std: {report.std_accuracy:.2f}")
    for path in checkpoints:
        click.echo(f"checkpoint: {path}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True), help="Dataset cache.")
@_fail_cleanly
def eval_command(checkpoint, data_path):
    """Accuracy of a stored model on a cached dataset."""
    ds = load_dataset(data_path)
    acc = evaluate_accuracy(checkpoint, ds)
    click.echo(f"accuracy: {acc:.2f}")


@main.command("fwdist")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True), help="Dataset cache.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True), help="Corruption manifest CSV.")
@click.option("--channel", required=True, help="Channel name to condition on.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Histogram CSV.")
@_fail_cleanly
def fwdist(checkpoint, data_path, manifest_path, channel, out_path):
    """Fusion-weight histograms for one channel, split clean vs corrupted."""
    ds = load_dataset(data_path)
    manifest = CorruptionManifest.load(manifest_path)
    hists = fusion_weight_histogram(checkpoint, ds, manifest, channel)
    write_histograms_csv(out_path, channel, hists)
    for condition, h in hists.items():
        if h.empty:
            click.echo(f"{condition}: empty (no examples in this condition)")
        else:
            click.echo(f"{condition}: n={h.count} mean={h.mean:.4f}")
    click.echo(f"histograms -> {out_path}")


@main.command("grid")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Grid YAML.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Artifact directory.")
@_fail_cleanly
def grid(config_path, out_dir):
    """Run every cell of an experiment grid; failures are recorded, not fatal."""
    configs = load_grid(config_path)
    rows = run_experiment_grid(configs, out_dir)
    click.echo(render_table(rows, "csv"), nl=False)


@main.command("report")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True), help="Results directory.")
@click.option("--format", "fmt", type=click.Choice(["csv", "md"]), default="csv", show_default=True)
@_fail_cleanly
def report(in_dir, fmt):
    """Aggregate stored run reports into an accuracy table."""
    rows = collect_rows(in_dir)
    click.echo(render_table(rows, fmt), nl=False)


if __name__ == "__main__":
    main()
