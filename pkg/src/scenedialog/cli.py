"""Command-line interface: generate, corrupt, train-detector, train, evaluate, report."""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click

from . import datagen, missingness, perception, pipeline
from .core import SceneDialogError, save_scenes_jsonl


def _fail(exc: Exception) -> None:
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
    sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SceneDialogError, OSError, json.JSONDecodeError) as exc:
            _fail(exc)

    return wrapper


@click.group()
def main():
    """Scene graph generation with dialog-supplemented missing visions."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def generate(config_path, out_dir):
    """Generate a synthetic dataset: scenes.jsonl, vocab.json, gen-manifest.json."""
    cfg = pipeline.ExperimentConfig.load(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = datagen.generate_dataset(cfg.gen)
    save_scenes_jsonl(scenes, out / "scenes.jsonl")
    vocab = datagen.default_vocabulary(cfg.gen)
    (out / "vocab.json").write_text(json.dumps(vocab.to_json_obj(), indent=2) + "\n")
    manifest = {
        "gen": dataclasses.asdict(cfg.gen),
        "seeds": [cfg.gen.seed + i for i in range(cfg.gen.scenes)],
    }
    (out / "gen-manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"wrote {len(scenes)} scenes to {out}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--kind", required=True, type=click.Choice(missingness.CORRUPTION_KINDS))
@click.option("--sigma", default=1.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def corrupt(in_path, kind, sigma, out_path):
    """Apply one corruption level to every scene in a JSONL file."""
    scenes = datagen.load_vg_subset(in_path)
    spec = missingness.CorruptionSpec(
        kind=kind, sigma=sigma if kind in ("object_blur", "image_blur") else 0.0
    )
    corrupted = missingness.apply_dataset(scenes, spec)
    missingness.save_corrupted_jsonl(corrupted, out_path)
    click.echo(f"wrote {len(corrupted)} corrupted scenes to {out_path}")


@main.command("train-detector")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--classes", "num_classes", default=None, type=int)
@handle_errors
def train_detector(data_path, out_path, num_classes):
    """Stage 1: fit the detector on corrupted scenes."""
    corrupted = missingness.load_corrupted_jsonl(data_path)
    params = perception.train_detector(corrupted, num_classes=num_classes)
    params.save(out_path)
    acc = perception.train_accuracy(corrupted, params)
    click.echo(f"detector saved to {out_path} (train accuracy {acc:.3f})")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int, help="override the config seed list")
@click.option("--out", "out_dir", default=None, type=click.Path())
@handle_errors
def train(config_path, seed, out_dir):
    """Stage 1 + stage 2 for the configured (corruption, arm) cell."""
    cfg = pipeline.ExperimentConfig.load(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[seed])
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=out_dir)
    record = pipeline.train(cfg)
    click.echo(
        f"trained arm={cfg.arm} corruption={record.corruption.kind} "
        f"seeds={record.seeds} in {record.wall_clock_s:.1f}s"
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option(
    "--protocol",
    "protocols",
    multiple=True,
    type=click.Choice(pipeline.PROTOCOLS),
    help="protocols to evaluate (default: all)",
)
@handle_errors
def evaluate(config_path, seed, out_dir, protocols):
    """Evaluate trained artifacts; writes report.json and transcripts."""
    cfg = pipeline.ExperimentConfig.load(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[seed])
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=out_dir)
    if len(cfg.corruptions) != 1:
        raise SceneDialogError("evaluate expects exactly one corruption in the config")
    record = pipeline.RunRecord(
        config_hash=cfg.config_hash(),
        arm=cfg.arm,
        corruption=cfg.corruptions[0],
        seeds=list(cfg.seeds),
    )
    reports = pipeline.evaluate(
        cfg, record, protocols=list(protocols) or pipeline.PROTOCOLS
    )
    for s, report in reports.items():
        for proto, by_k in report.mean_recall.items():
            values = " ".join(f"mR@{k}={v:.4f}" for k, v in sorted(by_k.items()))
            click.echo(f"seed {s} {proto}: {values}")
    click.echo(f"report written to {Path(cfg.out_dir) / 'report.json'}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option(
    "--protocol",
    "protocols",
    multiple=True,
    type=click.Choice(pipeline.PROTOCOLS),
)
@handle_errors
def report(config_path, out_dir, protocols):
    """Run the full corruption x arm matrix and emit table.md / table.csv."""
    cfg = pipeline.ExperimentConfig.load(config_path)
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=out_dir)
    cells = pipeline.run_experiment(cfg, protocols=list(protocols) or pipeline.PROTOCOLS)
    pipeline.write_experiment_outputs(cfg.out_dir, cells)
    click.echo(pipeline.render_experiment_table(cells))
    if any(cell.error for cell in cells):
        sys.exit(2)


if __name__ == "__main__":
    main()
