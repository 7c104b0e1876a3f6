"""Command-line interface: train, eval, gradcheck, bench, inspect-checkpoint.

Option values override config-file values, which override the built-in
desk-scale defaults.  The output directory defaults to $SSMREID_OUTPUT_DIR.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import click

from . import bench as bench_mod
from . import checkpoint as ckpt_mod
from .config import TrainConfig, apply_overrides, desk_model_config, desk_train_config, parse_config_file
from .gradcheck import gradcheck_targets, run_gradcheck
from .synth import SynthSpec, desk_synth_spec, generate_synthetic_dataset
from .training import evaluate_model, train

_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthSpec)}


def _split_synth(values: dict[str, object]) -> tuple[dict, dict]:
    synth = {k: v for k, v in values.items() if k in _SYNTH_KEYS}
    other = {k: v for k, v in values.items() if k not in _SYNTH_KEYS}
    # geometry keys are shared between the model and the dataset
    for key in ("image_height", "image_width", "num_cameras"):
        if key in synth:
            other[key] = synth[key]
    return synth, other


def _build_configs(
    config_file: str | None, cli_values: dict[str, object]
) -> tuple[TrainConfig, SynthSpec]:
    file_values = parse_config_file(config_file) if config_file else {}
    cli_values = {k: v for k, v in cli_values.items() if v is not None}
    merged = dict(file_values)
    merged.update(cli_values)
    synth_values, model_train_values = _split_synth(merged)
    model_cfg, train_cfg = apply_overrides(
        desk_model_config(), desk_train_config(), model_train_values
    )
    spec_kwargs = {}
    for f in dataclasses.fields(SynthSpec):
        if f.name in synth_values:
            raw = synth_values[f.name]
            target = {"int": int, "float": float}[f.type]
            spec_kwargs[f.name] = target(raw) if isinstance(raw, str) else raw
    spec = desk_synth_spec(
        image_height=model_cfg.image_height,
        image_width=model_cfg.image_width,
        num_cameras=model_cfg.num_cameras,
        **{k: v for k, v in spec_kwargs.items()
           if k not in ("image_height", "image_width", "num_cameras")},
    )
    return train_cfg, spec


_train_options = [
    click.option("--epochs", type=int, default=None),
    click.option("--warmup-epochs", "warmup_epochs", type=int, default=None),
    click.option("--steps-per-epoch", "steps_per_epoch", type=int, default=None),
    click.option("--base-lr", "base_lr", type=float, default=None),
    click.option("--warmup-start-lr", "warmup_start_lr", type=float, default=None),
    click.option("--momentum", type=float, default=None),
    click.option("--weight-decay", "weight_decay", type=float, default=None),
    click.option("--batch-p", "batch_p", type=int, default=None),
    click.option("--batch-k", "batch_k", type=int, default=None),
    click.option("--margin", type=float, default=None),
    click.option("--label-smoothing", "label_smoothing", type=float, default=None),
    click.option("--ratr-weight", "ratr_weight", type=float, default=None),
    click.option("--ratr-tau", "ratr_tau", type=float, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--eval-every", "eval_every", type=int, default=None),
    click.option("--flip-aug/--no-flip-aug", "flip_aug", default=None),
    click.option("--crop-aug/--no-crop-aug", "crop_aug", default=None),
    click.option("--erase-aug/--no-erase-aug", "erase_aug", default=None),
    click.option("--image-height", "image_height", type=int, default=None),
    click.option("--image-width", "image_width", type=int, default=None),
    click.option("--patch-size", "patch_size", type=int, default=None),
    click.option("--stride", type=int, default=None),
    click.option("--embed-dim", "embed_dim", type=int, default=None),
    click.option("--num-class-tokens", "num_class_tokens", type=int, default=None),
    click.option("--num-cameras", "num_cameras", type=int, default=None),
    click.option("--side-weight", "side_weight", type=float, default=None),
    click.option("--depth", type=int, default=None),
    click.option("--state-dim", "state_dim", type=int, default=None),
    click.option("--expand", type=int, default=None),
    click.option("--conv-width", "conv_width", type=int, default=None),
    click.option("--reduction", type=int, default=None),
    click.option("--num-branches", "num_branches", type=int, default=None),
    click.option("--fusion", type=click.Choice(["min", "max", "avg", "gem"]), default=None),
    click.option("--drop-rate", "drop_rate", type=float, default=None),
    click.option("--num-identities", "num_identities", type=int, default=None),
    click.option("--images-per-identity", "images_per_identity", type=int, default=None),
    click.option("--noise-level", "noise_level", type=float, default=None),
    click.option("--camera-shift", "camera_shift", type=float, default=None),
    click.option("--pose-jitter", "pose_jitter", type=float, default=None),
    click.option("--eval-rounds", "eval_rounds", type=int, default=None),
]


def _with_train_options(command):
    for option in reversed(_train_options):
        command = option(command)
    return command


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Selective state-space re-identification harness."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command(name="train")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="Line-oriented key = value file; CLI flags take precedence.")
@click.option("--out", envvar="SSMREID_OUTPUT_DIR", default="ssmreid-out",
              type=click.Path(), show_default=True)
@_with_train_options
def train_cmd(config_file: str | None, out: str, **cli_values) -> None:
    """Train on the synthetic dataset and write metrics and a checkpoint."""
    cfg, spec = _build_configs(config_file, cli_values)
    dataset = generate_synthetic_dataset(spec, seed=cfg.seed)
    result = train(cfg, dataset, out_dir=out)
    retrieval = result.final_eval.retrieval
    click.echo(
        f"trained {cfg.total_steps} steps in {result.wall_seconds:.1f}s: "
        f"mAP={retrieval.mean_ap:.4f} r1={retrieval.cmc[1]:.4f}"
    )
    if result.final_eval.diversity is not None:
        div = result.final_eval.diversity
        click.echo(f"branch diversity: intra={div.intra:.4f} inter={div.inter:.4f}")
    click.echo(f"metrics: {result.csv_path}")
    click.echo(f"checkpoint: {result.checkpoint_path}")


@main.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              required=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@_with_train_options
def eval_cmd(checkpoint_path: str, config_file: str | None, **cli_values) -> None:
    """Evaluate a checkpoint on the synthetic query/gallery split."""
    cfg, spec = _build_configs(config_file, cli_values)
    ckpt = ckpt_mod.load_checkpoint(checkpoint_path)
    model = ckpt_mod.model_from_checkpoint(ckpt)
    dataset = generate_synthetic_dataset(spec, seed=cfg.seed)
    result = evaluate_model(model, dataset)
    retrieval = result.retrieval
    click.echo(f"mAP={retrieval.mean_ap:.4f}")
    for rank, value in retrieval.cmc.items():
        click.echo(f"r{rank}={value:.4f}")
    click.echo(f"excluded queries: {retrieval.num_excluded}")
    if result.diversity is not None:
        click.echo(
            f"branch diversity: intra={result.diversity.intra:.4f} "
            f"inter={result.diversity.inter:.4f}"
        )


@main.command(name="gradcheck")
@click.option("--target", type=click.Choice(gradcheck_targets() + ["all"]),
              default="all", show_default=True)
@click.option("--tolerance", type=float, default=1e-3, show_default=True)
def gradcheck_cmd(target: str, tolerance: float) -> None:
    """Compare analytic gradients against central finite differences."""
    names = gradcheck_targets() if target == "all" else [target]
    failed = False
    for name in names:
        report = run_gradcheck(name, tolerance=tolerance)
        click.echo(report.summary())
        failed |= not report.passed
    if failed:
        raise SystemExit(1)


@main.command(name="bench")
@click.option("--tokens", default="256,512,1024", show_default=True,
              help="Comma-separated token counts.")
@click.option("--repeats", type=int, default=20, show_default=True)
@click.option("--inner-dim", "inner_dim", type=int, default=96, show_default=True)
@click.option("--out", envvar="SSMREID_OUTPUT_DIR", default="ssmreid-out",
              type=click.Path(), show_default=True)
def bench_cmd(tokens: str, repeats: int, inner_dim: int, out: str) -> None:
    """Time the scan and a quadratic attention reference over token counts."""
    counts = [int(t) for t in tokens.split(",") if t.strip()]
    rows = bench_mod.bench_scaling(counts, repeats=repeats, inner_dim=inner_dim)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    bench_mod.write_bench_csv(rows, csv_path)
    for row in rows:
        click.echo(
            f"N={row.tokens}: scan {row.scan_ms:.3f} ms, "
            f"attention {row.attention_ms:.3f} ms"
        )
    for n, (scan_ratio, attn_ratio) in bench_mod.doubling_ratios(rows).items():
        click.echo(
            f"t(2N)/t(N) at N={n}: scan {scan_ratio:.2f}, attention {attn_ratio:.2f}"
        )
    click.echo(f"wrote {csv_path}")


@main.command(name="inspect-checkpoint")
@click.argument("path", type=click.Path(exists=True))
def inspect_cmd(path: str) -> None:
    """Print the manifest of a checkpoint archive."""
    ckpt = ckpt_mod.load_checkpoint(path)
    click.echo(ckpt_mod.describe_checkpoint(ckpt))


if __name__ == "__main__":
    main()
