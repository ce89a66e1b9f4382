#cli.py

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import typer
from dotenv import load_dotenv

from .bench import run_bench
from .config import (
    OUTPUT_DIR_ENV,
    AggregateMode,
    BenchConfig,
    CostTransform,
    DecoderKind,
    MatchingConfig,
    MatchingScheme,
    SceneConfig,
    load_train_config,
    validate_model,
)
from .core import PointAnnotation
from .counter import load_checkpoint
from .exceptions import NanLossError, P2RError, UsageError
from .loss import confidence_for, confidence_vector, weighted_bce
from .manifest import utc_now, write_manifest
from .matching import build_matcher
from .psam import compute_psam, omega
from .scenes import SceneSample, generate_dataset, load_dataset
from .semisup import (
    evaluate,
    mean_sorted_psam,
    predicted_counts,
    record_pseudo_labels,
    run_breakdown_study,
    save_result,
    timing_path,
    train,
)
from .utils import (
    load_features,
    load_points_with_scores,
    load_scores,
    save_array,
    save_csv,
    save_points,
    setup_logging,
    write_json,
)

logger = logging.getLogger(__name__)

app = typer.Typer(help="Point-to-region matching for semi-supervised point counting.")


@contextmanager
def handle_errors():
    """Report domain errors as one ``CODE: message`` line on stderr and exit with their code."""
    try:
        yield
    except P2RError as e:
        logger.debug("command failed", exc_info=True)
        if isinstance(e, NanLossError) and e.record:
            logger.error(f"Training aborted: {json.dumps(e.record, sort_keys=True)}")
        typer.echo(e.one_line(), err=True)
        raise typer.Exit(code=e.exit_code)


def _output_dir(out: Optional[Path], default: Optional[str] = None) -> Path:
    if out is not None:
        return out
    return Path(os.getenv(OUTPUT_DIR_ENV, default or "output"))


def _parse_range(text: str) -> Tuple[int, int]:
    try:
        low, high = (int(part) for part in text.split("..", 1))
    except ValueError:
        raise UsageError(f"expected a range like 4..12, got {text!r}")
    return low, high


@app.callback()
def main(
    ctx: typer.Context,
    log_level: str = typer.Option("INFO", envvar="P2R_LOG_LEVEL", help="Logging level"),
    quiet: bool = typer.Option(False, "--quiet", help="Only log warnings and hide progress bars"),
):
    """Global callback configuring logging and environment."""
    load_dotenv()
    setup_logging(log_level, quiet=quiet)
    ctx.obj = {"quiet": quiet}


@app.command()
def gen(
    scenes: int = typer.Option(200, help="Number of training scenes"),
    val_scenes: int = typer.Option(40, help="Number of validation scenes"),
    points_range: str = typer.Option("4..12", help="Points per scene as a..b"),
    size: Tuple[int, int] = typer.Option((24, 24), help="Grid height and width"),
    channels: int = typer.Option(4, help="Feature channels"),
    noise: float = typer.Option(0.1, help="Feature noise standard deviation"),
    labeled_frac: float = typer.Option(0.05, help="Fraction of training scenes with labels"),
    domain_shift: float = typer.Option(0.0, help="Validation-domain noise and amplitude shift"),
    seed: int = typer.Option(0, help="Random seed"),
    out: Optional[Path] = typer.Option(None, help="Dataset directory"),
):
    """Generate a synthetic scene dataset."""
    started = utc_now()
    with handle_errors():
        points_min, points_max = _parse_range(points_range)
        config = validate_model(SceneConfig, {
            "scenes": scenes, "val_scenes": val_scenes, "points_min": points_min, "points_max": points_max,
            "height": size[0], "width": size[1], "channels": channels, "noise_sigma": noise,
            "labeled_frac": labeled_frac, "domain_shift": domain_shift, "seed": seed,
        })
        out_dir = _output_dir(out, "data")
        dataset = generate_dataset(config, out_dir)
        outputs = [out_dir / "manifest.csv"] + sorted((out_dir / "scenes").iterdir())
        write_manifest(out_dir, "gen", config.model_dump(mode="json"), seed, started, outputs)
        typer.echo(f"Dataset written to: {out_dir} ({len(dataset.labeled)} labeled)")


@app.command()
def match(
    scheme: MatchingScheme = typer.Option(MatchingScheme.P2R, help="Matching scheme"),
    pred: Path = typer.Option(..., help="Score map tensor file"),
    gt: Path = typer.Option(..., help="Point CSV (row,col[,score])"),
    tau: float = typer.Option(8.0, help="Distance weight in the matching cost"),
    mu: Optional[float] = typer.Option(None, help="Region radius (p2r only)"),
    transform: CostTransform = typer.Option(CostTransform.INVERSE_SIGMOID, help="Score transform in the cost"),
    pseudo_scores: bool = typer.Option(False, "--pseudo-scores", help="Treat the score column of --gt as pseudo-label scores"),
    eta: float = typer.Option(0.7, help="Confidence threshold for pseudo-label scores"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
):
    """Build the learning objective for one score map and point set."""
    started = utc_now()
    with handle_errors():
        if scheme == MatchingScheme.P2P and mu is not None:
            raise UsageError("--mu only applies to the p2r scheme")
        if scheme == MatchingScheme.P2R and mu is None:
            raise UsageError("the p2r scheme requires --mu")
        matching = validate_model(MatchingConfig, {"tau": tau, "mu": mu, "cost_score_transform": transform})
        scores = load_scores(pred)
        points, point_scores = load_points_with_scores(gt)
        points.within(scores.height, scores.width)
        result = build_matcher(scheme, matching).objective(scores, points)

        out_dir = _output_dir(out)
        grid = (scores.height, scores.width)
        outputs = [
            save_array(result.objective.reshape(grid), out_dir / "objective.p2rt"),
            save_csv(out_dir / "region.csv", ["row", "col", "value"], result.region_matrix.triplets()),
            save_csv(
                out_dir / "chosen.csv",
                ["point", "pixel", "row", "col"],
                [(j, int(i), int(i) // scores.width, int(i) % scores.width) for j, i in enumerate(result.chosen_pixels)],
            ),
        ]
        summary: Dict[str, Any] = {
            "scheme": scheme.value,
            "n": scores.n,
            "m": points.m,
            "total_cost": result.total_cost,
            "foreground": int(result.objective.sum()),
            "region_rows": int(result.region_matrix.matched_rows().size),
            "bce": weighted_bce(scores, result.objective).total,
        }
        if pseudo_scores:
            if point_scores is None:
                raise UsageError("--pseudo-scores needs a 'score' column in the point file")
            z = confidence_for(result, confidence_vector(point_scores, eta))
            outputs.append(save_array(z.weights.reshape(grid), out_dir / "confidence.p2rt"))
            summary["confident_pixels"] = int(z.weights.sum())
        outputs.append(write_json(out_dir / "summary.json", summary))
        config = {**matching.model_dump(mode="json"), "scheme": scheme.value, "eta": eta}
        write_manifest(out_dir, "match", config, None, started, outputs)
        typer.echo(json.dumps(summary, sort_keys=True))


@app.command()
def psam(
    features: Path = typer.Option(..., help="Feature map tensor file"),
    checkpoint: Path = typer.Option(..., help="Checkpoint meta file or stem"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
    aggregate: AggregateMode = typer.Option(AggregateMode.MEAN, help="Aggregation over foreground points"),
    radius: Optional[int] = typer.Option(None, help="Expected receptive field"),
    chunk_size: int = typer.Option(16, help="Blocks processed per chunk"),
):
    """Export point-specific activation maps for every foreground pixel."""
    started = utc_now()
    with handle_errors():
        decoder = load_checkpoint(checkpoint)
        if radius is not None and radius != decoder.radius:
            raise UsageError(f"receptive field mismatch: checkpoint uses {decoder.radius}, requested {radius}")
        feature_map = load_features(features)
        result = compute_psam(feature_map, decoder, chunk_size=chunk_size)
        out_dir = _output_dir(out)
        width = feature_map.width
        fg = result.foreground
        outputs = [
            save_array(result.patches[fg], out_dir / "patches.p2rt"),
            save_array(result.aggregate(aggregate), out_dir / f"aggregate_{aggregate.value}.p2rt"),
            save_csv(
                out_dir / "foreground.csv",
                ["point", "pixel", "row", "col", "score", "top", "left"],
                [
                    (j, int(q), int(q) // width, int(q) % width, float(result.scores.values[q]),
                     omega(int(q), decoder.radius, width).top, omega(int(q), decoder.radius, width).left)
                    for j, q in enumerate(fg)
                ],
            ),
            save_csv(out_dir / "sorted_values.csv", ["rank", "value"], enumerate(result.sorted_values().tolist())),
        ]
        config = {"aggregate": aggregate.value, "chunk_size": chunk_size, "radius": decoder.radius}
        write_manifest(out_dir, "psam", config, None, started, outputs)
        typer.echo(f"{fg.size} foreground points; PSAM written to: {out_dir}")


@app.command("train")
def train_command(
    ctx: typer.Context,
    data: Path = typer.Option(..., help="Dataset directory"),
    scheme: Optional[MatchingScheme] = typer.Option(None, help="Matching scheme"),
    config: Optional[str] = typer.Option(None, help="Config file (key = value lines or YAML)"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
    full_scale: bool = typer.Option(False, "--full-scale", help="Start from the full-scale hyperparameters instead of the desk profile"),
    epochs: Optional[int] = typer.Option(None),
    warmup_epochs: Optional[int] = typer.Option(None),
    iterations_per_epoch: Optional[int] = typer.Option(None),
    alpha_step: Optional[float] = typer.Option(None),
    alpha_cap: Optional[float] = typer.Option(None),
    eta: Optional[float] = typer.Option(None),
    tau: Optional[float] = typer.Option(None),
    mu: Optional[float] = typer.Option(None),
    lambda_: Optional[float] = typer.Option(None, "--lambda"),
    ema_momentum: Optional[float] = typer.Option(None),
    lr_decoder: Optional[float] = typer.Option(None),
    batch_size: Optional[int] = typer.Option(None),
    decoder: Optional[DecoderKind] = typer.Option(None),
    radius: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
):
    """Train student and teacher decoders on a scene dataset."""
    started = utc_now()
    with handle_errors():
        overrides = {
            "matching_scheme": scheme, "epochs": epochs, "warmup_epochs": warmup_epochs,
            "iterations_per_epoch": iterations_per_epoch, "alpha_step": alpha_step, "alpha_cap": alpha_cap,
            "eta": eta, "tau": tau, "mu": mu, "lambda": lambda_, "ema_momentum": ema_momentum,
            "lr_decoder": lr_decoder, "batch_size": batch_size, "decoder": decoder, "radius": radius, "seed": seed,
        }
        train_config = load_train_config(config, overrides, desk=not full_scale)
        dataset = load_dataset(data)
        out_dir = _output_dir(out)
        log_path = out_dir / "train.log.jsonl"
        result = train(dataset, train_config, log_path=log_path, progress=not ctx.obj["quiet"])
        outputs = [log_path, timing_path(log_path), write_json(out_dir / "config.json", train_config.snapshot())]
        for meta in save_result(result, out_dir):
            stem = meta.name[: -len(".meta.json")]
            outputs += [meta, meta.with_name(f"{stem}.weights.p2rt"), meta.with_name(f"{stem}.bias.p2rt")]
        write_manifest(out_dir, "train", train_config.snapshot(), train_config.seed, started, outputs)
        final = result.records[-1]
        typer.echo(json.dumps({"val_mae": final["val_mae"], "val_mse": final["val_mse"]}))


@app.command("eval")
def eval_command(
    data: Path = typer.Option(..., help="Dataset directory"),
    checkpoint: Path = typer.Option(..., help="Checkpoint meta file or stem"),
    split: str = typer.Option("val", help="val, train or all"),
    out: Optional[Path] = typer.Option(None, help="Output directory (defaults to the current directory)"),
):
    """Print MAE and MSE of a checkpoint on a dataset split as JSON."""
    started = utc_now()
    with handle_errors():
        dataset = load_dataset(data)
        samples = {"val": dataset.val, "train": dataset.train, "all": dataset.train + dataset.val}.get(split)
        if samples is None:
            raise UsageError(f"unknown split {split!r}; expected val, train or all")
        model = load_checkpoint(checkpoint)
        mae, mse = evaluate(model, samples)
        counts = predicted_counts(model, samples)
        report = {"mae": mae, "mse": mse, "scenes": len(samples), "mean_count": float(np.mean(counts)), "split": split}
        out_dir = out if out is not None else Path.cwd()
        outputs = [write_json(out_dir / "eval.json", report)]
        write_manifest(out_dir, "eval", {"split": split, "checkpoint": str(checkpoint)}, None, started, outputs)
        typer.echo(json.dumps(report, sort_keys=True))


@app.command()
def bench(
    n: int = typer.Option(8640, help="Pixels"),
    m: int = typer.Option(775, help="Points"),
    repeats: int = typer.Option(20, help="Timed repeats"),
    seed: int = typer.Option(0, help="Instance seed"),
    parallel: bool = typer.Option(False, "--parallel", help="Spread repeats over worker processes"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
):
    """Time the full P2P and P2R losses on one random instance."""
    started = utc_now()
    with handle_errors():
        config = validate_model(BenchConfig, {"n": n, "m": m, "repeats": repeats, "seed": seed, "parallel": parallel})
        report = run_bench(config)
        out_dir = _output_dir(out)
        outputs = report.write(out_dir)
        write_manifest(out_dir, "bench", config.model_dump(mode="json"), seed, started, outputs)
        typer.echo(json.dumps(report.to_dict(), sort_keys=True))


@app.command()
def study(
    ctx: typer.Context,
    data: Path = typer.Option(..., help="Dataset directory"),
    config: Optional[str] = typer.Option(None, help="Config file"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
    observe_epochs: int = typer.Option(100, help="P2P epochs observed after warmup"),
):
    """Reproduce the P2P breakdown against a labeled-only baseline and P2R."""
    started = utc_now()
    with handle_errors():
        train_config = load_train_config(config)
        dataset = load_dataset(data)
        out_dir = _output_dir(out)
        report = run_breakdown_study(
            dataset, train_config, observe_epochs=observe_epochs, out_dir=out_dir, progress=not ctx.obj["quiet"]
        )
        outputs: List[Path] = [write_json(out_dir / "study.json", report.summary())]
        outputs += sorted(out_dir.glob("*.jsonl"))
        if "model_l" in report.models and "model_u" in report.models:
            outputs += [
                save_csv(
                    out_dir / "psam_sorted.csv",
                    ["rank", "model_l", "model_u"],
                    _sorted_rows(report, dataset.val),
                )
            ]
        write_manifest(out_dir, "study", train_config.snapshot(), train_config.seed, started, outputs)
        typer.echo(json.dumps(report.summary(), sort_keys=True))


def _sorted_rows(report, samples) -> List[Tuple[int, float, float]]:
    lower = mean_sorted_psam(report.models["model_l"], samples)
    upper = mean_sorted_psam(report.models["model_u"], samples)
    size = min(lower.size, upper.size)
    return [(k, float(lower[k]), float(upper[k])) for k in range(size)]


@app.command()
def pseudo(
    features: Path = typer.Option(..., help="Feature map tensor file"),
    checkpoint: Path = typer.Option(..., help="Teacher checkpoint meta file or stem"),
    eta: float = typer.Option(0.7, help="Confidence threshold"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
):
    """Export teacher pseudo points with scores and their confidence gate."""
    started = utc_now()
    with handle_errors():
        teacher = load_checkpoint(checkpoint)
        sample = SceneSample(load_features(features), PointAnnotation.empty())
        labels = record_pseudo_labels(teacher, sample, eta)
        out_dir = _output_dir(out)
        outputs = [
            save_points(labels.points, out_dir / "pseudo_points.csv", scores=labels.scores),
            save_csv(out_dir / "confident.csv", ["point", "zeta"], [(j, int(z)) for j, z in enumerate(labels.confident)]),
        ]
        write_manifest(out_dir, "pseudo", {"eta": eta, "checkpoint": str(checkpoint)}, None, started, outputs)
        typer.echo(f"{labels.points.m} pseudo points, {int(labels.confident.sum())} confident")


if __name__ == "__main__":
    app()
