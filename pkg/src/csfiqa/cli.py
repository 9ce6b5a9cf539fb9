"""Command-line interface for CSFIQA."""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar

import click
import typer

from .attention_dump import dump_attention
from .audit import RunLogger
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config_file, load_settings
from .data import load_dataset, synth_generate
from .errors import EXIT_OK, EXIT_USAGE, CsfiqaError, GradCheckError
from .gradsuite import default_config, run_suite
from .metrics import plcc, srcc, write_ablation, write_report
from .model import CsfiqaModel
from .train import Trainer, predict, run_ablation, run_protocol

F = TypeVar("F", bound=Callable[..., Any])

app = typer.Typer(
    name="csfiqa",
    help="Two-scale transformer image quality assessment",
    no_args_is_help=True,
    add_completion=False,
)


def _run_logger() -> RunLogger:
    return RunLogger(str(load_settings().expanded_log_path))


def guarded(command: str) -> Callable[[F], F]:
    """Report a CsfiqaError on stderr and in the run log, then exit with its code."""

    def decorate(fn: F) -> F:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            try:
                return fn(*args, **kwargs)
            except CsfiqaError as e:
                typer.echo(f"Error: {e}", err=True)
                _run_logger().log_error(command, str(e))
                raise typer.Exit(e.exit_code) from e

        return wrapper  # type: ignore[return-value]

    return decorate


@app.callback()
def main_callback() -> None:
    """Two-scale transformer image quality assessment."""
    settings = load_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load_config(path: Optional[Path], **overrides: Any) -> RunConfig:
    config = load_config_file(str(path) if path is not None else None)
    return config.with_overrides(**overrides)


@app.command("synth-data")
@guarded("synth-data")
def synth_data(
    n: int = typer.Option(..., "--n", min=1, help="Number of images"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
) -> None:
    """Render a synthetic distorted dataset and its manifest."""
    manifest = synth_generate(n, seed, out)
    typer.echo(f"wrote {len(manifest)} images to {out}")


@app.command()
@guarded("train")
def train(
    data: Path = typer.Option(..., "--data", help="Dataset manifest"),
    out_checkpoint: Path = typer.Option(..., "--out-checkpoint", help="Checkpoint to write"),
    config: Optional[Path] = typer.Option(None, "--config", help="key=value config file"),
    lambda_: Optional[float] = typer.Option(None, "--lambda", help="Auxiliary loss weight"),
    tau: Optional[float] = typer.Option(None, "--tau", help="Contrastive temperature"),
    beta_pair: Optional[float] = typer.Option(None, "--beta-pair", help="Positive-pair label distance"),
    alpha_k: Optional[float] = typer.Option(None, "--alpha-k", help="Lower top-k fraction"),
    beta_k: Optional[float] = typer.Option(None, "--beta-k", help="Upper top-k fraction"),
    repeats: Optional[int] = typer.Option(None, "--repeats", help="Protocol repeats"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Epochs per repeat"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Base seed"),
) -> None:
    """
    Run the repeated train/test protocol, save the first repeat's model and
    write the per-repeat metrics next to it.
    """
    run_config = _load_config(
        config,
        **{"lambda": lambda_},
        tau=tau,
        beta_pair=beta_pair,
        alpha_k=alpha_k,
        beta_k=beta_k,
        repeats=repeats,
        epochs=epochs,
        seed=seed,
    )
    samples = load_dataset(data, run_config.model)
    run_logger = _run_logger()

    def keep_first(repeat: int, trainer: Trainer) -> None:
        if repeat == 0:
            save_checkpoint(trainer.model, out_checkpoint)

    report = run_protocol(samples, run_config, run_logger, on_repeat=keep_first)
    metrics_path = Path(str(out_checkpoint) + ".metrics.csv")
    write_report(report, metrics_path)
    typer.echo(f"median_srcc={report.median_srcc!r} median_plcc={report.median_plcc!r} repeats={report.repeats}")
    typer.echo(f"checkpoint: {out_checkpoint}", err=True)
    typer.echo(f"metrics: {metrics_path}", err=True)


@app.command("eval")
@guarded("eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint file"),
    data: Path = typer.Option(..., "--data", help="Dataset manifest"),
) -> None:
    """Score every image of a dataset and report SRCC/PLCC."""
    model = load_checkpoint(checkpoint)
    samples = load_dataset(data, model.config.model)
    preds = predict(model, samples, model.config.train.batch_size)
    target = [s.mos for s in samples]
    typer.echo(f"srcc={srcc(preds, target)!r} plcc={plcc(preds, target)!r} n={len(samples)}")


@app.command()
@guarded("gradcheck")
def gradcheck(
    config: Optional[Path] = typer.Option(None, "--config", help="key=value config file (default: toy model)"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    max_entries: Optional[int] = typer.Option(
        None, "--max-entries", min=1, help="Entries checked per parameter tensor (default: all)"
    ),
) -> None:
    """Run the finite-difference gradient suite; fails unless every check passes."""
    run_config = default_config() if config is None else _load_config(config)
    results = run_suite(run_config, seed=seed, max_entries=max_entries)
    for result in results:
        mark = "ok  " if result.passed else "FAIL"
        typer.echo(f"{mark} {result.name:<22} {result.error:.3e}  ({result.worst_param}, {result.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradCheckError(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")
    typer.echo(f"all {len(results)} checks passed")


@app.command("dump-attn")
@guarded("dump-attn")
def dump_attn(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint file"),
    image: Path = typer.Option(..., "--image", help="PGM/PPM image"),
    out: Path = typer.Option(..., "--out", help="Text file to write"),
) -> None:
    """Write per-mask survivor sets and attention weights for one image."""
    model: CsfiqaModel = load_checkpoint(checkpoint)
    records = dump_attention(model, image, out)
    masks = sum(len(record.fractions) for record in records.values())
    typer.echo(f"wrote {masks} attention maps to {out}")


@app.command()
@guarded("ablate")
def ablate(
    data: Path = typer.Option(..., "--data", help="Dataset manifest"),
    out: Path = typer.Option(..., "--out", help="CSV to write"),
    config: Optional[Path] = typer.Option(None, "--config", help="key=value config file"),
    seeds: int = typer.Option(5, "--seeds", min=1, help="Paired seeds per variant"),
) -> None:
    """Compare the full model with its no-auxiliary-loss and dense-attention variants."""
    run_config = _load_config(config)
    samples = load_dataset(data, run_config.model)
    rows, inversions = run_ablation(samples, run_config, seeds, _run_logger())
    write_ablation(rows, out)
    for comparison, count in inversions.items():
        typer.echo(f"{comparison}: {count} inversion(s) over {seeds} seed(s)")


@app.command()
def status() -> None:
    """Show settings and the most recent protocol results."""
    settings = load_settings()
    typer.echo("Configuration:")
    typer.echo(f"  Log path: {settings.expanded_log_path}")
    typer.echo(f"  Log level: {settings.log_level}")

    entries = RunLogger(str(settings.expanded_log_path)).get_recent_entries(5, event="protocol")
    typer.echo("\nRecent runs:")
    if not entries:
        typer.echo("  none")
    for entry in entries:
        typer.echo(
            f"  {entry.get('timestamp')}  srcc={entry.get('median_srcc')} "
            f"plcc={entry.get('median_plcc')} repeats={entry.get('repeats')}"
        )


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Invoke the CLI and return its exit status instead of exiting.

    Usage errors exit with 1; CSFIQA errors exit with their own code.
    """
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = app(args=args, prog_name="csfiqa", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        typer.echo("Aborted", err=True)
        return EXIT_USAGE
    except click.exceptions.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.ClickException as e:
        e.show()
        return EXIT_USAGE
    except CsfiqaError as e:
        typer.echo(f"Error: {e}", err=True)
        return e.exit_code
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
