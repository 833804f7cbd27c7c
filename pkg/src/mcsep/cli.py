"""Command-line entry point: ``mcsep [--workdir D] [--config F] [--jobs N] <command>``.

Settings come from an optional ``key = value`` file and are overridden by
flags.  Failures print one line ``error kind=<Type> msg="<text>"`` to stderr
and exit nonzero (1 for runtime errors, 2 for usage errors).
"""

from __future__ import annotations

import json
import sys
from collections import Counter
from pathlib import Path

import click

from . import pipeline
from .formats import FormatError, load_checkpoint, parse_config
from .losses import KINDS as LOSS_KINDS
from .metrics import format_table
from .features import MODES
from .room import BUCKET_NAMES, SceneSamplingError
from .train import TrainingDiverged
from .wavio import WavFormatError, atomic_write_text

RUNTIME_ERRORS = (pipeline.PipelineError, FormatError, WavFormatError, SceneSamplingError, TrainingDiverged,
                  ValueError, OSError, FloatingPointError)


class _State:
    def __init__(self, workdir: Path, base: dict, jobs):
        self.workdir = workdir
        self.base = base
        self.jobs = jobs

    def config(self, **flags) -> pipeline.ExperimentConfig:
        values = dict(self.base)
        if self.jobs is not None:
            values["jobs"] = self.jobs
        values.update({k: v for k, v in flags.items() if v is not None})
        return pipeline.ExperimentConfig.from_mapping(values)


@click.group()
@click.option("--workdir", type=click.Path(file_okay=False, path_type=Path), default=Path("."),
              show_default=True, help="Root for every input and output path.")
@click.option("--config", "config_file", type=click.Path(dir_okay=False, path_type=Path),
              help="key = value settings file; flags take precedence.")
@click.option("--jobs", type=click.IntRange(1), help="Worker processes for per-utterance work.")
@click.pass_context
def main(ctx, workdir: Path, config_file: Path | None, jobs: int | None):
    """Multi-channel mask-based speech separation experiments."""
    base = {}
    if config_file is not None:
        path = config_file if config_file.is_absolute() else workdir / config_file
        if not path.exists() and config_file.exists():
            path = config_file
        if not path.exists():
            raise pipeline.PipelineError(f"config file not found: {config_file}")
        base = parse_config(path.read_text())
    ctx.obj = _State(workdir, base, jobs)


@main.command()
@click.option("--manifest", default="manifest.tsv", show_default=True)
@click.option("--count", type=click.IntRange(0), help="Number of utterances.")
@click.option("--seed", type=int, help="Scene and source seed.")
@click.option("--sources", "n_sources", type=click.IntRange(1), help="Speakers per mixture.")
@click.option("--duration", type=float, help="Utterance length in seconds.")
@click.option("--room-min", help="Smallest room as L,W,H metres.")
@click.option("--room-max", help="Largest room as L,W,H metres.")
@click.option("--t60-range", help="Reverberation time range as lo,hi seconds.")
@click.option("--snr-range", help="Level difference range in dB as lo,hi.")
@click.pass_obj
def datagen(state: _State, manifest: str, **flags):
    """Simulate rooms, write mixtures, references and a manifest."""
    cfg = state.config(**flags)
    path = pipeline.datagen(state.workdir, cfg, manifest)
    rows = pipeline.load_manifest(state.workdir, manifest) if cfg.count else []
    hist = Counter(r.bucket for r in rows)
    click.echo(f"wrote {len(rows)} utterances to {path}")
    if rows:
        click.echo("  ".join(f"{b}:{hist.get(b, 0)}" for b in BUCKET_NAMES))


@main.command("oracle-eval")
@click.option("--manifest", default="manifest.tsv", show_default=True)
@click.option("--masks", "mask_kinds", help="Comma-separated subset of IBM,IAM,IRM,IPSM.")
@click.option("--irm-power/--irm-magnitude", default=None, help="Power-ratio IRM instead of magnitude ratio.")
@click.option("--reference", type=click.Choice(["reverberant", "dry"]))
@click.option("--filter-len", type=click.IntRange(1), help="SDR distortion filter length.")
@click.option("--write-estimates/--no-write-estimates", default=None)
@click.pass_obj
def oracle_eval(state: _State, manifest: str, **flags):
    """Separate with oracle masks and score against the references."""
    cfg = state.config(**flags)
    reports = pipeline.oracle_eval(state.workdir, cfg, manifest)
    click.echo(format_table(reports.values(), "si_snr"))
    click.echo(format_table(reports.values(), "sdr"), nl=False)


@main.command("train")
@click.option("--manifest", default="manifest.tsv", show_default=True)
@click.option("--name", help="Model directory under models/ (default: the feature mode).")
@click.option("--feature-mode", type=click.Choice(MODES))
@click.option("--loss", type=click.Choice(LOSS_KINDS))
@click.option("--lr", type=click.FloatRange(0))
@click.option("--steps", type=click.IntRange(1))
@click.option("--batch-size", type=click.IntRange(1))
@click.option("--clip", type=click.FloatRange(0, min_open=True))
@click.option("--hidden", help="Hidden layer widths, comma-separated.")
@click.option("--train-seed", type=int)
@click.option("--reference", type=click.Choice(["reverberant", "dry"]))
@click.option("--quiet", is_flag=True, help="No progress lines.")
@click.pass_obj
def train_cmd(state: _State, manifest: str, name: str | None, quiet: bool, **flags):
    """Fit the mask estimator and write checkpoint, loss curve and config."""
    cfg = state.config(**flags)

    def progress(step, value, norm):
        if (step + 1) % 100 == 0 or step == 0:
            click.echo(f"step {step + 1:5d}  loss {value:9.4f}  grad {norm:.3g}", err=True)

    ckpt = pipeline.train_model(state.workdir, cfg, manifest, name, None if quiet else progress)
    click.echo(f"checkpoint {ckpt}")


@main.command("eval")
@click.option("--manifest", default="manifest.tsv", show_default=True)
@click.option("--checkpoint", required=True, help="Checkpoint path relative to the workdir.")
@click.option("--name", help="Report label (default: the checkpoint directory name).")
@click.option("--feature-mode", type=click.Choice(MODES),
              help="Defaults to the mode stored in the checkpoint.")
@click.option("--reference", type=click.Choice(["reverberant", "dry"]))
@click.option("--filter-len", type=click.IntRange(1))
@click.pass_obj
def eval_cmd(state: _State, manifest: str, checkpoint: str, name: str | None, **flags):
    """Score a trained estimator on a manifest."""
    if flags["feature_mode"] is None and "feature_mode" not in state.base:
        path = state.workdir / checkpoint
        if path.exists():
            flags["feature_mode"] = load_checkpoint(path).feature_mode
    cfg = state.config(**flags)
    rep = pipeline.eval_model(state.workdir, cfg, checkpoint, manifest, name)
    click.echo(format_table([rep], "si_snr"))
    click.echo(format_table([rep], "sdr"), nl=False)


@main.command()
@click.option("--out", default="report", show_default=True, help="Output directory under the workdir.")
@click.pass_obj
def report(state: _State, out: str):
    """Rebuild tables, JSON and figures from the saved score files."""
    from . import plotting

    reports = pipeline.collect_reports(state.workdir)
    curves = pipeline.collect_curves(state.workdir)
    out_dir = state.workdir / out
    text = format_table(reports.values(), "si_snr") + "\n" + format_table(reports.values(), "sdr")
    atomic_write_text(out_dir / "report.txt", text)
    atomic_write_text(out_dir / "report.json",
                      json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    figures = [plotting.plot_buckets(reports.values(), out_dir / "si_snr.png", "si_snr"),
               plotting.plot_buckets(reports.values(), out_dir / "sdr.png", "sdr")]
    if curves:
        figures.append(plotting.plot_curves(curves, out_dir / "curves.png"))
    click.echo(text, nl=False)
    click.echo(f"figures: {', '.join(p.name for p in figures)}")


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    click.echo(f"error kind={kind} msg={json.dumps(message)}", err=True)
    return code


def run(argv=None) -> int:
    """Invoke the CLI and turn every failure into a one-line error."""
    try:
        result = main.main(args=argv, prog_name="mcsep", standalone_mode=False)
    except click.exceptions.Abort:
        return _fail("Aborted", "interrupted", 130)
    except click.ClickException as exc:
        return _fail(type(exc).__name__, exc.format_message(), 2)
    except RUNTIME_ERRORS as exc:
        return _fail(type(exc).__name__, exc, 1)
    return result if isinstance(result, int) else 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
