"""Command-line entry point: spectral-boltzmann <command> CONFIG [options].

Exit codes: 0 ok, 2 configuration or missing-input error, 3 numerical
failure, 4 acceptance-check failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from .collision import BudgetError
from .config import ConfigError, load_config
from .norms import QuadratureError
from .pipeline import STAGES, AcceptanceError, Pipeline, StageError
from .transport import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def _load(path: str):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "invalid config:\n  " + "\n  ".join(exc.errors))
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot read config: {exc}")


def _run(config: str, stages, out: str | None, threads: int):
    cfg = _load(config)
    pipe = Pipeline(cfg, Path(out) if out else None, threads)
    try:
        # BLAS stays single-threaded so that payloads do not depend on --threads
        with threadpool_limits(limits=1):
            manifest = pipe.run(stages)
    except (StageError, ValueError) as exc:
        _fail(EXIT_CONFIG, f"error: {exc}")
    except (NumericalError, QuadratureError, BudgetError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        _fail(EXIT_NUMERICAL, f"numerical failure: {exc}")
    except AcceptanceError as exc:
        _fail(EXIT_ACCEPTANCE, f"acceptance failure: {exc}")
    click.echo(f"run directory: {pipe.root}")
    for name, rec in manifest.stages.items():
        notes = "; ".join(rec["notes"])
        click.echo(f"  {name:<9} {rec['status']:<8} {rec['wall_s']:8.2f} s  {notes}")


_threads = click.option("--threads", default=1, show_default=True, type=click.IntRange(1),
                        help="Worker threads for independent verification checks.")
_out = click.option("--out", default=None, type=click.Path(file_okay=False),
                    help="Override outputs.directory.")
_config = click.argument("config", type=click.Path(dir_okay=False))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log stage progress.")
def main(verbose: bool):
    """Spectral linearized Boltzmann experiments: assemble, simulate, measure, verify, fit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_config
def validate(config):
    """Parse CONFIG and print the derived schedule exponents."""
    cfg = _load(config)
    click.echo(json.dumps(cfg.summary(), indent=2, sort_keys=True))


def _stage_command(stage: str, doc: str):
    @main.command(name=stage if stage != "fit" else "fit-decay", help=doc)
    @_config
    @_out
    @_threads
    def command(config, out, threads):
        _run(config, [stage], out, threads)
    return command


assemble = _stage_command("assemble", "Assemble (or load cached) operators and report coercivity.")
simulate = _stage_command("simulate", "Run the configured decay envelope or trajectory.")
measure = _stage_command("measure", "Evaluate decay series, functionals and the energy ledger.")
verify = _stage_command("verify", "Run the inequality and identity checks.")
fit_decay = _stage_command("fit", "Fit log-log decay slopes of the measured series.")


@main.command()
@_config
@_out
@_threads
@click.option("--stages", default=",".join(STAGES), show_default=True,
              help="Comma-separated subset of stages to run in dependency order.")
def pipeline(config, out, threads, stages):
    """Run several stages in order; a failure skips the dependents."""
    chosen = [s.strip() for s in stages.split(",") if s.strip()]
    chosen = ["fit" if s == "fit-decay" else s for s in chosen]
    _run(config, chosen, out, threads)


if __name__ == "__main__":
    main()
