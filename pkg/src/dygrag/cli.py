"""The ``dygrag`` command."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator, TypeVar

import click

from .exceptions import DygragError
from .fusion import FUSION_STRATEGIES
from .pipeline import (
    ABLATIONS,
    emit_report,
    evaluation_dirs,
    load_config,
    MatrixAxes,
    PipelineConfig,
    run_all,
    run_matrix,
    run_stage,
    STAGES,
)
from .retriever import RETRIEVER_KINDS

F = TypeVar("F", bound=Callable[..., Any])


@contextmanager
def _reported_errors() -> Iterator[None]:
    try:
        yield
    except DygragError as exc:
        raise click.ClickException(str(exc)) from exc


def config_options(fn: F) -> F:
    fn = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="SECTION.KEY=VALUE",
        help="Override a configuration value.  May be repeated.",
    )(fn)
    fn = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="INI configuration file.",
    )(fn)
    return fn


def _load(config_path: Path | None, overrides: tuple[str, ...]) -> PipelineConfig:
    with _reported_errors():
        return load_config(config_path, overrides)


@click.group()
@click.version_option(package_name="dygrag")
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages.")
@click.option("-q", "--quiet", is_flag=True, help="Log warnings and errors only.")
def main(verbose: bool, quiet: bool) -> None:
    """Retrieval-augmented link prediction on dynamic graphs."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _stage_command(name: str) -> click.Command:
    @click.command(name=name, help=f"Run the {name} stage.")
    @config_options
    @click.option("--seed", type=int, help="Seed (default: the first configured).")
    def command(
        config_path: Path | None, overrides: tuple[str, ...], seed: int | None
    ) -> None:
        config = _load(config_path, overrides)
        with _reported_errors():
            result = run_stage(name, config, seed)
        status = "cached" if result.cached else "done"
        click.echo(f"{name}: {status} {result.path}")

    return command


for _name in STAGES:
    main.add_command(_stage_command(_name))


@main.command(name="all")
@config_options
@click.option("--seed", "seeds", type=int, multiple=True, help="Seeds to run.")
def run_all_command(
    config_path: Path | None, overrides: tuple[str, ...], seeds: tuple[int, ...]
) -> None:
    """Run every stage for every seed and print the report."""
    config = _load(config_path, overrides)
    with _reported_errors():
        evaluated = run_all(config, seeds or None)
        click.echo(emit_report([r.path for r in evaluated]), nl=False)


@main.command()
@config_options
@click.option("--k", "ks", type=int, multiple=True, help="Demonstration counts.")
@click.option(
    "--ablation", "ablations", type=click.Choice(list(ABLATIONS)), multiple=True
)
@click.option(
    "--strategy", "strategies", type=click.Choice(FUSION_STRATEGIES), multiple=True
)
@click.option(
    "--retriever", "retrievers", type=click.Choice(RETRIEVER_KINDS), multiple=True
)
@click.option("--jobs", type=int, help="Cells to run in parallel.")
def matrix(
    config_path: Path | None,
    overrides: tuple[str, ...],
    ks: tuple[int, ...],
    ablations: tuple[str, ...],
    strategies: tuple[str, ...],
    retrievers: tuple[str, ...],
    jobs: int | None,
) -> None:
    """Run a grid of configurations; one table row per cell.

    Axes left unset take their single value from the configuration.
    """
    config = _load(config_path, overrides)
    with _reported_errors():
        axes = MatrixAxes(
            k=ks or (config.fusion.k,),
            ablations=ablations or ("full",),
            strategies=strategies or (config.fusion.strategy,),
            retrievers=retrievers or (config.retriever.kind,),
        )
        click.echo(run_matrix(config, axes, jobs).to_text(), nl=False)


@main.command()
@config_options
@click.option("--seed", "seeds", type=int, multiple=True, help="Seeds to report.")
def report(
    config_path: Path | None, overrides: tuple[str, ...], seeds: tuple[int, ...]
) -> None:
    """Print the report of already evaluated runs."""
    config = _load(config_path, overrides)
    with _reported_errors():
        click.echo(emit_report(evaluation_dirs(config, seeds or None)), nl=False)
