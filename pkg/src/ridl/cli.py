"""Command line entry point: ``ridl <command> [options]``."""
from __future__ import annotations

import functools
import logging
from dataclasses import replace
from pathlib import Path

import click

from .errors import RidlError
from .experiment import (ExperimentConfig, cached_local_map, cached_table, planted_table,
                         report_from_predictions, run_experiment, run_sweep)
from .features import SELECTED_KEYS, FeatureTable, extract_global
from .folds import rolling_folds
from .localmap import local_stack
from .quantize import DEFAULT_BIN_WIDTH, discretize
from .selection import lambda_grid, lambda_max, lasso_path, select_lambda_cv
from .volume import load_sample, read_manifest, synth_dataset, write_dataset

EXIT_CODES = {"config": 3, "input": 4, "data": 5}


def _categorized(fn):
    """Turn package errors into ``error [category]: message`` and a category exit code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RidlError as e:
            click.echo(f"error [{e.category}]: {e}", err=True)
            raise SystemExit(EXIT_CODES.get(e.category, 1))
        except FileNotFoundError as e:
            click.echo(f"error [input]: missing file {e.filename}", err=True)
            raise SystemExit(EXIT_CODES["input"])
        except ValueError as e:
            click.echo(f"error [data]: {e}", err=True)
            raise SystemExit(EXIT_CODES["data"])
    return wrapper


def _load_config(config, seed, out, threads) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(config)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = Path(out)
    if threads is not None:
        changes["threads"] = threads
    return replace(cfg, **changes) if changes else cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress and cache hits.")
def cli(verbose):
    """Radiomics texture features, local maps, LASSO selection and toy fusion training."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--n-per-class", default=100, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--dims", default="32,32,32", show_default=True, help="Volume size z,y,x.")
@_categorized
def synth(out, n_per_class, seed, dims):
    """Generate a phantom dataset and its manifest."""
    dims = tuple(int(v) for v in dims.split(","))
    manifest = write_dataset(synth_dataset(n_per_class, seed, dims), out)
    click.echo(str(manifest))


@cli.command()
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CSV.")
@click.option("--keys", default=",".join(SELECTED_KEYS), show_default=True, help="Comma-separated feature keys.")
@click.option("--bin-width", default=DEFAULT_BIN_WIDTH, show_default=True, type=float)
@click.option("--noise", default=0, show_default=True, type=click.IntRange(0), help="Append N(0,1) noise columns.")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed of the noise columns.")
@click.option("--cache", default=None, type=click.Path(file_okay=False), help="Feature cache directory.")
@_categorized
def extract(manifest, out, keys, bin_width, noise, seed, cache):
    """Global feature table (one row per manifest entry)."""
    records = read_manifest(manifest)
    keys = [k for k in keys.split(",") if k]
    if cache is None:
        table = FeatureTable.from_vectors([r["id"] for r in records],
                                          [extract_global(load_sample(r), keys, bin_width) for r in records],
                                          [r["label"] for r in records])
    else:
        table = cached_table(records, keys, bin_width, cache)
    planted_table(table, noise, seed).to_csv(out)
    click.echo(out)


@cli.command("extract-local")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--key", default="glcm_Idn", show_default=True)
@click.option("--radii", default="1,2,5,10", show_default=True)
@click.option("--bin-width", default=DEFAULT_BIN_WIDTH, show_default=True, type=float)
@click.option("--threads", default=1, show_default=True, type=click.IntRange(1))
@click.option("--cache", default=None, type=click.Path(file_okay=False), help="Local map cache directory.")
@_categorized
def extract_local(manifest, out, key, radii, bin_width, threads, cache):
    """Local texture map stack per sample, written as <out>/<id>.vol."""
    radii = [int(p) for p in radii.split(",")]
    out = Path(out)
    for rec in read_manifest(manifest):
        if cache is None:
            s = load_sample(rec)
            lmap = local_stack(discretize(s.volume, s.mask, bin_width), s.mask, key, radii, threads)
        else:
            lmap = cached_local_map(rec, key, radii, bin_width, cache, threads)
        lmap.save(out / rec["id"])
    click.echo(str(out))


@cli.command()
@click.option("--table", required=True, type=click.Path(dir_okay=False), help="Feature table CSV.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-folds", default=5, show_default=True, type=click.IntRange(3))
@click.option("--seed", default=0, show_default=True, type=int)
@_categorized
def select(table, out, n_folds, seed):
    """LASSO path, cross-validated lambda and selected keys."""
    tab = FeatureTable.from_csv(table)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    grid = lambda_grid(lambda_max(tab))
    with open(out / "path.tsv", "w") as fh:
        fh.write("lambda\tn_selected\tselected\n")
        for lam, model in zip(grid, lasso_path(tab, grid)):
            fh.write(f"{lam!r}\t{len(model.selected)}\t{','.join(model.selected)}\n")
    lam, model, selected = select_lambda_cv(tab, rolling_folds(tab.ids, n_folds, seed), grid)
    model.save(out / "model.json")
    (out / "selected.txt").write_text("".join(k + "\n" for k in selected))
    click.echo(f"lambda={lam:.6g} selected={','.join(selected) or '-'}")


_config_options = [
    click.option("--config", required=True, type=click.Path(dir_okay=False), help="Experiment TOML."),
    click.option("--seed", default=None, type=int, help="Override the fold seed."),
    click.option("--out", default=None, type=click.Path(file_okay=False), help="Override the output directory."),
    click.option("--threads", default=None, type=click.IntRange(1), help="Override the worker count."),
]


def _with_config_options(fn):
    for opt in reversed(_config_options):
        fn = opt(fn)
    return fn


@cli.command()
@_with_config_options
@click.option("--pipeline", default=None, help="Override the configured pipeline.")
@_categorized
def train(config, seed, out, threads, pipeline):
    """Run the configured cross-validated experiment."""
    cfg = _load_config(config, seed, out, threads)
    if pipeline is not None:
        cfg = replace(cfg, pipeline=pipeline)
    result = run_experiment(cfg)
    click.echo(f"{cfg.pipeline}: {result.report.summary()}")
    click.echo(str(result.out / "report.json"))


@cli.command("eval")
@click.option("--predictions", required=True, type=click.Path(dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Write the report JSON here.")
@_categorized
def eval_(predictions, out):
    """Metrics from a stored predictions file."""
    report = report_from_predictions(predictions)
    if out is not None:
        report.save(out)
    click.echo(report.summary())


@cli.command()
@_with_config_options
@click.option("--grid", default=None, help="Comma-separated w_corr values; defaults to sweep.w_corr.")
@_categorized
def sweep(config, seed, out, threads, grid):
    """One experiment per w_corr value."""
    cfg = _load_config(config, seed, out, threads)
    values = None if grid is None else [float(v) for v in grid.split(",")]
    for r in run_sweep(cfg, values):
        click.echo(f"w_corr={r.report.meta['config']['toy']['w_corr']:g}: {r.report.summary()}")
    click.echo(str(cfg.out / "sweep.json"))


def main():
    cli()


if __name__ == "__main__":
    main()
