"""Cross-validated experiments: cached data preparation, pipelines and w_corr sweeps.

A config is a TOML file:

    pipeline = "toy-ridl"              # radiomics-lasso | toy-ridl | toy-baseline-concat
    out = "runs/ridl"
    n_folds = 5
    seed = 0                           # fold assignment
    stratify = false
    threads = 1

    [data]
    manifest = "data/manifest.jsonl"   # or a [data.phantoms] table instead
    [data.phantoms]
    n_per_class = 100
    seed = 0
    dims = [32, 32, 32]

    [features]
    keys = [...]                       # global radiomic keys
    bin_width = 25.0
    noise = 0                          # extra N(0, 1) columns named noise_XX
    noise_seed = 0

    [local]
    key = "original_glcm_Idn"
    radii = [1, 2, 3, 4]

    [toy]                              # ToyConfig fields
    epochs = 10

    [sweep]
    w_corr = [1.5, 2.0, 2.5, 3.0]

Relative paths resolve against the config file. Per-sample feature vectors
and local maps are cached under ``<out>/cache`` (or ``cache = ...``), keyed by
a hash of the input file contents and the extraction parameters.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli

from .errors import ConfigError, RidlError, VolumeFormatError
from .features import IDN, SELECTED_KEYS, FeatureTable, canonical_key, extract_global
from .folds import FoldPlan, rolling_folds
from .localmap import LocalFeatureMap, local_stack
from .losses import write_training_log
from .metrics import MetricReport, binary_metrics
from .quantize import DEFAULT_BIN_WIDTH, discretize
from .selection import select_lambda_cv, predict_table
from .toynet import ToyConfig, make_input, predict, toy_train
from .volume import load_sample, read_manifest, synth_dataset, with_ext, write_dataset

log = logging.getLogger(__name__)

PIPELINES = ("radiomics-lasso", "toy-ridl", "toy-baseline-concat")
DEFAULT_RADII = (1, 2, 3, 4)
_TOP_KEYS = {"pipeline", "out", "n_folds", "seed", "stratify", "threads", "cache",
             "data", "features", "local", "toy", "sweep"}


@dataclass
class ExperimentConfig:
    pipeline: str
    out: Path
    manifest: Path | None = None
    phantoms: dict | None = None
    n_folds: int = 5
    seed: int = 0
    stratify: bool = False
    threads: int = 1
    cache: Path | None = None
    keys: tuple[str, ...] = SELECTED_KEYS
    bin_width: float = DEFAULT_BIN_WIDTH
    noise: int = 0
    noise_seed: int = 0
    local_key: str = IDN
    radii: tuple[int, ...] = DEFAULT_RADII
    toy: ToyConfig = field(default_factory=ToyConfig)
    sweep: tuple[float, ...] = ()

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; expected one of {', '.join(PIPELINES)}")
        if (self.manifest is None) == (self.phantoms is None):
            raise ConfigError("config needs exactly one of data.manifest or data.phantoms")
        if self.n_folds < 3:
            raise ConfigError("n_folds must be >= 3")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.noise < 0:
            raise ConfigError("features.noise must be >= 0")
        if not self.radii or any(int(p) != p or p < 1 for p in self.radii):
            raise ConfigError("local.radii must be positive integers")

    @property
    def cache_dir(self) -> Path:
        return self.cache if self.cache is not None else self.out / "cache"

    @classmethod
    def from_mapping(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        base = Path(base_dir)
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "pipeline" not in d or "out" not in d:
            raise ConfigError("config needs 'pipeline' and 'out'")
        data = dict(d.get("data", {}))
        feats = dict(d.get("features", {}))
        local = dict(d.get("local", {}))
        phantoms = data.get("phantoms")
        if phantoms is not None:
            extra = set(phantoms) - {"n_per_class", "seed", "dims"}
            if extra:
                raise ConfigError(f"unknown data.phantoms keys: {sorted(extra)}")
            phantoms = {"n_per_class": int(phantoms.get("n_per_class", 100)),
                        "seed": int(phantoms.get("seed", 0)),
                        "dims": [int(v) for v in phantoms.get("dims", (32, 32, 32))]}
        try:
            return cls(
                pipeline=str(d["pipeline"]),
                out=base / d["out"],
                manifest=base / data["manifest"] if "manifest" in data else None,
                phantoms=phantoms,
                n_folds=int(d.get("n_folds", 5)),
                seed=int(d.get("seed", 0)),
                stratify=bool(d.get("stratify", False)),
                threads=int(d.get("threads", 1)),
                cache=base / d["cache"] if "cache" in d else None,
                keys=tuple(canonical_key(k) for k in feats.get("keys", SELECTED_KEYS)),
                bin_width=float(feats.get("bin_width", DEFAULT_BIN_WIDTH)),
                noise=int(feats.get("noise", 0)),
                noise_seed=int(feats.get("noise_seed", 0)),
                local_key=canonical_key(local.get("key", IDN)),
                radii=tuple(int(p) for p in local.get("radii", DEFAULT_RADII)),
                toy=ToyConfig.from_mapping(d.get("toy", {})),
                sweep=tuple(float(w) for w in d.get("sweep", {}).get("w_corr", ())),
            )
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, RidlError):
                raise
            raise ConfigError(f"malformed config: {e}") from None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = tomli.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"missing config file {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_mapping(doc, path.parent)

    def fingerprint(self) -> dict:
        """JSON-safe description recorded in every report."""
        return {
            "pipeline": self.pipeline, "n_folds": self.n_folds, "seed": self.seed,
            "stratify": self.stratify, "keys": list(self.keys), "bin_width": self.bin_width,
            "noise": self.noise, "noise_seed": self.noise_seed,
            "local_key": self.local_key, "radii": list(self.radii),
            "toy": self.toy.to_dict() if self.pipeline != "radiomics-lasso" else None,
            "data": str(self.manifest) if self.manifest is not None else self.phantoms,
        }


# --------------------------------------------------------------------------
# caching


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True).encode())
        h.update(b"\0")
    return h.hexdigest()[:32]


def _file_bytes(path) -> bytes:
    """Raw data plus its header sidecar."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".vol", ".volhdr") else path
    try:
        return with_ext(stem, ".vol").read_bytes() + b"\0" + with_ext(stem, ".volhdr").read_bytes()
    except FileNotFoundError as e:
        raise VolumeFormatError(f"missing input file {e.filename}") from None


def sample_digest(record: dict) -> str:
    """Content hash of a manifest record's volume and mask files."""
    parts = [_file_bytes(record["volume"])]
    if record.get("mask"):
        parts.append(_file_bytes(record["mask"]))
    return _digest(*parts, int(record["label"]))


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0


def phantom_manifest(spec: dict, cache_dir) -> Path:
    """Manifest of a generated phantom cohort, written once per parameter set."""
    folder = Path(cache_dir) / f"phantoms_{_digest(spec)}"
    manifest = folder / "manifest.jsonl"
    if manifest.exists():
        log.info("cache hit: phantom cohort %s", folder.name)
        return manifest
    return write_dataset(synth_dataset(spec["n_per_class"], spec["seed"], spec["dims"]), folder)


def cached_table(records: Sequence[dict], keys: Sequence[str], bin_width: float, cache_dir,
                 stats: CacheStats | None = None) -> FeatureTable:
    """Global feature table; one cached JSON vector per sample."""
    stats = CacheStats() if stats is None else stats
    folder = Path(cache_dir) / "features"
    folder.mkdir(parents=True, exist_ok=True)
    vectors = []
    for rec in records:
        path = folder / f"{_digest(sample_digest(rec), list(keys), bin_width)}.json"
        if path.exists():
            stats.hits += 1
            vectors.append(json.loads(path.read_text()))
            continue
        stats.misses += 1
        vec = dict(extract_global(load_sample(rec), keys, bin_width))
        path.write_text(json.dumps(vec))
        vectors.append(vec)
    if stats.hits:
        log.info("cache hit: %d/%d feature vectors reused", stats.hits, len(records))
    return FeatureTable.from_vectors([r["id"] for r in records], vectors, [r["label"] for r in records])


def cached_local_map(record: dict, key: str, radii: Sequence[int], bin_width: float, cache_dir,
                     workers: int = 1, stats: CacheStats | None = None, sample=None) -> LocalFeatureMap:
    stats = CacheStats() if stats is None else stats
    folder = Path(cache_dir) / "local"
    stem = folder / _digest(sample_digest(record), key, list(radii), bin_width)
    if with_ext(stem, ".volhdr").exists():
        stats.hits += 1
        return LocalFeatureMap.load(stem)
    stats.misses += 1
    sample = load_sample(record) if sample is None else sample
    lmap = local_stack(discretize(sample.volume, sample.mask, bin_width), sample.mask, key, radii, workers)
    lmap.save(stem)
    return lmap


def planted_table(table: FeatureTable, n_noise: int = 16, seed: int = 0) -> FeatureTable:
    """Append ``n_noise`` independent N(0, 1) columns ``noise_00`` .. to a table."""
    if n_noise == 0:
        return table
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(table), n_noise))
    keys = list(table.keys) + [f"noise_{i:02d}" for i in range(n_noise)]
    return FeatureTable(list(table.ids), keys, np.c_[table.values, noise], table.labels)


# --------------------------------------------------------------------------
# pipelines


@dataclass
class FoldResult:
    fold: int
    test_ids: list[str]
    test_labels: np.ndarray
    scores: np.ndarray
    metrics: dict
    selected: list[str] | None = None
    lam: float | None = None
    curve: list[dict] | None = None
    val_auc: float | None = None


def _lasso_fold(table: FeatureTable, plan: FoldPlan, k: int) -> FoldResult:
    lam, model, selected = select_lambda_cv(table, plan, fold=k)
    _, _, te = plan.indices(k)
    test = table.subset(te)
    scores = predict_table(model, test)
    return FoldResult(k, test.ids, test.labels, scores, binary_metrics(scores, test.labels),
                      selected=list(selected), lam=lam)


def _toy_fold(inputs, plan: FoldPlan, k: int, toy: ToyConfig) -> FoldResult:
    tr, va, te = plan.indices(k)
    model, curve = toy_train(replace(toy, seed=toy.seed + k), [inputs[i] for i in tr])
    test = [inputs[i] for i in te]
    labels = np.array([x.label for x in test])
    scores = predict(model, test)
    val = [inputs[i] for i in va]
    val_labels = np.array([x.label for x in val])
    val_auc = (binary_metrics(predict(model, val), val_labels)["auc"]
               if 0 < val_labels.sum() < len(val_labels) else None)
    return FoldResult(k, [x.id for x in test], labels, scores, binary_metrics(scores, labels),
                      curve=curve, val_auc=val_auc)


@dataclass
class ExperimentResult:
    report: MetricReport
    folds: list[FoldResult]
    out: Path
    cache: CacheStats


def _records(config: ExperimentConfig) -> list[dict]:
    manifest = config.manifest if config.manifest is not None else phantom_manifest(config.phantoms, config.cache_dir)
    records = read_manifest(manifest)
    if not records:
        raise VolumeFormatError(f"{manifest}: no samples")
    return records


def run_experiment(config: ExperimentConfig | str | Path) -> ExperimentResult:
    """Extract (or reuse) features, run every fold, write report and artifacts under ``config.out``."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_file(config)
    records = _records(config)
    stats = CacheStats()
    table = cached_table(records, config.keys, config.bin_width, config.cache_dir, stats)
    table = planted_table(table, config.noise, config.noise_seed)
    plan = rolling_folds(table.ids, config.n_folds, config.seed, table.labels, config.stratify)

    if config.pipeline == "radiomics-lasso":
        def job(k):
            return _lasso_fold(table, plan, k)
    else:
        toy = config.toy
        if config.pipeline == "toy-baseline-concat":
            toy = replace(toy, w_corr=0.0)
        inputs = []
        local_stats = CacheStats()
        for i, rec in enumerate(records):
            sample = load_sample(rec)
            lmap = None
            if config.pipeline == "toy-ridl":
                lmap = cached_local_map(rec, config.local_key, config.radii, config.bin_width,
                                        config.cache_dir, config.threads, local_stats, sample)
            inputs.append(make_input(sample, lmap, table.values[i]))
        if local_stats.hits:
            log.info("cache hit: %d/%d local map stacks reused", local_stats.hits, len(records))
        stats.hits += local_stats.hits
        stats.misses += local_stats.misses

        def job(k):
            return _toy_fold(inputs, plan, k, toy)

    with ThreadPoolExecutor(max_workers=min(config.threads, config.n_folds)) as pool:
        folds = list(pool.map(job, range(config.n_folds)))

    report = MetricReport(meta={"config": config.fingerprint(), "n_samples": len(table)})
    for f in folds:
        report.add(f.metrics)
    _write_artifacts(config.out, report, folds, plan)
    log.info("%s: %s", config.pipeline, report.summary())
    return ExperimentResult(report, folds, config.out, stats)


def _write_artifacts(out: Path, report: MetricReport, folds: list[FoldResult], plan: FoldPlan):
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_predictions(out / "predictions.tsv", folds)
    (out / "folds.json").write_text(json.dumps(
        {"ids": list(plan.ids), "assignments": plan.assignments.tolist(), "n_folds": plan.n_folds}) + "\n")
    if folds[0].selected is not None:
        sets = [set(f.selected) for f in folds]
        doc = {
            "per_fold": {str(f.fold): {"lambda": f.lam, "selected": f.selected} for f in folds},
            "intersection": sorted(set.intersection(*sets)),
            "union": sorted(set.union(*sets)),
        }
        (out / "selected_features.json").write_text(json.dumps(doc, indent=2) + "\n")
    for f in folds:
        if f.curve is not None:
            write_training_log(f.curve, out / "curves" / f"fold_{f.fold}.tsv")
    if any(f.val_auc is not None for f in folds):
        (out / "validation.json").write_text(
            json.dumps({str(f.fold): f.val_auc for f in folds}, indent=2) + "\n")


PREDICTION_FIELDS = ("fold", "id", "label", "score")


def write_predictions(path, folds: Sequence[FoldResult]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for f in folds:
            for sid, lab, s in zip(f.test_ids, f.test_labels, f.scores):
                w.writerow([f.fold, sid, int(lab), repr(float(s))])
    return path


def report_from_predictions(path) -> MetricReport:
    """Per-fold metrics recomputed from a predictions file."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
    except FileNotFoundError:
        raise VolumeFormatError(f"missing predictions file {path}") from None
    if not rows or set(PREDICTION_FIELDS) - set(rows[0]):
        raise VolumeFormatError(f"{path}: expected columns {', '.join(PREDICTION_FIELDS)}")
    by_fold: dict[int, list] = {}
    for r in rows:
        by_fold.setdefault(int(r["fold"]), []).append((float(r["score"]), int(r["label"])))
    report = MetricReport(meta={"source": str(path)})
    for k in sorted(by_fold):
        scores, labels = zip(*by_fold[k])
        report.add(binary_metrics(scores, labels))
    return report


# --------------------------------------------------------------------------
# sweep


def sweep_dir_name(index: int, w_corr: float) -> str:
    """Zero-padded index first, so lexical order follows the grid."""
    return f"sweep_{index:02d}_wcorr_{w_corr:g}"


def run_sweep(config: ExperimentConfig | str | Path, grid: Sequence[float] | None = None) -> list[ExperimentResult]:
    """One experiment per w_corr value, all sharing the parent cache."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_file(config)
    if config.pipeline != "toy-ridl":
        raise ConfigError("a w_corr sweep needs the toy-ridl pipeline")
    grid = tuple(config.sweep if grid is None else grid)
    if not grid:
        raise ConfigError("empty w_corr grid; set sweep.w_corr or pass a grid")
    results = []
    for i, w in enumerate(grid):
        sub = replace(config, out=config.out / sweep_dir_name(i, w), cache=config.cache_dir,
                      toy=replace(config.toy, w_corr=float(w)), sweep=())
        results.append(run_experiment(sub))
    summary = {
        "w_corr": list(grid),
        "reports": [str((r.out / "report.json").relative_to(config.out)) for r in results],
        "auc_mean": [r.report.mean("auc") for r in results],
        "auc_std": [r.report.std("auc") for r in results],
    }
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results
