"""Benchmark orchestration: evaluation tables, parameter sweeps, and exports.

A benchmark pairs one ID source (embedding set + manifest) with any number
of named OOD sources and a list of score configs. `evaluate` produces the
per-(config, OOD set) FPR95/AUROC table plus per-config arithmetic
averages over the OOD sets, mirroring the usual benchmark table layout.

Everything here is a pure function of its inputs; repeated runs produce
identical reports. (config, OOD set) cells are independent, and per-image
scoring can be spread over `jobs` workers without changing any output.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Collection, Sequence, TextIO

import numpy as np

from .embedding_store import DatasetManifest, EmbeddingSet, ImageFeatures, Split, TextFeatures, join
from .errors import ConfigurationError, DomainError
from .metrics import LabeledScores, compute_metrics
from .scores import (
    ENSEMBLE_FUNCTIONS,
    ScoreConfig,
    ScoreFunction,
    ScoreRecord,
    score_features,
    score_map_probs,
)

log = logging.getLogger("oodbench")


@dataclass(frozen=True)
class DataSource:
    """An embedding set paired with the manifest that labels it."""

    embeddings: EmbeddingSet
    manifest: DatasetManifest


@dataclass(frozen=True)
class BenchmarkSpec:
    id_set: DataSource
    ood_sets: tuple[tuple[str, DataSource], ...]
    configs: tuple[ScoreConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "ood_sets", tuple(self.ood_sets))
        object.__setattr__(self, "configs", tuple(self.configs))
        if not self.ood_sets:
            raise ConfigurationError("benchmark needs at least one OOD set")
        if not self.configs:
            raise ConfigurationError("benchmark needs at least one score config")
        names = [name for name, _ in self.ood_sets]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate OOD set name")
        config_names = [config.name for config in self.configs]
        if len(set(config_names)) != len(config_names):
            raise ConfigurationError("duplicate score config")
        reference = self.id_set.embeddings.text
        for name, source in self.ood_sets:
            text = source.embeddings.text
            if text.vocabulary != reference.vocabulary:
                raise ConfigurationError(f"OOD set '{name}': class vocabulary differs from the ID set")
            if text.c != reference.c:
                raise ConfigurationError(
                    f"OOD set '{name}': feature width {text.c} != ID set width {reference.c}"
                )


@dataclass(frozen=True)
class EvalRow:
    config: ScoreConfig
    ood_set: str
    fpr95: float
    auroc: float
    n_id: int
    n_ood: int


@dataclass(frozen=True)
class ConfigAverage:
    config: ScoreConfig
    mean_fpr95: float
    mean_auroc: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    averages: tuple[ConfigAverage, ...]


class SweepParameter:
    LAMBDA = "lambda"
    TAU = "tau"


@dataclass(frozen=True)
class SweepPoint:
    value: float
    mean_fpr95: float
    mean_auroc: float


@dataclass(frozen=True)
class SweepResult:
    parameter: str  # SweepParameter.LAMBDA or SweepParameter.TAU
    points: tuple[SweepPoint, ...]


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray  # bins + 1 edges
    counts: np.ndarray  # per-bin counts


@dataclass(frozen=True)
class ExtractionResult:
    threshold: float
    extracted_ids: tuple[str, ...]
    category_counts: dict[str, int]


@dataclass(frozen=True)
class ScoreMapCell:
    class_index: int
    score: float


@dataclass(frozen=True)
class ScoreMap:
    image_id: str
    grid: tuple[int, int]
    classes: tuple[str, ...]
    cells: tuple[ScoreMapCell, ...]  # row-major over the grid


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _labeled_features(source: DataSource, split: Split, what: str) -> list[ImageFeatures]:
    table = join(source.embeddings, source.manifest)
    if table.n_unlabeled_features or table.n_missing_features:
        log.info(
            "%s: %d features without labels, %d manifest entries without features",
            what, table.n_unlabeled_features, table.n_missing_features,
        )
    features = [row.features for row in table.split_rows(split)]
    if not features:
        raise ConfigurationError(f"{what}: no {split.value} entries to evaluate")
    return features


def evaluate(spec: BenchmarkSpec, jobs: int = 1) -> EvalReport:
    """Score every (config, OOD set) cell and compute FPR95/AUROC per cell."""
    id_features = _labeled_features(spec.id_set, Split.ID, "ID set")
    id_text = spec.id_set.embeddings.text
    ood_features = [
        (name, source.embeddings.text, _labeled_features(source, Split.OOD, f"OOD set '{name}'"))
        for name, source in spec.ood_sets
    ]
    rows = []
    averages = []
    for config in spec.configs:
        id_values = [r.value for r in score_features(id_features, id_text, config, jobs=jobs)]
        config_rows = []
        for name, text, features in ood_features:
            ood_values = [r.value for r in score_features(features, text, config, jobs=jobs)]
            result = compute_metrics(LabeledScores(id_values, ood_values))
            config_rows.append(
                EvalRow(config, name, result.fpr95, result.auroc, *result.counts)
            )
        rows.extend(config_rows)
        averages.append(
            ConfigAverage(
                config,
                mean_fpr95=sum(r.fpr95 for r in config_rows) / len(config_rows),
                mean_auroc=sum(r.auroc for r in config_rows) / len(config_rows),
            )
        )
    return EvalReport(tuple(rows), tuple(averages))


def _sweep_base_config(spec: BenchmarkSpec, responsive: Collection[ScoreFunction], what: str) -> ScoreConfig:
    candidates = [c for c in spec.configs if c.function in responsive]
    if not candidates:
        raise ConfigurationError(f"{what} sweep needs a config whose score depends on {what}")
    if len(candidates) > 1:
        raise ConfigurationError(f"{what} sweep is ambiguous with {len(candidates)} matching configs")
    return candidates[0]


def _check_sweep_values(values: Sequence[float], what: str) -> list[float]:
    values = [float(v) for v in values]
    if not values:
        raise ConfigurationError(f"{what} sweep needs at least one value")
    if len(set(values)) != len(values):
        raise ConfigurationError(f"duplicate {what} value in sweep")
    return sorted(values)


def sweep_lambda(spec: BenchmarkSpec, lambdas: Sequence[float], jobs: int = 1) -> SweepResult:
    """Re-run the benchmark at each global/local weight, all else fixed."""
    base = _sweep_base_config(spec, ENSEMBLE_FUNCTIONS, "lambda")
    values = _check_sweep_values(lambdas, "lambda")
    if any(v < 0.0 for v in values):
        raise ConfigurationError("lambda values must be non-negative")
    points = []
    for value in values:
        report = evaluate(replace_configs(spec, (replace(base, lam=value),)), jobs=jobs)
        avg = report.averages[0]
        points.append(SweepPoint(value, avg.mean_fpr95, avg.mean_auroc))
    return SweepResult(SweepParameter.LAMBDA, tuple(points))


def sweep_tau(spec: BenchmarkSpec, taus: Sequence[float], jobs: int = 1) -> SweepResult:
    """Re-run the benchmark at each temperature, all else fixed."""
    tau_sensitive = [f for f in ScoreFunction if f not in (ScoreFunction.COS, ScoreFunction.VAR)]
    base = _sweep_base_config(spec, tau_sensitive, "tau")
    values = _check_sweep_values(taus, "tau")
    if any(v <= 0.0 for v in values):
        raise ConfigurationError("tau values must be positive")
    points = []
    for value in values:
        report = evaluate(replace_configs(spec, (replace(base, tau=value),)), jobs=jobs)
        avg = report.averages[0]
        points.append(SweepPoint(value, avg.mean_fpr95, avg.mean_auroc))
    return SweepResult(SweepParameter.TAU, tuple(points))


def replace_configs(spec: BenchmarkSpec, configs: tuple[ScoreConfig, ...]) -> BenchmarkSpec:
    return BenchmarkSpec(spec.id_set, spec.ood_sets, configs)


# ---------------------------------------------------------------------------
# Score exports
# ---------------------------------------------------------------------------

def histogram(scores: Sequence[ScoreRecord], bins: int, value_range: tuple[float, float] | None = None) -> Histogram:
    """Uniform binning of score values; bins are left-closed, the last closed.

    A value on an interior edge lands in the higher bin; the range maximum
    lands in the last bin; values outside the range are dropped. Default
    range is the observed min..max ((0, 1) when there are no scores).
    """
    if bins < 1:
        raise ConfigurationError(f"bins must be >= 1, got {bins}")
    if value_range is not None:
        lo, hi = float(value_range[0]), float(value_range[1])
        if lo >= hi:
            raise ConfigurationError(f"histogram range must satisfy lo < hi, got ({lo}, {hi})")
        value_range = (lo, hi)
    values = np.asarray([r.value for r in scores], dtype=np.float64)
    if not np.isfinite(values).all():
        raise DomainError("histogram: non-finite score")
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return Histogram(edges=edges, counts=counts)


def extract_id(scores: Sequence[ScoreRecord], manifest: DatasetManifest, threshold: float) -> ExtractionResult:
    """Keep images scoring >= threshold; count extractions per category.

    An image carrying several categories increments each of them, so the
    per-category counts can exceed the number of extracted images.
    """
    by_id = manifest.by_id()
    extracted = sorted(r.image_id for r in scores if r.value >= threshold)
    counts: dict[str, int] = {}
    for image_id in extracted:
        entry = by_id.get(image_id)
        if entry is None:
            continue
        for category in entry.categories:
            counts[category] = counts.get(category, 0) + 1
    return ExtractionResult(
        threshold=float(threshold),
        extracted_ids=tuple(extracted),
        category_counts=dict(sorted(counts.items())),
    )


def score_map(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreMap:
    """Per-region argmax class and its probability, row-major over the grid.

    The grid's best cell score equals the LMCM value of the same image.
    """
    probs = score_map_probs(image, text, config)
    pred = probs.argmax(axis=1)
    best = probs[np.arange(probs.shape[0]), pred]
    cells = tuple(ScoreMapCell(int(c), float(s)) for c, s in zip(pred, best))
    return ScoreMap(image.image_id, image.grid, text.vocabulary.classes, cells)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def _round6(x: float) -> float:
    return float(_fmt(x))


def write_report(report, fmt: str, destination) -> None:
    """Serialize a report to CSV or JSON with reals at 6 significant digits.

    `destination` is a path or a text stream. Column order is stable and
    re-parsing yields values equal at the serialized precision.
    """
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"unknown report format '{fmt}'")
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as stream:
            _write_report(report, fmt, stream)
    else:
        _write_report(report, fmt, destination)


def _write_report(report, fmt: str, stream: TextIO) -> None:
    if isinstance(report, EvalReport):
        payload = _eval_rows(report) if fmt == "csv" else _eval_payload(report)
    elif isinstance(report, SweepResult):
        payload = _sweep_rows(report) if fmt == "csv" else _sweep_payload(report)
    elif isinstance(report, Histogram):
        payload = _histogram_rows(report) if fmt == "csv" else _histogram_payload(report)
    elif isinstance(report, ScoreMap):
        payload = _score_map_rows([report]) if fmt == "csv" else _score_map_payload(report)
    elif isinstance(report, Sequence) and all(isinstance(m, ScoreMap) for m in report):
        payload = _score_map_rows(report) if fmt == "csv" else [_score_map_payload(m) for m in report]
    elif isinstance(report, ExtractionResult):
        payload = _extraction_rows(report) if fmt == "csv" else _extraction_payload(report)
    else:
        raise ConfigurationError(f"cannot serialize {type(report).__name__} as a report")
    if fmt == "csv":
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerows(payload)
    else:
        json.dump(payload, stream, indent=2)
        stream.write("\n")


def _config_fields(config: ScoreConfig) -> dict:
    return {
        "config_name": config.name,
        "function": config.function.value,
        "tau": _round6(config.tau),
        "lambda": _round6(config.lam),
    }


def _eval_rows(report: EvalReport) -> list[list]:
    header = ["config_name", "function", "tau", "lambda", "ood_set", "fpr95", "auroc", "n_id", "n_ood"]
    out = [header]
    by_config: dict[str, list[EvalRow]] = {}
    for row in report.rows:
        by_config.setdefault(row.config.name, []).append(row)
    for avg in report.averages:
        rows = by_config.get(avg.config.name, [])
        for row in rows:
            out.append([
                row.config.name, row.config.function.value, _fmt(row.config.tau), _fmt(row.config.lam),
                row.ood_set, _fmt(row.fpr95), _fmt(row.auroc), row.n_id, row.n_ood,
            ])
        out.append([
            avg.config.name, avg.config.function.value, _fmt(avg.config.tau), _fmt(avg.config.lam),
            "average", _fmt(avg.mean_fpr95), _fmt(avg.mean_auroc),
            rows[0].n_id if rows else 0, sum(r.n_ood for r in rows),
        ])
    return out


def _eval_payload(report: EvalReport) -> dict:
    return {
        "rows": [
            {
                **_config_fields(row.config),
                "ood_set": row.ood_set,
                "fpr95": _round6(row.fpr95),
                "auroc": _round6(row.auroc),
                "n_id": row.n_id,
                "n_ood": row.n_ood,
            }
            for row in report.rows
        ],
        "averages": [
            {
                **_config_fields(avg.config),
                "mean_fpr95": _round6(avg.mean_fpr95),
                "mean_auroc": _round6(avg.mean_auroc),
            }
            for avg in report.averages
        ],
    }


def _sweep_rows(result: SweepResult) -> list[list]:
    out = [["parameter", "value", "mean_fpr95", "mean_auroc"]]
    for p in result.points:
        out.append([result.parameter, _fmt(p.value), _fmt(p.mean_fpr95), _fmt(p.mean_auroc)])
    return out


def _sweep_payload(result: SweepResult) -> dict:
    return {
        "parameter": result.parameter,
        "points": [
            {"value": _round6(p.value), "mean_fpr95": _round6(p.mean_fpr95), "mean_auroc": _round6(p.mean_auroc)}
            for p in result.points
        ],
    }


def _histogram_rows(hist: Histogram) -> list[list]:
    out = [["bin_lo", "bin_hi", "count"]]
    for lo, hi, count in zip(hist.edges, hist.edges[1:], hist.counts):
        out.append([_fmt(lo), _fmt(hi), int(count)])
    return out


def _histogram_payload(hist: Histogram) -> dict:
    return {
        "bins": [
            {"bin_lo": _round6(lo), "bin_hi": _round6(hi), "count": int(count)}
            for lo, hi, count in zip(hist.edges, hist.edges[1:], hist.counts)
        ]
    }


def _score_map_rows(maps: Sequence[ScoreMap]) -> list[list]:
    out = [["image_id", "row", "col", "class_index", "score"]]
    for m in maps:
        _, w = m.grid
        for i, cell in enumerate(m.cells):
            out.append([m.image_id, i // w, i % w, cell.class_index, _fmt(cell.score)])
    return out


def _score_map_payload(m: ScoreMap) -> dict:
    h, w = m.grid
    return {
        "image_id": m.image_id,
        "h": h,
        "w": w,
        "classes": list(m.classes),
        "cells": [{"class_index": c.class_index, "score": _round6(c.score)} for c in m.cells],
    }


def _extraction_rows(result: ExtractionResult) -> list[list]:
    out = [["category", "count"], ["all", len(result.extracted_ids)]]
    for category, count in result.category_counts.items():
        out.append([category, count])
    return out


def _extraction_payload(result: ExtractionResult) -> dict:
    return {
        "threshold": _round6(result.threshold),
        "n_extracted": len(result.extracted_ids),
        "extracted_ids": list(result.extracted_ids),
        "category_counts": [
            {"category": c, "count": n} for c, n in result.category_counts.items()
        ],
    }
