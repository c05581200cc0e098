"""Command-line front end.

Subcommands:

    validate   check embedding files (and optional manifests) for integrity
    eval       FPR95/AUROC table over one ID source and named OOD sources
    sweep      re-run eval over a list of lambda or tau values
    histogram  binned counts of per-image scores
    extract    images scoring at or above a threshold, with category counts
    scoremap   per-region argmax class / probability grids as plot data

Data sources are given as `features.glmc` or `features.glmc:manifest.csv`;
OOD sources carry a name: `--ood inat=feats_inat.glmc:inat.csv`. Reports go
to stdout or --out; diagnostics go to stderr, with verbosity controlled by
the OODBENCH_LOG environment variable (debug/info/warning/error).

Exit codes: 0 success, 1 validation or configuration failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

from . import __version__
from .embedding_store import DatasetManifest, EmbeddingSet, join, read_embedding_set, read_manifest
from .errors import OodbenchError
from .harness import (
    BenchmarkSpec,
    DataSource,
    SweepParameter,
    evaluate,
    extract_id,
    histogram,
    score_map,
    sweep_lambda,
    sweep_tau,
    write_report,
)
from .scores import ScoreConfig, ScoreFunction, score_batch

log = logging.getLogger("oodbench")

_SCORE_CHOICES = [f.value for f in ScoreFunction]


@dataclass(frozen=True)
class SetRef:
    """A features path with an optional attached manifest path."""

    features_path: str
    manifest_path: str | None

    @classmethod
    def parse(cls, token: str) -> "SetRef":
        features, sep, manifest = token.partition(":")
        return cls(features, manifest if sep else None)

    def load(self, require_manifest: bool) -> tuple[EmbeddingSet, DatasetManifest | None]:
        embeddings = read_embedding_set(self.features_path)
        manifest = None
        if self.manifest_path is not None:
            manifest = read_manifest(self.manifest_path)
        elif require_manifest:
            raise OodbenchError(
                f"'{self.features_path}': a manifest is required (use features.glmc:manifest.csv)"
            )
        return embeddings, manifest


def _parse_ood(token: str) -> tuple[str, SetRef]:
    name, sep, ref = token.partition("=")
    if not sep or not name:
        raise OodbenchError(f"--ood expects name=features.glmc:manifest.csv, got '{token}'")
    return name, SetRef.parse(ref)


def _parse_values(token: str) -> list[float]:
    try:
        return [float(v) for v in token.split(",") if v.strip() != ""]
    except ValueError:
        raise OodbenchError(f"--values expects comma-separated numbers, got '{token}'") from None


def _parse_range(token: str) -> tuple[float, float]:
    parts = token.split(",")
    if len(parts) != 2:
        raise OodbenchError(f"--range expects lo,hi, got '{token}'")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise OodbenchError(f"--range expects numbers, got '{token}'") from None


def _add_source_flags(parser: argparse.ArgumentParser, with_ood: bool) -> None:
    parser.add_argument("--id", required=True, metavar="FEATS[:MANIFEST]",
                        help="ID embedding file, optionally paired with its manifest")
    if with_ood:
        parser.add_argument("--ood", action="append", default=[], metavar="NAME=FEATS:MANIFEST",
                            help="named OOD source; repeatable")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--score", action="append", choices=_SCORE_CHOICES, metavar="FN",
                        help=f"score function, repeatable (one of: {', '.join(_SCORE_CHOICES)}); "
                             "default glmcm")
    parser.add_argument("--tau", type=float, default=1.0, help="softmax temperature (default 1.0)")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.5,
                        help="local score weight for glmcm (default 0.5)")


def _add_output_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="report format")
    parser.add_argument("--out", help="write the report to this file instead of stdout")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodbench", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"oodbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check embedding files and manifests")
    p.add_argument("sources", nargs="+", metavar="FEATS[:MANIFEST]",
                   help="embedding files, each optionally paired with a manifest")

    p = sub.add_parser("eval", help="FPR95/AUROC benchmark table")
    _add_source_flags(p, with_ood=True)
    _add_config_flags(p)
    _add_output_flags(p)

    p = sub.add_parser("sweep", help="eval repeated over lambda or tau values")
    _add_source_flags(p, with_ood=True)
    _add_config_flags(p)
    _add_output_flags(p)
    p.add_argument("--param", choices=[SweepParameter.LAMBDA, SweepParameter.TAU], required=True,
                   help="which parameter to sweep")
    p.add_argument("--values", required=True, help="comma-separated sweep values")

    p = sub.add_parser("histogram", help="binned score counts for one source")
    _add_source_flags(p, with_ood=False)
    _add_config_flags(p)
    _add_output_flags(p)
    p.add_argument("--bins", type=int, default=50, help="number of uniform bins (default 50)")
    p.add_argument("--range", dest="value_range", metavar="LO,HI",
                   help="bin range; defaults to the observed score range")

    p = sub.add_parser("extract", help="images scoring at or above a threshold")
    _add_source_flags(p, with_ood=False)
    _add_config_flags(p)
    _add_output_flags(p)
    p.add_argument("--threshold", type=float, required=True, help="extraction threshold")

    p = sub.add_parser("scoremap", help="per-region class/probability grids")
    _add_source_flags(p, with_ood=False)
    _add_config_flags(p)
    _add_output_flags(p)
    p.add_argument("images", nargs="*", metavar="IMAGE_ID",
                   help="restrict the export to these image ids (default: all)")

    return parser


def _configs(args) -> tuple[ScoreConfig, ...]:
    functions = args.score or ["glmcm"]
    return tuple(ScoreConfig(ScoreFunction(f), tau=args.tau, lam=args.lam) for f in functions)


def _single_config(args) -> ScoreConfig:
    configs = _configs(args)
    if len(configs) != 1:
        raise OodbenchError("this subcommand takes exactly one --score")
    return configs[0]


def _emit(report, args) -> None:
    if args.out:
        write_report(report, args.format, args.out)
    else:
        write_report(report, args.format, sys.stdout)


def _cmd_validate(args) -> int:
    for token in args.sources:
        ref = SetRef.parse(token)
        embeddings, manifest = ref.load(require_manifest=False)
        line = (
            f"{ref.features_path}: ok "
            f"(classes={embeddings.text.k}, width={embeddings.text.c}, images={len(embeddings.images)})"
        )
        if manifest is not None:
            table = join(embeddings, manifest)
            line += (
                f"; join: {len(table)} matched, {table.n_unlabeled_features} unlabeled features, "
                f"{table.n_missing_features} manifest entries without features"
            )
        print(line)
    return 0


def _benchmark_spec(args) -> BenchmarkSpec:
    if not args.ood:
        raise OodbenchError("at least one --ood source is required")
    id_embeddings, id_manifest = SetRef.parse(args.id).load(require_manifest=True)
    ood_sets = []
    for token in args.ood:
        name, ref = _parse_ood(token)
        embeddings, manifest = ref.load(require_manifest=True)
        ood_sets.append((name, DataSource(embeddings, manifest)))
    return BenchmarkSpec(DataSource(id_embeddings, id_manifest), tuple(ood_sets), _configs(args))


def _cmd_eval(args) -> int:
    _emit(evaluate(_benchmark_spec(args), jobs=args.jobs), args)
    return 0


def _cmd_sweep(args) -> int:
    spec = _benchmark_spec(args)
    values = _parse_values(args.values)
    if args.param == SweepParameter.LAMBDA:
        result = sweep_lambda(spec, values, jobs=args.jobs)
    else:
        result = sweep_tau(spec, values, jobs=args.jobs)
    _emit(result, args)
    return 0


def _scored_records(args):
    embeddings, manifest = SetRef.parse(args.id).load(require_manifest=False)
    records = score_batch(embeddings, _single_config(args), jobs=args.jobs)
    if manifest is not None:
        labeled = set(manifest.by_id())
        records = [r for r in records if r.image_id in labeled]
    return embeddings, manifest, records


def _cmd_histogram(args) -> int:
    _, _, records = _scored_records(args)
    value_range = _parse_range(args.value_range) if args.value_range else None
    _emit(histogram(records, bins=args.bins, value_range=value_range), args)
    return 0


def _cmd_extract(args) -> int:
    ref = SetRef.parse(args.id)
    if ref.manifest_path is None:
        raise OodbenchError("extract needs a manifest for category counts (features.glmc:manifest.csv)")
    _, manifest, records = _scored_records(args)
    _emit(extract_id(records, manifest, args.threshold), args)
    return 0


def _cmd_scoremap(args) -> int:
    embeddings, _ = SetRef.parse(args.id).load(require_manifest=False)
    config = _single_config(args)
    by_id = {img.image_id: img for img in embeddings.images}
    if args.images:
        missing = [i for i in args.images if i not in by_id]
        if missing:
            raise OodbenchError(f"image ids not in the embedding set: {', '.join(missing)}")
        selected = [by_id[i] for i in args.images]
    else:
        selected = sorted(embeddings.images, key=lambda img: img.image_id)
    maps = [score_map(img, embeddings.text, config) for img in selected]
    _emit(maps, args)
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "histogram": _cmd_histogram,
    "extract": _cmd_extract,
    "scoremap": _cmd_scoremap,
}


def _configure_logging() -> None:
    # rebind to the current stderr on every invocation
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers.clear()
    log.addHandler(handler)
    log.propagate = False
    level = os.environ.get("OODBENCH_LOG", "warning").upper()
    log.setLevel(getattr(logging, level, logging.WARNING))


def run(argv: list[str] | None = None) -> int:
    """Parse argv and execute; returns the process exit code."""
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage/help itself
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (OodbenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
