"""Evaluation engine for zero-shot OOD detection over pre-extracted features.

Scores images by matching global and local image features against class
text features (temperature-scaled softmax over cosine similarities), and
evaluates detectors with AUROC and FPR at a TPR target. Features travel in
a portable binary container so any vision-language extractor can feed the
engine.
"""

__version__ = "0.1.0"

from .embedding_store import (
    ClassVocabulary,
    DatasetManifest,
    EmbeddingSet,
    ImageFeatures,
    JoinedTable,
    ManifestEntry,
    Split,
    TextFeatures,
    join,
    read_embedding_set,
    read_manifest,
    write_embedding_set,
    write_manifest,
)
from .errors import (
    ConfigurationError,
    DomainError,
    FormatError,
    ManifestParseError,
    OodbenchError,
    ShapeError,
    TruncationError,
    ValidationError,
)
from .harness import (
    BenchmarkSpec,
    DataSource,
    EvalReport,
    ExtractionResult,
    Histogram,
    ScoreMap,
    SweepResult,
    evaluate,
    extract_id,
    histogram,
    score_map,
    sweep_lambda,
    sweep_tau,
    write_report,
)
from .metrics import LabeledScores, MetricResult, auroc, compute_metrics, fpr_at_tpr, roc_curve
from .scores import (
    ScoreConfig,
    ScoreFunction,
    ScoreRecord,
    cosine_similarities,
    score_batch,
    score_image,
    softmax_row,
)

__all__ = [name for name in dir() if not name.startswith("_")]
