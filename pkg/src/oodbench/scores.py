"""Confidence scores for zero-shot OOD detection over pre-extracted features.

All scores derive from cosine similarities between image features and the
per-class text features, turned into per-class probabilities by a
temperature-scaled softmax. The global feature yields one probability
vector; each row of the local feature map yields one more. Higher score
means more ID-like.

Score functions:

    MCM                 max class probability of the global feature
    LMCM                max class probability over all local regions
    GLMCM               MCM + lambda * LMCM (the global/local ensemble)
    ENTROPY             -(H(global probs) + max over regions of H(region probs))
    VAR                 population variance of global sims + max region variance
    COS                 max global cosine + max local cosine (no softmax)
    G_OR_L              max(MCM, LMCM)
    CLASS_AVG           regions grouped by their argmax class; max group mean
    CLASS_AVG_PLUS_MCM  CLASS_AVG + MCM

ENTROPY takes the max (not min) of the per-region entropies, so its local
term tracks the most uncertain region; that is the definition this family
of scores uses, kept verbatim even though a min would match the
"max confidence" intuition of the other scores.

Every function here is pure and operates on immutable inputs, so batch
scoring can partition images across workers freely.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .embedding_store import EmbeddingSet, ImageFeatures, TextFeatures
from .errors import DomainError, ShapeError, ValidationError


class ScoreFunction(Enum):
    MCM = "mcm"
    LMCM = "lmcm"
    GLMCM = "glmcm"
    ENTROPY = "entropy"
    VAR = "var"
    COS = "cos"
    G_OR_L = "g_or_l"
    CLASS_AVG = "class_avg"
    CLASS_AVG_PLUS_MCM = "class_avg_plus_mcm"


# Functions whose value is a weighted global + local sum controlled by lambda.
ENSEMBLE_FUNCTIONS = frozenset({ScoreFunction.GLMCM})


@dataclass(frozen=True)
class ScoreConfig:
    """Score-function selector plus temperature and global/local weight.

    tau is ignored by COS and VAR; lam only affects GLMCM (the other
    two-part scores use a fixed unit weight).
    """

    function: ScoreFunction = ScoreFunction.GLMCM
    tau: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau <= 0.0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not np.isfinite(self.lam) or self.lam < 0.0:
            raise ValidationError(f"lambda must be non-negative, got {self.lam}")

    @property
    def name(self) -> str:
        return f"{self.function.value}_tau{self.tau:g}_lam{self.lam:g}"


@dataclass(frozen=True)
class ScoreComponents:
    global_part: float
    local_part: float


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    value: float
    components: ScoreComponents | None = None


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    rows = matrix.astype(np.float64, copy=False)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if not np.isfinite(rows).all():
        raise DomainError(f"{what}: non-finite value")
    if (norms == 0.0).any():
        raise DomainError(f"{what}: zero-norm vector")
    return rows / norms


def _similarity_matrix(rows: np.ndarray, text: TextFeatures, what: str) -> np.ndarray:
    if rows.shape[1] != text.c:
        raise ShapeError(f"{what}: feature width {rows.shape[1]} != text width {text.c}")
    sims = _unit_rows(rows, what) @ _unit_rows(text.matrix, "text.matrix").T
    return np.clip(sims, -1.0, 1.0)


def cosine_similarities(image: ImageFeatures, text: TextFeatures) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities of the global feature and each local row against every class.

    Returns (global_sims of shape (K,), local_sims of shape (H*W, K)), each
    entry clipped into [-1, 1]. Both go through the same kernel so a
    one-region map with local row == global vector yields identical numbers.
    """
    name = f"image '{image.image_id}'"
    global_sims = _similarity_matrix(image.global_[None, :], text, f"{name}.global")[0]
    local_sims = _similarity_matrix(image.local, text, f"{name}.local")
    return global_sims, local_sims


def softmax_row(sims: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled softmax of one similarity vector, max-subtracted.

    The max subtraction keeps exp() in range for small tau (the scaled
    logits reach 1/tau in magnitude) without changing the result.
    """
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    sims = np.asarray(sims, dtype=np.float64)
    if not np.isfinite(sims).all():
        raise DomainError("softmax input contains a non-finite value")
    return _softmax_rows(sims[None, :], tau)[0]


def _softmax_rows(sims: np.ndarray, tau: float) -> np.ndarray:
    z = sims / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    # 0 * log(0) := 0 for probabilities that underflowed to exactly zero.
    safe = np.where(probs > 0.0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=1)


@dataclass(frozen=True)
class _Similarities:
    """Per-image similarity and probability tables shared by the score kernels."""

    global_sims: np.ndarray  # (K,)
    local_sims: np.ndarray  # (HW, K)
    global_probs: np.ndarray  # (K,)
    local_probs: np.ndarray  # (HW, K)


def _prepare(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> _Similarities:
    global_sims, local_sims = cosine_similarities(image, text)
    global_probs = _softmax_rows(global_sims[None, :], config.tau)[0]
    local_probs = _softmax_rows(local_sims, config.tau)
    return _Similarities(global_sims, local_sims, global_probs, local_probs)


def _mcm_value(sims: _Similarities) -> float:
    return float(sims.global_probs.max())


def _lmcm_value(sims: _Similarities) -> float:
    return float(sims.local_probs.max())


def _class_avg_value(sims: _Similarities) -> float:
    return _class_avg_from_probs(sims.local_probs)


def _class_avg_from_probs(local_probs: np.ndarray) -> float:
    """Group regions by argmax class, then take the best group's mean score.

    Argmax ties break toward the lowest class index; classes predicted by
    no region are skipped rather than treated as empty means.
    """
    preds = local_probs.argmax(axis=1)
    best = -np.inf
    for cls in np.unique(preds):
        group_mean = float(local_probs[preds == cls, cls].mean())
        if group_mean > best:
            best = group_mean
    return best


def mcm(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Max temperature-softmaxed class probability of the global feature."""
    sims = _prepare(image, text, config)
    return ScoreRecord(image.image_id, _mcm_value(sims))


def lmcm(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Max per-region class probability over all regions of the local map."""
    sims = _prepare(image, text, config)
    return ScoreRecord(image.image_id, _lmcm_value(sims))


def glmcm(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Global/local ensemble: MCM + lambda * LMCM, components kept."""
    sims = _prepare(image, text, config)
    g = _mcm_value(sims)
    l = _lmcm_value(sims)
    return ScoreRecord(image.image_id, g + config.lam * l, ScoreComponents(g, l))


def entropy_score(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Negative of: global entropy plus the highest per-region entropy.

    The local term uses the max (most uncertain region), matching this
    variant's definition; see the module docstring.
    """
    sims = _prepare(image, text, config)
    g = -float(_entropy_rows(sims.global_probs[None, :])[0])
    l = -float(_entropy_rows(sims.local_probs).max())
    return ScoreRecord(image.image_id, g + l, ScoreComponents(g, l))


def var_score(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Population variance of the global sims plus the max per-region variance."""
    global_sims, local_sims = cosine_similarities(image, text)
    g = float(global_sims.var())
    l = float(local_sims.var(axis=1).max())
    return ScoreRecord(image.image_id, g + l, ScoreComponents(g, l))


def cos_score(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Raw best cosine similarity, global plus local, no softmax scaling."""
    global_sims, local_sims = cosine_similarities(image, text)
    g = float(global_sims.max())
    l = float(local_sims.max())
    return ScoreRecord(image.image_id, g + l, ScoreComponents(g, l))


def g_or_l(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """The higher of the global and local max-probability scores."""
    sims = _prepare(image, text, config)
    g = _mcm_value(sims)
    l = _lmcm_value(sims)
    return ScoreRecord(image.image_id, max(g, l), ScoreComponents(g, l))


def class_avg(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Best class-wise average of per-region probabilities (local only)."""
    sims = _prepare(image, text, config)
    return ScoreRecord(image.image_id, _class_avg_value(sims))


def class_avg_plus_mcm(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """CLASS_AVG ensembled with MCM at unit weight."""
    sims = _prepare(image, text, config)
    g = _mcm_value(sims)
    l = _class_avg_value(sims)
    return ScoreRecord(image.image_id, g + l, ScoreComponents(g, l))


_DISPATCH = {
    ScoreFunction.MCM: mcm,
    ScoreFunction.LMCM: lmcm,
    ScoreFunction.GLMCM: glmcm,
    ScoreFunction.ENTROPY: entropy_score,
    ScoreFunction.VAR: var_score,
    ScoreFunction.COS: cos_score,
    ScoreFunction.G_OR_L: g_or_l,
    ScoreFunction.CLASS_AVG: class_avg,
    ScoreFunction.CLASS_AVG_PLUS_MCM: class_avg_plus_mcm,
}


def score_image(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> ScoreRecord:
    """Apply the configured score function to one image."""
    return _DISPATCH[config.function](image, text, config)


def score_map_probs(image: ImageFeatures, text: TextFeatures, config: ScoreConfig) -> np.ndarray:
    """The (H*W, K) per-region probability table behind LMCM and the score maps.

    Exported so grid visualizations use the exact numbers LMCM maximizes over.
    """
    return _prepare(image, text, config).local_probs


def score_features(
    images: Sequence[ImageFeatures],
    text: TextFeatures,
    config: ScoreConfig,
    jobs: int = 1,
) -> list[ScoreRecord]:
    """Score a feature list against one text table, preserving input order.

    Deterministic: identical inputs give bit-identical records regardless
    of the worker count. Per-image errors are re-raised with the image_id
    attached.
    """
    def one(image: ImageFeatures) -> ScoreRecord:
        try:
            return score_image(image, text, config)
        except Exception as exc:
            raise type(exc)(f"image '{image.image_id}': {exc}") from exc

    if jobs > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, images))
    return [one(image) for image in images]


def score_batch(embedding_set: EmbeddingSet, config: ScoreConfig, jobs: int = 1) -> list[ScoreRecord]:
    """Score every image of a set, in canonical (sorted image_id) order."""
    images = sorted(embedding_set.images, key=lambda img: img.image_id)
    return score_features(images, embedding_set.text, config, jobs=jobs)
