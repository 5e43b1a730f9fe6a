"""Contrastive losses over cosine-hypersphere and Poincare-ball embeddings.

Each loss is built from autograd primitives so one backward pass yields
gradients for the whole encoder stack.  Softmax denominators are always
evaluated in log space.  The matching naive double-loop implementations
live in :mod:`pcon.oracles` and share no code with this module beyond the
reference ball geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ball import BallConfig

# Additive mask that removes an entry from a row softmax; exp() underflows
# to exactly 0 for float32 and float64.
_MASK = -1e30
_NORM_FLOOR = 1e-15
_DENOM_FLOOR = 1e-15


class ZeroNormRowError(ValueError):
    """A row that must be normalized has zero Euclidean norm."""


class BatchRejectionError(ValueError):
    """A supervised batch contains an anchor with no positives."""


@dataclass(frozen=True)
class Space:
    """Embedding space switch: cosine hypersphere or a configured ball."""

    kind: str  # "cosine" | "ball"
    ball: BallConfig | None = None

    @staticmethod
    def cosine() -> "Space":
        return Space("cosine")

    @staticmethod
    def poincare(ball: BallConfig) -> "Space":
        return Space("ball", ball)


@dataclass
class EmbeddingBatch:
    """2N projected embeddings, two augmented views per source.

    Views of source k sit at rows 2k and 2k+1, so the paired view of row i
    is row i XOR 1.  In cosine mode rows are unit vectors; in ball mode rows
    are exponential-map images inside the configured ball.
    """

    z: Tensor
    space: Space
    temperature: float = 0.5
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.z.data.ndim != 2 or self.z.shape[0] % 2 != 0:
            raise ValueError(f"expected [2N, d] embeddings, got shape {self.z.shape}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.labels is not None and len(self.labels) != self.z.shape[0]:
            raise ValueError("labels length must match number of rows")

    @property
    def n_rows(self) -> int:
        return self.z.shape[0]


@dataclass
class PositiveSet:
    """Per-anchor positive index sets, stored as a boolean [2N, 2N] mask."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if np.any(np.diag(self.mask)):
            raise ValueError("an anchor cannot be its own positive")
        if np.any(self.counts == 0):
            raise BatchRejectionError("anchor with empty positive set")

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @staticmethod
    def from_labels(labels) -> "PositiveSet":
        """P(i) = same-label rows excluding the anchor itself."""
        y = np.asarray(labels).reshape(-1)
        mask = y[:, None] == y[None, :]
        np.fill_diagonal(mask, False)
        return PositiveSet(mask)

    @staticmethod
    def view_pairs(n_rows: int) -> "PositiveSet":
        """The degenerate supervision where only augmentation twins match."""
        mask = np.zeros((n_rows, n_rows), dtype=bool)
        idx = np.arange(n_rows)
        mask[idx, idx ^ 1] = True
        return PositiveSet(mask)


@dataclass
class LossReport:
    """Scalar loss plus its per-anchor decomposition.

    ``node`` is the traced scalar; call ``autograd.backward(report.node)``
    to populate gradients.  ``total`` always equals ``per_anchor.sum()``.
    """

    total: float
    per_anchor: np.ndarray
    node: Tensor = field(repr=False)

    @staticmethod
    def from_per_anchor(per: Tensor) -> "LossReport":
        node = per.sum()
        total = float(node.data)
        if not np.isfinite(total):
            raise FloatingPointError("non-finite loss")
        return LossReport(total, per.data.ravel().copy(), node)


# ---------------------------------------------------------------------------
# differentiable geometry helpers
# ---------------------------------------------------------------------------


def pairwise_hyp_distance(a: Tensor, b: Tensor, ball: BallConfig) -> Tensor:
    """All-pairs geodesic distances, [n, d] x [m, d] -> [n, m].

    Uses the closed form ||-x (+) y||^2 = ||x - y||^2 / (1 - 2c<x,y> +
    c^2 ||x||^2 ||y||^2), which needs only the Gram matrix instead of an
    explicit Mobius sum per pair.  The arctanh argument is clamped to
    1 - boundary_eps.
    """
    c = ball.curvature
    gram = a @ b.T
    sa = ag.dot(a, a, axis=1)  # [n, 1]
    sb = ag.dot(b, b, axis=1)  # [m, 1]
    d2 = ag.clamp(sa - 2.0 * gram + sb.T, lo=0.0)
    den = ag.clamp(1.0 - 2.0 * c * gram + (c * c) * (sa * sb.T), lo=_DENOM_FLOOR)
    arg = ag.clamp(ball.sqrt_c * ag.sqrt(d2 / den), hi=1.0 - ball.boundary_eps)
    return (2.0 / ball.sqrt_c) * ag.arctanh(arg)


def rowwise_hyp_distance(a: Tensor, b: Tensor, ball: BallConfig) -> Tensor:
    """Geodesic distance between matched rows, [n, d] x [n, d] -> [n, 1]."""
    c = ball.curvature
    g = ag.dot(a, b, axis=1)
    sa = ag.dot(a, a, axis=1)
    sb = ag.dot(b, b, axis=1)
    d2 = ag.clamp(sa - 2.0 * g + sb, lo=0.0)
    den = ag.clamp(1.0 - 2.0 * c * g + (c * c) * (sa * sb), lo=_DENOM_FLOOR)
    arg = ag.clamp(ball.sqrt_c * ag.sqrt(d2 / den), hi=1.0 - ball.boundary_eps)
    return (2.0 / ball.sqrt_c) * ag.arctanh(arg)


def pairwise_logits(a: Tensor, b: Tensor, space: Space, tau: float) -> Tensor:
    """Similarity logits for the contrastive softmax, [n, m].

    Cosine mode assumes rows are already unit vectors and uses the dot
    product; ball mode uses the negative geodesic distance.
    """
    if space.kind == "cosine":
        return (a @ b.T) / tau
    return -pairwise_hyp_distance(a, b, space.ball) / tau


def rowwise_logits(a: Tensor, b: Tensor, space: Space, tau: float) -> Tensor:
    if space.kind == "cosine":
        return ag.dot(a, b, axis=1) / tau
    return -rowwise_hyp_distance(a, b, space.ball) / tau


def exp_map0_rows(v: Tensor, ball: BallConfig) -> Tensor:
    """Differentiable batched exponential map at the origin, row by row.

    The 0/0 at a zero row resolves to the origin through the norm floor,
    matching the explicit branch of the reference implementation.
    """
    norm = ag.l2_norm(v, axis=1)
    s = ag.clamp(ball.sqrt_c * norm, lo=_NORM_FLOOR)
    out = v * (ag.tanh(s) / s)
    return clip_rows_to_ball(out, ball)


def clip_rows_to_ball(x: Tensor, ball: BallConfig) -> Tensor:
    """Radially rescale any row outside the safety margin back onto it."""
    norm = ag.clamp(ag.l2_norm(x, axis=1), lo=_NORM_FLOOR)
    return x * ag.clamp(ball.max_norm / norm, hi=1.0)


def project_rows(raw: Tensor, space: Space, normalize_first: bool = True) -> Tensor:
    """Map raw projection-head rows into the configured embedding space.

    Cosine mode L2-normalizes every row.  Ball mode optionally normalizes,
    then applies the exponential map at the origin and clips to the safety
    margin.  Raises :class:`ZeroNormRowError` when a row that must be
    normalized has zero norm.
    """
    if not np.all(np.isfinite(raw.data)):
        raise FloatingPointError("non-finite embeddings")
    if space.kind == "cosine" or normalize_first:
        norms = np.linalg.norm(raw.data, axis=1)
        if np.any(norms == 0.0):
            raise ZeroNormRowError("cannot normalize a zero-norm embedding row")
    if space.kind == "cosine":
        return raw / ag.l2_norm(raw, axis=1)
    v = raw / ag.l2_norm(raw, axis=1) if normalize_first else raw
    return exp_map0_rows(v, space.ball)


def project_embeddings(
    raw: Tensor,
    space: Space,
    normalize_first: bool = True,
    temperature: float = 0.5,
    labels: np.ndarray | None = None,
) -> EmbeddingBatch:
    """Project a paired-view [2N, d] batch; see :func:`project_rows`."""
    z = project_rows(raw, space, normalize_first)
    return EmbeddingBatch(z=z, space=space, temperature=temperature, labels=labels)


# ---------------------------------------------------------------------------
# the four loss families
# ---------------------------------------------------------------------------


def _self_logits(batch: EmbeddingBatch) -> Tensor:
    n = batch.n_rows
    logits = pairwise_logits(batch.z, batch.z, batch.space, batch.temperature)
    mask = np.zeros((n, n), dtype=batch.z.dtype)
    np.fill_diagonal(mask, _MASK)
    return logits + Tensor(mask)


def _nce_per_anchor(logits: Tensor) -> Tensor:
    """-log softmax weight of the paired view, for every anchor row."""
    n = logits.shape[0]
    lse = ag.logsumexp(logits, axis=1)
    idx = np.arange(n)
    pos = logits[(idx, idx ^ 1)].reshape(n, 1)
    return lse - pos


def _supervised_per_anchor(logits: Tensor, positives: PositiveSet) -> Tensor:
    """Mean -log softmax weight over each anchor's positive set.

    The 1/|P(i)| averaging sits outside the log, and the denominator keeps
    every non-anchor row including the other positives.
    """
    n = logits.shape[0]
    if positives.mask.shape != (n, n):
        raise ValueError("positives mask shape must match the batch")
    lse = ag.logsumexp(logits, axis=1)
    counts = positives.counts.reshape(n, 1).astype(logits.dtype)
    pos_mean = (logits * Tensor(positives.mask.astype(logits.dtype))).sum(
        axis=1, keepdims=True
    ) / Tensor(counts)
    return lse - pos_mean


def info_nce_cosine(batch: EmbeddingBatch) -> LossReport:
    """Self-supervised contrastive loss with dot-product similarity."""
    _require(batch, "cosine")
    return LossReport.from_per_anchor(_nce_per_anchor(_self_logits(batch)))


def hcl_loss(batch: EmbeddingBatch) -> LossReport:
    """Self-supervised contrastive loss with negative geodesic similarity."""
    _require(batch, "ball")
    return LossReport.from_per_anchor(_nce_per_anchor(_self_logits(batch)))


def supcon_cosine(batch: EmbeddingBatch, positives: PositiveSet | None = None) -> LossReport:
    """Supervised multi-positive contrastive loss on the hypersphere."""
    _require(batch, "cosine")
    positives = _resolve_positives(batch, positives)
    return LossReport.from_per_anchor(_supervised_per_anchor(_self_logits(batch), positives))


def shcl_loss(batch: EmbeddingBatch, positives: PositiveSet | None = None) -> LossReport:
    """Supervised multi-positive contrastive loss in the Poincare ball."""
    _require(batch, "ball")
    positives = _resolve_positives(batch, positives)
    return LossReport.from_per_anchor(_supervised_per_anchor(_self_logits(batch), positives))


def _require(batch: EmbeddingBatch, kind: str):
    if batch.space.kind != kind:
        raise ValueError(f"loss requires {kind} embeddings, batch is {batch.space.kind}")
    if kind == "ball":
        ball = batch.space.ball
        norms = np.linalg.norm(batch.z.data, axis=1)
        if np.any(ball.curvature * norms * norms >= 1.0):
            raise ValueError("embedding row outside the Poincare ball")


def _resolve_positives(batch: EmbeddingBatch, positives: PositiveSet | None) -> PositiveSet:
    if positives is not None:
        return positives
    if batch.labels is None:
        raise BatchRejectionError("supervised loss requires labels or an explicit PositiveSet")
    return PositiveSet.from_labels(batch.labels)
