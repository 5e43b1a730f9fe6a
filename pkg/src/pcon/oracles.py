"""Naive double-loop references for every contrastive loss.

Deliberately slow and independent of the production path: distances go
through the explicit Mobius addition, softmax denominators are direct sums
of exponentials, and everything is a plain Python loop over float64 numpy
rows.  Used only by tests and the self-test command.
"""

from __future__ import annotations

import math

import numpy as np

from .ball import BallConfig, hyp_distance


def _similarity(space_kind, ball: BallConfig | None):
    if space_kind == "cosine":
        return lambda u, v: float(np.dot(u, v))
    return lambda u, v: -hyp_distance(u, v, ball)


def info_nce(z: np.ndarray, tau: float, space_kind: str = "cosine", ball: BallConfig | None = None):
    """Per-anchor -log(exp(s_pos/tau) / sum_a exp(s_a/tau)), direct softmax."""
    z = np.asarray(z, dtype=np.float64)
    sim = _similarity(space_kind, ball)
    n = z.shape[0]
    per = np.zeros(n)
    for i in range(n):
        j = i ^ 1
        num = math.exp(sim(z[i], z[j]) / tau)
        den = 0.0
        for a in range(n):
            if a != i:
                den += math.exp(sim(z[i], z[a]) / tau)
        per[i] = -math.log(num / den)
    return per.sum(), per


def supcon(
    z: np.ndarray,
    labels,
    tau: float,
    space_kind: str = "cosine",
    ball: BallConfig | None = None,
):
    """Multi-positive form: mean over P(i) of -log softmax, 1/|P| outside."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    sim = _similarity(space_kind, ball)
    n = z.shape[0]
    per = np.zeros(n)
    for i in range(n):
        pos = [p for p in range(n) if p != i and y[p] == y[i]]
        if not pos:
            raise ValueError(f"anchor {i} has no positives")
        den = 0.0
        for a in range(n):
            if a != i:
                den += math.exp(sim(z[i], z[a]) / tau)
        acc = 0.0
        for p in pos:
            acc += -math.log(math.exp(sim(z[i], z[p]) / tau) / den)
        per[i] = acc / len(pos)
    return per.sum(), per


def set_info_nce(
    z_anchor: np.ndarray,
    z_positives: list[np.ndarray],
    z_negatives: np.ndarray,
    tau: float,
    space_kind: str = "cosine",
    ball: BallConfig | None = None,
):
    """Set-based anchor/positives/negatives loss used by the robust objective.

    ``z_positives`` holds one [B, d] array per positive role (the paired
    view, the adversarial view, ...).  Each anchor row averages its per-
    positive -log terms; the denominator covers that anchor's positives
    plus every shared negative.
    """
    z_anchor = np.asarray(z_anchor, dtype=np.float64)
    zp = [np.asarray(p, dtype=np.float64) for p in z_positives]
    zn = np.asarray(z_negatives, dtype=np.float64)
    sim = _similarity(space_kind, ball)
    n = z_anchor.shape[0]
    per = np.zeros(n)
    for i in range(n):
        pos_logits = [sim(z_anchor[i], p[i]) / tau for p in zp]
        neg_logits = [sim(z_anchor[i], zn[m]) / tau for m in range(zn.shape[0])]
        den = sum(math.exp(s) for s in pos_logits + neg_logits)
        per[i] = sum(-math.log(math.exp(s) / den) for s in pos_logits) / len(pos_logits)
    return per.sum(), per
