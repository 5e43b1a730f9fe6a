"""Instance-wise l-inf attacks on contrastive objectives and the robust loss.

The attack ascends the configured contrastive loss by the sign of its input
gradient, projecting every iterate back into the epsilon box intersected
with [0, 1].  The robust objective re-enters the attacked images as
constants: no gradient ever flows through the sign step, only through the
model parameters on the clean and adversarial forward passes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .losses import LossReport, Space, pairwise_logits, project_rows, rowwise_logits

_MASK = -1e30
_FEAS_SLACK = 1e-12  # float rounding slack on the exact l-inf feasibility check


class AttackError(RuntimeError):
    """Raised when an attack produces a non-finite gradient."""


@dataclass
class AttackConfig:
    """Parameters of the projected sign-gradient attack.

    ``epsilon`` and ``alpha`` are in pixel units on the [0, 1] scale.
    ``loss_space`` selects which contrastive loss the attack maximizes.
    """

    epsilon: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    steps: int = 10
    loss_space: Space = field(default_factory=Space.cosine)
    temperature: float = 0.5
    normalize_first: bool = True
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("epsilon, alpha and steps must be nonnegative")
        if self.alpha > self.epsilon > 0:
            warnings.warn(
                f"attack step alpha={self.alpha} exceeds epsilon={self.epsilon}",
                stacklevel=2,
            )


@dataclass
class AdversarialTriple:
    """Anchor, paired view, and the attacked anchor, all identically shaped."""

    anchor: np.ndarray
    positive: np.ndarray
    adversarial: np.ndarray

    def __post_init__(self):
        if not (self.anchor.shape == self.positive.shape == self.adversarial.shape):
            raise ValueError("triple members must share one shape")

    def max_perturbation(self) -> float:
        return float(np.max(np.abs(self.adversarial - self.anchor)))


def _assert_feasible(x_adv: np.ndarray, x: np.ndarray, epsilon: float):
    if float(np.max(np.abs(x_adv - x))) > epsilon + _FEAS_SLACK:
        raise AssertionError("attack iterate escaped the epsilon box")
    if float(x_adv.min()) < 0.0 or float(x_adv.max()) > 1.0:
        raise AssertionError("attack iterate escaped pixel range [0, 1]")


def pgd_ascend(loss_fn, x: np.ndarray, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Maximize ``loss_fn`` under the l-inf constraint around ``x``.

    ``loss_fn`` maps a requires-grad tensor shaped like ``x`` to a scalar
    tensor.  Feasibility (box and pixel range) is asserted after every
    step.  Returns the final iterate as a new array.
    """
    lo = np.maximum(x - cfg.epsilon, 0.0)
    hi = np.minimum(x + cfg.epsilon, 1.0)
    if cfg.random_start and cfg.epsilon > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        x_adv = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), lo, hi)
    else:
        x_adv = x.copy()
    _assert_feasible(x_adv, x, cfg.epsilon)
    for _ in range(cfg.steps):
        leaf = Tensor(x_adv.copy(), requires_grad=True)
        loss = loss_fn(leaf)
        ag.backward(loss)
        grad = leaf.grad
        if grad is None or not np.all(np.isfinite(grad)):
            raise AttackError("non-finite or missing input gradient during attack")
        x_adv = np.clip(x_adv + cfg.alpha * np.sign(grad), lo, hi)
        _assert_feasible(x_adv, x, cfg.epsilon)
    return x_adv


# ---------------------------------------------------------------------------
# contrastive attack losses
# ---------------------------------------------------------------------------


def _embed(model, x: Tensor, cfg: AttackConfig, frozen: bool) -> Tensor:
    raw = model.forward(x, frozen=frozen)
    return project_rows(raw, cfg.loss_space, normalize_first=cfg.normalize_first)


def _diag_mask(n: int, dtype) -> Tensor:
    m = np.zeros((n, n), dtype=dtype)
    np.fill_diagonal(m, _MASK)
    return Tensor(m)


def _attack_per_anchor(z_iter, z_clean, z_pos, z_negs, cfg) -> "ag.Tensor":
    """-log softmax of the paired view for each attacked anchor row.

    With explicit negatives the candidate set is {own positive} + the shared
    negatives.  Without, it is the standard within-batch set: the other
    clean anchors and all clean paired views.
    """
    tau = cfg.temperature
    b = z_iter.shape[0]
    if z_negs is not None:
        pos = rowwise_logits(z_iter, z_pos, cfg.loss_space, tau)  # [B,1]
        neg = pairwise_logits(z_iter, z_negs, cfg.loss_space, tau)  # [B,M]
        logits = ag.concat([pos, neg], axis=1)
        return ag.logsumexp(logits, axis=1) - pos
    s_anchor = pairwise_logits(z_iter, z_clean, cfg.loss_space, tau) + _diag_mask(
        b, z_iter.dtype
    )
    s_pair = pairwise_logits(z_iter, z_pos, cfg.loss_space, tau)
    logits = ag.concat([s_anchor, s_pair], axis=1)  # [B, 2B]
    idx = np.arange(b)
    pos = logits[(idx, b + idx)].reshape(b, 1)
    return ag.logsumexp(logits, axis=1) - pos


def instance_attack(
    model,
    x: np.ndarray,
    x_pos: np.ndarray,
    negatives: np.ndarray | None,
    cfg: AttackConfig,
    rng=None,
) -> AdversarialTriple:
    """Attack each anchor to maximize its own contrastive term.

    ``model`` exposes ``forward(tensor, frozen=...)`` returning raw
    projection outputs; weights are read-only here.  ``negatives`` is a
    shared [M, ...] sample stack, or None for within-batch negatives.
    Positive and negative embeddings are constant across iterations, so
    they are embedded once.
    """
    z_pos = _embed(model, Tensor(x_pos), cfg, frozen=True)
    z_pos = Tensor(z_pos.data)
    z_clean = None
    z_negs = None
    if negatives is None:
        z_clean = Tensor(_embed(model, Tensor(x), cfg, frozen=True).data)
    else:
        z_negs = Tensor(_embed(model, Tensor(negatives), cfg, frozen=True).data)

    def loss_fn(leaf: Tensor):
        z_iter = _embed(model, leaf, cfg, frozen=True)
        return _attack_per_anchor(z_iter, z_clean, z_pos, z_negs, cfg).sum()

    x_adv = pgd_ascend(loss_fn, np.asarray(x, dtype=np.float64), cfg, rng=rng)
    return AdversarialTriple(np.asarray(x), np.asarray(x_pos), x_adv.astype(x.dtype))


def rhcl_loss(
    model,
    x: np.ndarray,
    x_pos: np.ndarray,
    negatives: np.ndarray | None,
    lam: float,
    cfg: AttackConfig,
    rng=None,
) -> tuple[LossReport, AdversarialTriple]:
    """Robust contrastive objective: clean term with the attacked view as an
    extra positive, plus ``lam`` times the attacked-anchor term.

    The multi-positive term averages per-positive -log softmax weights with
    the averaging outside the log; denominators keep the full candidate
    set.  The attacked images enter the final tape as constants while model
    parameters stay live on every forward pass.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    triple = instance_attack(model, x, x_pos, negatives, cfg, rng=rng)
    tau = cfg.temperature
    b = x.shape[0]

    z1 = _embed(model, Tensor(x), cfg, frozen=False)
    z2 = _embed(model, Tensor(x_pos), cfg, frozen=False)
    # the attacked views re-enter at the training dtype, as constants
    za = _embed(model, Tensor(np.asarray(triple.adversarial, dtype=x.dtype)), cfg, frozen=False)
    idx = np.arange(b)

    if negatives is not None:
        zn = _embed(model, Tensor(negatives), cfg, frozen=False)
        s_pair = rowwise_logits(z1, z2, cfg.loss_space, tau)
        s_adv = rowwise_logits(z1, za, cfg.loss_space, tau)
        s_neg = pairwise_logits(z1, zn, cfg.loss_space, tau)
        logits1 = ag.concat([s_pair, s_adv, s_neg], axis=1)
        per1 = ag.logsumexp(logits1, axis=1) - 0.5 * (s_pair + s_adv)

        t_pair = rowwise_logits(za, z2, cfg.loss_space, tau)
        t_neg = pairwise_logits(za, zn, cfg.loss_space, tau)
        logits2 = ag.concat([t_pair, t_neg], axis=1)
        per2 = ag.logsumexp(logits2, axis=1) - t_pair
    else:
        # Within-batch candidates: other anchors and all paired views are
        # negatives; each anchor adds only its own adversarial view.
        s_anchor = pairwise_logits(z1, z1, cfg.loss_space, tau) + _diag_mask(b, z1.dtype)
        s_pair_all = pairwise_logits(z1, z2, cfg.loss_space, tau)
        s_adv = rowwise_logits(z1, za, cfg.loss_space, tau)
        logits1 = ag.concat([s_anchor, s_pair_all, s_adv], axis=1)  # [B, 2B+1]
        s_pair = logits1[(idx, b + idx)].reshape(b, 1)
        per1 = ag.logsumexp(logits1, axis=1) - 0.5 * (s_pair + s_adv)

        t_anchor = pairwise_logits(za, z1, cfg.loss_space, tau) + _diag_mask(b, za.dtype)
        t_pair_all = pairwise_logits(za, z2, cfg.loss_space, tau)
        logits2 = ag.concat([t_anchor, t_pair_all], axis=1)  # [B, 2B]
        t_pair = logits2[(idx, b + idx)].reshape(b, 1)
        per2 = ag.logsumexp(logits2, axis=1) - t_pair

    per = per1 + lam * per2
    return LossReport.from_per_anchor(per), triple
