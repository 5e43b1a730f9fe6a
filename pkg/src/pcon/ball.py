"""Gyrovector operations on the Poincare ball model of hyperbolic space.

The ball of curvature ``c > 0`` is the set ``{x : c * ||x||^2 < 1}``.  All
functions here are pure, operate on plain float64 numpy vectors, and keep
their outputs strictly inside the ball via a configurable safety margin.
They are the reference implementations used by the loss oracles and the
property suite; the differentiable training path composes the same formulas
out of autograd primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Guard for the Mobius denominator, which is provably positive on the open
# ball; the floor only absorbs rounding.
_DENOM_FLOOR = 1e-15


class BallError(ValueError):
    """Raised for dimension/configuration mismatches and invalid ball inputs."""


@dataclass(frozen=True)
class BallConfig:
    """Curvature and numeric policy for one Poincare ball.

    ``curvature`` must be positive for hyperbolic geometry.  ``boundary_eps``
    keeps stored points at Euclidean norm <= (1 - boundary_eps) / sqrt(c) so
    the arctanh in the distance never sees an argument at 1.
    """

    curvature: float
    dim: int
    boundary_eps: float = 1e-5

    def __post_init__(self):
        if self.curvature <= 0:
            raise BallError(f"curvature must be > 0, got {self.curvature}")
        if not (0.0 < self.boundary_eps < 1.0):
            raise BallError(f"boundary_eps must be in (0, 1), got {self.boundary_eps}")
        if self.dim < 1:
            raise BallError(f"dim must be >= 1, got {self.dim}")

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.curvature)

    @property
    def max_norm(self) -> float:
        """Largest Euclidean norm a stored point may have."""
        return (1.0 - self.boundary_eps) / self.sqrt_c


@dataclass(frozen=True)
class BallPoint:
    """A validated point of one configured ball."""

    coords: np.ndarray
    config: BallConfig

    @staticmethod
    def create(coords, config: BallConfig, clip: bool = True) -> "BallPoint":
        """Validate ``coords`` as a ball point, clipping or rejecting outliers.

        With ``clip=False`` a vector outside the safety margin raises
        ``BallError`` instead of being rescaled.
        """
        v = np.asarray(coords, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != config.dim:
            raise BallError(f"expected vector of dim {config.dim}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise BallError("non-finite coordinates")
        norm = float(np.linalg.norm(v))
        if norm > config.max_norm:
            if not clip:
                raise BallError(
                    f"norm {norm:.6g} outside safety margin {config.max_norm:.6g}"
                )
            v = v * (config.max_norm / norm)
        return BallPoint(v, config)

    def __add__(self, other: "BallPoint") -> "BallPoint":
        _check_pair(self, other)
        return BallPoint(mobius_add(self.coords, other.coords, self.config), self.config)

    def __neg__(self) -> "BallPoint":
        return BallPoint(-self.coords, self.config)

    def distance_to(self, other: "BallPoint") -> float:
        _check_pair(self, other)
        return hyp_distance(self.coords, other.coords, self.config)


def _check_pair(x: BallPoint, y: BallPoint):
    if x.config != y.config:
        raise BallError(f"configuration mismatch: {x.config} vs {y.config}")
    if x.coords.shape != y.coords.shape:
        raise BallError(f"dimension mismatch: {x.coords.shape} vs {y.coords.shape}")


def conformal_factor(x, config: BallConfig) -> float:
    """Local metric scaling 2 / (1 - c * ||x||^2); equals 2 at the origin."""
    x = np.asarray(x, dtype=np.float64)
    return 2.0 / (1.0 - config.curvature * float(x @ x))


def mobius_add(x, y, config: BallConfig) -> np.ndarray:
    """Gyrovector addition of two ball points.

    Non-commutative and non-associative.  The result is clipped back to the
    safety margin if rounding pushed it outside.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise BallError(f"dimension mismatch: {x.shape} vs {y.shape}")
    c = config.curvature
    xy = float(x @ y)
    x2 = float(x @ x)
    y2 = float(y @ y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return clip_to_ball(num / max(den, _DENOM_FLOOR), config)


def hyp_distance(x, y, config: BallConfig) -> float:
    """Geodesic distance (2 / sqrt(c)) * arctanh(sqrt(c) * ||-x (+) y||).

    The arctanh argument is clamped to 1 - boundary_eps, which makes the
    function total even for points hugging the boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sc = config.sqrt_c
    arg = sc * float(np.linalg.norm(mobius_add(-x, y, config)))
    arg = min(arg, 1.0 - config.boundary_eps)
    return (2.0 / sc) * math.atanh(arg)


def exp_map0(v, config: BallConfig) -> np.ndarray:
    """Exponential map at the origin: tanh(sqrt(c) ||v||) * v / (sqrt(c) ||v||).

    The 0/0 at ``v = 0`` is resolved by an explicit branch returning the
    origin.  Output is clipped to the safety margin.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise BallError("non-finite tangent vector")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    sc = config.sqrt_c
    out = math.tanh(sc * norm) / (sc * norm) * v
    return clip_to_ball(out, config)


def cosine_sq_distance(a, b) -> float:
    """Squared Euclidean distance of the normalized vectors: 2 - 2 cos(a, b).

    Ranges over [0, 4]; raises on zero-norm input.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise BallError("cosine distance undefined for zero-norm input")
    return 2.0 - 2.0 * float(a @ b) / (na * nb)


def clip_to_ball(v, config: BallConfig) -> np.ndarray:
    """Radially rescale ``v`` onto the safety margin if it lies outside."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm > config.max_norm:
        return v * (config.max_norm / norm)
    return v


def euclidean_limit_distance(x, y) -> float:
    """Twice the Euclidean distance, the c -> 0 limit of ``hyp_distance``.

    Kept separate so the curvature-zero regime never routes through the
    hyperbolic formula; it exists for the limit-check oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 2.0 * float(np.linalg.norm(x - y))
