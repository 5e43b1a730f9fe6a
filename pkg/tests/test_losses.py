"""Contrastive losses: spot values, oracle equivalence, invariants."""

import math

import numpy as np
import pytest

from pcon import autograd as ag
from pcon import oracles
from pcon.autograd import Tensor
from pcon.ball import BallConfig, hyp_distance
from pcon.losses import (
    BatchRejectionError,
    EmbeddingBatch,
    PositiveSet,
    Space,
    ZeroNormRowError,
    hcl_loss,
    info_nce_cosine,
    pairwise_hyp_distance,
    project_embeddings,
    shcl_loss,
    supcon_cosine,
)

BALL = BallConfig(curvature=0.1, dim=8)


def _random_batch(rng, n_sources=4, dim=8, tau=0.5, space=None, labels=None):
    raw = rng.normal(size=(2 * n_sources, dim))
    return project_embeddings(
        Tensor(raw), space or Space.cosine(), temperature=tau, labels=labels
    )


class TestProjectEmbeddings:
    def test_cosine_normalizes_rows(self):
        batch = project_embeddings(Tensor(np.array([[3.0, 4.0], [1.0, 0.0]])), Space.cosine())
        assert np.allclose(batch.z.data[0], [0.6, 0.8], atol=1e-15)

    def test_ball_norm_law_for_unit_rows(self):
        c = 0.3
        space = Space.poincare(BallConfig(c, 4))
        rng = np.random.default_rng(0)
        batch = project_embeddings(Tensor(rng.normal(size=(6, 4))), space, normalize_first=True)
        norms = np.linalg.norm(batch.z.data, axis=1)
        want = math.tanh(math.sqrt(c)) / math.sqrt(c)
        assert np.allclose(norms, want, atol=1e-12)

    def test_zero_row_maps_to_origin_without_normalize(self):
        space = Space.poincare(BallConfig(1.0, 3))
        batch = project_embeddings(
            Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])), space, normalize_first=False
        )
        assert np.array_equal(batch.z.data[0], [0.0, 0.0, 0.0])

    def test_zero_row_rejected_when_normalizing(self):
        with pytest.raises(ZeroNormRowError):
            project_embeddings(Tensor(np.zeros((2, 3))), Space.cosine())

    def test_odd_row_count_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(Tensor(np.ones((3, 2))), Space.cosine())


class TestSelfSupervisedValues:
    def test_single_source_loss_is_zero(self):
        rng = np.random.default_rng(1)
        for space in (Space.cosine(), Space.poincare(BALL)):
            batch = _random_batch(rng, n_sources=1, space=space)
            fn = info_nce_cosine if space.kind == "cosine" else hcl_loss
            report = fn(batch)
            assert report.total == pytest.approx(0.0, abs=1e-12)

    def test_uniform_similarities_give_log3(self):
        # four orthogonal rows: all pairwise dot products equal (zero)
        batch = EmbeddingBatch(Tensor(np.eye(4)), Space.cosine(), temperature=0.37)
        report = info_nce_cosine(batch)
        assert np.allclose(report.per_anchor, math.log(3.0), atol=1e-12)
        assert report.total == pytest.approx(4 * math.log(3.0), abs=1e-12)

    def test_coincident_ball_points_give_log_2n_minus_1(self):
        z = np.tile([0.2, 0.1], (6, 1))
        batch = EmbeddingBatch(Tensor(z), Space.poincare(BallConfig(0.5, 2)), temperature=0.8)
        report = hcl_loss(batch)
        assert np.allclose(report.per_anchor, math.log(5.0), atol=1e-12)

    def test_temperature_irrelevant_at_uniform_similarity(self):
        for tau in (0.1, 0.5, 2.0):
            batch = EmbeddingBatch(Tensor(np.eye(4)), Space.cosine(), temperature=tau)
            assert info_nce_cosine(batch).total == pytest.approx(4 * math.log(3.0), abs=1e-12)

    def test_space_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            hcl_loss(_random_batch(rng, space=Space.cosine()))
        with pytest.raises(ValueError):
            info_nce_cosine(_random_batch(rng, space=Space.poincare(BALL)))


class TestSupervisedValues:
    def test_pairs_only_labels_reduce_to_self_supervised(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 4):
            labels = np.repeat(np.arange(n), 2)  # every source its own class
            cos = _random_batch(rng, n_sources=n, labels=labels)
            assert np.max(np.abs(
                supcon_cosine(cos).per_anchor - info_nce_cosine(cos).per_anchor
            )) <= 1e-12
            ball = _random_batch(rng, n_sources=n, space=Space.poincare(BALL), labels=labels)
            assert np.max(np.abs(
                shcl_loss(ball).per_anchor - hcl_loss(ball).per_anchor
            )) <= 1e-12

    def test_all_same_class_uniform_gives_log3(self):
        labels = np.zeros(4, dtype=int)
        batch = EmbeddingBatch(Tensor(np.eye(4)), Space.cosine(), labels=labels)
        report = supcon_cosine(batch)
        assert np.allclose(report.per_anchor, math.log(3.0), atol=1e-12)

    def test_all_coincident_same_class_shcl(self):
        labels = np.zeros(4, dtype=int)
        z = np.tile([0.1, 0.3], (4, 1))
        batch = EmbeddingBatch(Tensor(z), Space.poincare(BallConfig(0.5, 2)), labels=labels)
        assert np.allclose(shcl_loss(batch).per_anchor, math.log(3.0), atol=1e-12)

    def test_missing_labels_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(BatchRejectionError):
            supcon_cosine(_random_batch(rng))

    def test_empty_positive_set_rejects_batch(self):
        with pytest.raises(BatchRejectionError):
            PositiveSet.from_labels(np.array([0, 1, 2, 3]))


class TestOracleEquivalence:
    def test_matches_naive_loops(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            tau = float(rng.uniform(0.2, 1.2))
            c = float(rng.uniform(0.05, 1.0))
            labels = np.repeat(rng.integers(0, 3, size=n), 2)
            raw = rng.normal(size=(2 * n, d))
            ball_cfg = BallConfig(c, d)

            cos = project_embeddings(Tensor(raw), Space.cosine(), temperature=tau, labels=labels)
            total, per = oracles.info_nce(cos.z.data, tau)
            got = info_nce_cosine(cos)
            assert abs(got.total - total) <= 1e-10
            assert np.max(np.abs(got.per_anchor - per)) <= 1e-10

            ball = project_embeddings(
                Tensor(raw), Space.poincare(ball_cfg), temperature=tau, labels=labels
            )
            total, per = oracles.info_nce(ball.z.data, tau, "ball", ball_cfg)
            got = hcl_loss(ball)
            assert np.max(np.abs(got.per_anchor - per)) <= 1e-10

            total, per = oracles.supcon(cos.z.data, labels, tau)
            got = supcon_cosine(cos)
            assert np.max(np.abs(got.per_anchor - per)) <= 1e-10

            total, per = oracles.supcon(ball.z.data, labels, tau, "ball", ball_cfg)
            got = shcl_loss(ball)
            assert np.max(np.abs(got.per_anchor - per)) <= 1e-10

    def test_gram_route_equals_explicit_mobius_route(self):
        rng = np.random.default_rng(6)
        cfg = BallConfig(0.7, 5)
        pts = rng.normal(size=(6, 5))
        pts *= 0.8 / (np.sqrt(0.7) * np.linalg.norm(pts, axis=1, keepdims=True))
        got = pairwise_hyp_distance(Tensor(pts), Tensor(pts), cfg).data
        for i in range(6):
            for j in range(6):
                assert got[i, j] == pytest.approx(
                    hyp_distance(pts[i], pts[j], cfg), abs=1e-12
                )


class TestInvariants:
    def test_permutation_of_sources_preserves_total(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(size=(12, 6))
        perm_sources = rng.permutation(6)
        rows = np.concatenate([[2 * s, 2 * s + 1] for s in perm_sources])
        for space in (Space.cosine(), Space.poincare(BallConfig(0.2, 6))):
            fn = info_nce_cosine if space.kind == "cosine" else hcl_loss
            a = fn(project_embeddings(Tensor(raw), space))
            b = fn(project_embeddings(Tensor(raw[rows]), space))
            assert abs(a.total - b.total) <= 1e-10

    def test_report_total_is_per_anchor_sum(self):
        rng = np.random.default_rng(8)
        report = info_nce_cosine(_random_batch(rng))
        assert report.total == pytest.approx(report.per_anchor.sum(), abs=1e-12)

    def test_gradient_through_projection(self):
        rng = np.random.default_rng(9)
        raw = rng.normal(size=(8, 6))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True) * rng.uniform(0.5, 1.5)
        labels = np.repeat([0, 0, 1, 1], 2)
        space = Space.poincare(BallConfig(0.3, 6))

        err = ag.grad_check(
            lambda t: hcl_loss(project_embeddings(t, space, temperature=0.6)).node, raw
        )
        assert err <= 1e-4
        err = ag.grad_check(
            lambda t: supcon_cosine(
                project_embeddings(t, Space.cosine(), temperature=0.6, labels=labels)
            ).node,
            raw,
        )
        assert err <= 1e-4
