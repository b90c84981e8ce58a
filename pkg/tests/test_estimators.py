import numpy as np
import pytest
from sklearn.base import clone

from rean.aggregator import AggregatorParams, FrameEmbeddingSet, QualityMLP, avg_pool, rean_aggregate
from rean.data import SyntheticDatasetSpec, generate_synthetic, l2_normalize
from rean.estimators import (
    AvgPoolAggregator,
    ContextFilterAggregator,
    NaiveLSTMAggregator,
    QualityPoolAggregator,
    REANAggregator,
    check_templates,
)

FAST = dict(epochs=1, batches_per_epoch=2, subjects_per_batch=4, templates_per_subject=2, frames_per_template=4)


@pytest.fixture(scope="module")
def toy():
    spec = SyntheticDatasetSpec(num_subjects=6, templates_per_subject=3, frames_per_template=5, dim=6, seed=1)
    ds = generate_synthetic(spec)
    return [t.frames for t in ds.templates], [t.subject_id for t in ds.templates]


class TestCheckTemplates:
    def test_ragged_and_empty(self):
        out = check_templates([np.ones((3, 2)), np.zeros((0, 2)), [1.0, 0.0]])
        assert [t.shape for t in out] == [(3, 2), (0, 2), (1, 2)]
        np.testing.assert_allclose(np.linalg.norm(out[0], axis=1), 1.0)

    def test_three_d_array(self):
        assert len(check_templates(np.ones((4, 3, 2)))) == 4

    def test_rejects(self):
        with pytest.raises(ValueError):
            check_templates([])
        with pytest.raises(ValueError):
            check_templates([np.ones((2, 2))], dim=3)
        with pytest.raises(ValueError):
            check_templates([np.full((2, 2), np.nan)])
        with pytest.raises(ValueError):
            check_templates([np.ones((2, 2, 2))])


class TestAvgPool:
    def test_transform(self):
        X = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[3.0, 0.0]])]
        Z = AvgPoolAggregator().fit(X).transform(X)
        np.testing.assert_allclose(Z, [[0.5, 0.5], [1.0, 0.0]])

    def test_empty_template_is_zero(self):
        est = AvgPoolAggregator().fit([np.ones((2, 3))])
        np.testing.assert_array_equal(est.transform([np.zeros((0, 3))]), np.zeros((1, 3)))

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            AvgPoolAggregator().transform([np.ones((1, 2))])


@pytest.mark.parametrize("cls,kw", [(REANAggregator, dict(hidden_size=3)),
                                    (NaiveLSTMAggregator, dict(hidden_size=3)),
                                    (QualityPoolAggregator, dict(mlp_hidden=3))])
class TestTrained:
    def test_params_and_clone(self, cls, kw):
        est = cls(**kw, **FAST)
        params = est.get_params()
        assert params["epochs"] == 1 and params["random_state"] == 0
        assert clone(est).get_params() == params
        est.set_params(epochs=2)
        assert est.epochs == 2

    def test_fit_transform(self, cls, kw, toy):
        X, y = toy
        est = cls(**kw, **FAST).fit(X, y)
        Z = est.transform(X + [np.zeros((0, 6))])
        assert Z.shape == (len(X) + 1, 6)
        assert np.all(np.isfinite(Z))
        assert not Z[-1].any()
        assert len(est.history_.epoch_loss) == 1

    def test_deterministic(self, cls, kw, toy):
        X, y = toy
        a = cls(**kw, **FAST).fit(X, y).transform(X)
        b = cls(**kw, **FAST).fit(X, y).transform(X)
        np.testing.assert_array_equal(a, b)

    def test_labels_required(self, cls, kw, toy):
        X, y = toy
        with pytest.raises(ValueError):
            cls(**kw, **FAST).fit(X)
        with pytest.raises(ValueError):
            cls(**kw, **FAST).fit(X, y[:-1])


class TestREAN:
    def test_matches_functional_api(self):
        params = AggregatorParams.initialize(4, hidden=3, seed=5)
        est = REANAggregator.from_params(params)
        F = l2_normalize(np.random.default_rng(0).normal(size=(6, 4)))
        expected = rean_aggregate(FrameEmbeddingSet("t", "s", F), params).vector
        np.testing.assert_allclose(est.transform([F])[0], expected, atol=1e-12)

    def test_attention(self):
        est = REANAggregator.from_params(AggregatorParams.initialize(4, hidden=3, seed=5))
        W = est.attention([np.ones((5, 4)), np.zeros((0, 4))])
        np.testing.assert_allclose(W[0].sum(axis=0), 1.0)
        assert W[1].shape == (0, 4)

    def test_fit_from_frame_sets(self, toy):
        X, y = toy
        sets = [FrameEmbeddingSet(f"t{i}", s, F) for i, (F, s) in enumerate(zip(X, y))]
        Z = REANAggregator(hidden_size=3, **FAST).fit(sets).transform(sets)
        assert Z.shape == (len(sets), 6)

    def test_naive_has_no_attention(self):
        est = NaiveLSTMAggregator.from_params(AggregatorParams.initialize(4, hidden=3))
        with pytest.raises(AttributeError):
            est.attention([np.ones((2, 4))])


class TestContextFilter:
    def test_constant_scorer_is_average(self):
        mlp = QualityMLP(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
        est = ContextFilterAggregator(QualityPoolAggregator.from_params(mlp)).fit([np.ones((1, 3))])
        F = np.random.default_rng(2).normal(size=(4, 3))
        expected = avg_pool(FrameEmbeddingSet("t", "s", l2_normalize(F))).vector
        np.testing.assert_allclose(est.transform([F])[0], expected, atol=1e-12)

    def test_unfitted_scorer_left_untouched(self, toy):
        X, y = toy
        inner = QualityPoolAggregator(mlp_hidden=3, **FAST)
        est = ContextFilterAggregator(inner).fit(X, y)
        assert not hasattr(inner, "params_")
        assert est.transform(X).shape == (len(X), 6)
