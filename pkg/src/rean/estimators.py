"""scikit-learn style wrappers around the aggregation methods.

``X`` is a sequence of templates, each an ``(N_i, D)`` array (or a
``FrameEmbeddingSet``); ``y`` holds one subject label per template.
``transform`` returns an ``(n_templates, D)`` array, one row per template.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .aggregator import (
    AggregatorParams,
    FrameEmbeddingSet,
    QualityMLP,
    naive_lstm_output,
    rean_attention,
)
from .data import l2_normalize
from .evaluation import context_filtered_aggregate
from .training import BatchSpec, TripletLossConfig, fit, forward_batch


def check_templates(X, dim=None, normalize=True):
    """Validate a sequence of templates and return float64 ``(N, D)`` arrays.

    Empty templates are allowed (failure to enroll). Rows are L2-normalized
    when ``normalize`` is set.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    out = []
    for i, t in enumerate(X):
        frames = t.frames if isinstance(t, FrameEmbeddingSet) else t
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[None, :]
        if frames.shape[0] > 0:
            frames = check_array(frames, dtype=np.float64, ensure_min_samples=1)
        if frames.ndim != 2:
            raise ValueError(f"template {i} must be 2-D (frames x dim), got shape {frames.shape}")
        if dim is not None and frames.shape[1] != dim:
            raise ValueError(f"template {i} has dim {frames.shape[1]}, expected {dim}")
        out.append(l2_normalize(frames) if normalize else frames)
    if not out:
        raise ValueError("no templates given")
    return out


def _labels(X, y):
    if y is None:
        if all(isinstance(t, FrameEmbeddingSet) for t in X):
            return [t.subject_id for t in X]
        raise ValueError("subject labels y are required")
    y = [str(v) for v in y]
    if len(y) != len(X):
        raise ValueError(f"{len(X)} templates but {len(y)} labels")
    return y


def _batched(templates, fn, dim):
    """Apply ``fn`` to groups of equal-length templates; empty ones map to zeros."""
    out = np.zeros((len(templates), dim))
    by_len = {}
    for i, t in enumerate(templates):
        if t.shape[0] > 0:
            by_len.setdefault(t.shape[0], []).append(i)
    for idx in by_len.values():
        out[idx] = fn(np.stack([templates[i] for i in idx]))
    return out


class AvgPoolAggregator(TransformerMixin, BaseEstimator):
    def __init__(self, normalize_input=True):
        self.normalize_input = normalize_input

    def fit(self, X, y=None):
        templates = check_templates(X, normalize=self.normalize_input)
        self.n_features_in_ = templates[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        templates = check_templates(X, dim=self.n_features_in_, normalize=self.normalize_input)
        return _batched(templates, lambda F: F.mean(axis=1), self.n_features_in_)


class _TrainedAggregator(TransformerMixin, BaseEstimator):
    method = None

    def _init_params(self, dim):
        raise NotImplementedError

    def _forward(self, frames):
        return forward_batch(frames, self.params_, self.method)

    def fit(self, X, y=None):
        templates = check_templates(X, normalize=self.normalize_input)
        labels = _labels(X, y)
        dim = templates[0].shape[1]
        sets = [FrameEmbeddingSet(f"t{i}", s, F) for i, (F, s) in enumerate(zip(templates, labels))]

        subjects = list(dict.fromkeys(labels))
        rng = np.random.default_rng(self.random_state)
        n_val = int(round(self.validation_fraction * len(subjects)))
        if len(subjects) - n_val < 2:
            n_val = 0
        val_subjects = set(rng.choice(subjects, size=n_val, replace=False)) if n_val else set()
        train = [s for s in sets if s.subject_id not in val_subjects]
        val = [s for s in sets if s.subject_id in val_subjects]

        n_train_subjects = len(subjects) - n_val
        spec = BatchSpec(
            subjects_per_batch=min(self.subjects_per_batch, n_train_subjects),
            templates_per_subject=self.templates_per_subject,
            frames_per_template=self.frames_per_template,
            seed=self.random_state,
        )
        report = fit(
            train, spec, TripletLossConfig(self.margin), epochs=self.epochs, lr=self.learning_rate,
            seed=self.random_state, method=self.method, params=self._init_params(dim), val=val,
            batches_per_epoch=self.batches_per_epoch, clip_norm=self.clip_norm,
        )
        self.params_ = report.params
        self.history_ = report
        self.n_features_in_ = dim
        return self

    @classmethod
    def from_params(cls, params, **kwargs):
        """Wrap already-trained parameters (for example from a model file)."""
        est = cls(**kwargs)
        est.params_ = params
        est.n_features_in_ = params.dim
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        templates = check_templates(X, dim=self.n_features_in_, normalize=self.normalize_input)
        return _batched(templates, self._forward, self.n_features_in_)


class REANAggregator(_TrainedAggregator):
    """Recurrent context-aware attention pooling trained with a triplet loss."""

    method = "rean"

    def __init__(self, hidden_size=128, margin=3.0, epochs=20, learning_rate=1e-3,
                 subjects_per_batch=16, templates_per_subject=3, frames_per_template=32,
                 batches_per_epoch=None, clip_norm=5.0, validation_fraction=0.1,
                 normalize_input=True, random_state=0):
        self.hidden_size = hidden_size
        self.margin = margin
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.subjects_per_batch = subjects_per_batch
        self.templates_per_subject = templates_per_subject
        self.frames_per_template = frames_per_template
        self.batches_per_epoch = batches_per_epoch
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.normalize_input = normalize_input
        self.random_state = random_state

    def _init_params(self, dim):
        return AggregatorParams.initialize(dim, hidden=self.hidden_size, seed=self.random_state)

    def attention(self, X):
        """Per-template ``(N, D)`` attention weights (empty arrays for empty templates)."""
        check_is_fitted(self, "params_")
        templates = check_templates(X, dim=self.n_features_in_, normalize=self.normalize_input)
        return [rean_attention(FrameEmbeddingSet("", "", F), self.params_).weights if F.shape[0]
                else np.zeros((0, self.n_features_in_)) for F in templates]


class NaiveLSTMAggregator(REANAggregator):
    """Baseline: the bi-LSTM's final states projected straight to the representation."""

    method = "naive_lstm"

    def _forward(self, frames):
        return naive_lstm_output(frames, self.params_)

    def attention(self, X):
        raise AttributeError("the naive LSTM baseline has no attention weights")


class QualityPoolAggregator(_TrainedAggregator):
    """Baseline: scalar per-frame quality from a two-layer MLP, softmax over frames."""

    method = "quality"

    def __init__(self, mlp_hidden=64, margin=3.0, epochs=20, learning_rate=1e-3,
                 subjects_per_batch=16, templates_per_subject=3, frames_per_template=32,
                 batches_per_epoch=None, clip_norm=5.0, validation_fraction=0.1,
                 normalize_input=True, random_state=0):
        self.mlp_hidden = mlp_hidden
        self.margin = margin
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.subjects_per_batch = subjects_per_batch
        self.templates_per_subject = templates_per_subject
        self.frames_per_template = frames_per_template
        self.batches_per_epoch = batches_per_epoch
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.normalize_input = normalize_input
        self.random_state = random_state

    def _init_params(self, dim):
        return QualityMLP.initialize(dim, hidden=self.mlp_hidden, seed=self.random_state)

    def quality_scores(self, X):
        check_is_fitted(self, "params_")
        templates = check_templates(X, dim=self.n_features_in_, normalize=self.normalize_input)
        return [self.params_.scores(F) for F in templates]


class ContextFilterAggregator(TransformerMixin, BaseEstimator):
    """Quality pooling over only the frames in the higher k-means quality group."""

    def __init__(self, quality=None):
        self.quality = quality

    def fit(self, X, y=None):
        est = self.quality if self.quality is not None else QualityPoolAggregator()
        if not hasattr(est, "params_"):  # an already fitted scorer is used as-is
            est = clone(est).fit(X, y)
        self.quality_ = est
        self.n_features_in_ = est.n_features_in_
        return self

    def transform(self, X):
        check_is_fitted(self, "quality_")
        templates = check_templates(X, dim=self.n_features_in_, normalize=self.quality_.normalize_input)
        mlp = self.quality_.params_
        return np.stack([context_filtered_aggregate(FrameEmbeddingSet("", "", F), mlp).vector for F in templates])
