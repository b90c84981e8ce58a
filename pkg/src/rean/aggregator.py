"""Template aggregation: the recurrent attention pooler and its baselines.

Frames of one template are an ``(N, D)`` array; batched code paths take
``(B, N, D)``. LSTM gate pre-activations are laid out ``[i | f | g | o]``,
each block ``H`` wide.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, affine_transform, as_matrix, relu, sigmoid, softmax

FORMAT_VERSION = 1
METHODS = ("rean", "avg", "quality", "naive_lstm", "context_filter")


class EmptyTemplateError(ValueError):
    """A template with no frames reached an operation that needs at least one."""


@dataclass
class FrameEmbeddingSet:
    template_id: str
    subject_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be (N, D), got {frames.shape}")
        self.frames = frames

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class TemplateRepresentation:
    vector: np.ndarray
    template_id: str = ""
    subject_id: str = ""
    method: str = "rean"


@dataclass(frozen=True)
class AttentionWeights:
    weights: np.ndarray

    def component_mean(self):
        """Per-frame attention averaged over components."""
        return self.weights.mean(axis=1)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LstmDirection:
    W_x: np.ndarray  # (in, 4H)
    W_h: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    @property
    def hidden(self):
        return self.W_h.shape[0]


@dataclass(frozen=True)
class LstmLayerParams:
    forward: LstmDirection
    backward: LstmDirection


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_direction(rng, in_dim, hidden):
    fan_in = in_dim + hidden
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return LstmDirection(
        W_x=_uniform(rng, (in_dim, 4 * hidden), fan_in),
        W_h=_uniform(rng, (hidden, 4 * hidden), fan_in),
        b=b,
    )


@dataclass(frozen=True)
class AggregatorParams:
    """Bi-LSTM stack plus an affine head ``2H -> D``.

    Used both by the attention pooler (head emits quality logits) and by the
    naive LSTM baseline (head emits the representation).
    """

    layers: tuple
    head_W: np.ndarray  # (2H, D)
    head_b: np.ndarray  # (D,)
    version: int = FORMAT_VERSION

    @property
    def dim(self):
        return self.head_W.shape[1]

    @property
    def hidden(self):
        return self.layers[0].forward.hidden

    @classmethod
    def initialize(cls, dim, hidden=128, n_layers=2, seed=0):
        rng = np.random.default_rng(seed)
        layers = []
        in_dim = dim
        for _ in range(n_layers):
            layers.append(LstmLayerParams(
                forward=_init_direction(rng, in_dim, hidden),
                backward=_init_direction(rng, in_dim, hidden),
            ))
            in_dim = 2 * hidden
        head_W = _uniform(rng, (2 * hidden, dim), 2 * hidden)
        return cls(layers=tuple(layers), head_W=head_W, head_b=np.zeros(dim))

    def named_arrays(self):
        """Parameter arrays in canonical order (also the model-file order)."""
        out = {}
        for k, layer in enumerate(self.layers):
            for dname in ("forward", "backward"):
                d = getattr(layer, dname)
                out[f"lstm{k}.{dname}.W_x"] = d.W_x
                out[f"lstm{k}.{dname}.W_h"] = d.W_h
                out[f"lstm{k}.{dname}.b"] = d.b
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def replace_arrays(self, arrays):
        layers = []
        for k in range(len(self.layers)):
            dirs = {}
            for dname in ("forward", "backward"):
                dirs[dname] = LstmDirection(
                    W_x=np.asarray(arrays[f"lstm{k}.{dname}.W_x"], dtype=np.float64),
                    W_h=np.asarray(arrays[f"lstm{k}.{dname}.W_h"], dtype=np.float64),
                    b=np.asarray(arrays[f"lstm{k}.{dname}.b"], dtype=np.float64),
                )
            layers.append(LstmLayerParams(**dirs))
        return AggregatorParams(
            layers=tuple(layers),
            head_W=np.asarray(arrays["head.W"], dtype=np.float64),
            head_b=np.asarray(arrays["head.b"], dtype=np.float64),
            version=self.version,
        )

    @classmethod
    def from_named_arrays(cls, arrays):
        n_layers = len({k.split(".")[0] for k in arrays if k.startswith("lstm")})
        layers = tuple(
            LstmLayerParams(
                forward=LstmDirection(*(np.asarray(arrays[f"lstm{k}.forward.{p}"], dtype=np.float64) for p in ("W_x", "W_h", "b"))),
                backward=LstmDirection(*(np.asarray(arrays[f"lstm{k}.backward.{p}"], dtype=np.float64) for p in ("W_x", "W_h", "b"))),
            )
            for k in range(n_layers)
        )
        return cls(layers=layers, head_W=np.asarray(arrays["head.W"], dtype=np.float64),
                   head_b=np.asarray(arrays["head.b"], dtype=np.float64))


@dataclass(frozen=True)
class QualityMLP:
    """Two-layer scalar quality predictor: affine, ReLU, affine to one logit."""

    W1: np.ndarray  # (D, K)
    b1: np.ndarray
    W2: np.ndarray  # (K, 1)
    b2: np.ndarray  # (1,)
    version: int = FORMAT_VERSION

    @property
    def dim(self):
        return self.W1.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[1]

    @classmethod
    def initialize(cls, dim, hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            W1=_uniform(rng, (dim, hidden), dim),
            b1=np.zeros(hidden),
            W2=_uniform(rng, (hidden, 1), hidden),
            b2=np.zeros(1),
        )

    def named_arrays(self):
        return {"mlp.W1": self.W1, "mlp.b1": self.b1, "mlp.W2": self.W2, "mlp.b2": self.b2}

    def replace_arrays(self, arrays):
        return QualityMLP(**{k.split(".")[1]: np.asarray(v, dtype=np.float64) for k, v in arrays.items()},
                          version=self.version)

    @classmethod
    def from_named_arrays(cls, arrays):
        return cls(**{k.split(".")[1]: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})

    def scores(self, frames):
        """One logit per frame; works on ``(N, D)`` or ``(B, N, D)``."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.dim:
            raise ShapeError(f"frames have dim {frames.shape[-1]}, MLP expects {self.dim}")
        hidden = relu(frames @ self.W1 + self.b1)
        return (hidden @ self.W2 + self.b2)[..., 0]


# ---------------------------------------------------------------------------
# recurrent pieces


def lstm_cell_forward(x_t, h_prev, c_prev, direction):
    """One LSTM step. Inputs may be vectors or ``(B, ·)`` batches."""
    H = direction.hidden
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != direction.W_x.shape[0]:
        raise ShapeError(f"input width {x_t.shape[-1]} does not match W_x{direction.W_x.shape}")
    if np.shape(h_prev)[-1] != H or np.shape(c_prev)[-1] != H:
        raise ShapeError(f"state widths {np.shape(h_prev)}, {np.shape(c_prev)} do not match hidden size {H}")
    z = x_t @ direction.W_x + h_prev @ direction.W_h + direction.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def run_direction(x, direction, reverse=False, cache=None):
    """Run one LSTM direction over ``x`` of shape ``(B, N, in)``.

    Returns hidden states ``(B, N, H)`` indexed by time step regardless of the
    traversal direction. When ``cache`` is a list, per-step intermediates are
    appended to it in traversal order.
    """
    B, N, _ = x.shape
    H = direction.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.empty((B, N, H))
    steps = range(N - 1, -1, -1) if reverse else range(N)
    for t in steps:
        x_t = x[:, t, :]
        z = x_t @ direction.W_x + h @ direction.W_h + direction.b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if cache is not None:
            cache.append((t, x_t, h, c, i, f, g, o, tc))
        h, c = h_new, c_new
        out[:, t, :] = h
    return out


def bilstm_forward(frames, params, caches=None):
    """Stacked bidirectional LSTM over one template or a batch.

    ``frames`` is ``(N, D)`` or ``(B, N, D)``; output has last dim ``2H``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    single = frames.ndim == 2
    x = frames[None] if single else frames
    if x.shape[1] == 0:
        raise EmptyTemplateError("cannot run the LSTM on an empty template")
    if x.shape[2] != params.layers[0].forward.W_x.shape[0]:
        raise ShapeError(f"frames have dim {x.shape[2]}, first LSTM layer expects {params.layers[0].forward.W_x.shape[0]}")
    for layer in params.layers:
        fc = bc = None
        if caches is not None:
            fc, bc = [], []
            caches.append((x, fc, bc))
        hf = run_direction(x, layer.forward, reverse=False, cache=fc)
        hb = run_direction(x, layer.backward, reverse=True, cache=bc)
        x = np.concatenate([hf, hb], axis=2)
    return x[0] if single else x


def quality_head(hidden, params):
    """Affine map from ``2H`` hidden features to ``D`` quality logits."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape[-1] != params.head_W.shape[0]:
        raise ShapeError(f"hidden width {hidden.shape[-1]} does not match head W{params.head_W.shape}")
    if hidden.ndim == 2:
        return affine_transform(hidden, params.head_W, params.head_b)
    return hidden @ params.head_W + params.head_b


def normalize_attention(Q):
    """Softmax over frames, independently for each component."""
    Q = as_matrix(Q, "Q")
    if Q.shape[0] == 0:
        raise EmptyTemplateError("cannot normalize attention over zero frames")
    return AttentionWeights(softmax(Q, axis=0))


def aggregate_weighted(frames, W):
    """Componentwise weighted sum of frames: ``r_j = sum_i F[i, j] W[i, j]``."""
    frames = as_matrix(frames, "frames")
    w = W.weights if isinstance(W, AttentionWeights) else as_matrix(W, "W")
    if frames.shape != w.shape:
        raise ShapeError(f"frames{frames.shape} and weights{w.shape} differ")
    return (frames * w).sum(axis=0)


# ---------------------------------------------------------------------------
# aggregation methods


def _zero(fes, method):
    return TemplateRepresentation(np.zeros(fes.dim), fes.template_id, fes.subject_id, method)


def rean_attention(fes, params):
    frames = np.asarray(fes.frames, dtype=np.float64)
    hidden = bilstm_forward(frames, params)
    return normalize_attention(quality_head(hidden, params))


def rean_aggregate(fes, params):
    if fes.n_frames == 0:
        return _zero(fes, "rean")
    frames = np.asarray(fes.frames, dtype=np.float64)
    W = rean_attention(fes, params)
    return TemplateRepresentation(aggregate_weighted(frames, W), fes.template_id, fes.subject_id, "rean")


def avg_pool(fes):
    if fes.n_frames == 0:
        return _zero(fes, "avg")
    vec = np.asarray(fes.frames, dtype=np.float64).mean(axis=0)
    return TemplateRepresentation(vec, fes.template_id, fes.subject_id, "avg")


def quality_weights(frames, mlp):
    """Softmax-normalized scalar quality per frame."""
    return softmax(mlp.scores(frames), axis=-1)


def quality_pool(fes, mlp):
    if fes.n_frames == 0:
        return _zero(fes, "quality")
    frames = np.asarray(fes.frames, dtype=np.float64)
    a = quality_weights(frames, mlp)
    return TemplateRepresentation(a @ frames, fes.template_id, fes.subject_id, "quality")


def naive_lstm_output(frames, params):
    """Project the last state of each direction to ``D``.

    The forward direction ends at step ``N-1``, the backward one at step 0.
    """
    hidden = bilstm_forward(frames, params)
    H = params.hidden
    last = np.concatenate([hidden[..., -1, :H], hidden[..., 0, H:]], axis=-1)
    return last @ params.head_W + params.head_b


def naive_lstm_pool(fes, params):
    if fes.n_frames == 0:
        return _zero(fes, "naive_lstm")
    vec = naive_lstm_output(np.asarray(fes.frames, dtype=np.float64), params)
    return TemplateRepresentation(vec, fes.template_id, fes.subject_id, "naive_lstm")


def aggregate(fes, method, model=None):
    """Dispatch by method name; ``model`` is the parameter object the method needs."""
    if method == "avg":
        return avg_pool(fes)
    if model is None:
        raise ValueError(f"method {method!r} requires a model")
    if method == "rean":
        return rean_aggregate(fes, model)
    if method == "quality":
        return quality_pool(fes, model)
    if method == "naive_lstm":
        return naive_lstm_pool(fes, model)
    if method == "context_filter":
        from .evaluation import context_filtered_aggregate
        return context_filtered_aggregate(fes, model)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
