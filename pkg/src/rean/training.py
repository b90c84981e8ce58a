"""Template-batch triplet training with hand-derived backprop and Adam."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregator import (
    AggregatorParams,
    FrameEmbeddingSet,
    QualityMLP,
    TemplateRepresentation,
    bilstm_forward,
)
from .numerics import GradientCheckReport, ShapeError, check_gradient, relu, softmax

log = logging.getLogger(__name__)

TRAINABLE = ("rean", "quality", "naive_lstm")


class InsufficientDataError(ValueError):
    pass


class GradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 3.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass(frozen=True)
class BatchSpec:
    subjects_per_batch: int = 16
    templates_per_subject: int = 3
    frames_per_template: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.subjects_per_batch, self.templates_per_subject, self.frames_per_template) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.templates_per_subject < 2:
            raise ValueError("templates_per_subject must be >= 2 to form anchor-positive pairs")


# ---------------------------------------------------------------------------
# batching


def group_by_subject(dataset):
    """Map subject id to its non-empty templates, in first-seen order."""
    groups = {}
    for fes in dataset:
        if fes.n_frames > 0:
            groups.setdefault(fes.subject_id, []).append(fes)
    return groups


def fit_length(frames, length, rng):
    """Crop to a random contiguous window, or repeat cyclically, to ``length`` rows."""
    n = frames.shape[0]
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return frames[start:start + length]
    return frames[np.arange(length) % n]


def sample_batch(dataset, spec, rng):
    """Draw ``subjects_per_batch * templates_per_subject`` equal-length templates."""
    groups = group_by_subject(dataset)
    eligible = [s for s, ts in groups.items() if len(ts) >= spec.templates_per_subject]
    if len(eligible) < spec.subjects_per_batch:
        raise InsufficientDataError(
            f"need {spec.subjects_per_batch} subjects with >= {spec.templates_per_subject} templates, "
            f"found {len(eligible)}"
        )
    subjects = rng.choice(len(eligible), size=spec.subjects_per_batch, replace=False)
    batch = []
    for s in subjects:
        templates = groups[eligible[s]]
        for k in rng.choice(len(templates), size=spec.templates_per_subject, replace=False):
            t = templates[k]
            frames = fit_length(np.asarray(t.frames, dtype=np.float64), spec.frames_per_template, rng)
            batch.append(FrameEmbeddingSet(t.template_id, t.subject_id, frames))
    return batch


def stack_batch(batch):
    frames = np.stack([np.asarray(t.frames, dtype=np.float64) for t in batch])
    labels = np.array([t.subject_id for t in batch])
    return frames, labels


# ---------------------------------------------------------------------------
# loss


def triplet_loss(reps, labels, cfg=TripletLossConfig()):
    """Average hinge over hard triplets.

    ``reps`` is a ``(B, D)`` array or a list of ``TemplateRepresentation``.
    Returns ``(loss, M, dloss/dreps)``; ``M`` counts triplets with a strictly
    positive hinge.
    """
    if isinstance(reps, (list, tuple)) and reps and isinstance(reps[0], TemplateRepresentation):
        R = np.stack([r.vector for r in reps]).astype(np.float64)
    else:
        R = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if R.ndim != 2 or R.shape[0] != labels.shape[0]:
        raise ShapeError(f"reps{R.shape} do not match {labels.shape[0]} labels")
    same = labels[:, None] == labels[None, :]
    if len(np.unique(labels)) < 2:
        raise InsufficientDataError("triplet loss needs at least two subjects")
    pos = same & ~np.eye(len(labels), dtype=bool)
    if not pos.any():
        raise InsufficientDataError("triplet loss needs a subject with at least two templates")

    # direct differences; the Gram-matrix shortcut is not translation-exact
    diff = R[:, None, :] - R[None, :, :]
    d2 = (diff * diff).sum(axis=2)

    terms = d2[:, :, None] - d2[:, None, :] + cfg.margin
    valid = pos[:, :, None] & ~same[:, None, :]
    hard = valid & (terms > 0)
    M = int(hard.sum())
    if M == 0:
        return 0.0, 0, np.zeros_like(R)
    loss = float(terms[hard].sum() / M)

    w = hard / M
    C = w.sum(axis=2) - w.sum(axis=1)  # coefficient on d2[a, b]
    grad = 2.0 * ((C.sum(axis=1) + C.sum(axis=0))[:, None] * R - C @ R - C.T @ R)
    return loss, M, grad


# ---------------------------------------------------------------------------
# forward / backward per method


def _direction_backward(dout, cache, direction):
    B, N, H = dout.shape
    dW_x = np.zeros_like(direction.W_x)
    dW_h = np.zeros_like(direction.W_h)
    db = np.zeros_like(direction.b)
    dx = np.zeros((B, N, direction.W_x.shape[0]))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t, x_t, h_prev, c_prev, i, f, g, o, tc in reversed(cache):
        dh = dout[:, t, :] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dW_x += x_t.T @ dz
        dW_h += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t, :] = dz @ direction.W_x.T
        dh_next = dz @ direction.W_h.T
        dc_next = dc * f
    return dx, dW_x, dW_h, db


def _bilstm_backward(dhidden, caches, params, grads):
    H = params.hidden
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        _, fc, bc = caches[k]
        dx_f, *gf = _direction_backward(dhidden[..., :H], fc, layer.forward)
        dx_b, *gb = _direction_backward(dhidden[..., H:], bc, layer.backward)
        for dname, g in (("forward", gf), ("backward", gb)):
            for pname, val in zip(("W_x", "W_h", "b"), g):
                grads[f"lstm{k}.{dname}.{pname}"] = val
        dhidden = dx_f + dx_b


def _rean_forward(params, frames):
    caches = []
    hidden = bilstm_forward(frames, params, caches=caches)
    Q = hidden @ params.head_W + params.head_b
    W = softmax(Q, axis=1)
    R = (frames * W).sum(axis=1)
    return R, (frames, caches, hidden, W)


def _rean_backward(params, cache, dR):
    frames, caches, hidden, W = cache
    dW = dR[:, None, :] * frames
    dQ = W * (dW - (W * dW).sum(axis=1, keepdims=True))
    D = params.dim
    grads = {
        "head.W": hidden.reshape(-1, hidden.shape[2]).T @ dQ.reshape(-1, D),
        "head.b": dQ.sum(axis=(0, 1)),
    }
    _bilstm_backward(dQ @ params.head_W.T, caches, params, grads)
    return grads


def _naive_forward(params, frames):
    caches = []
    hidden = bilstm_forward(frames, params, caches=caches)
    H = params.hidden
    last = np.concatenate([hidden[:, -1, :H], hidden[:, 0, H:]], axis=1)
    return last @ params.head_W + params.head_b, (hidden.shape, caches, last)


def _naive_backward(params, cache, dR):
    shape, caches, last = cache
    H = params.hidden
    grads = {"head.W": last.T @ dR, "head.b": dR.sum(axis=0)}
    dlast = dR @ params.head_W.T
    dhidden = np.zeros(shape)
    dhidden[:, -1, :H] = dlast[:, :H]
    dhidden[:, 0, H:] += dlast[:, H:]
    _bilstm_backward(dhidden, caches, params, grads)
    return grads


def _quality_forward(mlp, frames):
    pre = frames @ mlp.W1 + mlp.b1
    act = relu(pre)
    s = (act @ mlp.W2 + mlp.b2)[..., 0]
    a = softmax(s, axis=1)
    R = np.einsum("bn,bnd->bd", a, frames)
    return R, (frames, pre, act, a)


def _quality_backward(mlp, cache, dR):
    frames, pre, act, a = cache
    da = np.einsum("bd,bnd->bn", dR, frames)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True))
    K = mlp.hidden
    dpre = ds[..., None] * mlp.W2[:, 0] * (pre > 0)
    return {
        "mlp.W1": frames.reshape(-1, frames.shape[2]).T @ dpre.reshape(-1, K),
        "mlp.b1": dpre.sum(axis=(0, 1)),
        "mlp.W2": act.reshape(-1, K).T @ ds.reshape(-1, 1),
        "mlp.b2": np.array([ds.sum()]),
    }


_GRAPHS = {
    "rean": (_rean_forward, _rean_backward),
    "naive_lstm": (_naive_forward, _naive_backward),
    "quality": (_quality_forward, _quality_backward),
}


def forward_batch(frames, params, method="rean"):
    """Representations ``(B, D)`` for equal-length templates ``(B, N, D)``."""
    fwd, _ = _GRAPHS[method]
    R, _ = fwd(params, np.asarray(frames, dtype=np.float64))
    return R


def batch_loss(batch, params, cfg=TripletLossConfig(), method="rean"):
    frames, labels = batch if isinstance(batch, tuple) else stack_batch(batch)
    R = forward_batch(frames, params, method)
    loss, _, _ = triplet_loss(R, labels, cfg)
    return loss


def backward(batch, params, cfg=TripletLossConfig(), method="rean"):
    """Loss, hard-triplet count and exact gradients for every parameter array.

    ``batch`` is a list of equal-length ``FrameEmbeddingSet`` or a
    ``(frames, labels)`` pair.
    """
    if method not in _GRAPHS:
        raise ValueError(f"method {method!r} is not trainable; expected one of {TRAINABLE}")
    frames, labels = batch if isinstance(batch, tuple) else stack_batch(batch)
    frames = np.asarray(frames, dtype=np.float64)
    fwd, bwd = _GRAPHS[method]
    R, cache = fwd(params, frames)
    loss, M, dR = triplet_loss(R, labels, cfg)
    named = params.named_arrays()
    if M == 0:
        return loss, M, {k: np.zeros_like(v) for k, v in named.items()}
    grads = bwd(params, cache, dR)
    grads = {k: grads[k] for k in named}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter block {k}")
    return loss, M, grads


# ---------------------------------------------------------------------------
# flat views for checking


def flatten(arrays):
    return np.concatenate([np.ravel(v) for v in arrays.values()])


def unflatten(theta, like):
    out, pos = {}, 0
    for k, v in like.items():
        out[k] = theta[pos:pos + v.size].reshape(v.shape)
        pos += v.size
    return out


def gradient_check(batch, params, cfg=TripletLossConfig(), method="rean", eps=1e-4,
                   n_coords=None, seed=0):
    """Central-difference check of ``backward``; optionally on a coordinate sample."""
    frames, labels = batch if isinstance(batch, tuple) else stack_batch(batch)
    named = params.named_arrays()
    _, _, grads = backward((frames, labels), params, cfg, method)
    theta = flatten(named)
    analytic = flatten(grads)

    def f(th):
        return batch_loss((frames, labels), params.replace_arrays(unflatten(th, named)), cfg, method)

    indices = None
    if n_coords is not None and n_coords < theta.size:
        indices = np.sort(np.random.default_rng(seed).choice(theta.size, size=n_coords, replace=False))
    return check_gradient(f, theta, analytic, eps=eps, indices=indices)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns new params and a new state."""
    named = params.named_arrays()
    if set(grads) != set(named):
        raise ShapeError(f"gradient blocks {sorted(grads)} do not match parameters {sorted(named)}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new, m_out, v_out = {}, {}, {}
    for k, p in named.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        new[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        m_out[k], v_out[k] = m, v
    return params.replace_arrays(new), replace(state, step=t, m=m_out, v=v_out)


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_hard: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    grad_check: GradientCheckReport = None
    params: object = None
    optimizer: AdamState = None

    def log_lines(self):
        for e, (loss, m) in enumerate(zip(self.epoch_loss, self.epoch_hard)):
            line = f"epoch {e + 1}\tloss {loss:.6f}\thard {m:.1f}"
            if e < len(self.val_loss):
                line += f"\tval_loss {self.val_loss[e]:.6f}"
            yield line


def init_params(method, dim, hidden=128, mlp_hidden=64, seed=0):
    if method == "quality":
        return QualityMLP.initialize(dim, hidden=mlp_hidden, seed=seed)
    if method in ("rean", "naive_lstm"):
        return AggregatorParams.initialize(dim, hidden=hidden, seed=seed)
    raise ValueError(f"method {method!r} is not trainable")


def _check_slice(batch, spec):
    """Two subjects, two templates each, at most four frames: a cheap check batch."""
    T = spec.templates_per_subject
    picks = [batch[s * T + k] for s in range(min(2, spec.subjects_per_batch)) for k in range(2)]
    return [FrameEmbeddingSet(t.template_id, t.subject_id, t.frames[:4]) for t in picks]


def fit(train, spec, cfg=TripletLossConfig(), epochs=20, lr=1e-3, seed=0, *, method="rean",
        params=None, val=None, batches_per_epoch=None, clip_norm=5.0, hidden=128,
        mlp_hidden=64, grad_check_coords=48, grad_check_tol=1e-3, callback=None):
    """Train one aggregation method on a list of ``FrameEmbeddingSet``.

    Everything random flows from ``seed``, so identical arguments give an
    identical report. A gradient check runs before the first update and
    aborts training if the relative error exceeds ``grad_check_tol``.
    """
    if method not in TRAINABLE:
        raise ValueError(f"method {method!r} is not trainable; expected one of {TRAINABLE}")
    train = list(train)
    if not train:
        raise InsufficientDataError("empty training set")
    dim = train[0].dim
    if params is None:
        params = init_params(method, dim, hidden=hidden, mlp_hidden=mlp_hidden, seed=seed)
    state = AdamState(lr=lr)
    report = TrainReport(params=params, optimizer=state)
    if epochs <= 0:
        return report

    rng = np.random.default_rng(seed)
    if batches_per_epoch is None:
        n_templates = sum(len(ts) for ts in group_by_subject(train).values())
        batches_per_epoch = max(1, n_templates // (spec.subjects_per_batch * spec.templates_per_subject))

    val_batch = None
    if val:
        groups = group_by_subject(val)
        n_ok = sum(len(ts) >= spec.templates_per_subject for ts in groups.values())
        if n_ok >= 2:
            vspec = replace(spec, subjects_per_batch=min(spec.subjects_per_batch, n_ok))
            val_batch = stack_batch(sample_batch(val, vspec, np.random.default_rng(seed + 1)))

    for epoch in range(epochs):
        losses, hards = [], []
        for b in range(batches_per_epoch):
            batch = sample_batch(train, spec, rng)
            if epoch == 0 and b == 0:
                report.grad_check = gradient_check(_check_slice(batch, spec), params, cfg, method,
                                                   n_coords=grad_check_coords, seed=seed)
                log.info("gradient check: max relative error %.3e over %d coordinates",
                         report.grad_check.max_relative_error, report.grad_check.n_checked)
                if report.grad_check.max_relative_error > grad_check_tol:
                    raise GradientError(
                        f"gradient check failed: relative error {report.grad_check.max_relative_error:.3e} "
                        f"at coordinate {report.grad_check.worst_parameter_index}"
                    )
            loss, M, grads = backward(stack_batch(batch), params, cfg, method)
            grads, _ = clip_by_global_norm(grads, clip_norm)
            params, state = adam_step(params, grads, state)
            losses.append(loss)
            hards.append(M)
        report.epoch_loss.append(float(np.mean(losses)))
        report.epoch_hard.append(float(np.mean(hards)))
        if val_batch is not None:
            report.val_loss.append(batch_loss(val_batch, params, cfg, method))
        log.info("epoch %d loss %.6f hard %.1f", epoch + 1, report.epoch_loss[-1], report.epoch_hard[-1])
        if callback is not None:
            callback(epoch, report)
    report.params = params
    report.optimizer = state
    return report
