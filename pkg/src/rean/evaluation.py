"""Recognition protocols over aggregated template representations."""

from dataclasses import dataclass, field

import numpy as np

from .aggregator import TemplateRepresentation, quality_pool
from .numerics import ShapeError, softmax


class ProtocolError(ValueError):
    pass


@dataclass
class IdentificationResult:
    rates: dict
    ranked: list = field(default_factory=list)  # per probe: gallery indices, best first
    hit_ranks: list = field(default_factory=list)  # 1-based rank of the first mate


@dataclass
class OpenSetResult:
    tpir: dict
    thresholds: dict


@dataclass
class VerificationResult:
    accuracies: list
    thresholds: list

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies))


def _vec(r):
    return np.asarray(r.vector if isinstance(r, TemplateRepresentation) else r, dtype=np.float64)


def similarity_score(a, b):
    """Cosine similarity; a zero vector on either side scores -1."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return -1.0
    return float(np.dot(a / na, b / nb))


def score_matrix(probes, gallery):
    """Probe-by-gallery cosine scores with the zero-vector convention."""
    P = np.stack([_vec(p) for p in probes])
    G = np.stack([_vec(g) for g in gallery])
    if P.shape[1] != G.shape[1]:
        raise ShapeError(f"probe dim {P.shape[1]} != gallery dim {G.shape[1]}")
    pn = np.linalg.norm(P, axis=1)
    gn = np.linalg.norm(G, axis=1)
    Pu = np.divide(P, pn[:, None], out=np.zeros_like(P), where=pn[:, None] > 0)
    Gu = np.divide(G, gn[:, None], out=np.zeros_like(G), where=gn[:, None] > 0)
    S = Pu @ Gu.T
    S[pn == 0, :] = -1.0
    S[:, gn == 0] = -1.0
    return S


def rank_gallery(scores):
    """Gallery order for each probe: descending score, earlier index wins ties."""
    return np.argsort(-scores, axis=1, kind="stable")


def closed_set_identification(probes, gallery, ks=(1, 5, 10)):
    g_labels = np.array([g.subject_id for g in gallery])
    known = set(g_labels)
    for p in probes:
        if p.subject_id not in known:
            raise ProtocolError(f"probe {p.template_id!r} has subject {p.subject_id!r} absent from the gallery")
    order = rank_gallery(score_matrix(probes, gallery))
    hit_ranks = []
    for p, row in zip(probes, order):
        hit_ranks.append(int(np.flatnonzero(g_labels[row] == p.subject_id)[0]) + 1)
    hits = np.array(hit_ranks)
    rates = {int(k): float(np.mean(hits <= k)) for k in ks}
    return IdentificationResult(rates=rates, ranked=[row.tolist() for row in order], hit_ranks=hit_ranks)


def open_set_threshold(nonmated_scores, fpir):
    """Smallest non-mated top-1 score whose exceedance fraction stays within ``fpir``.

    If no observed score qualifies, the threshold sits just above the largest
    one so that no non-mated probe is accepted.
    """
    s = np.sort(np.asarray(nonmated_scores, dtype=np.float64))
    n = s.size
    for v in np.unique(s):
        if np.count_nonzero(s >= v) / n <= fpir:
            return float(v)
    return float(np.nextafter(s[-1], np.inf))


def open_set_identification(probes, gallery, fpir_points=(0.01, 0.1)):
    """TPIR at each FPIR; probes whose subject is absent from the gallery are non-mated."""
    g_labels = np.array([g.subject_id for g in gallery])
    S = score_matrix(probes, gallery)
    order = rank_gallery(S)
    top_idx = order[:, 0]
    top_score = S[np.arange(len(probes)), top_idx]
    mated = np.array([p.subject_id in set(g_labels) for p in probes])
    if not (~mated).any():
        raise ProtocolError("open-set evaluation needs at least one non-mated probe")
    if not mated.any():
        raise ProtocolError("open-set evaluation needs at least one mated probe")
    correct = np.array([g_labels[i] == p.subject_id for i, p in zip(top_idx, probes)])
    tpir, thresholds = {}, {}
    for f in fpir_points:
        tau = open_set_threshold(top_score[~mated], f)
        thresholds[f] = tau
        tpir[f] = float(np.mean(correct[mated] & (top_score[mated] >= tau)))
    return OpenSetResult(tpir=tpir, thresholds=thresholds)


def best_threshold(scores, same):
    """Accuracy-maximizing threshold over midpoints of sorted scores.

    Pairs with ``score > threshold`` are called "same". Ties go to the lowest
    threshold.
    """
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    acc = [np.mean((scores > t) == same) for t in cands]
    return float(cands[int(np.argmax(acc))])


def verification_kfold(scores, same, folds=10):
    """Threshold chosen on the other folds, accuracy measured on the held-out one.

    Folds are contiguous blocks whose sizes differ by at most one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.shape != same.shape:
        raise ShapeError(f"{scores.shape[0]} scores but {same.shape[0]} labels")
    if scores.size < folds:
        raise ProtocolError(f"{scores.size} pairs cannot fill {folds} folds")
    parts = np.array_split(np.arange(scores.size), folds)
    for k, idx in enumerate(parts):
        if same[idx].all() or not same[idx].any():
            raise ProtocolError(f"fold {k} contains a single class")
    accs, ths = [], []
    for idx in parts:
        train = np.ones(scores.size, dtype=bool)
        train[idx] = False
        t = best_threshold(scores[train], same[train])
        ths.append(t)
        accs.append(float(np.mean((scores[idx] > t) == same[idx])))
    return VerificationResult(accuracies=accs, thresholds=ths)


def kmeans_1d(values):
    """Globally optimal two-cluster split of 1-D values.

    The optimum is a cut of the sorted values, so every cut between distinct
    values is scored by within-cluster sum of squares. Lloyd iterations from
    the extremes can stall in a worse split; this cannot. Returns a boolean
    mask of the high cluster; among equally good cuts the lowest one wins.
    Constant input puts everything in the high cluster.
    """
    x = np.asarray(values, dtype=np.float64)
    u = np.unique(x)
    if u.size == 1:
        return np.ones(x.shape, dtype=bool)
    xs = np.sort(x) - x.mean()
    n = xs.size
    c1 = np.cumsum(xs)
    c2 = np.cumsum(xs**2)
    cuts = np.searchsorted(xs, u[1:] - x.mean(), side="left")  # size of the low group
    lo_n, hi_n = cuts, n - cuts
    lo_s, hi_s = c1[cuts - 1], c1[-1] - c1[cuts - 1]
    lo_q, hi_q = c2[cuts - 1], c2[-1] - c2[cuts - 1]
    sse = (lo_q - lo_s**2 / lo_n) + (hi_q - hi_s**2 / hi_n)
    return x >= u[1:][int(np.argmin(sse))]


def context_filtered_aggregate(fes, mlp):
    """Quality pooling restricted to the high-quality k-means group of frames."""
    if fes.n_frames == 0:
        return TemplateRepresentation(np.zeros(fes.dim), fes.template_id, fes.subject_id, "context_filter")
    frames = np.asarray(fes.frames, dtype=np.float64)
    s = mlp.scores(frames)
    if np.all(s == s[0]):
        rep = quality_pool(fes, mlp)
        rep.method = "context_filter"
        return rep
    keep = kmeans_1d(s)
    w = softmax(s[keep])
    return TemplateRepresentation(w @ frames[keep], fes.template_id, fes.subject_id, "context_filter")


def result_lines(prefix, ident=None, openset=None, verif=None):
    """``metric<TAB>operating_point<TAB>value`` lines."""
    lines = []
    if ident is not None:
        for k, v in ident.rates.items():
            lines.append(f"{prefix}closed_set_ir\trank{k}\t{v:.6f}")
    if openset is not None:
        for f, v in openset.tpir.items():
            lines.append(f"{prefix}tpir\tfpir{f:g}\t{v:.6f}")
    if verif is not None:
        lines.append(f"{prefix}verification_acc\tmean\t{verif.mean:.6f}")
        lines.append(f"{prefix}verification_acc\tstd\t{verif.std:.6f}")
    return lines
