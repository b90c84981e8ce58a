"""Command-line entry point: ``rean <subcommand> [flags]``.

Set ``REAN_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) to control log output.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .aggregator import AggregatorParams, FrameEmbeddingSet, QualityMLP, aggregate
from .evaluation import (
    closed_set_identification,
    open_set_identification,
    result_lines,
    score_matrix,
    verification_kfold,
)
from .model_io import encode_checkpoint, load_model, save_model
from .training import BatchSpec, TripletLossConfig, fit, gradient_check

log = logging.getLogger("rean")

NEEDS_MODEL = {"rean": AggregatorParams, "naive_lstm": AggregatorParams,
               "quality": QualityMLP, "context_filter": QualityMLP}


def _floats(s):
    return [float(v) for v in s.split(",") if v]


def _ints(s):
    return [int(v) for v in s.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="rean", description="Recurrent attention aggregation of embedding sets.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset and manifest")
    g.add_argument("--subjects", type=int, default=20)
    g.add_argument("--templates", type=int, default=4)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--redundancy", type=float, default=0.75)
    g.add_argument("--clean-sigma", type=float, default=data_mod.SyntheticDatasetSpec.clean_sigma)
    g.add_argument("--corrupt-sigma", type=float, default=data_mod.SyntheticDatasetSpec.corrupt_sigma)
    g.add_argument("--dup-jitter", type=float, default=data_mod.SyntheticDatasetSpec.dup_jitter)
    g.add_argument("--distractor-pull", type=float, default=data_mod.SyntheticDatasetSpec.distractor_pull)
    g.add_argument("--heldout", type=int, default=0, help="subjects reserved for probe/gallery splits")
    g.add_argument("--val", type=int, default=0, help="subjects reserved for the val split")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an aggregator on the train split of a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--method", choices=("rean", "quality", "naive_lstm"), default="rean")
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--mlp-hidden", type=int, default=64)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--margin", type=float, default=3.0)
    t.add_argument("--subjects-per-batch", type=int, default=16)
    t.add_argument("--templates-per-subject", type=int, default=3)
    t.add_argument("--frames", type=int, default=32)
    t.add_argument("--batches-per-epoch", type=int, default=None)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model file to write")

    a = sub.add_parser("aggregate", help="aggregate templates into representation files")
    a.add_argument("--method", choices=("avg", "rean", "quality", "naive_lstm", "context_filter"), default="rean")
    a.add_argument("--model", default="none")
    a.add_argument("--in", dest="inputs", nargs="+", required=True, help="template files")
    a.add_argument("--out", default=None, help="output file (single input) or directory")
    a.add_argument("--no-normalize", action="store_true", help="skip L2 normalization of input frames")

    for name, helptext in (("eval-identify", "closed- and open-set identification"),
                           ("eval-verify", "k-fold 1:1 verification")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--manifest", required=True)
        e.add_argument("--method", choices=("avg", "rean", "quality", "naive_lstm", "context_filter"), default="rean")
        e.add_argument("--model", default="none")
        e.add_argument("--overrides", default=None,
                       help="file of template_id<TAB>method lines overriding --method per template")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", default=None, help="results file (metric<TAB>operating_point<TAB>value)")
        if name == "eval-identify":
            e.add_argument("--probe-split", default="probe")
            e.add_argument("--gallery-split", default="gallery")
            e.add_argument("--ranks", type=_ints, default=[1, 5, 10])
            e.add_argument("--fpir", type=_floats, default=[0.01, 0.1])
            e.add_argument("--nonmated-fraction", type=float, default=0.5,
                           help="share of probe subjects whose gallery entries are hidden for open-set")
        else:
            e.add_argument("--split", default="probe")
            e.add_argument("--pairs", default=None, help="file of template_a<TAB>template_b<TAB>0|1 lines")
            e.add_argument("--n-pairs", type=int, default=1000)
            e.add_argument("--folds", type=int, default=10)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    c.add_argument("--method", choices=("rean", "quality", "naive_lstm"), default="rean")
    c.add_argument("--dim", type=int, default=4)
    c.add_argument("--hidden", type=int, default=3)
    c.add_argument("--frames", type=int, default=3)
    c.add_argument("--subjects", type=int, default=2)
    c.add_argument("--templates", type=int, default=2)
    c.add_argument("--margin", type=float, default=3.0)
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    return p


def write_config(path, args):
    lines = [f"{k}\t{v}\n" for k, v in sorted(vars(args).items())]
    Path(path).write_text("".join(lines))
    for line in lines:
        log.info("config %s", line.rstrip())


def _load(method, model_path):
    if method == "avg":
        return None
    if model_path in (None, "none"):
        raise ValueError(f"method {method!r} needs --model")
    model = load_model(model_path)
    if not isinstance(model, NEEDS_MODEL[method]):
        raise ValueError(f"model file {model_path} does not hold parameters for method {method!r}")
    return model


def _read_overrides(path):
    if path is None:
        return {}
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(f"{path}: expected template_id<TAB>method, got {line!r}")
            out[fields[0]] = fields[1].strip()
    return out


def _prepare(fes, normalize=True):
    frames = data_mod.l2_normalize(fes.frames) if normalize else np.asarray(fes.frames, dtype=np.float64)
    return FrameEmbeddingSet(fes.template_id, fes.subject_id, frames)


def _represent(templates, method, model, overrides):
    # an override can only fall back to average pooling, which needs no model
    reps = []
    for t in templates:
        m = overrides.get(t.template_id, method)
        if m not in (method, "avg"):
            raise ValueError(f"override for {t.template_id!r} must be 'avg' or {method!r}, got {m!r}")
        reps.append(aggregate(_prepare(t), m, model if m == method else None))
    return reps


def cmd_gen(args):
    spec = data_mod.SyntheticDatasetSpec(
        num_subjects=args.subjects, templates_per_subject=args.templates, frames_per_template=args.frames,
        dim=args.dim, clean_sigma=args.clean_sigma, corrupt_sigma=args.corrupt_sigma,
        redundancy=args.redundancy, dup_jitter=args.dup_jitter, distractor_pull=args.distractor_pull,
        heldout_subjects=args.heldout, val_subjects=args.val, seed=args.seed,
    )
    ds = data_mod.generate_synthetic(spec)
    manifest = data_mod.write_dataset(ds, args.out)
    write_config(Path(args.out) / "config.txt", args)
    print(f"wrote {len(ds.templates)} templates to {manifest}")


def cmd_train(args):
    train = [_prepare(t) for t in data_mod.load_split(args.manifest, "train")]
    val = [_prepare(t) for t in data_mod.load_split(args.manifest, "val")]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_config(out.with_suffix(".config.txt"), args)
    spec = BatchSpec(args.subjects_per_batch, args.templates_per_subject, args.frames, args.seed)
    report = fit(train, spec, TripletLossConfig(args.margin), epochs=args.epochs, lr=args.lr, seed=args.seed,
                 method=args.method, val=val, batches_per_epoch=args.batches_per_epoch,
                 clip_norm=args.clip_norm, hidden=args.hidden, mlp_hidden=args.mlp_hidden)
    save_model(out, report.params)
    out.with_suffix(".ckpt").write_bytes(encode_checkpoint(report.params, report.optimizer))
    lines = list(report.log_lines())
    if report.grad_check is not None:
        lines.insert(0, f"gradcheck\tmax_rel_err {report.grad_check.max_relative_error:.3e}")
    out.with_suffix(".log").write_text("".join(line + "\n" for line in lines))
    for line in lines:
        print(line)


def cmd_aggregate(args):
    model = _load(args.method, args.model)
    outs = []
    if len(args.inputs) == 1 and args.out and not args.out.endswith("/"):
        outs = [Path(args.out)]
    else:
        out_dir = Path(args.out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        outs = [out_dir / (Path(p).stem + ".rep.reat") for p in args.inputs]
    for path, dest in zip(args.inputs, outs):
        fes = data_mod.read_template(path)
        rep = aggregate(_prepare(fes, not args.no_normalize), args.method, model)
        dest.parent.mkdir(parents=True, exist_ok=True)
        data_mod.write_template(dest, FrameEmbeddingSet(rep.template_id, rep.subject_id, rep.vector[None, :]))
    write_config(Path(str(outs[0]) + ".config.txt") if len(outs) == 1 else outs[0].parent / "config.txt", args)
    print(f"wrote {len(outs)} representation file(s)")


def _emit(lines, out, args):
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        write_config(Path(out).with_suffix(".config.txt"), args)


def cmd_eval_identify(args):
    model = _load(args.method, args.model)
    overrides = _read_overrides(args.overrides)
    probes = _represent(data_mod.load_split(args.manifest, args.probe_split), args.method, model, overrides)
    gallery = _represent(data_mod.load_split(args.manifest, args.gallery_split), args.method, model, overrides)
    g_subjects = {g.subject_id for g in gallery}
    mated = [p for p in probes if p.subject_id in g_subjects]
    lines = []
    ident = closed_set_identification(mated, gallery, ks=args.ranks)
    subjects = sorted({p.subject_id for p in mated})
    rng = np.random.default_rng(args.seed)
    n_hide = int(round(args.nonmated_fraction * len(subjects)))
    openset = None
    if any(p.subject_id not in g_subjects for p in probes):
        openset = open_set_identification(probes, gallery, args.fpir)
    elif 0 < n_hide < len(subjects):
        hidden = set(rng.choice(subjects, size=n_hide, replace=False))
        openset = open_set_identification(probes, [g for g in gallery if g.subject_id not in hidden], args.fpir)
    lines = result_lines("", ident=ident, openset=openset)
    _emit(lines, args.out, args)


def cmd_eval_verify(args):
    model = _load(args.method, args.model)
    overrides = _read_overrides(args.overrides)
    reps = _represent(data_mod.load_split(args.manifest, args.split), args.method, model, overrides)
    index = {r.template_id: i for i, r in enumerate(reps)}
    if args.pairs:
        pairs = []
        for line in Path(args.pairs).read_text().splitlines():
            if line.strip():
                a, b, s = line.split("\t")
                missing = [t for t in (a, b) if t not in index]
                if missing:
                    raise ValueError(f"{args.pairs}: unknown template {missing[0]!r}")
                pairs.append((index[a], index[b], s.strip() == "1"))
    else:
        pairs = balanced_pairs(reps, args.n_pairs, args.seed)
    S = score_matrix(reps, reps)
    scores = np.array([S[i, j] for i, j, _ in pairs])
    same = np.array([s for _, _, s in pairs])
    verif = verification_kfold(scores, same, folds=args.folds)
    _emit(result_lines("", verif=verif), args.out, args)


def balanced_pairs(reps, n_pairs, seed):
    """Alternate genuine and impostor pairs, drawn reproducibly."""
    rng = np.random.default_rng(seed)
    labels = np.array([r.subject_id for r in reps])
    by_subject = {s: np.flatnonzero(labels == s) for s in np.unique(labels)}
    multi = [s for s, idx in by_subject.items() if len(idx) >= 2]
    if not multi or len(by_subject) < 2:
        raise ValueError("verification needs a subject with two templates and at least two subjects")
    pairs = []
    for k in range(n_pairs):
        if k % 2 == 0:
            s = multi[rng.integers(len(multi))]
            i, j = rng.choice(by_subject[s], size=2, replace=False)
            pairs.append((int(i), int(j), True))
        else:
            i, j = rng.choice(len(reps), size=2, replace=False)
            while labels[i] == labels[j]:
                i, j = rng.choice(len(reps), size=2, replace=False)
            pairs.append((int(i), int(j), False))
    return pairs


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    batch = []
    for s in range(args.subjects):
        for k in range(args.templates):
            frames = data_mod.l2_normalize(rng.standard_normal((args.frames, args.dim)))
            batch.append(FrameEmbeddingSet(f"s{s}_t{k}", f"s{s}", frames))
    if args.method == "quality":
        params = QualityMLP.initialize(args.dim, hidden=args.hidden, seed=args.seed)
    else:
        params = AggregatorParams.initialize(args.dim, hidden=args.hidden, seed=args.seed)
    report = gradient_check(batch, params, TripletLossConfig(args.margin), args.method, eps=args.eps)
    print(f"max_relative_error\t{report.max_relative_error:.6e}")
    print(f"worst_parameter_index\t{report.worst_parameter_index}")
    print(f"checked\t{report.n_checked}")
    return 0 if report.max_relative_error < args.tol else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "aggregate": cmd_aggregate,
    "eval-identify": cmd_eval_identify,
    "eval-verify": cmd_eval_verify,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("REAN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        status = COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"rean {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
