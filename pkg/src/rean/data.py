"""Template files, dataset manifests and the synthetic embedding generator.

Template file layout (all integers u32, little-endian)::

    b"REAT" | version | D | N | len(subject_id) | subject_id | len(template_id) | template_id
    | N*D float32, row-major

Manifest: one ``path<TAB>subject_id<TAB>split`` line per template; relative
paths resolve against the manifest's directory.
"""

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .aggregator import FrameEmbeddingSet

TEMPLATE_MAGIC = b"REAT"
TEMPLATE_VERSION = 1
SPLITS = ("train", "val", "gallery", "probe")


class TemplateFormatError(ValueError):
    pass


class BadMagicError(TemplateFormatError):
    pass


class TruncatedError(TemplateFormatError):
    pass


class UnsupportedVersionError(TemplateFormatError):
    pass


def encode_template(fes):
    frames = np.ascontiguousarray(fes.frames, dtype="<f4")
    n, d = frames.shape
    sid = fes.subject_id.encode("utf-8")
    tid = fes.template_id.encode("utf-8")
    header = TEMPLATE_MAGIC + struct.pack("<IIII", TEMPLATE_VERSION, d, n, len(sid)) + sid
    header += struct.pack("<I", len(tid)) + tid
    return header + frames.tobytes()


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise TruncatedError(f"truncated template: need {n} bytes for {what} at offset {pos}, have {len(buf) - pos}")
    return buf[pos:pos + n], pos + n


def decode_template(buf):
    buf = bytes(buf)
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != TEMPLATE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {TEMPLATE_MAGIC!r}")
    raw, pos = _take(buf, pos, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != TEMPLATE_VERSION:
        raise UnsupportedVersionError(f"template version {version} not supported (expected {TEMPLATE_VERSION})")
    raw, pos = _take(buf, pos, 12, "header")
    d, n, slen = struct.unpack("<III", raw)
    sid, pos = _take(buf, pos, slen, "subject id")
    raw, pos = _take(buf, pos, 4, "template id length")
    (tlen,) = struct.unpack("<I", raw)
    tid, pos = _take(buf, pos, tlen, "template id")
    payload, pos = _take(buf, pos, n * d * 4, "frame payload")
    if pos != len(buf):
        raise TemplateFormatError(f"{len(buf) - pos} trailing bytes after payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FrameEmbeddingSet(tid.decode("utf-8"), sid.decode("utf-8"), frames)


def write_template(path, fes):
    Path(path).write_bytes(encode_template(fes))


def read_template(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"template file not found: {path}")
    return decode_template(path.read_bytes())


def from_matrix(matrix, subject_id, template_id):
    """Wrap an externally extracted ``(N, D)`` embedding matrix as a template."""
    frames = np.atleast_2d(np.asarray(matrix, dtype=np.float32))
    return FrameEmbeddingSet(str(template_id), str(subject_id), frames)


def l2_normalize(frames):
    """Row-normalize; all-zero rows stay zero."""
    frames = np.asarray(frames, dtype=np.float64)
    norms = np.linalg.norm(frames, axis=-1, keepdims=True)
    return np.divide(frames, norms, out=np.zeros_like(frames), where=norms > 0)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    split: str


def write_manifest(path, entries):
    seen = set()
    lines = []
    for e in entries:
        if not e.subject_id:
            raise ValueError(f"empty subject id for {e.path}")
        if e.split not in SPLITS:
            raise ValueError(f"unknown split {e.split!r} for {e.path}")
        if e.path in seen:
            raise ValueError(f"template {e.path} listed twice")
        seen.add(e.path)
        lines.append(f"{e.path}\t{e.subject_id}\t{e.split}\n")
    Path(path).write_text("".join(lines))


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1]:
            raise ValueError(f"{path}:{lineno}: expected path<TAB>subject_id<TAB>split")
        if parts[2] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {parts[2]!r}")
        entries.append(ManifestEntry(*parts))
    return entries


def load_split(manifest_path, split=None):
    """Load templates listed in a manifest, optionally one split only."""
    root = Path(manifest_path).parent
    out = []
    for e in read_manifest(manifest_path):
        if split is None or e.split == split:
            p = Path(e.path)
            out.append(read_template(p if p.is_absolute() else root / p))
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Desk-scale stand-in for surveillance video templates.

    Each template mixes clean frames (prototype plus small noise) with a
    contiguous run of near-duplicates of one corrupted frame. Corrupted seeds
    are the prototype buried in heavy noise and nudged toward a direction
    shared by the whole dataset.
    """

    num_subjects: int = 20
    templates_per_subject: int = 4
    frames_per_template: int = 16
    dim: int = 32
    clean_sigma: float = 0.05
    corrupt_sigma: float = 1.0
    redundancy: float = 0.75
    dup_jitter: float = 1e-3
    distractor_pull: float = 0.5
    heldout_subjects: int = 0
    val_subjects: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.redundancy < 1.0:
            raise ValueError(f"redundancy must be in [0, 1), got {self.redundancy}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if min(self.clean_sigma, self.corrupt_sigma, self.dup_jitter, self.distractor_pull) < 0:
            raise ValueError("noise levels must be non-negative")
        if min(self.num_subjects, self.templates_per_subject, self.frames_per_template) < 1:
            raise ValueError("counts must be >= 1")
        if self.heldout_subjects + self.val_subjects > self.num_subjects:
            raise ValueError("held-out plus validation subjects exceed num_subjects")

    @property
    def n_redundant(self):
        return int(round(self.redundancy * self.frames_per_template))


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    templates: list
    splits: list
    prototypes: dict
    distractor: np.ndarray

    def split(self, name):
        return [t for t, s in zip(self.templates, self.splits) if s == name]

    def manifest_entries(self, subdir="templates"):
        return [ManifestEntry(f"{subdir}/{t.template_id}.reat", t.subject_id, s)
                for t, s in zip(self.templates, self.splits)]


def _unit(v):
    return v / np.linalg.norm(v)


def _template(spec, mu, distractor, rng):
    D, F = spec.dim, spec.frames_per_template
    n_red = spec.n_redundant
    n_clean = F - n_red
    clean = l2_normalize(mu + spec.clean_sigma * rng.standard_normal((n_clean, D)))
    if n_red == 0:
        return clean
    seed_frame = mu + spec.corrupt_sigma * rng.standard_normal(D) + spec.distractor_pull * distractor
    run = l2_normalize(seed_frame + spec.dup_jitter * rng.standard_normal((n_red, D)))
    start = int(rng.integers(0, n_clean + 1))
    return np.concatenate([clean[:start], run, clean[start:]])


def generate_synthetic(spec):
    """Build a dataset; the same spec always yields identical arrays.

    Subjects are assigned in order to the held-out pool (``probe`` templates
    plus a single clean ``gallery`` still each), then validation, then train.
    """
    rng = np.random.default_rng(spec.seed)
    distractor = _unit(rng.standard_normal(spec.dim))
    templates, splits, prototypes = [], [], {}
    for s in range(spec.num_subjects):
        sid = f"s{s:04d}"
        mu = _unit(rng.standard_normal(spec.dim))
        prototypes[sid] = mu
        if s < spec.heldout_subjects:
            split = "probe"
        elif s < spec.heldout_subjects + spec.val_subjects:
            split = "val"
        else:
            split = "train"
        for k in range(spec.templates_per_subject):
            frames = _template(spec, mu, distractor, rng)
            templates.append(FrameEmbeddingSet(f"{sid}_t{k:03d}", sid, frames))
            splits.append(split)
        if split == "probe":
            still = l2_normalize(mu + spec.clean_sigma * rng.standard_normal((1, spec.dim)))
            templates.append(FrameEmbeddingSet(f"{sid}_still", sid, still))
            splits.append("gallery")
    return SyntheticDataset(spec, templates, splits, prototypes, distractor)


def write_dataset(dataset, out_dir):
    """Write templates and ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    entries = dataset.manifest_entries()
    for t, e in zip(dataset.templates, entries):
        write_template(out / e.path, t)
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def spec_as_dict(spec):
    return asdict(spec)
