import numpy as np
import pytest

from rean.aggregator import FrameEmbeddingSet, avg_pool
from rean.data import (
    BadMagicError,
    ManifestEntry,
    SyntheticDatasetSpec,
    TemplateFormatError,
    TruncatedError,
    UnsupportedVersionError,
    decode_template,
    encode_template,
    from_matrix,
    generate_synthetic,
    l2_normalize,
    load_split,
    read_manifest,
    read_template,
    write_dataset,
    write_manifest,
)


def template(n=2, d=3, seed=0, sid="subj", tid="tmpl"):
    frames = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
    return FrameEmbeddingSet(tid, sid, frames)


class TestTemplateCodec:
    def test_empty_template(self):
        t = FrameEmbeddingSet("t0", "s0", np.zeros((0, 5), dtype=np.float32))
        buf = encode_template(t)
        assert len(buf) == 4 + 16 + 2 + 4 + 2
        back = decode_template(buf)
        assert back.frames.shape == (0, 5)
        assert (back.template_id, back.subject_id) == ("t0", "s0")

    def test_round_trip_bitwise(self):
        t = template()
        back = decode_template(encode_template(t))
        assert back.frames.tobytes() == t.frames.tobytes()
        assert back.frames.dtype == np.float32

    def test_little_endian_layout(self):
        t = FrameEmbeddingSet("b", "a", np.array([[1.0]], dtype=np.float32))
        buf = encode_template(t)
        assert buf[:4] == b"REAT"
        assert buf[4:8] == (1).to_bytes(4, "little")
        assert buf[-4:] == np.array([1.0], dtype="<f4").tobytes()

    def test_unicode_ids(self):
        t = template(sid="sujet-é", tid="模板")
        back = decode_template(encode_template(t))
        assert (back.subject_id, back.template_id) == ("sujet-é", "模板")

    def test_bad_magic(self):
        buf = bytearray(encode_template(template()))
        buf[:4] = b"XEAT"
        with pytest.raises(BadMagicError):
            decode_template(bytes(buf))

    def test_truncated(self):
        buf = encode_template(template())
        for cut in (2, 10, len(buf) - 1):
            with pytest.raises(TruncatedError):
                decode_template(buf[:cut])

    def test_unsupported_version(self):
        buf = bytearray(encode_template(template()))
        buf[4:8] = (7).to_bytes(4, "little")
        with pytest.raises(UnsupportedVersionError):
            decode_template(bytes(buf))

    def test_trailing_bytes(self):
        with pytest.raises(TemplateFormatError):
            decode_template(encode_template(template()) + b"\0")

    def test_error_kinds_are_distinct(self):
        assert len({BadMagicError, TruncatedError, UnsupportedVersionError}) == 3
        assert not issubclass(BadMagicError, TruncatedError)

    def test_file_round_trip(self, tmp_path):
        t = template(4, 6)
        from rean.data import write_template

        write_template(tmp_path / "a.reat", t)
        np.testing.assert_array_equal(read_template(tmp_path / "a.reat").frames, t.frames)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.reat"):
            read_template(tmp_path / "nope.reat")

    def test_adapter(self):
        t = from_matrix(np.ones((3, 4)), 7, "v1")
        assert t.frames.dtype == np.float32 and t.subject_id == "7"


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [ManifestEntry("a.reat", "s1", "train"), ManifestEntry("b.reat", "s2", "probe")]
        write_manifest(tmp_path / "m.tsv", entries)
        assert (tmp_path / "m.tsv").read_text() == "a.reat\ts1\ttrain\nb.reat\ts2\tprobe\n"
        assert read_manifest(tmp_path / "m.tsv") == entries

    def test_rejects_duplicates_and_bad_splits(self, tmp_path):
        with pytest.raises(ValueError):
            write_manifest(tmp_path / "m.tsv", [ManifestEntry("a", "s", "train"), ManifestEntry("a", "s", "val")])
        with pytest.raises(ValueError):
            write_manifest(tmp_path / "m.tsv", [ManifestEntry("a", "s", "test")])
        with pytest.raises(ValueError):
            write_manifest(tmp_path / "m.tsv", [ManifestEntry("a", "", "train")])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a.reat\ts1\n")
        with pytest.raises(ValueError, match="m.tsv:1"):
            read_manifest(tmp_path / "m.tsv")


class TestSynthetic:
    def test_noise_free(self):
        spec = SyntheticDatasetSpec(num_subjects=3, templates_per_subject=2, frames_per_template=5, dim=6,
                                    clean_sigma=0.0, redundancy=0.0)
        ds = generate_synthetic(spec)
        for t in ds.templates:
            mu = ds.prototypes[t.subject_id]
            np.testing.assert_allclose(t.frames, np.tile(mu, (t.n_frames, 1)), atol=1e-6)
            np.testing.assert_allclose(avg_pool(t).vector, mu, atol=1e-6)

    def test_near_duplicate_run(self):
        spec = SyntheticDatasetSpec(num_subjects=4, templates_per_subject=3, frames_per_template=16, dim=32,
                                    redundancy=0.75, dup_jitter=1e-3, seed=11)
        ds = generate_synthetic(spec)
        for t in ds.templates:
            F = l2_normalize(t.frames)
            C = F @ F.T
            np.fill_diagonal(C, -np.inf)
            dup = C.max(axis=1) > 0.99
            assert dup.sum() == 12
            run = np.flatnonzero(dup)
            assert np.all(np.diff(run) == 1)
            sub = C[np.ix_(run, run)]
            assert np.all(sub[~np.eye(12, dtype=bool)] > 0.99)

    def test_clean_frames_unit_norm(self):
        spec = SyntheticDatasetSpec(num_subjects=5, templates_per_subject=2, dim=16, seed=2)
        for t in generate_synthetic(spec).templates:
            np.testing.assert_allclose(np.linalg.norm(t.frames, axis=1), 1.0, atol=1e-9)

    def test_deterministic(self, tmp_path):
        spec = SyntheticDatasetSpec(num_subjects=4, templates_per_subject=2, heldout_subjects=1, seed=5)
        a = write_dataset(generate_synthetic(spec), tmp_path / "a")
        b = write_dataset(generate_synthetic(spec), tmp_path / "b")
        for pa in sorted((tmp_path / "a" / "templates").iterdir()):
            assert pa.read_bytes() == (tmp_path / "b" / "templates" / pa.name).read_bytes()
        assert a.read_text() == b.read_text()

    def test_splits_partition(self, tmp_path):
        spec = SyntheticDatasetSpec(num_subjects=10, templates_per_subject=3, heldout_subjects=2, val_subjects=2)
        ds = generate_synthetic(spec)
        manifest = write_dataset(ds, tmp_path)
        entries = read_manifest(manifest)
        assert len({e.path for e in entries}) == len(entries)
        by_split = {s: {e.subject_id for e in entries if e.split == s} for s in ("train", "val", "probe", "gallery")}
        assert len(by_split["probe"]) == 2 and by_split["gallery"] == by_split["probe"]
        assert len(by_split["val"]) == 2 and len(by_split["train"]) == 6
        assert not by_split["train"] & by_split["val"]
        gallery = load_split(manifest, "gallery")
        assert all(t.n_frames == 1 for t in gallery)
        assert len(load_split(manifest)) == len(ds.templates)

    @pytest.mark.parametrize("kwargs", [dict(redundancy=1.0), dict(redundancy=-0.1), dict(dim=1),
                                        dict(clean_sigma=-1.0), dict(heldout_subjects=30)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(**kwargs)
