import numpy as np
import pytest

from rean.aggregator import FrameEmbeddingSet
from rean.cli import balanced_pairs, main
from rean.data import read_manifest, read_template, write_template
from rean.model_io import decode_checkpoint, load_model

GEN = ["gen", "--subjects", "20", "--templates", "4", "--frames", "16", "--dim", "32",
       "--redundancy", "0.75", "--seed", "7"]
TRAIN = ["train", "--method", "rean", "--hidden", "4", "--epochs", "2", "--batches-per-epoch", "2",
         "--subjects-per-batch", "4", "--templates-per-subject", "2", "--frames", "8", "--seed", "3"]


def run(argv, capsys):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["gen", "--subjects", "8", "--templates", "3", "--frames", "6", "--dim", "6",
                 "--heldout", "3", "--val", "1", "--seed", "2", "--out", str(out)]) == 0
    return out


class TestGen:
    def test_example(self, tmp_path, capsys):
        status, out, _ = run(GEN + ["--out", tmp_path / "ds"], capsys)
        assert status == 0
        entries = read_manifest(tmp_path / "ds" / "manifest.tsv")
        assert len(entries) == 80 and {e.split for e in entries} == {"train"}
        t = read_template(tmp_path / "ds" / entries[0].path)
        assert t.frames.shape == (16, 32)
        assert "wrote 80 templates" in out

    def test_config_echo(self, tmp_path, capsys):
        run(GEN + ["--out", tmp_path], capsys)
        config = dict(line.split("\t") for line in (tmp_path / "config.txt").read_text().splitlines())
        assert config["redundancy"] == "0.75" and config["seed"] == "7"
        assert config["dup_jitter"] == "0.001"  # defaults are echoed too

    def test_byte_identical(self, tmp_path, capsys):
        for d in ("a", "b"):
            run(GEN + ["--out", tmp_path / d], capsys)
        # the config echo records --out, which differs between the two runs
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file() and p.name != "config.txt")
        assert len(files) == 81
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_invalid_value(self, tmp_path, capsys):
        status, _, err = run(GEN + ["--out", tmp_path, "--redundancy", "1.5"], capsys)
        assert status == 1 and err.count("\n") == 1


class TestErrors:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--out", "x", "--bogus"])
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["serve"])
        assert exc.value.code != 0

    def test_missing_file_named(self, tmp_path, capsys):
        status, _, err = run(["aggregate", "--method", "avg", "--in", tmp_path / "nope.reat"], capsys)
        assert status == 1 and "nope.reat" in err

    def test_missing_model(self, tmp_path, capsys):
        write_template(tmp_path / "t.reat", FrameEmbeddingSet("t", "s", np.ones((2, 3), dtype=np.float32)))
        status, _, err = run(["aggregate", "--method", "rean", "--in", tmp_path / "t.reat"], capsys)
        assert status == 1 and "--model" in err


class TestGradcheck:
    def test_example(self, capsys):
        status, out, _ = run(["gradcheck", "--dim", "4", "--hidden", "3", "--frames", "3", "--seed", "1"], capsys)
        err = float(out.splitlines()[0].split("\t")[1])
        assert status == (0 if err < 1e-3 else 1)
        assert status == 0

    def test_failing_tolerance_exits_nonzero(self, capsys):
        status, _, _ = run(["gradcheck", "--seed", "1", "--tol", "0"], capsys)
        assert status == 1


class TestAggregate:
    def test_empty_template_gives_zero_vector(self, tmp_path, capsys):
        write_template(tmp_path / "t.reat", FrameEmbeddingSet("t0", "s0", np.zeros((0, 5), dtype=np.float32)))
        out = tmp_path / "r.reat"
        status, _, _ = run(["aggregate", "--method", "avg", "--model", "none", "--in", tmp_path / "t.reat",
                            "--out", out], capsys)
        assert status == 0
        rep = read_template(out)
        assert rep.frames.shape == (1, 5) and not rep.frames.any()
        assert (rep.template_id, rep.subject_id) == ("t0", "s0")
        assert (tmp_path / "r.reat.config.txt").exists()

    def test_directory_output(self, dataset, tmp_path, capsys):
        ins = sorted((dataset / "templates").glob("*.reat"))[:3]
        status, _, _ = run(["aggregate", "--method", "avg", "--in", *ins, "--out", f"{tmp_path}/reps/"], capsys)
        assert status == 0
        assert len(list((tmp_path / "reps").glob("*.rep.reat"))) == 3


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.rean"
    assert main(TRAIN + ["--manifest", str(dataset / "manifest.tsv"), "--out", str(out)]) == 0
    return out


class TestTrainAndEval:
    def test_artifacts(self, model):
        params = load_model(model)
        assert params.dim == 6 and params.hidden == 4
        _, state = decode_checkpoint(model.with_suffix(".ckpt").read_bytes())
        assert state.step == 4
        log = model.with_suffix(".log").read_text().splitlines()
        assert log[0].startswith("gradcheck\t") and len(log) == 3
        assert "epochs\t2" in model.with_suffix(".config.txt").read_text()

    def test_train_deterministic(self, dataset, model, tmp_path, capsys):
        out = tmp_path / "m.rean"
        run(TRAIN + ["--manifest", dataset / "manifest.tsv", "--out", out], capsys)
        assert out.read_bytes() == model.read_bytes()
        assert out.with_suffix(".ckpt").read_bytes() == model.with_suffix(".ckpt").read_bytes()

    def test_identify(self, dataset, model, tmp_path, capsys):
        out = tmp_path / "ident.tsv"
        status, stdout, _ = run(["eval-identify", "--manifest", dataset / "manifest.tsv", "--model", model,
                                 "--ranks", "1,2,3", "--fpir", "0.1,0.5", "--out", out], capsys)
        assert status == 0
        rows = [line.split("\t") for line in out.read_text().splitlines()]
        assert [r[:2] for r in rows] == [["closed_set_ir", "rank1"], ["closed_set_ir", "rank2"],
                                        ["closed_set_ir", "rank3"], ["tpir", "fpir0.1"], ["tpir", "fpir0.5"]]
        ir = [float(r[2]) for r in rows[:3]]
        assert ir == sorted(ir)
        assert stdout == out.read_text()

    def test_overrides(self, dataset, model, tmp_path, capsys):
        probes = [e for e in read_manifest(dataset / "manifest.tsv") if e.split == "probe"]
        tid = read_template(dataset / probes[0].path).template_id
        (tmp_path / "ov.tsv").write_text(f"{tid}\tavg\n")
        status, _, _ = run(["eval-identify", "--manifest", dataset / "manifest.tsv", "--model", model,
                            "--overrides", tmp_path / "ov.tsv"], capsys)
        assert status == 0
        (tmp_path / "ov.tsv").write_text(f"{tid}\tquality\n")
        status, _, err = run(["eval-identify", "--manifest", dataset / "manifest.tsv", "--model", model,
                              "--overrides", tmp_path / "ov.tsv"], capsys)
        assert status == 1 and "override" in err

    def test_verify(self, dataset, capsys):
        status, out, _ = run(["eval-verify", "--manifest", dataset / "manifest.tsv", "--method", "avg",
                              "--split", "train", "--n-pairs", "40", "--folds", "4"], capsys)
        assert status == 0
        metrics = dict((line.split("\t")[1], float(line.split("\t")[2])) for line in out.splitlines())
        assert 0.0 <= metrics["mean"] <= 1.0

    def test_wrong_model_kind(self, dataset, model, capsys):
        status, _, err = run(["eval-identify", "--manifest", dataset / "manifest.tsv", "--method", "quality",
                              "--model", model], capsys)
        assert status == 1 and "quality" in err


def test_balanced_pairs():
    from rean.aggregator import TemplateRepresentation

    reps = [TemplateRepresentation(np.zeros(2), f"t{i}", f"s{i // 2}", "avg") for i in range(6)]
    pairs = balanced_pairs(reps, 10, seed=0)
    assert [p[2] for p in pairs] == [True, False] * 5
    for i, j, same in pairs:
        assert i != j and (reps[i].subject_id == reps[j].subject_id) == same
    assert pairs == balanced_pairs(reps, 10, seed=0)
