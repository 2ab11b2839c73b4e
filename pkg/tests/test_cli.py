import json
import sys

import pytest

from docnmt import cli
from docnmt import corpus as C


def run_ok(argv):
    assert cli.run(argv) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> preprocess -> tiny baseline checkpoint, shared by tests."""
    root = tmp_path_factory.mktemp("pipe")
    data, prep, models = root / "data", root / "prep", root / "models"
    run_ok(["synth", "--mode", "trg-informative", "--docs", "24",
            "--seed", "7", "--out-dir", str(data), "--name", "train"])
    run_ok(["synth", "--mode", "trg-informative", "--docs", "8",
            "--seed", "8", "--out-dir", str(data), "--name", "dev"])
    run_ok(["synth", "--mode", "trg-informative", "--docs", "8",
            "--seed", "9", "--out-dir", str(data), "--name", "test"])
    run_ok(["preprocess",
            "--train-src", str(data / "train.src"),
            "--train-trg", str(data / "train.trg"),
            "--dev-src", str(data / "dev.src"),
            "--dev-trg", str(data / "dev.trg"),
            "--test-src", str(data / "test.src"),
            "--test-trg", str(data / "test.trg"),
            "--merges", "60", "--out-dir", str(prep), "--name", "syn"])
    common = ["--train-src", str(prep / "syn.train.src"),
              "--train-trg", str(prep / "syn.train.trg"),
              "--dev-src", str(prep / "syn.dev.src"),
              "--dev-trg", str(prep / "syn.dev.trg"),
              "--src-vocab", str(prep / "syn.vocab.src"),
              "--trg-vocab", str(prep / "syn.vocab.trg")]
    run_ok(["train-baseline", *common, "--epochs", "2", "--emb-dim", "12",
            "--hidden-dim", "12", "--out", str(models / "base"),
            "--seed", "1"])
    return root, data, prep, models, common


class TestSynthPreprocess:
    def test_outputs_are_loadable(self, pipeline):
        _, data, prep, _, _ = pipeline
        raw = C.load_documents(data / "train.src", data / "train.trg")
        seg = C.load_documents(prep / "syn.train.src", prep / "syn.train.trg")
        assert len(raw) == len(seg) == 24
        metas = C.load_meta(data / "train.meta")
        assert len(metas) == 24

    def test_synth_rerun_is_byte_identical(self, pipeline, tmp_path):
        _, data, _, _, _ = pipeline
        argv = ["synth", "--mode", "trg-informative", "--docs", "24",
                "--seed", "7", "--out-dir", str(tmp_path), "--name", "train"]
        run_ok(argv)
        for name in ("train.src", "train.trg", "train.meta"):
            assert (tmp_path / name).read_bytes() == (data / name).read_bytes()
        manifest = (tmp_path / "train.src.manifest.json").read_bytes()
        run_ok(argv)  # same destination: even the manifest matches
        assert (tmp_path / "train.src.manifest.json").read_bytes() == manifest

    def test_manifest_records_inputs_and_outputs(self, pipeline):
        _, _, prep, _, _ = pipeline
        manifest = json.loads(
            (prep / "syn.train.src.manifest.json").read_text())
        assert manifest["command"] == "preprocess"
        assert len(manifest["inputs"]) == 6
        assert any(p.endswith("syn.vocab.trg") for p in manifest["outputs"])


class TestTraining:
    def test_checkpoint_rerun_is_byte_identical(self, pipeline, tmp_path):
        _, _, prep, models, common = pipeline
        run_ok(["train-baseline", *common, "--epochs", "2",
                "--emb-dim", "12", "--hidden-dim", "12",
                "--out", str(tmp_path / "again"), "--seed", "1"])
        assert (tmp_path / "again.bin").read_bytes() == \
            (models / "base.bin").read_bytes()
        assert (tmp_path / "again.manifest").read_bytes() == \
            (models / "base.manifest").read_bytes()

    def test_finetune_and_multi_seed_summary(self, pipeline, capsys):
        _, _, _, models, common = pipeline
        run_ok(["finetune", *common, "--variant", "shared-target",
                "--baseline", str(models / "base"), "--epochs", "1",
                "--out", str(models / "st"), "--seeds", "1,2"])
        out = capsys.readouterr().out
        assert "mean" in out and "+-" in out
        assert (models / "st.s1.bin").exists()
        assert (models / "st.s2.bin").exists()


class TestTranslateEvaluateCompare:
    def test_round_trip(self, pipeline, capsys):
        root, data, prep, models, _ = pipeline
        vocabs = ["--src-vocab", str(prep / "syn.vocab.src"),
                  "--trg-vocab", str(prep / "syn.vocab.trg")]
        hyp = root / "base.hyp"
        run_ok(["translate", "--ckpt", str(models / "base"),
                "--src", str(prep / "syn.test.src"), *vocabs,
                "--out", str(hyp)])
        hyp_docs = C.load_blocks(hyp)
        assert len(hyp_docs) == 8

        run_ok(["evaluate", "--hyp", str(hyp), "--ref", str(data / "test.trg"),
                "--meta", str(data / "test.meta"),
                "--out", str(root / "report.txt")])
        out = capsys.readouterr().out
        assert "BLEU" in out and "slot accuracy" in out
        report = (root / "report.txt").read_text()
        assert report.startswith("bleu=")
        assert "slot_accuracy=" in report

        run_ok(["compare", str(hyp), str(hyp), str(data / "test.trg"),
                "--n", "50", "--seed", "3"])
        out = capsys.readouterr().out
        assert "p = 1.0000" in out

    def test_gold_context_translation(self, pipeline):
        root, _, prep, models, _ = pipeline
        run_ok(["translate", "--ckpt", str(models / "st.s1"),
                "--src", str(prep / "syn.test.src"),
                "--gold-context", str(prep / "syn.test.trg"),
                "--src-vocab", str(prep / "syn.vocab.src"),
                "--trg-vocab", str(prep / "syn.vocab.trg"),
                "--out", str(root / "st.hyp")])
        assert (root / "st.hyp").exists()


class TestParams:
    def test_identities_in_table(self, capsys):
        run_ok(["params", "--emb-dim", "16", "--hidden-dim", "16",
                "--src-vocab-size", "100", "--trg-vocab-size", "120"])
        lines = capsys.readouterr().out.strip().splitlines()
        counts = {}
        for line in lines[2:]:
            name, total, delta = line.split()
            counts[name] = int(total)
        assert counts["shared-source"] == counts["shared-target"] \
            == counts["shared-mix"]
        assert counts["shared-source"] - counts["baseline"] == 16 * 16
        assert counts["separated-source"] > counts["shared-source"]

    def test_config_file_overrides_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "desk.cfg"
        cfg.write_text("emb_dim = 8\nhidden_dim = 8\n")
        run_ok(["params", "--config", str(cfg),
                "--src-vocab-size", "10", "--trg-vocab-size", "10"])
        assert "E=8 H=8" in capsys.readouterr().out


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as info:
            cli.run(["synth", "--docs", "5"])  # --mode missing
        assert info.value.code == 2

    def test_runtime_failure_is_1(self, monkeypatch):
        monkeypatch.setattr(sys, "argv",
                            ["docnmt", "evaluate", "--hyp", "nope.hyp",
                             "--ref", "nope.ref"])
        with pytest.raises(SystemExit) as info:
            cli.main()
        assert info.value.code == 1
