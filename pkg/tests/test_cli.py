import json

import numpy as np
import pytest

from rmn import tensor as T
from rmn.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_train_config
from rmn.data import load_dataset
from rmn.metrics import evaluate_captions


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth-gen", "--videos", "10", "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(corpus), "--out", str(out), "--preset", "synthetic",
                 "--epochs", "2", "--no-figures"])
    assert code == EXIT_OK
    return out


class TestSynthGen:
    def test_count_and_determinism(self, corpus, tmp_path, capsys):
        code, out, _ = run(capsys, "synth-gen", "--videos", 10, "--seed", 3, "--out", tmp_path)
        assert code == EXIT_OK and "wrote 10 videos" in out
        a = sorted(p.relative_to(corpus) for p in corpus.rglob("*") if p.is_file())
        b = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
        assert a == b and len(list((corpus / "features").iterdir())) == 10
        for rel in a:
            if rel.name != "synth_config.json":
                assert (corpus / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel

    def test_zero_videos_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth-gen", "--videos", "0", "--out", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE


class TestTrainFlags:
    def parse(self, *argv):
        return build_parser().parse_args(["train", "--data", "d", "--out", "o", *argv])

    @pytest.mark.parametrize("mode,ling,setting", [("hard", "on", "H+L"), ("soft", "off", "S"),
                                                   ("hard", "off", "H"), ("soft", "on", "S+L")])
    def test_setting_mapping(self, mode, ling, setting):
        cfg = resolve_train_config(self.parse("--mode", mode, "--linguistic-loss", ling))
        assert cfg.setting == setting

    def test_flags_override_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"epochs": 7, "lam": 0.3, "tau": 2.0}))
        cfg = resolve_train_config(self.parse("--preset", "synthetic", "--config", str(path),
                                              "--epochs", "3", "--lambda", "0.9"))
        assert (cfg.epochs, cfg.lam, cfg.tau, cfg.d_h) == (3, 0.9, 2.0, 32)

    def test_unknown_config_key(self, tmp_path, capsys, corpus):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"bogus": 1}))
        code, _, err = run(capsys, "train", "--data", corpus, "--out", tmp_path / "o", "--config", path)
        assert code == EXIT_USAGE and "invalid training config" in err

    def test_missing_data_dir(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "o")
        assert code == EXIT_USAGE and "cannot load data" in err


class TestTrainOutputs:
    def test_artifacts(self, run_dir):
        for name in ("run_config.json", "config.json", "train_log.jsonl", "best.rmnc", "last.rmnc"):
            assert (run_dir / name).exists(), name
        echo = json.loads((run_dir / "run_config.json").read_text())
        assert echo["command"] == "train" and echo["train_config"]["epochs"] == 2
        assert len((run_dir / "train_log.jsonl").read_text().splitlines()) == 2


class TestCaptionTrace:
    def test_trace_length_matches_caption(self, corpus, run_dir, capsys):
        ckpt = run_dir / "best.rmnc"
        code, caps, err = run(capsys, "caption", "--checkpoint", ckpt, "--data", corpus)
        assert code == EXIT_OK and err.startswith("# config ")
        captions = dict(line.split("\t") for line in caps.splitlines())
        assert len(captions) == 10
        code, trace, _ = run(capsys, "trace", "--checkpoint", ckpt, "--data", corpus)
        assert code == EXIT_OK
        per_video = {}
        for line in trace.splitlines():
            rec = json.loads(line)
            per_video.setdefault(rec["video_id"], []).append(rec["word"])
        for vid, caption in captions.items():
            assert per_video.get(vid, []) == caption.split()

    def test_unknown_video(self, corpus, run_dir, capsys):
        code, _, err = run(capsys, "caption", "--checkpoint", run_dir / "best.rmnc", "--data", corpus,
                           "--video", "nope")
        assert code == EXIT_USAGE and "unknown video ids" in err

    def test_checkpoint_mismatch_reported(self, run_dir, tmp_path, capsys):
        other = tmp_path / "other"
        assert main(["synth-gen", "--videos", "3", "--seed", "1", "--out", str(other)]) == EXIT_OK
        vocab = other / "vocab.txt"
        vocab.write_text(vocab.read_text() + "extraword\n")
        code, _, err = run(capsys, "caption", "--checkpoint", run_dir / "best.rmnc", "--data", other)
        assert code == EXIT_USAGE and "checkpoint mismatch" in err

    def test_missing_checkpoint(self, corpus, tmp_path, capsys):
        code, _, err = run(capsys, "caption", "--checkpoint", tmp_path / "x.rmnc", "--data", corpus)
        assert code == EXIT_USAGE and "checkpoint not found" in err


class TestEval:
    def test_references_as_candidates(self, corpus, tmp_path, capsys):
        ds = load_dataset(corpus)
        refs = ds.references()
        tsv = tmp_path / "c.tsv"
        tsv.write_text("".join(f"{v}\t{' '.join(refs[v][0])}\n" for v in ds.video_ids()))
        code, out, _ = run(capsys, "eval", "--data", corpus, "--candidates", tsv, "--out", tmp_path / "m.json")
        assert code == EXIT_OK
        rows = dict(line.split("\t") for line in out.splitlines()[1:])
        assert float(rows["bleu4"]) == pytest.approx(1.0)
        assert float(rows["rouge_l"]) == pytest.approx(1.0)
        saved = json.loads((tmp_path / "m.json").read_text())
        assert saved["metrics"]["bleu4"] == pytest.approx(1.0) and saved["videos"] == 10

    def test_matches_library(self, corpus, run_dir, tmp_path, capsys):
        ckpt = run_dir / "best.rmnc"
        _, caps, _ = run(capsys, "caption", "--checkpoint", ckpt, "--data", corpus, "--out", tmp_path / "c.tsv")
        code, out, _ = run(capsys, "eval", "--data", corpus, "--checkpoint", ckpt)
        assert code == EXIT_OK
        refs = load_dataset(corpus).references()
        pairs = [line.split("\t") for line in caps.splitlines()]
        expected = evaluate_captions([c.split() for _, c in pairs], [refs[v] for v, _ in pairs])
        rows = dict(line.split("\t") for line in out.splitlines()[1:])
        for k in ("bleu4", "rouge_l", "cider"):
            assert float(rows[k]) == pytest.approx(expected[k], abs=1e-6)

    def test_min_cider_threshold(self, corpus, run_dir, capsys):
        code, _, _ = run(capsys, "eval", "--data", corpus, "--checkpoint", run_dir / "best.rmnc",
                         "--min-cider", 1e9)
        assert code == EXIT_FAIL

    def test_needs_a_source(self, corpus, capsys):
        code, _, err = run(capsys, "eval", "--data", corpus)
        assert code == EXIT_USAGE and "--checkpoint or --candidates" in err

    def test_malformed_candidates(self, corpus, tmp_path, capsys):
        tsv = tmp_path / "bad.tsv"
        tsv.write_text("just one column\n")
        code, _, err = run(capsys, "eval", "--data", corpus, "--candidates", tsv)
        assert code == EXIT_USAGE and "bad.tsv:1" in err


class TestGradCheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "grad-check", "--max-entries", 10)
        lines = out.splitlines()
        assert code == EXIT_OK
        assert any("tanh" in line for line in lines)
        checks = [line for line in lines if line.startswith(("PASS", "FAIL"))]
        assert checks and all(line.startswith("PASS") for line in checks)
        assert lines[-1].startswith(f"{len(checks)}/{len(checks)} checks passed")

    def test_corrupted_backward_fails(self, capsys, monkeypatch):
        def bad_tanh(a):
            y = np.tanh(a.data)
            return T._result(y, (a,), lambda g: (g * (1.0 - y),), "tanh")

        monkeypatch.setattr(T, "tanh", bad_tanh)
        code, out, _ = run(capsys, "grad-check", "--max-entries", 10)
        assert code == EXIT_FAIL
        assert any(line.startswith("FAIL") and "tanh" in line for line in out.splitlines())
