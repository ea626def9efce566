import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from probtal import trainer
from probtal.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
TINY = ["--num-classes", "3", "--dim", "6", "--vlp-dim", "5", "--num-train", "4", "--num-test", "2"]
FAST = ["--set", "T=16", "--set", "batch_size=3", "--set", "steps=4", "--set", "mc_samples=16",
        "--set", "mask_small=3", "--set", "mask_large=5"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--seed", "7", "--out", str(out), *TINY]) == 0
    return out


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestEval:
    def test_fixture_table(self, capsys):
        rc = main(["eval", "--results", str(FIXTURES / "eval_results.json"),
                   "--gt", str(FIXTURES / "eval_gt.json")])
        assert rc == 0
        assert capsys.readouterr().out == (FIXTURES / "eval_expected_table.txt").read_text()

    def test_json_report(self, tmp_path):
        out = tmp_path / "r.json"
        main(["eval", "--results", str(FIXTURES / "eval_results.json"),
              "--gt", str(FIXTURES / "eval_gt.json"), "--json", str(out)])
        doc = json.loads(out.read_text())
        assert doc["per_class"] == json.loads((FIXTURES / "eval_expected.json").read_text())["per_class"]

    def test_custom_thresholds(self, capsys):
        main(["eval", "--results", str(FIXTURES / "eval_results.json"),
              "--gt", str(FIXTURES / "eval_gt.json"), "--thresholds", "0.5"])
        assert "0.50" in capsys.readouterr().out

    def test_missing_file(self, capsys, tmp_path):
        rc = main(["eval", "--results", str(tmp_path / "none.json"), "--gt", str(FIXTURES / "eval_gt.json")])
        assert rc != 0
        assert "not found" in capsys.readouterr().err


class TestSynth:
    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--seed", "7", "--out", str(a), *TINY]) == 0
        assert main(["synth", "--seed", "7", "--out", str(b), *TINY]) == 0
        fa, fb = files(a), files(b)
        assert fa and fa == fb

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", str(tmp_path)])
        assert exc.value.code != 0


class TestTrainLocalize:
    def test_pipeline(self, data_dir, tmp_path, capsys):
        ck, res, log = tmp_path / "m.npz", tmp_path / "res.json", tmp_path / "log.csv"
        assert main(["train", "--data", str(data_dir), "--seed", "1", "--out", str(ck),
                     "--log", str(log), *FAST]) == 0
        assert trainer.Checkpoint.load(ck).step == 4
        with open(log) as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in rows][-1] == 4
        assert {"total", "kd", "inter", "mAP@0.5"} <= set(rows[0])
        assert main(["localize", "--ckpt", str(ck), "--data", str(data_dir), "--out", str(res)]) == 0
        assert set(json.loads(res.read_text())["results"]) <= {"video_0004", "video_0005"}
        assert main(["eval", "--results", str(res), "--gt", str(data_dir / "gt.json")]) == 0

    def test_resume_matches_uninterrupted(self, data_dir, tmp_path):
        full, half, rest = tmp_path / "full.npz", tmp_path / "half.npz", tmp_path / "rest.npz"
        main(["train", "--data", str(data_dir), "--seed", "2", "--out", str(full), *FAST])
        main(["train", "--data", str(data_dir), "--seed", "2", "--out", str(half), "--until", "2", *FAST])
        assert trainer.Checkpoint.load(half).step == 2
        assert main(["train", "--data", str(data_dir), "--seed", "2", "--out", str(rest),
                     "--resume", str(half)]) == 0
        assert full.read_bytes() == rest.read_bytes()

    def test_resume_with_other_config(self, data_dir, tmp_path, capsys):
        half = tmp_path / "half.npz"
        main(["train", "--data", str(data_dir), "--seed", "2", "--out", str(half), "--until", "1", *FAST])
        rc = main(["train", "--data", str(data_dir), "--seed", "2", "--out", str(tmp_path / "x.npz"),
                   "--resume", str(half), "--set", "K=3"])
        assert rc == 2 and "differs" in capsys.readouterr().err

    def test_config_file(self, data_dir, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("T = 16\nbatch_size = 3\nsteps = 2\nmc_samples = 16\nmask_small = 3\nmask_large = 5\n")
        ck = tmp_path / "m.npz"
        assert main(["train", "--data", str(data_dir), "--seed", "0", "--out", str(ck),
                     "--config", str(cfg), "--set", "steps=1"]) == 0
        c = trainer.Checkpoint.load(ck).config
        assert (c.T, c.steps, c.seed) == (16, 1, 0)

    @pytest.mark.parametrize("argv", [
        ["train", "--data", "nowhere", "--seed", "0", "--out", "x.npz"],
        ["localize", "--ckpt", "nowhere.npz", "--data", "nowhere", "--out", "r.json"],
    ])
    def test_bad_paths(self, argv, capsys):
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("error:")

    @pytest.mark.parametrize("extra", [["--set", "nonsense=1"], ["--set", "K"], ["--set", "gamma=-1"]])
    def test_bad_config(self, data_dir, tmp_path, extra, capsys):
        assert main(["train", "--data", str(data_dir), "--seed", "0",
                     "--out", str(tmp_path / "x.npz"), *extra]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == 2


class TestAblate:
    def test_k_sweep_rows(self, data_dir, tmp_path, capsys):
        out = tmp_path / "abl.csv"
        assert main(["ablate", "--data", str(data_dir), "--param", "K", "--values", "0,5,10,20",
                     "--seeds", "0", "--out", str(out), *FAST]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["K"] for r in rows] == ["0", "5", "10", "20"]
        assert all(0 <= float(r["avg0.1:0.7"]) <= 1 for r in rows)
        assert len(capsys.readouterr().out.strip().splitlines()) == 5

    def test_metric_sweep(self, data_dir, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["ablate", "--data", str(data_dir), "--param", "metric",
                     "--values", "kl,mahalanobis", "--seeds", "0", "--out", str(out), *FAST]) == 0
        assert out.read_text().count("\n") == 3

    def test_bad_value(self, data_dir, tmp_path):
        assert main(["ablate", "--data", str(data_dir), "--param", "K", "--values", "-1",
                     "--out", str(tmp_path / "x.csv")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 12 and all(line.startswith("PASS") for line in lines)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "probtal", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "ablate" in r.stdout
