import json
import os

import pytest

from triplanegen.cli import (EXIT_MISSING, EXIT_OK, EXIT_USAGE, main)
from triplanegen.prompts import gen_animals, split, write_jsonl

TRAIN_FLAGS = ["--steps", "2", "--batch", "1", "--hw", "16",
               "--n-uniform", "6", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.jsonl"
    recs = split(gen_animals()[:8], 0.6, seed=0)
    write_jsonl(recs, path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", small_data, "--out", str(out)]
                + TRAIN_FLAGS + ["--checkpoint-every", "1"])
    assert code == EXIT_OK
    return out


class TestGenPrompts:
    def test_animals(self, tmp_path):
        out = tmp_path / "a.jsonl"
        assert main(["gen-prompts", "--set", "animals",
                     "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3150
        splits = [json.loads(l)["split"] for l in lines]
        assert splits.count("train") == 1890

    def test_portraits(self, tmp_path):
        out = tmp_path / "p.jsonl"
        assert main(["gen-prompts", "--set", "portraits",
                     "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 400
        assert [json.loads(l)["split"] for l in lines].count("train") == 240

    def test_byte_identical_per_seed(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen-prompts", "--set", "portraits", "--seed", "9",
              "--out", str(a)])
        main(["gen-prompts", "--set", "portraits", "--seed", "9",
              "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_set_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["gen-prompts", "--set", "vehicles",
                  "--out", str(tmp_path / "x.jsonl")])
        assert e.value.code == EXIT_USAGE


class TestTrain:
    def test_artifacts(self, trained):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["oracle"] == "synthetic"
        assert manifest["dataset"]["records"] == 8
        assert len(manifest["dataset"]["sha256"]) == 64
        metrics = (trained / "metrics.jsonl").read_text().strip().splitlines()
        assert len(metrics) == 2
        assert {"step", "loss", "alpha"} <= set(json.loads(metrics[0]))
        assert (trained / "ckpt_000002").exists()

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["train", "--data", str(tmp_path / "nope.jsonl"),
                  "--out", str(tmp_path / "o")] + TRAIN_FLAGS)
        assert e.value.code == EXIT_MISSING

    def test_unknown_oracle(self, tmp_path, small_data):
        with pytest.raises(SystemExit) as e:
            main(["train", "--data", small_data, "--oracle", "quantum",
                  "--out", str(tmp_path / "o")] + TRAIN_FLAGS)
        assert e.value.code == EXIT_USAGE

    def test_toml_config_and_flag_precedence(self, tmp_path, small_data):
        cfgfile = tmp_path / "cfg.toml"
        cfgfile.write_text('steps = 3\nbatch = 1\nhw = 16\n'
                           'n-uniform = 6\nlr = 1e-3\n')
        out = tmp_path / "toml_run"
        assert main(["train", "--data", small_data, "--out", str(out),
                     "--config", str(cfgfile)]) == EXIT_OK
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 3  # steps taken from the TOML file
        out2 = tmp_path / "toml_run2"
        assert main(["train", "--data", small_data, "--out", str(out2),
                     "--config", str(cfgfile), "--steps", "1"]) == EXIT_OK
        lines2 = (out2 / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines2) == 1  # flag wins over the TOML value

    def test_missing_config_file(self, tmp_path, small_data):
        with pytest.raises(SystemExit) as e:
            main(["train", "--data", small_data, "--out", str(tmp_path / "o"),
                  "--config", str(tmp_path / "nope.toml")] + TRAIN_FLAGS)
        assert e.value.code == EXIT_MISSING

    def test_resume_extends_run(self, tmp_path, small_data, trained):
        out = tmp_path / "resumed"
        out.mkdir()
        code = main(["train", "--data", small_data, "--out", str(out),
                     "--resume", str(trained / "ckpt_000002"),
                     "--steps", "4"])
        assert code == EXIT_OK
        assert (out / "ckpt_000004").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resumed_from"] == str(trained / "ckpt_000002")


class TestRender:
    def test_writes_pngs(self, tmp_path, trained):
        out = tmp_path / "imgs"
        code = main(["render", "--ckpt", str(trained / "ckpt_000002"),
                     "--prompt", "a fox wearing a beret",
                     "--views", "2", "--hw", "16", "--out", str(out)])
        assert code == EXIT_OK
        pngs = sorted(os.listdir(out))
        assert len(pngs) == 2
        assert pngs[0].endswith("_az000.png")
        assert pngs[1].endswith("_az180.png")

    def test_hdr_dump(self, tmp_path, trained):
        out = tmp_path / "hdr"
        main(["render", "--ckpt", str(trained / "ckpt_000002"),
              "--prompt", "a fox", "--views", "1", "--hw", "16",
              "--out", str(out), "--hdr"])
        names = os.listdir(out)
        assert any(n.endswith(".f32") for n in names)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["render", "--ckpt", str(tmp_path / "nope"),
                  "--prompt", "a fox"])
        assert e.value.code == EXIT_MISSING


class TestEval:
    def test_report(self, tmp_path, trained, small_data):
        out = tmp_path / "report.json"
        code = main(["eval", "--ckpt", str(trained / "ckpt_000002"),
                     "--data", small_data, "--views", "1", "--hw", "16",
                     "--out", str(out)])
        assert code == EXIT_OK
        rep = json.loads(out.read_text())
        assert rep["views_pp"] == 2 * 1 / 8
        assert 0.0 <= rep["clip_rp"] <= 1.0

    def test_split_filter(self, trained, small_data, capsys):
        code = main(["eval", "--ckpt", str(trained / "ckpt_000002"),
                     "--data", small_data, "--split", "test",
                     "--views", "1", "--hw", "16"])
        assert code == EXIT_OK
        rep = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert len(rep["per_prompt_rank"]) == 3  # 8 records, 60/40 split

    def test_curve_replay(self, tmp_path, trained, small_data):
        csv = tmp_path / "curve.csv"
        code = main(["eval", "--curve", str(trained), "--data", small_data,
                     "--views", "1", "--hw", "16", "--curve-csv", str(csv)])
        assert code == EXIT_OK
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "views_pp,clip_rp"
        assert len(lines) == 3  # ckpt at steps 1 and 2, plus the final one

    def test_needs_ckpt_or_curve(self, small_data):
        with pytest.raises(SystemExit) as e:
            main(["eval", "--data", small_data])
        assert e.value.code == EXIT_USAGE


class TestGradcheck:
    def test_quick_pass(self):
        assert main(["gradcheck", "--cases", "1"]) == EXIT_OK

    def test_injected_fault_fails(self):
        assert main(["gradcheck", "--cases", "1", "--inject-fault"]) == 1
