import csv
import json

import pytest
import yaml

import cli
from app import start_background_server
import synth
from models import SynthSpec

SMALL_SYNTH = {
    "input_dim": 8,
    "class_count": 4,
    "rank": 2,
    "n_adapters": 4,
    "n_relevant": 2,
    "n_val": 32,
}


def write_config(tmp_path, **overrides):
    data = {
        "experiment": {"seed": 1, "output_dir": str(tmp_path / "run")},
        "synth": dict(SMALL_SYNTH),
        "stage1": {"generations": 2, "population": 4},
        "stage2": {"generations": 2, "population": 4},
        "analysis": {"retention_grid": [0.5, 1.0], "bound_trials": 50},
        "logging": {"level": "quiet"},
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["bound-check", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
        assert capsys.readouterr().err.startswith("evomerge: error:")

    def test_negative_seed(self, tmp_path):
        assert cli.main(["bound-check", "--config", write_config(tmp_path), "--seed", "-1"]) == cli.EXIT_CONFIG

    def test_invalid_world_source(self, tmp_path):
        cfg = write_config(tmp_path, experiment={"world_source": "moon"})
        assert cli.main(["merge", "--config", cfg]) == cli.EXIT_CONFIG

    def test_bad_grid(self, tmp_path):
        assert cli.main(["analyze", "--config", write_config(tmp_path), "--grid", "0.5,2"]) == cli.EXIT_CONFIG

    def test_missing_world_directory(self, tmp_path):
        cfg = write_config(tmp_path, experiment={"world_source": "world", "world_path": str(tmp_path / "none")})
        assert cli.main(["merge", "--config", cfg]) == cli.EXIT_STORAGE

    def test_unreachable_endpoint(self, tmp_path):
        cfg = write_config(tmp_path, oracle={"timeout_s": 2})
        assert cli.main(["merge", "--config", cfg, "--endpoint", "http://127.0.0.1:9"]) == cli.EXIT_ORACLE

    def test_port_in_use(self, tmp_path):
        world = synth.generate_world(SynthSpec(**SMALL_SYNTH))
        with start_background_server(world) as handle:
            port = int(handle.url.rsplit(":", 1)[1])
            cfg = write_config(tmp_path, server={"port": port})
            assert cli.main(["serve", "--config", cfg]) == cli.EXIT_ORACLE


class TestCommands:
    def test_bound_check(self, tmp_path, capsys):
        assert cli.main(["bound-check", "--config", write_config(tmp_path), "--trials", "200"]) == cli.EXIT_OK
        report = last_json(capsys)
        assert report["trials"] == 200
        assert report["violations"] == 0
        assert report["max_ratio"] <= 1.0 + 1e-9

    def test_gen_is_byte_stable(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "a")]) == cli.EXIT_OK
        assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "b")]) == cli.EXIT_OK
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert "world.json" in a
        assert a == b

    def test_merge_then_eval(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["merge", "--config", cfg]) == cli.EXIT_OK
        run = tmp_path / "run"
        solution = json.loads((run / cli.SOLUTION_FILE).read_text(encoding="utf-8"))
        assert len(solution["alphas_star"]) == 4
        history = (run / cli.HISTORY_FILE).read_text(encoding="utf-8").splitlines()
        assert len(history) == 4
        with open(run / cli.LANDSCAPE_FILE, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [r["relevance"] for r in rows] == ["relevant", "relevant", "irrelevant", "irrelevant"]
        capsys.readouterr()

        assert cli.main(["eval", "--config", cfg]) == cli.EXIT_OK
        assert last_json(capsys)["loss"] == pytest.approx(solution["final_loss"], rel=1e-9)

        assert cli.main(["eval", "--config", cfg, "--adapter", str(run / cli.MERGED_DIR)]) == cli.EXIT_OK
        assert last_json(capsys)["loss"] == pytest.approx(solution["final_loss"], rel=1e-4)

    def test_merge_from_stored_world(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "w")]) == cli.EXIT_OK
        cfg = write_config(tmp_path, experiment={"world_source": "world", "world_path": str(tmp_path / "w")})
        assert cli.main(["merge", "--config", cfg]) == cli.EXIT_OK
        assert (tmp_path / "run" / cli.SOLUTION_FILE).exists()

    def test_merge_against_server(self, tmp_path, capsys):
        world = synth.generate_world(SynthSpec(**SMALL_SYNTH, seed=1))
        cfg = write_config(tmp_path, oracle={"workers": 4})
        with start_background_server(world) as handle:
            assert cli.main(["merge", "--config", cfg, "--endpoint", handle.url]) == cli.EXIT_OK
        assert last_json(capsys)["final_loss"] > 0.0

    def test_analyze(self, tmp_path):
        assert cli.main(["analyze", "--config", write_config(tmp_path)]) == cli.EXIT_OK
        with open(tmp_path / "run" / "ab_study.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [float(r["alpha"]) for r in rows] == [0.5, 1.0]
        assert rows[1]["loss_A"] == rows[1]["loss_B"]
        assert (tmp_path / "run" / "lorenz.csv").exists()

    def test_ablate(self, tmp_path, capsys):
        assert cli.main(["ablate", "--config", write_config(tmp_path)]) == cli.EXIT_OK
        report = last_json(capsys)
        assert set(report) == {"uniform", "stage1_only", "stage2_only", "no_sign_flip", "full"}
        with open(tmp_path / "run" / "ablation.csv", newline="", encoding="utf-8") as f:
            assert len(list(csv.reader(f))) == 6

    def test_sweep_samples(self, tmp_path, capsys):
        cfg = write_config(tmp_path, sweeps={"holdout_examples": 128})
        args = ["sweep", "--config", cfg, "--kind", "samples", "--values", "16,32", "--seeds", "1"]
        assert cli.main(args) == cli.EXIT_OK
        report = last_json(capsys)
        assert report["rows"] == 2
        assert set(report["mean"]) == {"16", "32"}
        with open(tmp_path / "run" / "sweep_samples.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["n_val"]) for r in rows] == [16, 32]
        assert all(int(r["seed"]) == 1 for r in rows)
        assert all(float(r["evomerge_loss"]) > 0.0 for r in rows)

    def test_sweep_rejects_empty_pool(self, tmp_path):
        args = ["sweep", "--config", write_config(tmp_path), "--kind", "pool", "--values", "0"]
        assert cli.main(args) == cli.EXIT_CONFIG

    def test_sweep_needs_synth_world(self, tmp_path):
        cfg = write_config(tmp_path, experiment={"world_source": "world", "world_path": str(tmp_path)})
        assert cli.main(["sweep", "--config", cfg, "--kind", "samples"]) == cli.EXIT_CONFIG


class TestConfigFile:
    def test_init_config(self, tmp_path, capsys):
        target = tmp_path / "c.yaml"
        assert cli.main(["init-config", "--config", str(target)]) == cli.EXIT_OK
        assert last_json(capsys)["config"] == str(target)
        assert yaml.safe_load(target.read_text(encoding="utf-8"))["stage2"]["beta_bound"] == 1.5

        assert cli.main(["init-config", "--config", str(target)]) == cli.EXIT_CONFIG
        assert cli.main(["init-config", "--config", str(target), "--force"]) == cli.EXIT_OK
        assert (tmp_path / "c.yaml.bak").exists()

    def test_read_only_command_does_not_write_config(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("EVOMERGE_LOG", "quiet")
        assert cli.main(["bound-check", "--trials", "5"]) == cli.EXIT_OK
        assert last_json(capsys)["trials"] == 5
        assert not (tmp_path / "config.yaml").exists()
        assert not (tmp_path / "config.yaml.tmp").exists()
