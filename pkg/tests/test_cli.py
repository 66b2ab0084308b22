"""CLI contract tests: subcommands, config round-trip and digest, exit
codes, artifact formats, and reproducibility of emitted files."""

import json
from pathlib import Path

import numpy as np
import pytest

from koopbound.cli import RunConfig, main


@pytest.fixture()
def mini_config(tmp_path):
    """Downscaled pipeline so CLI runs finish in seconds."""
    cfg = RunConfig(
        n_traj=6, t_len=0.5, lipschitz_resolution=21, resolution=3,
        sim_step=1e-2, horizon=10.0, adv_samples=5, adv_horizon=5.0,
        out_dir=str(tmp_path / "out"), jobs=1, seed=7,
    )
    path = tmp_path / "config.json"
    cfg.to_file(path)
    return cfg, path


def run(args):
    return main([str(a) for a in args])


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(seed=99, resolution=5)
        path = tmp_path / "c.json"
        cfg.to_file(path)
        assert RunConfig.from_file(path) == cfg

    def test_digest_ignores_output_knobs(self):
        a = RunConfig(jobs=1, out_dir="x", figures=True)
        b = RunConfig(jobs=8, out_dir="y", figures=False)
        c = RunConfig(seed=1234)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(plant="nonexistent")
        with pytest.raises(ValueError):
            RunConfig(n_traj=0)
        with pytest.raises(ValueError):
            RunConfig(resolution=1)


class TestGenData:
    def test_default_counts(self, mini_config, capsys):
        cfg, path = mini_config
        assert run(["gen-data", "--config", path]) == 0
        out = capsys.readouterr().out
        assert "306 snapshots" in out  # 6 trajectories x 51 samples
        data_file = Path(cfg.out_dir) / "dataset.csv"
        assert data_file.exists()
        lines = data_file.read_text().splitlines()
        header = [l for l in lines if l.startswith("traj_id")]
        assert header == ["traj_id,t,x1,x2,xdot1,xdot2,u1"]
        rows = [l for l in lines if not l.startswith(("#", "traj_id"))]
        assert len(rows) == 6 * 51

    def test_minimal_flags(self, mini_config):
        cfg, path = mini_config
        assert run(["gen-data", "--config", path, "--n-traj", 1,
                    "--t-len", 0.01, "--step", 0.01]) == 0
        rows = [l for l in (Path(cfg.out_dir) / "dataset.csv").read_text().splitlines()
                if not l.startswith(("#", "traj_id"))]
        assert len(rows) == 2

    def test_same_seed_identical_bytes(self, mini_config, tmp_path):
        cfg, path = mini_config
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["gen-data", "--config", path, "--out", out]) == 0
            outs.append((out / "dataset.csv").read_bytes())
        assert outs[0] == outs[1]


class TestIdentify:
    def test_pipeline_and_model_file(self, mini_config, capsys):
        cfg, path = mini_config
        assert run(["gen-data", "--config", path]) == 0
        data_file = Path(cfg.out_dir) / "dataset.csv"
        assert run(["identify", "--config", path, data_file]) == 0
        out = capsys.readouterr().out
        assert "c1=" in out and "L_p=" in out
        model_file = Path(cfg.out_dir) / "model.json"
        payload = json.loads(model_file.read_text())
        assert payload["c1"] > 0
        assert payload["meta"]["config_digest"] == cfg.digest()
        assert len(payload["a"]) == 14

    def test_missing_data_file(self, mini_config, capsys):
        _, path = mini_config
        assert run(["identify", "--config", path, "nope.csv"]) == 1
        assert "not found" in capsys.readouterr().err


@pytest.fixture()
def identified(mini_config):
    cfg, path = mini_config
    assert run(["gen-data", "--config", path]) == 0
    assert run(["identify", "--config", path,
                Path(cfg.out_dir) / "dataset.csv"]) == 0
    return cfg, path, Path(cfg.out_dir) / "model.json"


class TestAnalyze:
    def test_origin_all_zero(self, identified, capsys):
        cfg, path, model = identified
        assert run(["analyze", "--config", path, model, "0,0"]) == 0
        payload = json.loads((Path(cfg.out_dir) / "analysis.json").read_text())
        assert payload["v0_star"] == 0.0
        assert payload["delta_v_max"] == 0.0
        assert payload["ok_value_bound"] is True

    def test_interior_point_report(self, identified, capsys):
        cfg, path, model = identified
        assert run(["analyze", "--config", path, model, "0.5,0.5"]) == 0
        out = capsys.readouterr().out
        assert "V0*" in out and "dV_max" in out
        payload = json.loads((Path(cfg.out_dir) / "analysis.json").read_text())
        assert payload["v0_star"] > 0
        assert payload["delta_v_max"] > 0
        assert payload["config_digest"] == cfg.digest()

    def test_outside_region_flagged(self, identified):
        cfg, path, model = identified
        with pytest.warns(UserWarning, match="outside"):
            assert run(["analyze", "--config", path, model, "1.5,0.0"]) == 0
        payload = json.loads((Path(cfg.out_dir) / "analysis.json").read_text())
        assert "region_exit" in payload["flags"]


class TestSweep:
    def test_rows_figures_and_summary(self, identified, capsys):
        cfg, path, model = identified
        assert run(["sweep", "--config", path, model]) == 0
        out_dir = Path(cfg.out_dir)
        rows = [l for l in (out_dir / "sweep.csv").read_text().splitlines()
                if not l.startswith(("#", "x1"))]
        assert len(rows) == 9  # resolution 3
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["points"] == 9
        assert summary["config_digest"] == cfg.digest()
        for name in ("deviation_contours.png", "deviation_surfaces.png",
                     "bound_comparison.png"):
            assert (out_dir / name).exists()

    def test_no_figures_flag(self, identified):
        cfg, path, model = identified
        out = Path(cfg.out_dir)
        for png in out.glob("*.png"):
            png.unlink()
        assert run(["sweep", "--config", path, model, "--no-figures"]) == 0
        assert not list(out.glob("*.png"))

    def test_rerun_identical_bytes(self, identified, tmp_path):
        cfg, path, model = identified
        outs = []
        for name, jobs in (("s1", 1), ("s2", 2)):
            out = tmp_path / name
            assert run(["sweep", "--config", path, model, "--out", out,
                        "--jobs", jobs, "--no-figures"]) == 0
            outs.append((out / "sweep.csv").read_bytes())
        assert outs[0] == outs[1]


class TestModelEditFalsifiability:
    def test_halved_c1_shrinks_the_bound(self, identified):
        # the verification pipeline must respond to the model's envelope:
        # editing c1 in the artifact changes the computed bound accordingly
        cfg, path, model_path = identified
        assert run(["analyze", "--config", path, model_path, "0.8,0.8"]) == 0
        base = json.loads((Path(cfg.out_dir) / "analysis.json").read_text())

        payload = json.loads(model_path.read_text())
        payload["c1"] /= 2.0
        payload["c2"] = 0.0
        edited = model_path.parent / "model_edited.json"
        edited.write_text(json.dumps(payload))
        assert run(["analyze", "--config", path, edited, "0.8,0.8"]) == 0
        half = json.loads((Path(cfg.out_dir) / "analysis.json").read_text())
        assert half["delta_v_max"] == pytest.approx(
            base["delta_v_max"] / 2.0, rel=0.2)


class TestUsageErrors:
    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_argument(self):
        assert run(["identify"]) == 1

    def test_bad_config_value(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n_traj": -3}))
        assert run(["gen-data", "--config", path]) == 1
        assert "positive" in capsys.readouterr().err


class TestEntryPoint:
    def test_console_script(self):
        import subprocess

        proc = subprocess.run(["python3", "-m", "koopbound.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
