import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from bohmeq.cli import ConfigError, ExperimentConfig, main
from bohmeq.grid import load_wavefunction

SMALL = {
    "points": 128,
    "T": 1.0,
    "dt_frame": 0.05,
    "N": 4000,
    "checkpoints": [0.5, 1.0],
    "flow": {"dt_flow": 0.05},
    "trajectories": 3,
    "ergodic": {"T": 200.0, "samples": 4001},
}


def write_config(tmp_path, name="cfg.json", **overrides):
    data = {**SMALL, **overrides}
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def run(tmp_path, command, cfg, *extra, out="out"):
    out = tmp_path / out
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(**{**SMALL, "flow": {**ExperimentConfig().flow, "dt_flow": 0.05}})
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg and back.to_json() == cfg.to_json()

    def test_defaults_valid(self):
        ExperimentConfig().validate()

    def test_malformed_json_has_line(self):
        text = '{\n  "dim": 1,\n  "T": 1.0,,\n}'
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_json(text, path="c.json")
        assert exc.value.line == 3 and str(exc.value).startswith("c.json:3:")

    def test_bad_value_anchored_to_line(self):
        text = json.dumps({"dim": 1, "T": 1.0, "N": -5}, indent=2)
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_json(text)
        assert exc.value.line == 4 and "N must be" in exc.value.message

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            ExperimentConfig.from_json('{"dimension": 1}')

    @pytest.mark.parametrize(
        "patch",
        [
            {"points": 100},
            {"seed": -1},
            {"seed": 2**64},
            {"functionals": ["power:alpha=-2"]},
            {"checkpoints": [7.0]},
            {"flow": {"dt_flow": 0}},
            {"potential": {"kind": "tabulated", "path": "missing.csv"}},
            {"state": {"type": "superposition", "indices": [0, 1], "moduli": [0.5, 0.5]}},
            {"T": 1.01},
        ],
    )
    def test_rejects(self, patch):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**SMALL, **patch})

    def test_tabulated_potential_relative_to_config(self, tmp_path):
        x = np.linspace(-10, 10, 201)
        np.savetxt(tmp_path / "v.csv", np.column_stack((x, 0.5 * x**2)), delimiter=",", header="q,value", comments="")
        cfg = ExperimentConfig.load(write_config(tmp_path, potential={"kind": "tabulated", "path": "v.csv"}))
        rec, state = cfg.build()
        assert state.eigensystem.eigenvalues[0] == pytest.approx(0.5, abs=1e-2)


class TestMain:
    def test_missing_config(self, tmp_path):
        code, out = run(tmp_path, "propagate", tmp_path / "nope.json")
        assert code == 1 and not out.exists()

    def test_malformed_config_no_artifacts(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n "T": 1.0\n "N": 3\n}')
        code, out = run(tmp_path, "equivariance", bad)
        assert code == 1 and not out.exists()
        assert "bad.json:3:" in capsys.readouterr().err

    def test_nonempty_out(self, tmp_path):
        (tmp_path / "out").mkdir()
        (tmp_path / "out" / "x").write_text("")
        code, _ = run(tmp_path, "propagate", write_config(tmp_path))
        assert code == 1

    def test_propagate_and_manifest(self, tmp_path):
        code, out = run(tmp_path, "propagate", write_config(tmp_path))
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        produced = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
        assert sorted(manifest["files"]) == produced
        for name, digest in manifest["files"].items():
            assert _sha(out / name) == digest
        assert manifest["seed"] == 42 and manifest["exit_code"] == 0
        assert {"numpy", "scipy", "bohmeq"} <= set(manifest["versions"])
        assert ExperimentConfig.from_dict(manifest["config"]).T == 1.0
        norms = np.loadtxt(out / "norms.csv", delimiter=",", skiprows=1)
        assert norms.shape == (21, 2) and np.ptp(norms[:, 1]) <= 1e-9
        assert load_wavefunction(out / "frames" / "frame_00000.bin").grid.points == (128,)

    def test_reruns_reproduce_hashes(self, tmp_path):
        cfg = write_config(tmp_path, functionals=["equilibrium", "power:alpha=4"])
        _, a = run(tmp_path, "equivariance", cfg, out="a")
        _, b = run(tmp_path, "equivariance", cfg, out="b")
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["files"] == mb["files"]

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path)
        _, out = run(tmp_path, "trajectories", cfg, "--seed", str(2**64 - 1))
        assert json.loads((out / "manifest.json").read_text())["seed"] == 2**64 - 1
        assert len(list(out.glob("trajectory_*.csv"))) == 3
        assert (out / "trajectory_0000.csv").read_text().startswith("t,Q_1\n")

    def test_seed_out_of_range(self, tmp_path):
        code, out = run(tmp_path, "trajectories", write_config(tmp_path), "--seed", str(2**64))
        assert code == 1 and not out.exists()

    def test_threads_do_not_change_results(self, tmp_path):
        cfg = write_config(tmp_path)
        _, a = run(tmp_path, "trajectories", cfg, "--threads", "1", out="a")
        _, b = run(tmp_path, "trajectories", cfg, "--threads", "0", out="b")
        assert json.loads((a / "manifest.json").read_text())["files"] == json.loads((b / "manifest.json").read_text())["files"]

    def test_equivariance_exit_codes(self, tmp_path):
        code, out = run(tmp_path, "equivariance", write_config(tmp_path, thresholds={"ks": 0.03, "l1": 0.05, "ergodic_l1": 0.02}))
        assert code == 0
        report = json.loads((out / "report_equilibrium.json").read_text())
        assert report["verdict"] == "pass" and report["N"] == 4000
        assert (out / "series_equilibrium.csv").read_text().startswith("t,ks,l1\n")
        cfg2 = write_config(tmp_path, "c2.json", functionals=["power:alpha=1"], thresholds={"ks": 0.03, "l1": 0.05, "ergodic_l1": 0.02})
        code, _ = run(tmp_path, "equivariance", cfg2, out="out2")
        assert code == 2

    def test_residual(self, tmp_path):
        code, out = run(tmp_path, "residual", write_config(tmp_path, functionals=["power:alpha=4"]))
        rows = (out / "residual.csv").read_text().splitlines()
        assert code == 0 and rows[0] == "functional,residual,ratio_to_equilibrium" and len(rows) == 3

    def test_ergodic(self, tmp_path):
        state = {"type": "superposition", "indices": [0, 1, 2], "moduli": [0.5**0.5, 0.3**0.5, 0.2**0.5], "modes": 4}
        cfg = write_config(tmp_path, potential={"kind": "quartic", "a": 0.5, "b": 0.1}, state=state)
        code, out = run(tmp_path, "ergodic", cfg)
        assert code in (0, 2)
        assert json.loads((out / "ergodic.json").read_text())["l1"] > 0

    def test_two_dimensional_split_step(self, tmp_path):
        g = {"type": "gaussian", "center": 0.5, "sigma": 1.0}
        cfg = write_config(
            tmp_path, dim=2, points=64, potential=[{"kind": "harmonic"}, {"kind": "free"}], state=[g, g], propagator="split-step",
            T=0.5, dt_frame=0.05, checkpoints=[0.5],
        )
        code, out = run(tmp_path, "propagate", cfg)
        assert code == 0 and len(list((out / "frames").iterdir())) == 11

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "bohmeq.cli", "propagate", "--config", str(tmp_path / "none.json")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1 and "config file not found" in proc.stderr
