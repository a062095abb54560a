import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from srpo.cli import main
from srpo.errors import ConfigError, DependencyError
from srpo.experiments import derive_seed, expand_sweep, parse_config, run, sweep

TINY_BEHAVIOR = {"steps": 150, "width": 16, "n_blocks": 1, "batch_size": 64}
TINY_DENSITY = {"resolution": 8, "ode_steps": 50, "threshold_samples": 40}


def tiny(kind, **extra):
    cfg = {"kind": kind, "dataset": {"name": "8gaussians", "n": 2000},
           "behavior": dict(TINY_BEHAVIOR), "srpo": {"steps": 40, "omega_mode": "dirac_t0"},
           "bandit": {"grid": 2, "inv_betas": [0.0, 0.5, 1.0]}, "density": dict(TINY_DENSITY)}
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="module")
def behavior_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("behavior")
    run(tiny("train_behavior"), out)
    return str(out / "behavior.npz")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSeeds:
    def test_split_is_stable_and_component_specific(self):
        assert derive_seed(0, "behavior.train") == derive_seed(0, "behavior.train")
        seeds = {derive_seed(0, c) for c in ("dataset", "behavior.train", "critic.train", "extract")}
        assert len(seeds) == 4
        assert derive_seed(1, "dataset") != derive_seed(0, "dataset")


class TestConfig:
    def test_defaults_validate(self):
        cfg = parse_config({"kind": "figure3"})
        assert cfg.schema_version == 1 and cfg.srpo.omega_mode == "sigma_sq"

    @pytest.mark.parametrize("bad", [
        {"kind": "figure3", "sede": 1},
        {"kind": "figure3", "srpo": {"bta": 1.0}},
        {"kind": "figure4"},
        {"kind": "figure3", "schema_version": 2},
        {"kind": "figure3", "srpo": {"beta": 0.0}},
        {"kind": "figure3", "srpo": {"omega_mode": "dirac_t0", "dirac_t0": 0.001}},
        {"kind": "figure3", "dataset": {"name": "hexagons"}},
        {"kind": "figure3", "behavior": {"dropout": 1.5}},
        ["not", "a", "mapping"],
    ])
    def test_rejected_before_compute(self, bad, tmp_path):
        with pytest.raises(ConfigError):
            run(bad, tmp_path) if isinstance(bad, dict) else parse_config(bad)
        assert not (tmp_path / "manifest.json").exists()

    def test_digest_tracks_content(self):
        a = parse_config({"kind": "extract", "seed": 1})
        b = parse_config({"kind": "extract", "seed": 1})
        c = parse_config({"kind": "extract", "seed": 2})
        assert a.digest() == b.digest() != c.digest()


class TestRun:
    def test_figure3_artifacts_and_manifest(self, tmp_path, behavior_ckpt):
        cfg = tiny("figure3", behavior={"checkpoint": behavior_ckpt})
        man = run(cfg, tmp_path)
        rows = read_csv(tmp_path / "figure3_scatter.csv")
        assert rows[0] == ["a_tar_x", "a_tar_y", "a_x", "a_y", "beta", "omega_mode"]
        assert len(rows) - 1 == 4 * 3
        assert (tmp_path / "density.csv").exists()
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert data["config_hash"] == parse_config(cfg).digest()
        on_disk = {str(p.relative_to(tmp_path)) for p in tmp_path.rglob("*")
                   if p.is_file() and p.name != "manifest.json"}
        assert set(data["artifacts"]) == on_disk
        assert "frac_in_support[max 1/beta]" in man.metrics
        # 1/beta = 0 leaves every action on its target
        q_only = [r for r in rows[1:] if r[4] == "inf"]
        for r in q_only:
            np.testing.assert_allclose([float(r[2]), float(r[3])], [float(r[0]), float(r[1])], atol=1e-2)

    def test_rerun_gives_identical_metrics(self, tmp_path, behavior_ckpt):
        cfg = tiny("ablation_baseline", behavior={"checkpoint": behavior_ckpt},
                   srpo={"steps": 30, "omega_mode": "sigma_sq"})
        run(cfg, tmp_path / "a")
        run(cfg, tmp_path / "b")
        for name in ("metrics.csv", "ablation_baseline_scatter.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_training_inside_run_is_deterministic(self, tmp_path):
        cfg = tiny("train_behavior", behavior={**TINY_BEHAVIOR, "steps": 30})
        run(cfg, tmp_path / "a")
        run(cfg, tmp_path / "b")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_density_map_four_times(self, tmp_path, behavior_ckpt):
        cfg = tiny("density_map", behavior={"checkpoint": behavior_ckpt},
                   density={**TINY_DENSITY, "t_list": [0.02, 0.1, 0.3, 1.0]})
        man = run(cfg, tmp_path)
        assert sorted(p.name for p in tmp_path.glob("density_t*.csv")) == [
            "density_t0.02.csv", "density_t0.1.csv", "density_t0.3.csv", "density_t1.csv"]
        assert "total_variation[t=1]" in man.metrics

    @pytest.mark.parametrize("kind", ["extract", "density_map"])
    def test_missing_checkpoint_names_stage(self, tmp_path, kind):
        with pytest.raises(DependencyError, match=kind):
            run(tiny(kind, behavior={"checkpoint": str(tmp_path / "none.npz")}), tmp_path)
        with pytest.raises(DependencyError, match="train-behavior"):
            run(tiny(kind), tmp_path)

    def test_train_critic_on_chain(self, tmp_path):
        cfg = {"kind": "train_critic", "dataset": {"name": "chain"},
               "chain": {"rewards": [[0.0, 1.0], [0.0]], "gamma": 0.0},
               "critic": {"steps": 50, "hidden": [8, 8]}}
        man = run(cfg, tmp_path)
        assert (tmp_path / "critic.npz").exists()
        assert "V[s=0]" in man.metrics

    def test_figure2_and_figure5(self, tmp_path, behavior_ckpt):
        man = run(tiny("figure2", dataset={"name": "2modes", "n": 2000}), tmp_path / "f2")
        rows = read_csv(tmp_path / "f2" / "figure2.csv")
        assert [r[0] for r in rows[1:]] == ["srpo", "forward_kl", "reverse_kl_gaussian"]
        assert man.metrics["mode_half_distance"] == pytest.approx(2.0, abs=0.1)
        man = run(tiny("figure5_ensemble", behavior={"checkpoint": behavior_ckpt}), tmp_path / "f5")
        assert {"frac_in_support[sigma_sq]", "frac_in_support[dirac_large]"} <= set(man.metrics)


class TestSweep:
    def spec(self, ckpt, betas=(0.01, 0.02, 0.05, 0.1, 0.2, 0.5)):
        base = tiny("extract", behavior={"checkpoint": ckpt}, srpo={"steps": 20, "omega_mode": "dirac_t0"})
        return {"base": base, "axes": {"srpo.beta": list(betas)}}

    def test_six_cells(self, tmp_path, behavior_ckpt):
        rows, failed = sweep(self.spec(behavior_ckpt), tmp_path, parallel=1)
        assert failed == 0 and len(rows) == 6
        assert len(list(tmp_path.glob("cell_*/manifest.json"))) == 6
        agg = read_csv(tmp_path / "aggregate.csv")
        assert len(agg) == 7 and agg[0][:3] == ["cell", "status", "srpo.beta"]

    def test_parallel_matches_serial(self, tmp_path, behavior_ckpt):
        sweep(self.spec(behavior_ckpt, (0.1, 0.5, 1.0)), tmp_path / "s", parallel=1)
        sweep(self.spec(behavior_ckpt, (0.1, 0.5, 1.0)), tmp_path / "p", parallel=2)
        assert (tmp_path / "s/aggregate.csv").read_bytes() == (tmp_path / "p/aggregate.csv").read_bytes()

    def test_poisoned_cell_is_recorded(self, tmp_path, behavior_ckpt):
        spec = self.spec(behavior_ckpt, (0.01, 0.02, 0.05, -1.0, 0.2, 0.5))
        rows, failed = sweep(spec, tmp_path)
        assert failed == 1
        assert [r[1] for r in rows].count("ok") == 5
        assert "ConfigError" in rows[3][-1]

    def test_explicit_cells_and_bad_spec(self):
        cells = expand_sweep({"base": {"kind": "extract"}, "cells": [{"seed": 1}, {"seed": 2}]})
        assert [c["seed"] for _, c in cells] == [1, 2]
        with pytest.raises(ConfigError):
            expand_sweep({"axes": {}})
        with pytest.raises(ConfigError):
            expand_sweep({"base": {}, "axis": {}})


class TestCli:
    def write(self, path, data):
        path.write_text(yaml.safe_dump(data))
        return str(path)

    def test_gen_data(self, tmp_path, capsys):
        assert main(["gen-data", "--name", "rings", "--n", "50", "--out", str(tmp_path / "r.npz"), "--csv"]) == 0
        assert (tmp_path / "r.csv").exists()
        assert main(["gen-data", "--name", "nope", "--out", str(tmp_path / "x.npz")]) == 2

    def test_exit_codes(self, tmp_path, behavior_ckpt, capsys):
        good = self.write(tmp_path / "g.yaml", {"behavior": {"checkpoint": behavior_ckpt},
                                                 "srpo": {"steps": 5}, "bandit": {"grid": 2}})
        assert main(["extract", "--config", good, "--out", str(tmp_path / "e")]) == 0
        assert "manifest" in capsys.readouterr().out
        bad = self.write(tmp_path / "b.yaml", {"srpo": {"bta": 1}})
        assert main(["extract", "--config", bad, "--out", str(tmp_path / "x")]) == 2
        missing = self.write(tmp_path / "m.yaml", {"behavior": {"checkpoint": "/no/such.npz"}})
        assert main(["extract", "--config", missing, "--out", str(tmp_path / "y")]) == 3
        wrong = self.write(tmp_path / "w.yaml", {"kind": "figure3"})
        assert main(["extract", "--config", wrong]) == 2
        assert main(["extract", "--config", str(tmp_path / "absent.yaml")]) == 2

    def test_sweep_exit_code(self, tmp_path, behavior_ckpt):
        spec = TestSweep().spec(behavior_ckpt, (0.5, -1.0))
        path = self.write(tmp_path / "s.yaml", spec)
        assert main(["sweep", "--config", path, "--out", str(tmp_path / "sw")]) == 1

    def test_figure_verb_and_env_default(self, tmp_path, behavior_ckpt, monkeypatch):
        monkeypatch.setenv("SRPO_OUT", str(tmp_path / "root"))
        cfg = self.write(tmp_path / "f.yaml", tiny("ablation_beta", behavior={"checkpoint": behavior_ckpt},
                                                   srpo={"steps": 5}))
        assert main(["figure", "ablation_beta", "--config", cfg, "--seed", "3"]) == 0
        written = yaml.safe_load((tmp_path / "root/ablation_beta/config.yaml").read_text())
        assert written["seed"] == 3


class TestShippedConfigs:
    CONFIGS = Path(__file__).resolve().parent.parent / "configs"

    @pytest.mark.parametrize("name", ["train_behavior", "figure2", "figure3", "figure5"])
    def test_validates(self, name):
        parse_config(yaml.safe_load((self.CONFIGS / f"{name}.yaml").read_text()))

    def test_sweep_cells_validate(self):
        cells = expand_sweep(yaml.safe_load((self.CONFIGS / "sweep_beta.yaml").read_text()))
        assert len(cells) == 6
        for _, c in cells:
            parse_config(c)
