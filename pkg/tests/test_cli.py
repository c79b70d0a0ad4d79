import csv
import json

import pytest

from gengmm.cli import main, resolve_config
from gengmm.core_types import ConfigError
from gengmm.trainer import CSV_COLUMNS

TINY = """
[scenario]
n_source = 8
n_target = 8
n_heldout = 3
H = 12
W = 12
regions_per_scene = 4
label_fraction = 0.5   # partial source

[run]
iterations = 8
warmup_iters = 3
eval_interval = 4
bank_capacity = 256
labeled_batch = 96
pixels_per_scene = 48
hidden_dim = 16
D = 8
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


class TestResolve:
    def test_sections_and_overrides(self, cfg_path):
        r = resolve_config(str(cfg_path), ["tau=0.2", "scenario.noise_rate=0.1", "seed=4"])
        assert r.run.tau == 0.2 and r.scenario.noise_rate == 0.1
        assert r.run.seed == r.scenario.seed == 4
        assert r.scenario.label_fraction == 0.5 and r.run.iterations == 8

    def test_shared_key_sets_both(self, cfg_path):
        r = resolve_config(str(cfg_path), ["C=3"])
        assert r.run.C == r.scenario.C == 3

    def test_priors_list(self):
        r = resolve_config(None, ["target_priors=0.1,0.2,0.3,0.4"])
        assert r.scenario.target_priors == [0.1, 0.2, 0.3, 0.4]

    @pytest.mark.parametrize("override", ["bogus=1", "tau=abc", "use_gmm_cl=maybe", "tau", "run.noise_rate=0.1"])
    def test_bad_override(self, override):
        with pytest.raises(ConfigError):
            resolve_config(None, [override])

    def test_conflicting_seeds(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[scenario]\nseed = 1\n[run]\nseed = 2\n")
        with pytest.raises(ConfigError):
            resolve_config(str(p))

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[model]\nD = 3\n")
        with pytest.raises(ConfigError):
            resolve_config(str(p))

    def test_to_dict_round_trip(self, cfg_path):
        r = resolve_config(str(cfg_path))
        d = json.loads(json.dumps(r.to_dict()))
        assert d["seed"] == r.seed and d["run"]["iterations"] == 8


class TestExitCodes:
    def test_malformed_config(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("this is not ini\n")
        assert run("train", "--config", p, "--out-dir", tmp_path / "o") == 1

    def test_missing_config(self, tmp_path):
        assert run("train", "--config", tmp_path / "none.ini", "--out-dir", tmp_path / "o") == 1

    def test_invalid_run_value(self, cfg_path, tmp_path):
        assert run("train", "--config", cfg_path, "--set", "beta=2", "--out-dir", tmp_path / "o") == 1

    def test_infeasible_scenario(self, cfg_path, tmp_path):
        assert run("generate", "--config", cfg_path, "--set", "noise_rate=1.0", "--out", tmp_path / "d") == 2
        assert run("generate", "--config", cfg_path, "--set", "target_annotation=point",
                   "--set", "point_count=100", "--out", tmp_path / "d") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, cfg_path, tmp_path, capsys):
        assert run("train", "--config", cfg_path, "--set", "lr=1e30", "--out-dir", tmp_path / "o") == 3
        assert "iteration" in capsys.readouterr().err


class TestCommands:
    def test_generate_then_train_then_eval(self, cfg_path, tmp_path):
        data = tmp_path / "d.ggmm"
        assert run("generate", "--config", cfg_path, "--out", data) == 0
        assert data.is_file() and (tmp_path / "d.ggmm.json").is_file()
        out = tmp_path / "run"
        assert run("train", "--config", cfg_path, "--data", data, "--out-dir", out) == 0
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert [r[0] for r in rows[1:]] == ["4", "8"]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 0 and summary["run"]["iterations"] == 8
        assert summary["scenario"]["label_fraction"] == 0.5
        assert 0 <= summary["final_eval"]["miou"] <= 1
        assert (out / "curves.png").stat().st_size > 0

        rep = tmp_path / "eval.json"
        assert run("eval", "--checkpoint", out / "checkpoint.ggmk", "--data", data, "--out", rep) == 0
        ev = json.loads(rep.read_text())
        assert ev["eval"]["miou"] == summary["final_eval"]["miou"]

    def test_train_regenerates_same_data(self, cfg_path, tmp_path):
        data = tmp_path / "d.ggmm"
        run("generate", "--config", cfg_path, "--out", data)
        run("train", "--config", cfg_path, "--data", data, "--out-dir", tmp_path / "a", "--no-plots")
        run("train", "--config", cfg_path, "--out-dir", tmp_path / "b", "--no-plots")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert not (tmp_path / "a/curves.png").exists()

    def test_class_count_mismatch(self, cfg_path, tmp_path):
        data = tmp_path / "d.ggmm"
        run("generate", "--config", cfg_path, "--out", data)
        assert run("train", "--config", cfg_path, "--set", "C=3", "--data", data,
                   "--out-dir", tmp_path / "o") == 1

    def test_dumps(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        run("train", "--config", cfg_path, "--out-dir", out, "--no-plots")
        capsys.readouterr()
        assert run("dump-gmm", "--checkpoint", out / "checkpoint.ggmk") == 0
        g = json.loads(capsys.readouterr().out)
        assert (g["C"], g["M"], g["D"]) == (4, 3, 8) and len(g["classes"]) == 4
        assert run("dump-priors", "--checkpoint", out / "checkpoint.ggmk") == 0
        p = json.loads(capsys.readouterr().out)
        assert abs(sum(p["delta_target"]) - 1) < 1e-9

    def test_missing_checkpoint(self, tmp_path):
        assert run("dump-gmm", "--checkpoint", tmp_path / "nope") == 1

    @pytest.mark.parametrize("sweep,names", [
        ("components", ["Lb", "Lb+UL", "Lb+UL+GMM-Cl"]),
        ("alpha", ["w", "alpha"]),
        ("M", ["M=1", "M=2"]),
    ])
    def test_ablate(self, cfg_path, tmp_path, sweep, names, capsys):
        out = tmp_path / "abl"
        extra = ["--values", "1,2"] if sweep == "M" else []
        assert run("ablate", "--config", cfg_path, "--sweep", sweep, "--seeds", "0,1",
                   "--iterations", 4, "--out-dir", out, *extra) == 0
        res = json.loads((out / f"ablation_{sweep}.json").read_text())
        assert sorted(res["results"]) == sorted(names)
        assert all(len(v["per_seed"]) == 2 for v in res["results"].values())
        with open(out / f"ablation_{sweep}.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * len(names)
        assert (out / f"ablation_{sweep}.png").is_file()
        assert names[0] in capsys.readouterr().out
