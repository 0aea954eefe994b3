import json

import pytest

from attnlipkit.cli import run
from attnlipkit.datasets import load_graph

SMALL = {
    "verify-bounds": {"diagnostics": {"samples": 5, "perturbations": 1, "configs": 6}},
    "calibrate": {"dataset": {"params": {"n": 40}}, "model": {"T": 0.5}},
    "gen-trees": {"dataset": {"params": {"depth": 3, "num_trees": 4}}},
    "train": {"dataset": {"params": {"n": 40, "feat_dim": 4}}, "model": {"hidden": 4}, "train": {"epochs": 3}},
    "gradient-flow": {
        "dataset": {"params": {"n": 40, "feat_dim": 4}},
        "model": {"hidden": 4, "heads": 2, "layers": 3},
        "train": {"epochs": 3},
    },
    "trees-experiment": {
        "dataset": {"params": {"num_trees": 6, "depths": [2, 3]}},
        "model": {"hidden": 4},
        "train": {"epochs": 2, "seeds": [0, 1]},
    },
}


def _config(tmp_path, cmd, extra=None):
    path = tmp_path / f"{cmd}.json"
    body = dict(SMALL[cmd])
    body.update(extra or {})
    path.write_text(json.dumps(body))
    return str(path)


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == 2

    def test_bad_flag(self):
        assert run(["train", "--bogus"]) == 2

    def test_negative_seed(self, tmp_path):
        assert run(["train", "--seed", "-1", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"depth": 3}}))
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_dataset_param(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset": {"params": {"nodes": 3}}}))
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_hidden_not_divisible_by_heads(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"hidden": 4, "heads": 3}}))
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_bad_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{nope")
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert run(["train", "--config", str(tmp_path / "absent.json")]) == 2

    def test_calibrate_needs_target(self, tmp_path):
        body = {"dataset": {"params": {"n": 40}}}
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(body))
        assert run(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_entropy_training_needs_target(self, tmp_path):
        cfg = _config(tmp_path, "train")
        assert run(["train", "--config", cfg, "--normalization", "entropy", "--out", str(tmp_path / "o")]) == 2
        assert run(["train", "--config", cfg, "--normalization", "entropy", "--target-eta", "0.7", "--out", str(tmp_path / "p")]) == 0

    def test_target_out_of_range(self, tmp_path):
        assert run(["calibrate", "--target-eta", "1.5", "--out", str(tmp_path)]) == 2


class TestCommands:
    def test_verify_bounds(self, tmp_path):
        out = tmp_path / "vb"
        assert run(["verify-bounds", "--config", _config(tmp_path, "verify-bounds"), "--seed", "0", "--out", str(out)]) == 0
        lines = (out / "bounds.csv").read_text().splitlines()
        assert lines[0] == "kind,m,n,alpha,theoretical,empirical,samples,pass"
        assert all(line.endswith("true") for line in lines[1:] if not line.startswith("unnormalized"))
        assert json.loads((out / "summary.json").read_text())["normalized_rows_pass"] is True

    def test_calibrate(self, tmp_path):
        out = tmp_path / "cal"
        assert run(["calibrate", "--config", _config(tmp_path, "calibrate"), "--out", str(out)]) == 0
        rows = (out / "calibration.csv").read_text().splitlines()
        assert rows[0] == "node,c,eta,status,evaluations" and len(rows) == 41
        for row in rows[1:]:
            _, _, eta, status, evals = row.split(",")
            if status == "converged":
                assert abs(float(eta) - 0.5) <= 1e-6 and int(evals) <= 100

    def test_gen_trees(self, tmp_path):
        out = tmp_path / "gt"
        assert run(["gen-trees", "--config", _config(tmp_path, "gen-trees"), "--out", str(out)]) == 0
        g = load_graph(out / "trees_depth3.graph.txt")
        assert g.n == 4 * 15

    def test_train(self, tmp_path):
        out = tmp_path / "tr"
        assert run(["train", "--config", _config(tmp_path, "train"), "--seed", "3", "--out", str(out)]) == 0
        lines = (out / "seed_3" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,train_acc,val_acc,test_acc" and len(lines) == 4

    def test_gradient_flow_compare(self, tmp_path):
        out = tmp_path / "gf"
        argv = ["gradient-flow", "--config", _config(tmp_path, "gradient-flow"), "--compare", "--out", str(out)]
        assert run(argv) == 0
        for norm in ("none", "lipschitz"):
            lines = (out / "seed_0" / f"grad_flow_{norm}.csv").read_text().splitlines()
            assert lines[0] == "layer,epoch,grad_norm" and len(lines) == 1 + 3 * 3
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"seed_0/none", "seed_0/lipschitz"}

    def test_trees_experiment_writes_results(self, tmp_path):
        out = tmp_path / "te"
        code = run(["trees-experiment", "--config", _config(tmp_path, "trees-experiment"), "--out", str(out)])
        assert code in (0, 1)
        lines = (out / "trees_results.csv").read_text().splitlines()
        assert lines[0] == "depth,normalization,seed,final_train_acc" and len(lines) == 1 + 2 * 2 * 2


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"layers": 5, "hidden": 4}, "train": {"epochs": 1}, "dataset": {"params": {"n": 30}}}))
        out = tmp_path / "o"
        assert run(["train", "--config", str(cfg), "--layers", "1", "--out", str(out)]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["model"]["layers"] == 1  # flag beats file
        assert resolved["model"]["hidden"] == 4  # file beats default
        assert resolved["train"]["lr"] == 0.005  # default recorded
        assert resolved["command"] == "train" and resolved["seed"] == 0

    def test_yaml(self, tmp_path):
        pytest.importorskip("yaml")
        cfg = tmp_path / "c.yaml"
        cfg.write_text("model:\n  hidden: 4\ntrain:\n  epochs: 1\ndataset:\n  params:\n    n: 30\n")
        out = tmp_path / "o"
        assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert json.loads((out / "resolved_config.json").read_text())["model"]["hidden"] == 4


class TestDeterminism:
    @pytest.mark.parametrize("cmd", sorted(SMALL))
    def test_rerun_byte_identical(self, tmp_path, cmd):
        out = tmp_path / "out"
        argv = [cmd, "--config", _config(tmp_path, cmd), "--seed", "7", "--out", str(out)]
        if cmd == "gradient-flow":
            argv.append("--compare")
        first_code = run(argv)
        first = _snapshot(out)
        assert run(argv) == first_code
        assert _snapshot(out) == first
        assert "resolved_config.json" in first
