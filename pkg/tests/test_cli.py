"""Command-line contracts: exit codes, artifacts, idempotency."""

import json
import os

import numpy as np
import pytest

from pcon.cli import main
from pcon.report import read_metrics

FAST_TREE = [
    "--set", "epochs=3",
    "--set", "tree_samples_per_leaf=12",
    "--set", "widths=[32, 16]",
    "--set", "proj_dim=8",
    "--set", "batch_size=32",
]


def _run(argv):
    return main(argv)


@pytest.fixture
def tree_run(tmp_path):
    out = str(tmp_path / "runs")
    code = _run(["pretrain", *FAST_TREE, "--out-dir", out])
    assert code == 0
    run_dir = next((tmp_path / "runs").iterdir())
    return out, run_dir


class TestPretrainCommand:
    def test_creates_all_artifacts(self, tree_run):
        _, run_dir = tree_run
        names = {p.name for p in run_dir.iterdir()}
        assert {"checkpoint.pcon", "metrics.jsonl", "loss_curve.svg",
                "config.toml", "manifest.jsonl"} <= names

    def test_manifest_lists_every_artifact_once(self, tree_run):
        _, run_dir = tree_run
        entries = [json.loads(line) for line in (run_dir / "manifest.jsonl").read_text().splitlines()]
        paths = [e["path"] for e in entries]
        assert len(paths) == len(set(paths))
        for e in entries:
            assert (run_dir / e["path"]).exists()

    def test_metrics_records_have_required_fields(self, tree_run):
        _, run_dir = tree_run
        for rec in read_metrics(run_dir / "metrics.jsonl"):
            assert {"run_id", "epoch", "split", "metric", "value"} <= set(rec)

    def test_rerun_same_id_refuses_with_exit_5(self, tree_run):
        out, _ = tree_run
        assert _run(["pretrain", *FAST_TREE, "--out-dir", out]) == 5
        assert _run(["pretrain", *FAST_TREE, "--out-dir", out, "--force"]) == 0

    def test_config_validation_exit_1(self, tmp_path):
        out = str(tmp_path / "runs")
        code = _run(["pretrain", *FAST_TREE, "--set", "loss=shcl",
                     "--set", "use_labels=false", "--out-dir", out])
        assert code == 1
        assert _run(["pretrain", "--set", "loss=nonsense", "--out-dir", out]) == 1
        assert _run(["pretrain", "--set", "no_such_key=1", "--out-dir", out]) == 1

    def test_missing_dataset_exit_2(self, tmp_path):
        out = str(tmp_path / "runs")
        code = _run(["pretrain", "--set", "data_kind=cifar",
                     "--set", "data_path=/no/such/dir", "--out-dir", out])
        assert code == 2

    def test_divergence_exit_3(self, tmp_path):
        out = str(tmp_path / "runs")
        with np.errstate(over="ignore", invalid="ignore"):
            code = _run(["pretrain", *FAST_TREE, "--set", "lr=1e18", "--out-dir", out])
        assert code == 3

    def test_seed_flag_changes_run_id(self, tmp_path):
        out = str(tmp_path / "runs")
        assert _run(["pretrain", *FAST_TREE, "--seed", "1", "--out-dir", out]) == 0
        assert _run(["pretrain", *FAST_TREE, "--seed", "2", "--out-dir", out]) == 0
        assert len(list((tmp_path / "runs").iterdir())) == 2


class TestProbeAndAttack:
    def test_probe_writes_accuracy_table(self, tree_run, tmp_path):
        out, run_dir = tree_run
        code = _run(["probe", "--ckpt", str(run_dir / "checkpoint.pcon"), "--out-dir", out])
        assert code == 0
        probe_dir = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("probe-"))
        table = (probe_dir / "probe.csv").read_text().splitlines()
        assert table[0] == "checkpoint,split,top1_accuracy"
        assert len(table) == 2

    def test_attack_on_vector_checkpoint_exit_1(self, tree_run):
        out, run_dir = tree_run
        code = _run(["attack", "--ckpt", str(run_dir / "checkpoint.pcon"), "--out-dir", out])
        assert code == 1

    def test_attack_eps_zero_equals_clean(self, tmp_path):
        out = str(tmp_path / "runs")
        argv = [
            "pretrain", "--set", "data_kind=synth-image", "--set", "synth_per_class=12",
            "--set", "synth_test_per_class=4", "--set", "epochs=2",
            "--set", "widths=[32, 16]", "--set", "proj_dim=8",
            "--set", "batch_size=24", "--set", "dtype=float32", "--out-dir", out,
        ]
        assert _run(argv) == 0
        run_dir = next((tmp_path / "runs").iterdir())
        code = _run(["attack", "--ckpt", str(run_dir / "checkpoint.pcon"),
                     "--eps", "0", "--steps", "2", "--out-dir", out])
        assert code == 0
        attack_dir = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("attack-"))
        header, row = (attack_dir / "attack.csv").read_text().splitlines()
        cols = dict(zip(header.split(","), row.split(",")))
        assert float(cols["clean_accuracy"]) == float(cols["robust_accuracy"])


class TestSweepCommand:
    def test_two_value_sweep_persists_table_and_figure(self, tmp_path):
        out = str(tmp_path / "runs")
        code = _run(["sweep", "--c", "0.1,0.6", *FAST_TREE, "--set", "epochs=2",
                     "--out-dir", out])
        assert code == 0
        sweep_dir = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("sweep-"))
        rows = (sweep_dir / "sweep.csv").read_text().splitlines()
        assert rows[0] == "c,accuracy"
        assert len(rows) == 3
        assert (sweep_dir / "sweep.svg").stat().st_size > 0

    def test_bad_c_list_exit_1(self, tmp_path):
        assert _run(["sweep", "--c", "abc", "--out-dir", str(tmp_path)]) == 1


class TestGenData:
    def test_tree_export_and_reuse(self, tmp_path):
        out_file = str(tmp_path / "tree.htree")
        assert _run(["gen-data", "--out", out_file, "--set", "tree_samples_per_leaf=6",
                     "--out-dir", str(tmp_path / "runs")]) == 0
        assert os.path.getsize(out_file) > 0
        code = _run(["pretrain", *FAST_TREE, "--set", f"data_path={out_file}",
                     "--out-dir", str(tmp_path / "runs")])
        assert code == 0


class TestHelp:
    def test_help_enumerates_every_config_key(self, capsys):
        from pcon.train import CONFIG_KEYS

        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for key in CONFIG_KEYS:
            assert key in text

    def test_selftest_fast_passes(self, capsys):
        assert main(["selftest", "--fast"]) == 0
        out = capsys.readouterr().out
        for group in ("geometry", "autograd", "loss-oracle", "loss-grad"):
            assert f"group {group}: PASS" in out

    def test_selftest_property_failure_exits_4(self, monkeypatch, capsys):
        from pcon.selftest import PropertyResult

        def broken(fast=False, seed=0):
            return [PropertyResult("geometry", "left_identity", 10, 1.0, 1e-12)], False

        monkeypatch.setattr("pcon.selftest.run_all", broken)
        assert main(["selftest", "--fast"]) == 4
        assert "group geometry: FAIL" in capsys.readouterr().out
