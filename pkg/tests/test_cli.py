"""CLI pipeline: small end-to-end runs, manifests, presets, exit codes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from convmod import cli, store, synth
from convmod.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, apply_weak_recipe, main

PRESETS = Path(__file__).resolve().parent.parent / "presets"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset files plus a quickly trained tiny model, via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    sets = {
        "train": synth.make_shapes_dataset(360, 3, 12, noise=0.1, seed=0),
        "val": synth.make_shapes_dataset(120, 3, 12, noise=0.1, seed=1),
        "test": synth.make_shapes_dataset(120, 3, 12, noise=0.1, seed=2),
    }
    for name, ds in sets.items():
        (data / f"{name}.cnds").write_bytes(store.save_dataset(ds))

    spec_path = root / "tiny.spec"
    spec_path.write_text("""
name: tiny-desk
num_classes: 3
input: 1 12 12
layer: conv out=10 k=3 stride=1 pad=1
layer: maxpool window=2 stride=2
layer: conv out=12 k=3 stride=1 pad=1
layer: maxpool window=2 stride=2
layer: flatten
layer: fc out=16
layer: fc out=3
""")
    model_dir = root / "model"
    rc = main([
        "train", "--spec", str(spec_path), "--dataset", str(data / "train.cnds"),
        "--out-dir", str(model_dir), "--lr", "0.05", "--epochs", "12",
        "--batch-size", "24", "--dropout", "0.1", "--seed", "3",
    ])
    assert rc == EXIT_OK
    return {"root": root, "data": data, "spec": spec_path, "model": model_dir}


def test_train_outputs_and_manifest(workspace):
    model = workspace["model"]
    for name in ("model.spec", "weights.cnsp", "train_history.csv",
                 "train_manifest.json"):
        assert (model / name).exists()
    manifest = json.loads((model / "train_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 3
    for path, digest in manifest["outputs"].items():
        assert hashlib.sha256(Path(path).read_bytes()).hexdigest() == digest
    history = (model / "train_history.csv").read_text().strip().splitlines()
    assert history[0] == "epoch,loss,accuracy"
    assert len(history) == 13


def test_train_same_seed_identical_weights(workspace, tmp_path):
    out = tmp_path / "again"
    rc = main([
        "train", "--spec", str(workspace["spec"]),
        "--dataset", str(workspace["data"] / "train.cnds"),
        "--out-dir", str(out), "--lr", "0.05", "--epochs", "12",
        "--batch-size", "24", "--dropout", "0.1", "--seed", "3",
    ])
    assert rc == EXIT_OK
    assert (out / "weights.cnsp").read_bytes() == \
        (workspace["model"] / "weights.cnsp").read_bytes()


class TestWeakRecipes:
    def test_overfit_disables_tricks(self, desk_spec):
        spec, epochs, wd, dropout, augment = apply_weak_recipe(
            desk_spec, "overfit", 40, 1e-4, 0.2, True)
        assert spec is desk_spec
        assert (epochs, wd, dropout, augment) == (40, 0.0, 0.0, False)

    def test_underfit_halves_epochs(self, desk_spec):
        _, epochs, *_ = apply_weak_recipe(desk_spec, "underfit", 41, 0, 0, False)
        assert epochs == 20

    def test_simple_derives_shallow_spec(self, desk_spec):
        spec, *_ = apply_weak_recipe(desk_spec, "simple", 40, 0, 0, False)
        convs = [l for l in spec.layers if isinstance(l, store.ConvLayer)]
        fcs = [l for l in spec.layers if isinstance(l, store.FcLayer)]
        assert len(convs) == 2
        assert len(fcs) == 1
        assert fcs[0].out_features == desk_spec.num_classes
        store.infer_shapes(spec)

    def test_none_passthrough(self, desk_spec):
        out = apply_weak_recipe(desk_spec, None, 7, 1.0, 0.5, True)
        assert out == (desk_spec, 7, 1.0, 0.5, True)


def run_modularize(workspace, out, extra=()):
    return main([
        "modularize",
        "--spec", str(workspace["model"] / "model.spec"),
        "--weights", str(workspace["model"] / "weights.cnsp"),
        "--train-dataset", str(workspace["data"] / "train.cnds"),
        "--val-dataset", str(workspace["data"] / "val.cnds"),
        "--out-dir", str(out),
        "--population", "6", "--parents", "3", "--generations", "2",
        "--beam", "5", "--seed", "17", *extra,
    ])


def test_analyze_and_modularize_pipeline(workspace, tmp_path, capsys):
    analysis = tmp_path / "analysis"
    rc = main([
        "analyze", "--spec", str(workspace["model"] / "model.spec"),
        "--weights", str(workspace["model"] / "weights.cnsp"),
        "--train-dataset", str(workspace["data"] / "train.cnds"),
        "--val-dataset", str(workspace["data"] / "val.cnds"),
        "--out-dir", str(analysis),
    ])
    assert rc == EXIT_OK
    for name in ("importance.json", "grouping.json", "sensitivity.json"):
        assert (analysis / name).exists()

    mods = tmp_path / "mods"
    rc = run_modularize(workspace, mods, extra=("--analysis", str(analysis)))
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "pruned evaluation plan" in out
    plan_line = [l for l in out.splitlines() if "CM evaluations per generation" in l][0]
    assert plan_line.split()[3] == "216"  # 6^3 for one ternary leaf
    for c in range(3):
        for suffix in ("spec", "cnsp", "genome"):
            assert (mods / f"module_class{c}.{suffix}").exists()
    assert (mods / "history.csv").exists()
    report = dict(
        line.split(",") for line in
        (mods / "modularize_report.csv").read_text().strip().splitlines()[1:]
    )
    assert 0.0 <= float(report["composed_accuracy"]) <= 1.0
    assert int(report["cm_evaluations"]) == 2 * 216

    # module sidecar carries the parent fingerprint
    sidecar = (mods / "module_class0.genome").read_text()
    weights_digest = hashlib.sha256(
        (workspace["model"] / "weights.cnsp").read_bytes()).hexdigest()
    assert f"parent: {weights_digest}" in sidecar


def test_modularize_deterministic_across_threads(workspace, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run_modularize(workspace, a, extra=("--threads", "1")) == EXIT_OK
    assert run_modularize(workspace, b, extra=("--threads", "8")) == EXIT_OK
    for name in [f"module_class{c}.{s}" for c in range(3)
                 for s in ("spec", "cnsp", "genome")] + ["history.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_no_pruning_budget_guard(workspace, tmp_path, capsys):
    rc = run_modularize(workspace, tmp_path / "x",
                        extra=("--no-pruning", "--exhaustive-budget", "100"))
    assert rc == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "216" in err and "budget" in err


def test_no_pruning_within_budget(workspace, tmp_path):
    rc = run_modularize(workspace, tmp_path / "x",
                        extra=("--no-pruning", "--exhaustive-budget", "1000"))
    assert rc == EXIT_OK


def test_ablation_flags(workspace, tmp_path):
    """The RQ3-style switches run end to end: grouping none/random x random init."""
    rc = run_modularize(workspace, tmp_path / "none",
                        extra=("--grouping", "none", "--init", "random"))
    assert rc == EXIT_OK
    rc = run_modularize(workspace, tmp_path / "rand",
                        extra=("--grouping", "random", "--init", "sensitivity"))
    assert rc == EXIT_OK
    # grouping none: one bit per kernel, so genomes are 22 bits long
    sidecar = (tmp_path / "none" / "module_class0.genome").read_text()
    bits_line = [l for l in sidecar.splitlines() if l.startswith("bits:")][0]
    assert len(bits_line.split()[1]) == 22


def test_eval_and_logits_out(workspace, tmp_path, capsys):
    logits_path = tmp_path / "logits.csv"
    rc = main([
        "eval", "--spec", str(workspace["model"] / "model.spec"),
        "--weights", str(workspace["model"] / "weights.cnsp"),
        "--dataset", str(workspace["data"] / "test.cnds"),
        "--logits-out", str(logits_path),
    ])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "accuracy:" in out
    lines = logits_path.read_text().strip().splitlines()
    assert lines[0] == "label,logit0,logit1,logit2"
    assert len(lines) == 121


def test_patch_command(workspace, tmp_path):
    mods = tmp_path / "mods"
    assert run_modularize(workspace, mods) == EXIT_OK
    out = tmp_path / "patch"
    rc = main([
        "patch",
        "--weak-spec", str(workspace["model"] / "model.spec"),
        "--weak-weights", str(workspace["model"] / "weights.cnsp"),
        "--module-spec", str(mods / "module_class1.spec"),
        "--module-weights", str(mods / "module_class1.cnsp"),
        "--tc", "1",
        "--train-dataset", str(workspace["data"] / "train.cnds"),
        "--test-dataset", str(workspace["data"] / "test.cnds"),
        "--out-dir", str(out),
    ])
    assert rc == EXIT_OK
    assert (out / "patch_report.csv").exists()
    assert "target class: 1" in (out / "patch_report.txt").read_text()


def test_report_command(workspace, tmp_path, capsys):
    mods = tmp_path / "mods"
    assert run_modularize(workspace, mods) == EXIT_OK
    capsys.readouterr()
    rc = main([
        "report", "--spec", str(mods / "module_class0.spec"),
        "--parent-spec", str(workspace["model"] / "model.spec"),
    ])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "kernel_reduction" in out
    module_spec = store.load_model_spec((mods / "module_class0.spec").read_text())
    parent_spec = store.load_model_spec(
        (workspace["model"] / "model.spec").read_text())
    expected = 1 - store.count_kernels(module_spec) / store.count_kernels(parent_spec)
    line = [l for l in out.splitlines() if "kernel_reduction" in l][0]
    assert float(line.split(":")[1]) == pytest.approx(expected, abs=1e-12)


def test_report_preset_kernel_total(capsys):
    rc = main(["report", "--spec", str(PRESETS / "simcnn_paper.spec")])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert any(line.strip() == "kernels: 4224" for line in out.splitlines())


def test_config_file_fills_defaults_flags_win(workspace, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 4\nlr = 0.02\nseed = 5\n")
    out = tmp_path / "trained"
    rc = main([
        "train", "--spec", str(workspace["spec"]),
        "--dataset", str(workspace["data"] / "train.cnds"),
        "--out-dir", str(out), "--config", str(cfg_file),
        "--lr", "0.03",  # explicit flag beats the config value
    ])
    assert rc == EXIT_OK
    manifest = json.loads((out / "train_manifest.json").read_text())
    assert manifest["config"]["epochs"] == 4
    assert manifest["config"]["lr"] == 0.03
    assert manifest["config"]["seed"] == 5


class TestExitCodes:
    def test_bad_spec_is_config_error(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.spec"
        bad.write_text("name: x\nnum_classes: 2\n")
        rc = main(["train", "--spec", str(bad),
                   "--dataset", str(workspace["data"] / "train.cnds"),
                   "--out-dir", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err

    def test_missing_file_is_config_error(self, workspace, tmp_path):
        rc = main(["train", "--spec", str(tmp_path / "nope.spec"),
                   "--dataset", str(workspace["data"] / "train.cnds"),
                   "--out-dir", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_runtime_failure_is_distinct(self, workspace, tmp_path, capsys):
        rc = main([
            "eval", "--spec", str(workspace["model"] / "model.spec"),
            "--weights", str(workspace["model"] / "weights.cnsp"),
            "--dataset", str(workspace["data"] / "test.cnds"),
            "--logits-out", str(tmp_path / "missing_dir" / "logits.csv"),
        ])
        assert rc == EXIT_RUNTIME
        assert "runtime error" in capsys.readouterr().err

    def test_weights_spec_mismatch(self, workspace, tmp_path):
        rc = main([
            "eval", "--spec", str(PRESETS / "simcnn_desk.spec"),
            "--weights", str(workspace["model"] / "weights.cnsp"),
            "--dataset", str(workspace["data"] / "test.cnds"),
        ])
        assert rc == EXIT_CONFIG
