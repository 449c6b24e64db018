"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete. All tolerances are asserted exactly as stated; the
desk-scale instances live in conftest fixtures.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from convmod import engine, evaluate, patching, store, synth
from convmod.cli import EXIT_OK, main as cli_main
from convmod.decoder import Genome, channel_keep_masks, decode, repair_bits
from convmod.evaluate import (
    ComposedModel,
    cm_accuracy,
    exhaustive_evaluation,
    fitness,
    jaccard_distance,
    plan_pruned_evaluation,
    pruned_evaluation,
)
from convmod.search import flip_bits
from naive_ref import naive_model_forward

PRESETS = Path(__file__).resolve().parent.parent / "presets"


def _announce(name):
    print(f"\nACCEPTANCE PASS: {name}")


def random_genome(grouping, class_id, rng):
    bits = rng.integers(0, 2, grouping.total_bits, dtype=np.uint8)
    return Genome(repair_bits(bits, grouping.layout), class_id)


def test_decode_equivalence_oracle(desk_spec, desk_model, desk_analysis):
    """100 random genomes x 20 random inputs: decoded logits equal
    zero-masked parent logits within 1e-5 relative tolerance, in under a
    minute, on a sequential 4-conv model with 52 kernels."""
    assert len(desk_spec.conv_layers()) == 4
    assert store.count_kernels(desk_spec) <= 64
    assert not desk_spec.residual_pairs

    gm = desk_analysis["grouping"]
    weights = desk_model["weights"]
    rng = np.random.default_rng(1234)
    inputs = rng.random((20, *desk_spec.input_dims)).astype(np.float32)

    t0 = time.perf_counter()
    checked = 0
    for _ in range(100):
        genome = random_genome(gm, int(rng.integers(0, 3)), rng)
        art = decode(desk_spec, weights, gm, genome)
        masks = channel_keep_masks(desk_spec, gm, genome)
        decoded = engine.model_forward_batch(art.spec, art.weights, inputs)
        masked = engine.model_forward_batch(desk_spec, weights, inputs,
                                            channel_masks=masks)
        np.testing.assert_allclose(decoded, masked, rtol=1e-5, atol=1e-6)
        checked += 1
    elapsed = time.perf_counter() - t0
    assert checked == 100
    assert elapsed < 60.0, f"decode oracle took {elapsed:.1f}s"
    _announce(f"decode-equivalence oracle (100x20 pairs in {elapsed:.1f}s)")


def test_residual_decode_oracle(res_spec, res_fixture):
    """50 (genome, input) pairs: decoded residual forward matches a naive
    loop-nest reimplementation within 1e-5."""
    gm = res_fixture["grouping"]
    weights = res_fixture["weights"]
    rng = np.random.default_rng(987)
    for _ in range(50):
        genome = random_genome(gm, int(rng.integers(0, 3)), rng)
        art = decode(res_spec, weights, gm, genome)
        x = rng.random(res_spec.input_dims).astype(np.float32)
        got = engine.model_forward(art.spec, art.weights, x)
        ref = naive_model_forward(art.spec, art.weights, x)
        np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6)
    _announce("residual decode oracle (50 pairs vs naive loop nest)")


def test_identity_composition(desk_spec, desk_model, desk_data, desk_analysis):
    """All-ones genomes compose to exactly the parent's test accuracy."""
    gm = desk_analysis["grouping"]
    ones = np.ones(gm.total_bits, dtype=np.uint8)
    modules = [decode(desk_spec, desk_model["weights"], gm, Genome(ones, c))
               for c in range(3)]
    cm = ComposedModel(modules=modules, class_ids=(0, 1, 2))
    composed = cm_accuracy(cm, desk_data["test"])
    parent = engine.evaluate_accuracy(desk_spec, desk_model["weights"],
                                      desk_data["test"])
    assert composed == parent
    _announce(f"identity composition (accuracy {composed:.4f}, 0 deviation)")


def test_desk_modularization_quality(desk_spec, desk_model, desk_data,
                                     desk_analysis, desk_search):
    """3-class desk model at >=0.90 val accuracy; search with population 20,
    parents 10, 30 generations, beam 10, fixed seed; composed accuracy loss
    <= 0.05 and mean kernel retention <= 0.85 within 15 minutes."""
    cfg = desk_search["config"]
    assert (cfg.population_size, cfg.parent_count) == (20, 10)
    assert (cfg.max_generations, cfg.beam_width) == (30, 10)

    parent_acc = engine.evaluate_accuracy(desk_spec, desk_model["weights"],
                                          desk_data["val"])
    assert parent_acc >= 0.90

    modules = desk_search["modules"]
    cm = ComposedModel(modules=modules, class_ids=(0, 1, 2))
    composed_acc = cm_accuracy(cm, desk_data["val"])
    loss = parent_acc - composed_acc
    assert loss <= 0.05, f"composed accuracy loss {loss:.4f} exceeds 0.05"

    retention = (sum(m.kernel_count for m in modules) / len(modules)
                 / store.count_kernels(desk_spec))
    assert retention <= 0.85, f"mean kernel retention {retention:.3f} exceeds 0.85"

    elapsed = (desk_model["train_seconds"] + desk_analysis["analysis_seconds"]
               + desk_search["search_seconds"])
    assert elapsed < 900, f"desk pipeline took {elapsed:.0f}s"
    _announce(
        f"desk modularization quality (loss {loss:.4f}, retention "
        f"{retention:.3f}, {elapsed:.0f}s)"
    )


def test_pruning_count_law(four_class_fixture):
    """Dry-run plan reports 9x100^2 CM evaluations for (10, 100, 100);
    pruned and exhaustive genome fitness agree exactly on a (4, 2, 2)
    instance whose beam is not binding."""
    stages, total = plan_pruned_evaluation(10, 100, 100)
    assert total == 9 * 100 ** 2

    f = four_class_fixture
    pruned = pruned_evaluation(f["populations"], f["spec"], f["weights"],
                               f["grouping"], f["dataset"],
                               alpha=0.9, beam_width=2)
    exh = exhaustive_evaluation(f["populations"], f["spec"], f["weights"],
                                f["grouping"], f["dataset"], alpha=0.9)
    for c in range(4):
        np.testing.assert_array_equal(pruned.genome_fitness[c],
                                      exh.genome_fitness[c])
    assert exh.cm_evaluations == 2 ** 4
    _announce("pruning-count law (9x100^2 plan; (4,2,2) exact agreement)")


def test_patching_improves_tc(desk_spec, desk_model, desk_data, desk_search):
    """Overfitting weak models (tricks disabled, small noisy split) on 3
    seeds: patching the worst class strictly raises its F1 and costs at
    most 0.01 non-TC accuracy, for at least 2 of 3 seeds."""
    train = desk_data["train"]
    val = desk_data["val"]
    test = desk_data["test"]
    modules = desk_search["modules"]

    passes = 0
    details = []
    for seed in (100, 101, 102):
        weak_train = synth.make_shapes_dataset(150, 3, 16, noise=0.12,
                                               label_noise=0.15, seed=seed + 3)
        cfg = engine.TrainConfig(learning_rate=0.05, epochs=60, batch_size=16,
                                 momentum=0.9, weight_decay=0.0, augment=False,
                                 dropout_rate=0.0, seed=seed)
        weak_weights, _ = engine.sgd_train(
            desk_spec, engine.init_weights(desk_spec, seed), weak_train, cfg)

        pred = np.concatenate([
            engine.model_forward_batch(desk_spec, weak_weights,
                                       val.images[s:s + 256]).argmax(axis=1)
            for s in range(0, len(val), 256)
        ])
        metrics = patching.class_metrics(pred, val.labels, 3)
        tc = int(np.argmin([m.f1 for m in metrics]))

        module = modules[tc]
        cal = patching.calibrate_module(module.spec, module.weights, train, tc)
        report = patching.evaluate_patch(desk_spec, weak_weights, module.spec,
                                         module.weights, cal, test, tc)
        f1_up = report.tc_f1_delta is not None and report.tc_f1_delta > 0
        acc_ok = (report.non_tc_accuracy_patched
                  >= report.non_tc_accuracy_weak - 0.01)
        passes += int(f1_up and acc_ok)
        details.append(
            f"seed {seed}: tc={tc} dF1={report.tc_f1_delta:+.3f} "
            f"non-TC {report.non_tc_accuracy_weak:.3f}->"
            f"{report.non_tc_accuracy_patched:.3f}"
        )
    assert passes >= 2, "; ".join(details)
    _announce(f"patching improves TC ({passes}/3 seeds; {'; '.join(details)})")


def test_metric_unit_suites():
    """Jaccard laws, fitness arithmetic, softmax normalization, FLOPs
    spot-checks, and the mutation-rate Monte-Carlo bound."""
    # Jaccard metric laws on random sets
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = frozenset(rng.integers(0, 20, rng.integers(0, 10)).tolist())
        b = frozenset(rng.integers(0, 20, rng.integers(0, 10)).tolist())
        c = frozenset(rng.integers(0, 20, rng.integers(0, 10)).tolist())
        assert jaccard_distance(a, a) == 0.0
        assert jaccard_distance(a, b) == jaccard_distance(b, a)
        assert 0.0 <= jaccard_distance(a, b) <= 1.0
        assert jaccard_distance(a, c) <= (jaccard_distance(a, b)
                                          + jaccard_distance(b, c) + 1e-12)

    # weighted-fitness arithmetic, including the reported-row value
    assert abs(fitness(0.8607, 0.5277, 0.9) - 0.82740) < 1e-9
    assert fitness(1.0, 0.0, 0.9) == pytest.approx(0.9, abs=1e-12)
    assert fitness(0.4, 0.4, 0.7) == pytest.approx(0.4, abs=1e-12)

    # softmax normalization and translation invariance
    for _ in range(100):
        x = rng.normal(scale=20, size=rng.integers(1, 9)).astype(np.float32)
        s = engine.softmax(x)
        assert abs(float(s.sum()) - 1.0) < 1e-6
        np.testing.assert_allclose(s, engine.softmax(x + np.float32(37.0)),
                                   atol=1e-6)

    # FLOPs spot checks
    conv_only = store.ModelSpec("c", 2, (1, 3, 3), [
        store.ConvLayer(1, 2), store.FlattenLayer(), store.FcLayer(2)])
    assert store.count_flops(conv_only) - 2 * 4 * 2 == 32
    fc_only = store.ModelSpec("f", 10, (1, 1, 10), [
        store.FlattenLayer(), store.FcLayer(10)])
    assert store.count_flops(fc_only) == 200

    # mutation-rate Monte-Carlo
    bits = np.zeros(100_000, dtype=np.uint8)
    rate = flip_bits(bits, 0.1, np.random.default_rng(5)).mean()
    assert abs(rate - 0.1) < 0.01

    _announce("metric/unit suites (jaccard, fitness, softmax, FLOPs, mutation)")


@pytest.fixture(scope="module")
def cli_desk_workspace(tmp_path_factory, desk_data):
    root = tmp_path_factory.mktemp("acceptance_cli")
    data = root / "data"
    data.mkdir()
    for name in ("train", "val"):
        (data / f"{name}.cnds").write_bytes(store.save_dataset(desk_data[name]))
    model = root / "model"
    rc = cli_main([
        "train", "--spec", str(PRESETS / "simcnn_desk.spec"),
        "--dataset", str(data / "train.cnds"), "--out-dir", str(model),
        "--lr", "0.05", "--epochs", "20", "--batch-size", "32",
        "--dropout", "0.1", "--seed", "0",
    ])
    assert rc == EXIT_OK
    return {"root": root, "data": data, "model": model}


def test_determinism_across_threads(cli_desk_workspace, tmp_path):
    """Two full modularize runs, identical inputs and seed, --threads 1 vs
    --threads 8: byte-identical module artifacts."""
    ws = cli_desk_workspace
    outputs = []
    for threads, name in ((1, "t1"), (8, "t8")):
        out = tmp_path / name
        rc = cli_main([
            "modularize",
            "--spec", str(ws["model"] / "model.spec"),
            "--weights", str(ws["model"] / "weights.cnsp"),
            "--train-dataset", str(ws["data"] / "train.cnds"),
            "--val-dataset", str(ws["data"] / "val.cnds"),
            "--out-dir", str(out),
            "--population", "10", "--parents", "5", "--generations", "6",
            "--beam", "8", "--seed", "42", "--threads", str(threads),
        ])
        assert rc == EXIT_OK
        outputs.append(out)
    a, b = outputs
    names = [f"module_class{c}.{s}" for c in range(3)
             for s in ("spec", "cnsp", "genome")]
    names += ["history.csv", "modularize_report.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    _announce("determinism across --threads 1 and --threads 8")
