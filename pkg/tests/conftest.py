"""Shared fixtures: desk datasets, trained desk models, search artifacts.

Heavy fixtures are session-scoped; everything is deterministic in the
seeds written here, so repeated runs exercise identical artifacts.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from convmod import engine, evaluate, grouping as ga, search, store, synth
from convmod.decoder import Genome, decode, weights_fingerprint

REPO_ROOT = Path(__file__).resolve().parent.parent
PRESETS = REPO_ROOT / "presets"


@pytest.fixture(scope="session")
def desk_spec():
    return store.load_model_spec((PRESETS / "simcnn_desk.spec").read_text())


@pytest.fixture(scope="session")
def res_spec():
    return store.load_model_spec((PRESETS / "rescnn_desk.spec").read_text())


@pytest.fixture(scope="session")
def desk_data():
    return {
        "train": synth.make_shapes_dataset(1800, 3, 16, noise=0.12, seed=0),
        "val": synth.make_shapes_dataset(450, 3, 16, noise=0.12, seed=1),
        "test": synth.make_shapes_dataset(600, 3, 16, noise=0.12, seed=2),
    }


@pytest.fixture(scope="session")
def desk_model(desk_spec, desk_data):
    cfg = engine.TrainConfig(
        learning_rate=0.05, epochs=30, batch_size=32, momentum=0.9,
        weight_decay=1e-4, augment=True, dropout_rate=0.1, seed=0,
    )
    t0 = time.perf_counter()
    weights, history = engine.sgd_train(
        desk_spec, engine.init_weights(desk_spec, 0), desk_data["train"], cfg
    )
    elapsed = time.perf_counter() - t0
    return {"weights": weights, "history": history, "train_seconds": elapsed}


@pytest.fixture(scope="session")
def desk_analysis(desk_spec, desk_model, desk_data):
    t0 = time.perf_counter()
    table = ga.build_importance_table(desk_spec, desk_model["weights"],
                                      desk_data["train"])
    gm = ga.build_grouping(table, desk_spec)
    profile = ga.layer_sensitivity(desk_spec, desk_model["weights"],
                                   desk_data["val"], table)
    elapsed = time.perf_counter() - t0
    return {"importance": table, "grouping": gm, "profile": profile,
            "analysis_seconds": elapsed}


@pytest.fixture(scope="session")
def desk_search(desk_spec, desk_model, desk_data, desk_analysis):
    cfg = search.SearchConfig(
        population_size=20, parent_count=10, mutation_prob=0.1,
        max_generations=30, beam_width=10, patience=20, seed=42, threads=4,
    )
    fingerprint = weights_fingerprint(desk_model["weights"])
    t0 = time.perf_counter()
    result = search.run_search(
        desk_spec, desk_model["weights"], desk_analysis["grouping"],
        desk_analysis["profile"], desk_data["val"], cfg,
        parent_fingerprint=fingerprint,
    )
    elapsed = time.perf_counter() - t0
    modules = [
        decode(desk_spec, desk_model["weights"], desk_analysis["grouping"],
               Genome(result.best_bits[c], c), parent_fingerprint=fingerprint)
        for c in range(desk_spec.num_classes)
    ]
    return {
        "config": cfg,
        "result": result,
        "modules": modules,
        "fingerprint": fingerprint,
        "search_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def res_fixture(res_spec):
    """Residual desk model with random weights plus a grouping over it."""
    weights = engine.init_weights(res_spec, 7)
    data = synth.make_shapes_dataset(120, 3, 16, noise=0.1, seed=21)
    table = ga.build_importance_table(res_spec, weights, data)
    gm = ga.build_grouping(table, res_spec)
    return {"weights": weights, "grouping": gm, "data": data}


@pytest.fixture(scope="session")
def four_class_fixture():
    """4-class instance where the pruned beam provably does not bind.

    Per class, genomes retain kernels only from a class-private block
    (cross-class Jaccard distance is exactly 1 everywhere), and the
    evaluation subset keeps only samples every module composition
    classifies correctly, so every CM at every level scores exactly
    alpha*1 + (1-alpha)*1.
    """
    spec = store.load_model_spec(
        "name: four-desk\n"
        "num_classes: 4\n"
        "input: 1 12 12\n"
        "layer: conv out=16 k=3 stride=1 pad=1\n"
        "layer: maxpool window=2 stride=2\n"
        "layer: conv out=20 k=3 stride=1 pad=1\n"
        "layer: maxpool window=2 stride=2\n"
        "layer: flatten\n"
        "layer: fc out=24\n"
        "layer: fc out=4\n"
    )
    train = synth.make_shapes_dataset(1000, 4, 12, noise=0.02, seed=10)
    val = synth.make_shapes_dataset(400, 4, 12, noise=0.02, seed=11)
    cfg = engine.TrainConfig(learning_rate=0.05, epochs=30, batch_size=32,
                             dropout_rate=0.2, seed=10)
    weights, _ = engine.sgd_train(spec, engine.init_weights(spec, 10), train, cfg)
    table = ga.build_importance_table(spec, weights, train)
    gm = ga.build_grouping(table, spec, mode="none")

    # each class greedily claims its top unclaimed kernels per layer
    blocks = {c: [] for c in range(4)}
    for ordinal, n in [(0, 16), (1, 20)]:
        taken: set[int] = set()
        per = n // 4
        for c in range(4):
            order = np.argsort(-table.scores[c][ordinal])
            mine = [int(k) for k in order if int(k) not in taken][:per]
            taken.update(mine)
            blocks[c].append(sorted(mine))

    segs = gm.layout.segments
    populations = []
    for c in range(4):
        g0 = np.zeros(gm.total_bits, dtype=np.uint8)
        for ordinal in range(2):
            for k in blocks[c][ordinal]:
                g0[segs[ordinal].offset + k] = 1
        g1 = g0.copy()
        for ordinal in range(2):
            g1[segs[ordinal].offset + blocks[c][ordinal][-1]] = 0
        populations.append(np.stack([g0, g1]))

    own, _ = evaluate.prepare_modules(spec, weights, gm, populations, val)
    keep = []
    for s in range(len(val)):
        c = int(val.labels[s])
        lo = min(own[c][i][s] for i in range(2))
        hi = max(own[cc][j][s] for cc in range(4) if cc != c for j in range(2))
        if lo > hi:
            keep.append(s)
    saturated = val.subset(np.array(keep))
    assert all((saturated.labels == c).any() for c in range(4))

    return {
        "spec": spec,
        "weights": weights,
        "grouping": gm,
        "populations": populations,
        "dataset": saturated,
    }
