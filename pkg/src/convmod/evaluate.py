"""Composed-model metrics and per-genome fitness assignment.

A composed model (CM) stacks one module per class and predicts with the
vector of own-class logits. CM quality is a weighted sum of accuracy and
the mean pairwise Jaccard distance between the member modules' retained
kernel sets; that value flows back to every member genome.

Evaluating every full composition is O(population^num_classes), so the
work is arranged as a balanced subtask tree: classes are paired into
binary (or one ternary, for odd counts) leaf subtasks whose candidate CMs
are evaluated exhaustively on the data restricted to their classes, then
subtasks merge pairwise with only the top ``beam_width`` CMs per node
carried upward. Every evaluated CM at every level is scored; a genome's
fitness is the maximum score over all CMs containing it, at any level
(ties keep the higher-level record's accuracy/diff for reporting), so
pruned-away genomes still carry a score to rank by.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decoder import Genome, ModuleArtifact, decode, weights_fingerprint
from .engine import model_forward_batch
from .grouping import GroupingMap
from .store import LabeledDataset, ModelSpec, WeightStore, count_kernels


class EvaluationError(Exception):
    pass


# ---------------------------------------------------------------------------
# Core metrics
# ---------------------------------------------------------------------------

def jaccard_distance(a: frozenset | set, b: frozenset | set) -> float:
    """(|A u B| - |A n B|) / |A u B|; both-empty defined as 0."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return (union - len(a & b)) / union


def fitness(acc: float, diff: float, alpha: float) -> float:
    """Weighted search objective alpha*acc + (1-alpha)*diff."""
    if not (0.0 < alpha < 1.0):
        raise EvaluationError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha * acc + (1.0 - alpha) * diff


def compose_outputs(
    outputs: list[np.ndarray], class_ids: tuple[int, ...] | None = None
) -> np.ndarray:
    """Diagonal composition: entry t is module t's own-class logit."""
    if class_ids is None:
        class_ids = tuple(range(len(outputs)))
    if len(outputs) != len(class_ids):
        raise EvaluationError(
            f"{len(outputs)} module outputs for {len(class_ids)} classes"
        )
    width = len(outputs[0])
    for t, vec in enumerate(outputs):
        if len(vec) != width:
            raise EvaluationError(
                f"module output {t} has length {len(vec)}, expected {width}"
            )
        if class_ids[t] >= width:
            raise EvaluationError(
                f"class id {class_ids[t]} out of range for output length {width}"
            )
    return np.array([outputs[t][class_ids[t]] for t in range(len(outputs))],
                    dtype=np.float32)


@dataclass
class ComposedModel:
    """One module per covered class, ordered by ascending class id."""

    modules: list[ModuleArtifact]
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.modules) != len(self.class_ids):
            raise EvaluationError("one module per class id required")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise EvaluationError(f"duplicate class ids: {self.class_ids}")
        if tuple(sorted(self.class_ids)) != tuple(self.class_ids):
            raise EvaluationError("class ids must be ascending")
        parents = {m.parent_fingerprint for m in self.modules}
        if len(parents) > 1:
            raise EvaluationError("modules decode from different parent models")


def cm_accuracy(cm: ComposedModel, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of samples whose diagonal-composition argmax hits the label.

    The dataset must only contain the CM's classes; labels map to their
    position within the sorted class subset. Argmax ties resolve to the
    lowest class index.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate a composed model on an empty dataset")
    classes = np.asarray(cm.class_ids)
    if not np.isin(dataset.labels, classes).all():
        raise EvaluationError(
            f"dataset labels outside composed classes {cm.class_ids}"
        )
    mapped = np.searchsorted(classes, dataset.labels)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        own = [
            model_forward_batch(m.spec, m.weights, xb)[:, c]
            for m, c in zip(cm.modules, cm.class_ids)
        ]
        pred = np.stack(own, axis=1).argmax(axis=1)
        correct += int((pred == mapped[start:start + batch_size]).sum())
    return correct / len(dataset)


def cm_diff(cm: ComposedModel) -> float:
    """Mean Jaccard distance over all unordered module pairs."""
    return mean_pairwise_jaccard([m.retained_kernels for m in cm.modules])


def mean_pairwise_jaccard(kernel_sets: list[frozenset | set]) -> float:
    n = len(kernel_sets)
    if n < 2:
        raise EvaluationError("diff needs at least two modules")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += jaccard_distance(kernel_sets[i], kernel_sets[j])
    return total / (n * (n - 1) / 2)


# ---------------------------------------------------------------------------
# Fitness records and evaluation planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitnessRecord:
    """Score of one evaluated CM: which classes, which genomes, what values."""

    fitness: float
    acc: float
    diff: float
    level: int
    class_ids: tuple[int, ...]
    member_indices: tuple[int, ...]


@dataclass
class EvaluationOutcome:
    """Per-genome fitness plus the best full composition found."""

    genome_fitness: list[np.ndarray]
    genome_acc: list[np.ndarray]
    genome_diff: list[np.ndarray]
    best_record: FitnessRecord
    cm_evaluations: int
    stages: list[tuple[tuple[int, ...], int]]


def leaf_subtasks(num_classes: int) -> list[tuple[int, ...]]:
    """Ascending class pairs; with odd counts the last subtask takes 3 classes."""
    if num_classes < 2:
        raise EvaluationError("need at least 2 classes")
    k = num_classes // 2
    subtasks = [(2 * i, 2 * i + 1) for i in range(k)]
    if num_classes % 2:
        subtasks[-1] = (num_classes - 3, num_classes - 2, num_classes - 1)
    return subtasks


def plan_pruned_evaluation(
    num_classes: int, population_size: int, beam_width: int
) -> tuple[list[tuple[tuple[int, ...], int]], int]:
    """Dry-run CM-evaluation counts for the pruned tree, stage by stage."""
    stages: list[tuple[tuple[int, ...], int]] = []
    nodes = []
    for classes in leaf_subtasks(num_classes):
        count = population_size ** len(classes)
        stages.append((classes, count))
        nodes.append((classes, min(beam_width, count)))
    while len(nodes) > 1:
        merged = []
        for i in range(0, len(nodes) - 1, 2):
            (ca, ba), (cb, bb) = nodes[i], nodes[i + 1]
            classes = ca + cb
            count = ba * bb
            stages.append((classes, count))
            merged.append((classes, min(beam_width, count)))
        if len(nodes) % 2:
            merged.append(nodes[-1])
        nodes = merged
    return stages, sum(count for _, count in stages)


# ---------------------------------------------------------------------------
# Population evaluation
# ---------------------------------------------------------------------------

def prepare_modules(
    spec: ModelSpec,
    weights: WeightStore,
    grouping: GroupingMap,
    populations: list[np.ndarray],
    dataset: LabeledDataset,
    threads: int = 1,
    parent_fingerprint: str | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Decode every genome and forward it over the evaluation set.

    Returns (own_logits, masks): per class, ``own_logits[c][i]`` is genome
    i's own-class logit on every sample and ``masks[c][i]`` its retained
    kernels as a boolean vector over global kernel ids. Work fans out over
    ``threads``; results are gathered by index so thread count never
    changes values.
    """
    if parent_fingerprint is None:
        parent_fingerprint = weights_fingerprint(weights)
    total = count_kernels(spec)
    jobs = [(c, i) for c in range(len(populations))
            for i in range(len(populations[c]))]

    def run(job):
        c, i = job
        art = decode(spec, weights, grouping, Genome(populations[c][i], c),
                     parent_fingerprint=parent_fingerprint)
        logits = model_forward_batch(art.spec, art.weights, dataset.images)
        mask = np.zeros(total, dtype=bool)
        mask[list(art.retained_kernels)] = True
        return logits[:, c].copy(), mask

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    own = [np.empty((len(populations[c]), len(dataset)), dtype=np.float32)
           for c in range(len(populations))]
    masks = [np.empty((len(populations[c]), total), dtype=bool)
             for c in range(len(populations))]
    for (c, i), (logit_col, mask) in zip(jobs, results):
        own[c][i] = logit_col
        masks[c][i] = mask
    return own, masks


def _jd_matrix(masks_a: np.ndarray, masks_b: np.ndarray) -> np.ndarray:
    inter = masks_a.astype(np.float64) @ masks_b.astype(np.float64).T
    sizes_a = masks_a.sum(axis=1, dtype=np.float64)[:, None]
    sizes_b = masks_b.sum(axis=1, dtype=np.float64)[None, :]
    union = sizes_a + sizes_b - inter
    return 1.0 - inter / union


def _combo_accuracy(
    own_restricted: list[np.ndarray],
    combos: np.ndarray,
    mapped_labels: np.ndarray,
    chunk: int = 512,
) -> np.ndarray:
    k = combos.shape[1]
    accs = np.empty(len(combos), dtype=np.float64)
    for start in range(0, len(combos), chunk):
        sl = combos[start:start + chunk]
        stack = np.stack([own_restricted[t][sl[:, t]] for t in range(k)], axis=1)
        pred = stack.argmax(axis=1)
        accs[start:start + chunk] = (pred == mapped_labels[None, :]).mean(axis=1)
    return accs


def _combo_diff(jd_lookup, classes: tuple[int, ...], combos: np.ndarray) -> np.ndarray:
    k = len(classes)
    total = np.zeros(len(combos), dtype=np.float64)
    for t in range(k):
        for u in range(t + 1, k):
            jd = jd_lookup(classes[t], classes[u])
            total += jd[combos[:, t], combos[:, u]]
    return total / (k * (k - 1) / 2)


class _ClassBests:
    """Best (fitness, acc, diff) per genome per tree level, one class."""

    def __init__(self, population_size: int):
        self.size = population_size
        self.levels: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def update(self, level, members, fit, acc, diff):
        entry = self.levels.get(level)
        if entry is None:
            entry = (np.full(self.size, -np.inf), np.zeros(self.size), np.zeros(self.size))
            self.levels[level] = entry
        best_f, best_a, best_d = entry
        order = np.lexsort((fit, members))
        ms = members[order]
        last = np.flatnonzero(np.r_[ms[1:] != ms[:-1], True])
        sel = order[last]
        genomes = ms[last]
        better = fit[sel] > best_f[genomes]
        upd = genomes[better]
        best_f[upd] = fit[sel][better]
        best_a[upd] = acc[sel][better]
        best_d[upd] = diff[sel][better]

    def finalize(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per genome: max fitness over every level; ties prefer higher levels."""
        out_f = np.full(self.size, -np.inf)
        out_a = np.zeros(self.size)
        out_d = np.zeros(self.size)
        for level in sorted(self.levels):
            best_f, best_a, best_d = self.levels[level]
            better = best_f >= out_f
            out_f[better] = best_f[better]
            out_a[better] = best_a[better]
            out_d[better] = best_d[better]
        return out_f, out_a, out_d


def _restriction(dataset: LabeledDataset, classes: tuple[int, ...]):
    class_arr = np.asarray(classes)
    rows = np.flatnonzero(np.isin(dataset.labels, class_arr))
    if len(rows) == 0:
        raise EvaluationError(f"dataset has no samples for classes {classes}")
    mapped = np.searchsorted(class_arr, dataset.labels[rows])
    return rows, mapped


def _beam_order(acc: np.ndarray, fit: np.ndarray, combos: np.ndarray) -> np.ndarray:
    """Accuracy-descending order; ties by fitness, then member indices."""
    keys = tuple(combos[:, t] for t in reversed(range(combos.shape[1])))
    return np.lexsort(keys + (-fit, -acc))


def _take_beam(order: np.ndarray, beam_width: int,
               classes: tuple[int, ...]) -> np.ndarray:
    if beam_width > len(order):
        warnings.warn(
            f"beam width {beam_width} exceeds the {len(order)} candidate CMs "
            f"for classes {classes}; keeping all of them",
            stacklevel=3,
        )
    return order[:beam_width]


def _evaluate_tree(
    own: list[np.ndarray],
    jd_lookup,
    dataset: LabeledDataset,
    num_classes: int,
    alpha: float,
    beam_width: int | None,
) -> EvaluationOutcome:
    bests = [_ClassBests(len(own[c])) for c in range(num_classes)]
    stages: list[tuple[tuple[int, ...], int]] = []

    def assess(classes: tuple[int, ...], combos: np.ndarray):
        rows, mapped = _restriction(dataset, classes)
        own_r = [own[c][:, rows] for c in classes]
        acc = _combo_accuracy(own_r, combos, mapped)
        diff = _combo_diff(jd_lookup, classes, combos)
        fit = alpha * acc + (1.0 - alpha) * diff
        stages.append((classes, len(combos)))
        for t, c in enumerate(classes):
            bests[c].update(len(classes), combos[:, t], fit, acc, diff)
        return acc, diff, fit

    if beam_width is None:
        # exhaustive: every full composition, single level
        classes = tuple(range(num_classes))
        dims = tuple(len(own[c]) for c in classes)
        total = int(np.prod(dims, dtype=np.int64))
        combos = np.stack(np.unravel_index(np.arange(total), dims), axis=1)
        acc, diff, fit = assess(classes, combos)
        top_classes, top_combos, top_acc, top_diff, top_fit = (
            classes, combos, acc, diff, fit)
    else:
        nodes = []
        for classes in leaf_subtasks(num_classes):
            dims = tuple(len(own[c]) for c in classes)
            total = int(np.prod(dims, dtype=np.int64))
            combos = np.stack(np.unravel_index(np.arange(total), dims), axis=1)
            acc, diff, fit = assess(classes, combos)
            order = _take_beam(_beam_order(acc, fit, combos), beam_width, classes)
            nodes.append((classes, combos[order]))
            top_classes, top_combos, top_acc, top_diff, top_fit = (
                classes, combos, acc, diff, fit)
        while len(nodes) > 1:
            merged = []
            for i in range(0, len(nodes) - 1, 2):
                (ca, beam_a), (cb, beam_b) = nodes[i], nodes[i + 1]
                classes = ca + cb
                left = np.repeat(beam_a, len(beam_b), axis=0)
                right = np.tile(beam_b, (len(beam_a), 1))
                combos = np.concatenate([left, right], axis=1)
                acc, diff, fit = assess(classes, combos)
                order = _take_beam(_beam_order(acc, fit, combos), beam_width,
                                   classes)
                merged.append((classes, combos[order]))
                top_classes, top_combos, top_acc, top_diff, top_fit = (
                    classes, combos, acc, diff, fit)
            if len(nodes) % 2:
                merged.append(nodes[-1])
            nodes = merged

    if len(top_classes) != num_classes:
        raise EvaluationError("evaluation tree did not reach the full class set")

    # best full composition: highest fitness, ties by acc then member indices
    keys = tuple(top_combos[:, t] for t in reversed(range(top_combos.shape[1])))
    best_i = np.lexsort(keys + (-top_acc, -top_fit))[0]
    best = FitnessRecord(
        fitness=float(top_fit[best_i]),
        acc=float(top_acc[best_i]),
        diff=float(top_diff[best_i]),
        level=num_classes,
        class_ids=top_classes,
        member_indices=tuple(int(v) for v in top_combos[best_i]),
    )

    genome_fitness, genome_acc, genome_diff = [], [], []
    for c in range(num_classes):
        f, a, d = bests[c].finalize()
        genome_fitness.append(f)
        genome_acc.append(a)
        genome_diff.append(d)
    return EvaluationOutcome(
        genome_fitness=genome_fitness,
        genome_acc=genome_acc,
        genome_diff=genome_diff,
        best_record=best,
        cm_evaluations=sum(n for _, n in stages),
        stages=stages,
    )


def _make_jd_lookup(masks: list[np.ndarray]):
    cache: dict[tuple[int, int], np.ndarray] = {}

    def lookup(a: int, b: int) -> np.ndarray:
        key = (a, b)
        if key not in cache:
            cache[key] = _jd_matrix(masks[a], masks[b])
        return cache[key]

    return lookup


def pruned_evaluation(
    populations: list[np.ndarray],
    spec: ModelSpec,
    weights: WeightStore,
    grouping: GroupingMap,
    dataset: LabeledDataset,
    alpha: float = 0.9,
    beam_width: int = 100,
    threads: int = 1,
    parent_fingerprint: str | None = None,
) -> EvaluationOutcome:
    """Fitness for every genome via the pruned subtask tree."""
    if len(populations) < 2:
        raise EvaluationError("pruned evaluation needs at least 2 classes")
    if beam_width < 1:
        raise EvaluationError("beam_width must be positive")
    own, masks = prepare_modules(spec, weights, grouping, populations, dataset,
                                 threads, parent_fingerprint)
    return _evaluate_tree(own, _make_jd_lookup(masks), dataset,
                          len(populations), alpha, beam_width)


def exhaustive_evaluation(
    populations: list[np.ndarray],
    spec: ModelSpec,
    weights: WeightStore,
    grouping: GroupingMap,
    dataset: LabeledDataset,
    alpha: float = 0.9,
    threads: int = 1,
    parent_fingerprint: str | None = None,
) -> EvaluationOutcome:
    """Fitness via every full composition (population^num_classes CMs)."""
    if len(populations) < 2:
        raise EvaluationError("exhaustive evaluation needs at least 2 classes")
    own, masks = prepare_modules(spec, weights, grouping, populations, dataset,
                                 threads, parent_fingerprint)
    return _evaluate_tree(own, _make_jd_lookup(masks), dataset,
                          len(populations), alpha, beam_width=None)
