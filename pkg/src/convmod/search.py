"""Genetic search over kernel-group genomes, one population per class.

Each generation evaluates every genome through the pruned composition
tree, selects the fittest parents by truncation, and rebuilds the
population from single-point crossover of random parent pairs followed by
independent bit-flip mutation and repair. The best genome per class is
tracked across generations and returned at the end; the population itself
carries no elites.

All random draws happen on one sequential stream before candidate
evaluation, so a fixed seed reproduces the entire search bit-for-bit
regardless of how many threads evaluate the candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import repair_bits
from .evaluate import FitnessRecord, exhaustive_evaluation, pruned_evaluation
from .grouping import GroupingMap, SensitivityProfile, round_half_up
from .store import LabeledDataset, ModelSpec, WeightStore


class SearchError(Exception):
    pass


@dataclass
class SearchConfig:
    population_size: int = 100
    parent_count: int = 50
    mutation_prob: float = 0.1
    max_generations: int = 200
    accuracy_weight: float = 0.9
    beam_width: int = 100
    patience: int = 20
    seed: int = 0
    init_mode: str = "sensitivity"
    grouping_mode: str = "importance"
    pruning: bool = True
    threads: int = 1

    def __post_init__(self):
        if not (0.0 < self.mutation_prob < 1.0):
            raise SearchError("mutation_prob must lie in (0, 1)")
        if not (0.0 < self.accuracy_weight < 1.0):
            raise SearchError("accuracy_weight must lie in (0, 1)")
        if self.parent_count > self.population_size:
            raise SearchError("parent_count cannot exceed population_size")
        for name in ("population_size", "parent_count", "max_generations",
                     "beam_width", "patience", "threads"):
            if getattr(self, name) < 1:
                raise SearchError(f"{name} must be positive")
        if self.init_mode not in ("sensitivity", "random"):
            raise SearchError(f"unknown init_mode {self.init_mode!r}")
        if self.grouping_mode not in ("importance", "random", "none"):
            raise SearchError(f"unknown grouping_mode {self.grouping_mode!r}")


@dataclass
class SearchResult:
    best_bits: list[np.ndarray]
    best_fitness: list[float]
    best_acc: list[float]
    best_diff: list[float]
    history: list[dict]
    generations_run: int
    cm_evaluations: int
    best_record: FitnessRecord


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def init_population(
    profile: SensitivityProfile | None,
    grouping: GroupingMap,
    cfg: SearchConfig,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Per class: population_size genomes as a (N, G) uint8 array.

    Sensitivity mode drops a uniformly drawn fraction of each segment's
    groups: 10-50% where the segment touches a sensitive layer, 50-90%
    otherwise (count = round(ratio * groups), positions uniform). Random
    mode draws every bit as a fair coin and repairs afterwards.
    """
    g_total = grouping.total_bits
    populations = []
    for _ in range(grouping.num_classes):
        pop = np.ones((cfg.population_size, g_total), dtype=np.uint8)
        if cfg.init_mode == "random":
            pop = rng.integers(0, 2, size=pop.shape, dtype=np.uint8)
        else:
            if profile is None:
                raise SearchError("sensitivity init requires a sensitivity profile")
            for i in range(cfg.population_size):
                for seg in grouping.layout.segments:
                    lo, hi = (0.10, 0.50) if profile.segment_sensitive(seg) else (0.50, 0.90)
                    ratio = rng.uniform(lo, hi)
                    drop = round_half_up(ratio * seg.group_count)
                    if drop:
                        pos = rng.choice(seg.group_count, size=drop, replace=False)
                        pop[i, seg.offset + pos] = 0
        for i in range(cfg.population_size):
            pop[i] = repair_bits(pop[i], grouping.layout)
        populations.append(pop)
    return populations


def select_parents(fitness: np.ndarray, parent_count: int) -> np.ndarray:
    """Truncation selection: indices of the top genomes, ties by lower index."""
    if np.isnan(fitness).any():
        raise SearchError("fitness not evaluated for every genome")
    order = np.lexsort((np.arange(len(fitness)), -fitness))
    return order[:parent_count]


def crossover(parent_a: np.ndarray, parent_b: np.ndarray, cut: int):
    """Single-point crossover: exchange suffixes at ``cut``."""
    if parent_a.shape != parent_b.shape:
        raise SearchError("parents differ in length")
    g = len(parent_a)
    if not (1 <= cut < g):
        raise SearchError(f"cut must lie in [1, {g}), got {cut}")
    child_a = np.concatenate([parent_a[:cut], parent_b[cut:]])
    child_b = np.concatenate([parent_b[:cut], parent_a[cut:]])
    return child_a, child_b


def flip_bits(bits: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(len(bits)) < prob
    return np.where(flips, 1 - bits, bits).astype(np.uint8)


def mutate(
    bits: np.ndarray,
    prob: float,
    rng: np.random.Generator,
    grouping: GroupingMap,
) -> np.ndarray:
    """Independent bit flips with probability ``prob``, then repair."""
    return repair_bits(flip_bits(bits, prob, rng), grouping.layout)


def _next_generation(
    population: np.ndarray,
    fitness: np.ndarray,
    cfg: SearchConfig,
    grouping: GroupingMap,
    rng: np.random.Generator,
) -> np.ndarray:
    parents = population[select_parents(fitness, cfg.parent_count)]
    g = population.shape[1]
    children = []
    while len(children) < cfg.population_size:
        ia = rng.integers(0, len(parents))
        ib = rng.integers(0, len(parents) - 1)
        if ib >= ia:
            ib += 1
        cut = int(rng.integers(1, g))
        child_a, child_b = crossover(parents[ia], parents[ib], cut)
        children.append(child_a)
        if len(children) < cfg.population_size:
            children.append(child_b)
    out = np.empty_like(population)
    for i, child in enumerate(children):
        out[i] = mutate(child, cfg.mutation_prob, rng, grouping)
    return out


# ---------------------------------------------------------------------------
# Search loop
# ---------------------------------------------------------------------------

def run_search(
    spec: ModelSpec,
    weights: WeightStore,
    grouping: GroupingMap,
    profile: SensitivityProfile | None,
    dataset: LabeledDataset,
    cfg: SearchConfig,
    parent_fingerprint: str | None = None,
    on_generation=None,
) -> SearchResult:
    """Search per-class modules; returns best-so-far genomes and history.

    History rows: one per (generation, class) with the class's best-so-far
    fitness/acc/diff. Stops after max_generations, or earlier once the best
    full-composition fitness has not improved for ``patience`` generations.
    """
    num_classes = spec.num_classes
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    populations = init_population(profile, grouping, cfg, rng)

    best_bits: list[np.ndarray | None] = [None] * num_classes
    best_fit = [-np.inf] * num_classes
    best_acc = [0.0] * num_classes
    best_diff = [0.0] * num_classes
    best_record: FitnessRecord | None = None
    history: list[dict] = []
    cm_total = 0
    best_composed = -np.inf
    stale = 0
    generations_run = 0

    for gen in range(cfg.max_generations):
        if cfg.pruning:
            outcome = pruned_evaluation(
                populations, spec, weights, grouping, dataset,
                alpha=cfg.accuracy_weight, beam_width=cfg.beam_width,
                threads=cfg.threads, parent_fingerprint=parent_fingerprint,
            )
        else:
            outcome = exhaustive_evaluation(
                populations, spec, weights, grouping, dataset,
                alpha=cfg.accuracy_weight, threads=cfg.threads,
                parent_fingerprint=parent_fingerprint,
            )
        cm_total += outcome.cm_evaluations
        generations_run = gen + 1

        for c in range(num_classes):
            i = int(np.lexsort((np.arange(len(outcome.genome_fitness[c])),
                                -outcome.genome_fitness[c]))[0])
            if outcome.genome_fitness[c][i] > best_fit[c]:
                best_fit[c] = float(outcome.genome_fitness[c][i])
                best_acc[c] = float(outcome.genome_acc[c][i])
                best_diff[c] = float(outcome.genome_diff[c][i])
                best_bits[c] = populations[c][i].copy()
            history.append({
                "generation": gen,
                "class": c,
                "best_fitness": best_fit[c],
                "best_acc": best_acc[c],
                "best_diff": best_diff[c],
            })

        if best_record is None or outcome.best_record.fitness > best_record.fitness:
            best_record = outcome.best_record
        if on_generation is not None:
            on_generation(gen, outcome)

        if outcome.best_record.fitness > best_composed:
            best_composed = outcome.best_record.fitness
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

        if gen < cfg.max_generations - 1:
            populations = [
                _next_generation(populations[c], outcome.genome_fitness[c],
                                 cfg, grouping, rng)
                for c in range(num_classes)
            ]

    return SearchResult(
        best_bits=[b for b in best_bits],
        best_fitness=best_fit,
        best_acc=best_acc,
        best_diff=best_diff,
        history=history,
        generations_run=generations_run,
        cm_evaluations=cm_total,
        best_record=best_record,
    )
