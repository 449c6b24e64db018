"""Command-line pipeline: train, analyze, modularize, patch, report, eval.

Every command writes a JSON run manifest (config snapshot, input/output
fingerprints, per-stage wall-clock) next to its outputs. All primary
outputs are byte-identical across runs with the same inputs and seed;
manifests may differ in timestamps and timings only.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import engine, evaluate, grouping as grouping_mod, patching, search, store
from .decoder import Genome, decode, genome_to_text, weights_fingerprint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    """Bad flags, unreadable inputs, or inconsistent configuration."""


# ---------------------------------------------------------------------------
# Manifest and I/O helpers
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        snapshot = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        self.payload = {
            "command": command,
            "config": snapshot,
            "seed": snapshot.get("seed"),
            "inputs": {},
            "outputs": {},
            "stage_seconds": {},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        self._stage_start: float | None = None
        self._stage_name: str | None = None

    def add_input(self, path: Path, data: bytes) -> None:
        self.payload["inputs"][str(path)] = _sha256(data)

    def add_output(self, path: Path, data: bytes) -> None:
        self.payload["outputs"][str(path)] = _sha256(data)

    def stage(self, name: str):
        manifest = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                manifest.payload["stage_seconds"][name] = round(
                    time.perf_counter() - self.t0, 3
                )
                return False

        return _Stage()

    def write(self, out_dir: Path) -> None:
        path = out_dir / f"{self.payload['command']}_manifest.json"
        path.write_text(json.dumps(self.payload, indent=1, sort_keys=True) + "\n")


def _read_bytes(path: str, manifest: RunManifest | None = None) -> bytes:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if manifest is not None:
        manifest.add_input(p, data)
    return data


def _write_output(out_dir: Path, name: str, data: bytes | str,
                  manifest: RunManifest) -> Path:
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = out_dir / name
    path.write_bytes(data)
    manifest.add_output(path, data)
    return path


def _load_spec(path: str, manifest: RunManifest | None = None) -> store.ModelSpec:
    text = _read_bytes(path, manifest).decode("utf-8")
    try:
        return store.load_model_spec(text)
    except store.SpecError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _load_weights(path: str, spec: store.ModelSpec | None,
                  manifest: RunManifest | None = None) -> store.WeightStore:
    data = _read_bytes(path, manifest)
    try:
        weights = store.load_weights(data)
        if spec is not None:
            store.validate_weights(spec, weights)
    except store.StoreError as exc:
        raise CliError(f"{path}: {exc}") from exc
    return weights


def _load_dataset(path: str, manifest: RunManifest | None = None) -> store.LabeledDataset:
    data = _read_bytes(path, manifest)
    try:
        return store.load_dataset(data)
    except store.StoreError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _history_csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _derive_simple_spec(spec: store.ModelSpec) -> store.ModelSpec:
    """Shallow variant: first two conv layers (plus interleaved pools),
    one trailing pool if available, flatten, single fc to the logits."""
    layers: list[store.Layer] = []
    convs = 0
    for layer in spec.layers:
        if isinstance(layer, store.ConvLayer):
            if convs == 2:
                break
            layers.append(layer)
            convs += 1
        elif isinstance(layer, store.MaxPoolLayer):
            layers.append(layer)
        else:
            break
    if convs == 0:
        raise CliError("cannot derive a simple variant: spec has no conv layers")
    layers.append(store.FlattenLayer())
    layers.append(store.FcLayer(out_features=spec.num_classes))
    simple = store.ModelSpec(
        name=f"{spec.name}-simple",
        num_classes=spec.num_classes,
        input_dims=spec.input_dims,
        layers=layers,
        residual_pairs=[],
    )
    store.infer_shapes(simple)
    return simple


def apply_weak_recipe(spec, weak, epochs, weight_decay, dropout, augment):
    """Expand a weak-model preset: shallow spec, halved epochs, or tricks off."""
    if weak == "simple":
        spec = _derive_simple_spec(spec)
    elif weak == "underfit":
        epochs = max(1, epochs // 2)
    elif weak == "overfit":
        weight_decay = 0.0
        dropout = 0.0
        augment = False
    elif weak is not None:
        raise CliError(f"unknown weak-model recipe {weak!r}")
    return spec, epochs, weight_decay, dropout, augment


def cmd_train(args) -> int:
    manifest = RunManifest("train", args)
    spec = _load_spec(args.spec, manifest)
    dataset = _load_dataset(args.dataset, manifest)

    spec, epochs, weight_decay, dropout, augment = apply_weak_recipe(
        spec, args.weak, args.epochs, args.weight_decay, args.dropout,
        args.augment,
    )
    try:
        cfg = engine.TrainConfig(
            learning_rate=args.lr, epochs=epochs, batch_size=args.batch_size,
            momentum=args.momentum, weight_decay=weight_decay, augment=augment,
            dropout_rate=dropout, seed=args.seed,
        )
    except engine.EngineError as exc:
        raise CliError(str(exc)) from exc

    out = _out_dir(args)
    with manifest.stage("train"):
        init = engine.init_weights(spec, args.seed)
        weights, history = engine.sgd_train(spec, init, dataset, cfg)

    _write_output(out, "model.spec", store.dump_model_spec(spec), manifest)
    _write_output(out, "weights.cnsp", store.save_weights(weights), manifest)
    _write_output(out, "train_history.csv",
                  _history_csv(history, ["epoch", "loss", "accuracy"]), manifest)
    manifest.write(out)
    final = history[-1]
    print(f"trained {spec.name}: {epochs} epochs, final loss {final['loss']:.4f}, "
          f"train accuracy {final['accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    manifest = RunManifest("analyze", args)
    spec = _load_spec(args.spec, manifest)
    weights = _load_weights(args.weights, spec, manifest)
    train_ds = _load_dataset(args.train_dataset, manifest)
    val_ds = _load_dataset(args.val_dataset, manifest)

    out = _out_dir(args)
    with manifest.stage("importance"):
        table = grouping_mod.build_importance_table(
            spec, weights, train_ds, sample_cap=args.sample_cap
        )
    with manifest.stage("grouping"):
        gm = grouping_mod.build_grouping(table, spec, mode=args.grouping, seed=args.seed)
    with manifest.stage("sensitivity"):
        profile = grouping_mod.layer_sensitivity(
            spec, weights, val_ds, table, threshold=args.threshold
        )

    _write_output(out, "importance.json", grouping_mod.importance_to_json(table), manifest)
    _write_output(out, "grouping.json", grouping_mod.grouping_to_json(gm), manifest)
    _write_output(out, "sensitivity.json", grouping_mod.sensitivity_to_json(profile),
                  manifest)
    manifest.write(out)
    flags = ", ".join(
        f"conv{i}={'sensitive' if s else 'insensitive'}"
        for i, s in enumerate(profile.sensitive)
    )
    print(f"analyzed {spec.name}: baseline accuracy "
          f"{profile.baseline_accuracy:.4f}; {flags}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# modularize
# ---------------------------------------------------------------------------

def _load_or_compute_analysis(args, spec, weights, train_ds, val_ds, manifest):
    table = gm = profile = None
    if args.analysis:
        adir = Path(args.analysis)
        imp_path, grp_path, sens_path = (adir / "importance.json",
                                         adir / "grouping.json",
                                         adir / "sensitivity.json")
        if imp_path.exists():
            table = grouping_mod.importance_from_json(
                _read_bytes(str(imp_path), manifest).decode("utf-8"))
        if grp_path.exists():
            gm = grouping_mod.grouping_from_json(
                _read_bytes(str(grp_path), manifest).decode("utf-8"))
            if gm.mode != args.grouping:
                gm = None  # cached under a different ablation mode
        if sens_path.exists():
            profile = grouping_mod.sensitivity_from_json(
                _read_bytes(str(sens_path), manifest).decode("utf-8"))
    if table is None and (gm is None or (profile is None and args.init == "sensitivity")):
        with manifest.stage("importance"):
            table = grouping_mod.build_importance_table(spec, weights, train_ds)
    if gm is None:
        with manifest.stage("grouping"):
            gm = grouping_mod.build_grouping(table, spec, mode=args.grouping,
                                             seed=args.seed)
    if profile is None and args.init == "sensitivity":
        with manifest.stage("sensitivity"):
            profile = grouping_mod.layer_sensitivity(spec, weights, val_ds, table)
    return gm, profile


def cmd_modularize(args) -> int:
    manifest = RunManifest("modularize", args)
    spec = _load_spec(args.spec, manifest)
    weights = _load_weights(args.weights, spec, manifest)
    train_ds = _load_dataset(args.train_dataset, manifest)
    val_ds = _load_dataset(args.val_dataset, manifest)
    if spec.num_classes < 2:
        raise CliError("modularize needs a model with at least 2 classes")

    try:
        cfg = search.SearchConfig(
            population_size=args.population, parent_count=args.parents,
            mutation_prob=args.mutation_prob, max_generations=args.generations,
            accuracy_weight=args.acc_weight, beam_width=args.beam,
            patience=args.patience, seed=args.seed, init_mode=args.init,
            grouping_mode=args.grouping, pruning=not args.no_pruning,
            threads=args.threads,
        )
    except search.SearchError as exc:
        raise CliError(str(exc)) from exc

    if cfg.pruning:
        stages, total = evaluate.plan_pruned_evaluation(
            spec.num_classes, cfg.population_size, cfg.beam_width
        )
        print(f"pruned evaluation plan: {total} CM evaluations per generation")
        for classes, count in stages:
            print(f"  classes {classes}: {count}")
    else:
        total = cfg.population_size ** spec.num_classes
        if total > args.exhaustive_budget:
            raise CliError(
                f"exhaustive evaluation needs {total} CM evaluations per "
                f"generation, over the budget of {args.exhaustive_budget}; "
                f"drop --no-pruning or raise --exhaustive-budget"
            )
        print(f"exhaustive evaluation: {total} CM evaluations per generation")

    gm, profile = _load_or_compute_analysis(args, spec, weights, train_ds, val_ds,
                                            manifest)

    fingerprint = weights_fingerprint(weights)
    with manifest.stage("search"):
        result = search.run_search(spec, weights, gm, profile, val_ds, cfg,
                                   parent_fingerprint=fingerprint)

    out = _out_dir(args)
    modules = []
    with manifest.stage("decode"):
        for c in range(spec.num_classes):
            art = decode(spec, weights, gm, Genome(result.best_bits[c], c),
                         parent_fingerprint=fingerprint)
            modules.append(art)
            _write_output(out, f"module_class{c}.spec",
                          store.dump_model_spec(art.spec), manifest)
            _write_output(out, f"module_class{c}.cnsp",
                          store.save_weights(art.weights), manifest)
            _write_output(out, f"module_class{c}.genome",
                          genome_to_text(art), manifest)

    with manifest.stage("report"):
        cm = evaluate.ComposedModel(modules=modules,
                                    class_ids=tuple(range(spec.num_classes)))
        composed_acc = evaluate.cm_accuracy(cm, val_ds)
        composed_diff = evaluate.cm_diff(cm)
        parent_acc = engine.evaluate_accuracy(spec, weights, val_ds)
        parent_kernels = store.count_kernels(spec)
        avg_kernels = sum(m.kernel_count for m in modules) / len(modules)
        report_rows = [
            ("parent_accuracy", repr(parent_acc)),
            ("parent_kernels", parent_kernels),
            ("composed_accuracy", repr(composed_acc)),
            ("composed_diff", repr(composed_diff)),
            ("avg_module_kernels", repr(avg_kernels)),
            ("mean_kernel_retention", repr(avg_kernels / parent_kernels)),
            ("generations_run", result.generations_run),
            ("cm_evaluations", result.cm_evaluations),
        ]
        csv_text = "key,value\n" + "\n".join(f"{k},{v}" for k, v in report_rows) + "\n"
        _write_output(out, "modularize_report.csv", csv_text, manifest)
        table_text = "\n".join(f"{k:>22}: {v}" for k, v in report_rows) + "\n"
        _write_output(out, "modularize_report.txt", table_text, manifest)

    _write_output(
        out, "history.csv",
        _history_csv(result.history,
                     ["generation", "class", "best_fitness", "best_acc", "best_diff"]),
        manifest,
    )
    manifest.write(out)
    print(f"modularized {spec.name} in {result.generations_run} generations "
          f"({result.cm_evaluations} CM evaluations)")
    print(f"parent accuracy {parent_acc:.4f} -> composed accuracy {composed_acc:.4f}, "
          f"diff {composed_diff:.4f}, mean retention "
          f"{avg_kernels / parent_kernels:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# patch
# ---------------------------------------------------------------------------

def cmd_patch(args) -> int:
    manifest = RunManifest("patch", args)
    weak_spec = _load_spec(args.weak_spec, manifest)
    weak_weights = _load_weights(args.weak_weights, weak_spec, manifest)
    module_spec = _load_spec(args.module_spec, manifest)
    module_weights = _load_weights(args.module_weights, module_spec, manifest)
    train_ds = _load_dataset(args.train_dataset, manifest)
    test_ds = _load_dataset(args.test_dataset, manifest)
    if weak_spec.num_classes != module_spec.num_classes:
        raise CliError(
            f"weak model has {weak_spec.num_classes} classes, module "
            f"{module_spec.num_classes}"
        )
    if not (0 <= args.tc < weak_spec.num_classes):
        raise CliError(f"--tc {args.tc} out of range")

    out = _out_dir(args)
    with manifest.stage("calibrate"):
        try:
            cal = patching.calibrate_module(module_spec, module_weights,
                                            train_ds, args.tc)
        except patching.PatchError as exc:
            raise CliError(str(exc)) from exc
    with manifest.stage("evaluate"):
        report = patching.evaluate_patch(
            weak_spec, weak_weights, module_spec, module_weights, cal,
            test_ds, args.tc,
        )

    _write_output(out, "patch_report.csv", patching.report_to_csv(report), manifest)
    text = patching.report_to_text(report)
    _write_output(out, "patch_report.txt", text, manifest)
    manifest.write(out)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report / eval
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    manifest = RunManifest("report", args)
    spec = _load_spec(args.spec, manifest)
    kernels = store.count_kernels(spec)
    flops = store.count_flops(spec)
    rows = [
        ("model", spec.name),
        ("kernels", kernels),
        ("flops", flops),
    ]
    if args.parent_spec:
        parent = _load_spec(args.parent_spec, manifest)
        p_kernels = store.count_kernels(parent)
        p_flops = store.count_flops(parent)
        rows += [
            ("parent", parent.name),
            ("parent_kernels", p_kernels),
            ("parent_flops", p_flops),
            ("kernel_reduction", repr(1 - kernels / p_kernels)),
            ("flops_reduction", repr(1 - flops / p_flops)),
        ]
    for k, v in rows:
        print(f"{k:>18}: {v}")
    if args.out_dir:
        out = _out_dir(args)
        csv_text = "key,value\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n"
        _write_output(out, "report.csv", csv_text, manifest)
        manifest.write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = RunManifest("eval", args)
    spec = _load_spec(args.spec, manifest)
    weights = _load_weights(args.weights, spec, manifest)
    dataset = _load_dataset(args.dataset, manifest)
    if len(dataset) == 0:
        raise CliError("dataset is empty")

    logits_rows = []
    correct = 0
    per_class = np.zeros((spec.num_classes, 2), dtype=np.int64)  # (correct, total)
    batch = 256
    for start in range(0, len(dataset), batch):
        xb = dataset.images[start:start + batch]
        yb = dataset.labels[start:start + batch]
        logits = engine.model_forward_batch(spec, weights, xb)
        pred = logits.argmax(axis=1)
        correct += int((pred == yb).sum())
        for label, ok in zip(yb, pred == yb):
            per_class[label, 0] += int(ok)
            per_class[label, 1] += 1
        if args.logits_out:
            for label, row in zip(yb, logits):
                logits_rows.append(
                    str(int(label)) + "," + ",".join(repr(float(v)) for v in row)
                )

    acc = correct / len(dataset)
    print(f"accuracy: {acc:.6f} ({correct}/{len(dataset)})")
    for c in range(spec.num_classes):
        ok, total = per_class[c]
        if total:
            print(f"  class {c}: {ok / total:.6f} ({ok}/{total})")
    if args.logits_out:
        header = "label," + ",".join(f"logit{i}" for i in range(spec.num_classes))
        Path(args.logits_out).write_text(header + "\n" + "\n".join(logits_rows) + "\n")
    if args.out_dir:
        out = _out_dir(args)
        _write_output(out, "eval_report.csv",
                      f"key,value\naccuracy,{acc!r}\nsamples,{len(dataset)}\n",
                      manifest)
        manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convmod",
        description="Per-class CNN modularization via genetic kernel-group "
                    "search, plus module patching of weak models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=False, out_required=True):
        p.add_argument("--config", help="key=value file supplying flag defaults")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", required=out_required,
                       help="directory for outputs and the run manifest")

    p = sub.add_parser("train", help="train a model (or a weak variant) from scratch")
    p.add_argument("--spec", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--weak", choices=["simple", "underfit", "overfit"],
                   help="weak-model recipe: shallow spec / half epochs / "
                        "regularization tricks disabled")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze",
                       help="kernel importance, grouping, and layer sensitivity")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--train-dataset", required=True)
    p.add_argument("--val-dataset", required=True)
    p.add_argument("--grouping", choices=["importance", "random", "none"],
                   default="importance")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--sample-cap", type=int, default=grouping_mod.DEFAULT_SAMPLE_CAP)
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("modularize", help="search one module per class")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--train-dataset", required=True)
    p.add_argument("--val-dataset", required=True)
    p.add_argument("--analysis", help="directory with cached analyze outputs")
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--parents", type=int, default=50)
    p.add_argument("--mutation-prob", type=float, default=0.1)
    p.add_argument("--generations", type=int, default=200)
    p.add_argument("--beam", type=int, default=100)
    p.add_argument("--acc-weight", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--init", choices=["sensitivity", "random"], default="sensitivity")
    p.add_argument("--grouping", choices=["importance", "random", "none"],
                   default="importance")
    p.add_argument("--no-pruning", action="store_true",
                   help="evaluate every full composition (budget-guarded)")
    p.add_argument("--exhaustive-budget", type=int, default=1_000_000)
    common(p, threads=True)
    p.set_defaults(func=cmd_modularize)

    p = sub.add_parser("patch", help="compose a weak model with one module")
    p.add_argument("--weak-spec", required=True)
    p.add_argument("--weak-weights", required=True)
    p.add_argument("--module-spec", required=True)
    p.add_argument("--module-weights", required=True)
    p.add_argument("--tc", type=int, required=True, help="target class to patch")
    p.add_argument("--train-dataset", required=True,
                   help="calibration data (module's class-TC logit range)")
    p.add_argument("--test-dataset", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("report", help="kernel counts, FLOPs, reduction vs parent")
    p.add_argument("--spec", required=True)
    p.add_argument("--parent-spec")
    common(p, seed=False, out_required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="accuracy of a model/module on a dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--logits-out", help="write per-sample logits CSV here")
    common(p, seed=False, out_required=False)
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config file values fill in flags left at their defaults; flags win."""
    if not getattr(args, "config", None):
        return
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {args.config}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{args.config}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise CliError(f"{args.config}:{lineno}: unknown key {key!r}")
        if getattr(args, dest) != parser.get_default(dest) and dest != "config":
            continue  # flag was given explicitly
        current = parser.get_default(dest)
        if isinstance(current, bool):
            parsed = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        else:
            parsed = value
        setattr(args, dest, parsed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, args_parser_for(parser, args.command))
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def args_parser_for(parser: argparse.ArgumentParser, command: str):
    """The subparser owning a command's defaults (for config-file merging)."""
    for action in parser._actions:  # noqa: SLF001 - argparse offers no public hook
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise CliError(f"unknown command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
