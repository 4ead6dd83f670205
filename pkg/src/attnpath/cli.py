"""Batch command-line driver: train, distill, explain, report.

Stages communicate only through files (dataset caches, checkpoints,
manifests, explanation interchange files), so each stage can be re-run
or inspected in isolation.  Every command is deterministic given its
flags: re-running produces byte-identical outputs.  Exit codes: 0
success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import analysis as an, attngraph, data as dt, explainers as ex, training as tr
from .errors import (AlignmentError, AttnPathError, ConfigError, DataError,
                     NoPathError, NumericError, SchemaError, ValidationError)
from .model import ConceptTransformer, ModelConfig

OUTPUT_ROOT_ENV = "ATTNPATH_OUTPUT_ROOT"


def _default_out_dir(command: str) -> str:
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_dataset(args) -> tuple[dt.TabularDataset, "object"]:
    kind = args.dataset
    if kind == "synth":
        return dt.synth_planted(
            n=args.synth_samples, m=args.synth_groups,
            k_per_group=args.synth_features_per_group,
            informative_group=args.synth_informative, noise=args.synth_noise,
            seed=args.seed,
        )
    if args.data in (None, "synth"):
        raise ConfigError(f"--dataset {kind} requires --data PATH")
    if not os.path.exists(args.data):
        raise DataError(f"data file not found: {args.data}")
    if kind == "csv":
        if not args.group_config:
            raise ConfigError("--dataset csv requires --group-config")
        return dt.load_csv(args.data, args.group_config, seed=args.seed,
                           train_fraction=args.train_fraction,
                           val_fraction=args.val_fraction)
    if kind == "covertype":
        return dt.covertype_prepare(args.data, seed=args.seed,
                                    train_fraction=args.train_fraction,
                                    val_fraction=args.val_fraction,
                                    max_samples=args.max_samples)
    if kind == "kdd99":
        return dt.ni_prepare(args.data, class_map=args.class_map, seed=args.seed,
                             train_fraction=args.train_fraction,
                             val_fraction=args.val_fraction,
                             max_samples=args.max_samples)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def cmd_train(args) -> int:
    dataset, schema = _load_dataset(args)
    model_config = ModelConfig(
        num_layers=args.layers, num_heads=args.heads, latent_dim=args.latent_dim,
        ff_dim=args.ff_dim, dropout=args.dropout, num_classes=dataset.num_classes,
    )
    train_config = tr.TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.learning_rate,
        seed=args.seed, metric=args.metric, patience=args.patience,
    )
    model, record = tr.train_teacher(dataset, schema, model_config, train_config)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    dataset.to_cache(os.path.join(out, "dataset.npz"))
    model.save(os.path.join(out, "teacher.json"))
    record.checkpoint_path = "teacher.json"
    record.to_manifest(os.path.join(out, "teacher.manifest.json"))
    best = record.best_val_metric
    print(f"teacher: {record.epochs_run} epochs, best {record.metric_name}={best:.4f}")
    print(f"wrote {out}/teacher.json")
    return 0


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------


def _distill_one(teacher_path: str, data_path: str, student_cfg_obj: dict,
                 train_cfg_obj: dict, out_dir: str) -> str:
    """Worker: one student run from immutable input files; returns stem."""
    teacher = ConceptTransformer.load(teacher_path)
    dataset = dt.TabularDataset.from_cache(data_path)
    student_config = ModelConfig.from_json_obj(student_cfg_obj)
    train_config = tr.TrainConfig.from_json_obj(train_cfg_obj)
    model, record = tr.distill_student(dataset, teacher, student_config, train_config)
    stem = f"student_seed{train_config.seed}"
    model.save(os.path.join(out_dir, stem + ".json"))
    record.checkpoint_path = stem + ".json"
    record.to_manifest(os.path.join(out_dir, stem + ".manifest.json"))
    return stem


def cmd_distill(args) -> int:
    if not os.path.exists(args.teacher):
        raise DataError(f"teacher checkpoint not found: {args.teacher}")
    if not os.path.exists(args.data):
        raise DataError(f"dataset cache not found: {args.data}")
    teacher = ConceptTransformer.load(args.teacher)
    dataset = dt.TabularDataset.from_cache(args.data)
    student_config = ModelConfig(
        num_layers=args.student_layers, num_heads=args.student_heads,
        latent_dim=teacher.config.latent_dim, ff_dim=teacher.config.ff_dim,
        dropout=args.dropout, num_classes=teacher.config.num_classes,
    )
    seeds = args.seeds
    out = args.out_dir
    os.makedirs(out, exist_ok=True)

    lam = args.lam
    if args.lambda_sweep:
        sweep_cfg = tr.TrainConfig(
            batch_size=args.batch_size, epochs=args.epochs,
            learning_rate=args.learning_rate, temperature=args.temperature,
            seed=seeds[0], metric=args.metric, patience=args.patience,
        )
        selection = tr.select_lambda(dataset, teacher, student_config, sweep_cfg,
                                     args.lambda_sweep)
        lam = selection.best_lambda
        sweep = {
            "candidates": sorted(args.lambda_sweep),
            "best_lambda": lam,
            "metric": {repr(l): r.best_val_metric for l, r in selection.records.items()},
        }
        with open(os.path.join(out, "lambda_sweep.json"), "w") as fh:
            json.dump(sweep, fh, sort_keys=True, indent=1)
        print(f"lambda sweep over {sweep['candidates']} -> {lam}")

    jobs = []
    for seed in seeds:
        train_cfg = tr.TrainConfig(
            batch_size=args.batch_size, epochs=args.epochs,
            learning_rate=args.learning_rate, temperature=args.temperature, lam=lam,
            seed=seed, metric=args.metric, patience=args.patience,
        )
        jobs.append((args.teacher, args.data, student_config.to_json_obj(),
                     train_cfg.to_json_obj(), out))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            stems = list(pool.map(_distill_one_star, jobs))
    else:
        stems = [_distill_one(*job) for job in jobs]
    for stem in stems:
        print(f"wrote {out}/{stem}.json")
    return 0


def _distill_one_star(job) -> str:
    return _distill_one(*job)


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------


def _explain_one(student_path: str, data_path: str, method: str, k: int, split: str,
                 shap_budget: int, background_size: int, seed: int,
                 sample_id: int | None, out_dir: str) -> str:
    model = ConceptTransformer.load(student_path)
    dataset = dt.TabularDataset.from_cache(data_path)
    explanations = ex.explain_batch(model, dataset, method, k=k, split=split,
                                    shap_budget=shap_budget,
                                    background_size=background_size, seed=seed)
    if sample_id is not None:
        explanations = [e for e in explanations if e.sample_id == sample_id]
        if not explanations:
            raise DataError(f"sample {sample_id} is not in the {split!r} split")
    run_seed = model.train_seed if model.train_seed is not None else 0
    dataset_id = os.path.splitext(os.path.basename(data_path))[0]
    name = f"explanations_{method}_seed{run_seed}.jsonl"
    ex.write_explanations(os.path.join(out_dir, name), explanations,
                          dataset_id=dataset_id, method=method, seed=run_seed,
                          group_names=model.schema.names, k=k)
    if sample_id is not None:
        _dump_sample_artifacts(model, dataset, explanations[0], method, out_dir)
    return name


def _dump_sample_artifacts(model: ConceptTransformer, dataset: dt.TabularDataset,
                           explanation: ex.Explanation, method: str, out_dir: str) -> None:
    """Per-sample extras: the attention DAG as text plus method heatmaps."""
    sid = explanation.sample_id
    stack = model.predict(dataset.features[sid]).stacks[0]
    dag_path = os.path.join(out_dir, f"sample{sid}_dag.txt")
    with open(dag_path, "w") as fh:
        fh.write(attngraph.format_dag(attngraph.build_dag(stack)))
    if explanation.heatmap is not None:
        obj = {
            "sample_id": sid,
            "method": method,
            "heatmap": [[float(v) for v in row] for row in explanation.heatmap],
            "heatmap_scaled": [[float(v) for v in row]
                               for row in attngraph.scale_unit(explanation.heatmap)],
        }
        with open(os.path.join(out_dir, f"sample{sid}_heatmap_{method}.json"), "w") as fh:
            json.dump(obj, fh, sort_keys=True, indent=1)


def cmd_explain(args) -> int:
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ex.METHODS:
            raise ConfigError(f"unknown method {m!r}; valid: {', '.join(ex.METHODS)}")
    if not methods:
        raise ConfigError("no methods given")
    for student in args.student:
        if not os.path.exists(student):
            raise DataError(f"student checkpoint not found: {student}")
    if not os.path.exists(args.data):
        raise DataError(f"dataset cache not found: {args.data}")
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    jobs = [(student, args.data, method, args.k, args.split, args.shap_budget,
             args.background_size, args.seed, args.sample_id, out)
            for student in args.student for method in methods]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            names = list(pool.map(_explain_one_star, jobs))
    else:
        names = [_explain_one(*job) for job in jobs]
    for name in names:
        print(f"wrote {out}/{name}")
    return 0


def _explain_one_star(job) -> str:
    return _explain_one(*job)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    for path in args.explanations:
        if not os.path.exists(path):
            raise DataError(f"explanation file not found: {path}")
    sets = [an.ExplanationSet.load(path) for path in args.explanations]
    report = an.run_full_analysis(sets, pairing=args.pairing)
    written = an.emit_report(report, args.out_dir)
    for name in written:
        print(f"wrote {args.out_dir}/{name}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnpath",
        description="Train concept-grouped tabular transformers and explain "
                    "their predictions via attention-path analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a multi-head teacher")
    p.add_argument("--data", default="synth", help="data file path, or 'synth'")
    p.add_argument("--dataset", default="synth",
                   choices=["synth", "csv", "covertype", "kdd99"])
    p.add_argument("--group-config", default=None, help="group config JSON (csv only)")
    p.add_argument("--class-map", default=None, help="class aggregation JSON (kdd99 only)")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--latent-dim", type=int, default=64)
    p.add_argument("--ff-dim", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--metric", default="f1_macro", choices=["f1_macro", "accuracy"])
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--max-samples", type=int, default=None,
                   help="stratified subsample size (covertype/kdd99)")
    p.add_argument("--synth-samples", type=int, default=2000)
    p.add_argument("--synth-groups", type=int, default=4)
    p.add_argument("--synth-features-per-group", type=int, default=3)
    p.add_argument("--synth-informative", type=int, default=0)
    p.add_argument("--synth-noise", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a single-head student")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", required=True, help="dataset cache from train")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="attention entropy penalty weight")
    p.add_argument("--lambda-sweep", type=_float_list, default=None,
                   help="comma-separated candidates; picks the best by validation metric")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--student-layers", type=int, default=4)
    p.add_argument("--student-heads", type=int, default=1)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--seeds", type=_int_list, default=[0],
                   help="comma-separated seeds; one student per seed")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--metric", default="f1_macro", choices=["f1_macro", "accuracy"])
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("explain", help="run explanation methods over a split")
    p.add_argument("--student", action="append", required=True,
                   help="student checkpoint; repeat for several runs")
    p.add_argument("--data", required=True, help="dataset cache from train")
    p.add_argument("--methods", default="mla,ll,sa,sh")
    p.add_argument("--k", type=int, default=2, help="ranked best groups per sample")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--shap-budget", type=int, default=200)
    p.add_argument("--background-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="SH sampling seed")
    p.add_argument("--sample-id", type=int, default=None,
                   help="restrict to one sample and dump its DAG and heatmaps")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="aggregate explanation files into tables")
    p.add_argument("--explanations", nargs="+", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--pairing", default="seed", choices=["seed", "cross"])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "out_dir", None) is None and hasattr(args, "out_dir"):
        args.out_dir = _default_out_dir(args.command)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, SchemaError, NoPathError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except AttnPathError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
