"""Command-line entry point: ``tabmeta {pretrain,predict,finetune,eval}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import CLASSIFICATION, SplitIndices, encode, fit_encoder, load_schema, load_table
from .errors import ConfigError, CorruptCheckpoint, DataError, EmptyContext, TabMetaError
from .evalbench import METHODS, build_corpus, check_methods, make_synthetic_corpus, run_protocol
from .metric import MiConfig, metric_specs
from .trainer import (
    TrainConfig,
    TrainHistory,
    config_for_checkpoint,
    finetune,
    load_checkpoint,
    make_member,
    predict_batch,
    pretrain,
    read_config_file,
    save_checkpoint,
    training_loss,
)

log = logging.getLogger("tabmeta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

_DEFAULTS = TrainConfig()

# (flag, TrainConfig field, type, help)
_CONFIG_FLAGS = [
    ("--K", "K", int, "neighbors per context (default: 128 classification, 16 regression)"),
    ("--kinds", "kinds", str, "comma-separated distance kinds (default: manhattan,euclidean,braycurtis "
                              "for classification, manhattan for regression)"),
    ("--hidden-width", "hidden_width", int, f"scorer hidden width (default: {_DEFAULTS.hidden_width})"),
    ("--depth", "depth", int, f"number of hidden blocks (default: {_DEFAULTS.depth})"),
    ("--dropout", "dropout", float, f"dropout rate (default: {_DEFAULTS.dropout})"),
    ("--batch-size", "batch_size", int, f"mini-batch size (default: {_DEFAULTS.batch_size})"),
    ("--optimizer", "optimizer", str, f"adam or sgd (default: {_DEFAULTS.optimizer})"),
    ("--self-exclude", "self_exclude", str, "exclude each training row from its own neighborhood, "
                                            f"true/false (default: {str(_DEFAULTS.self_exclude).lower()})"),
    ("--normalize-meta", "normalize_meta", str, "divide distances by the per-instance maximum, "
                                                f"true/false (default: {str(_DEFAULTS.normalize_meta).lower()})"),
    ("--mi-bins", "mi_bins", int, f"quantile bins of the MI estimator (default: {_DEFAULTS.mi_bins})"),
    ("--dtype", "dtype", str, f"float32 or float64 training arithmetic (default: {_DEFAULTS.dtype})"),
]

_PRETRAIN_FLAGS = [
    ("--iters", "pretrain_iters", int, f"pre-training iterations (default: {_DEFAULTS.pretrain_iters})"),
    ("--pretrain-lr", "pretrain_lr", float, f"pre-training learning rate (default: {_DEFAULTS.pretrain_lr})"),
    ("--eval-every", "eval_every", int, f"iterations between validation checks (default: {_DEFAULTS.eval_every})"),
    ("--patience", "patience", int, "validation checks without improvement before stopping, 0 disables "
                                    f"(default: {_DEFAULTS.patience})"),
]

_FINETUNE_FLAGS = [
    ("--epochs", "finetune_epochs", int, f"fine-tuning epochs (default: {_DEFAULTS.finetune_epochs})"),
    ("--lr", "finetune_lr", float, f"fine-tuning learning rate (default: {_DEFAULTS.finetune_lr})"),
    ("--mode", "finetune_mode", str, f"all or head-only (default: {_DEFAULTS.finetune_mode})"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_flags(p, table):
    for flag, dest, typ, text in table:
        p.add_argument(flag, dest=f"cfg_{dest}", metavar=dest.upper(), type=typ, default=None, help=text)


def _common(p):
    p.add_argument("--config", default=None, help="flat key = value file with TrainConfig fields (default: none)")
    p.add_argument("--seed", type=int, default=0, help="master seed for every random component (default: 0)")
    p.add_argument("--manifest", default=None, help="run manifest path (default: <output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabmeta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tabmeta {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: all available cores)")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    parser.add_argument("--replay", default=None, metavar="MANIFEST",
                        help="re-run the command recorded in a manifest (default: none)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("pretrain", help="pre-train a shared scorer over several datasets")
    p.add_argument("--task", required=True, choices=("classification", "regression"), help="task kind (required)")
    p.add_argument("--data", action="append", default=[], metavar="CSV:SCHEMA",
                   help="training dataset as csv path and JSON schema path, repeatable (default: none)")
    p.add_argument("--synthetic", default=None, metavar="SPEC",
                   help="synthetic corpus, e.g. T=8 or T=8,dims=4-20,classes=2-5,sizes=500-2000 (default: none)")
    p.add_argument("--out", required=True, help="checkpoint output path (required)")
    _common(p)
    _add_flags(p, _CONFIG_FLAGS + _PRETRAIN_FLAGS)

    p = sub.add_parser("predict", help="apply a checkpoint to a downstream dataset without training")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (required)")
    p.add_argument("--schema", required=True, help="downstream JSON schema (required)")
    p.add_argument("--train", required=True, help="labeled downstream CSV used as the reference set (required)")
    p.add_argument("--query", required=True, help="CSV of rows to predict; the label column is optional (required)")
    p.add_argument("--out", required=True, help="predictions CSV path (required)")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a downstream dataset")
    p.add_argument("--checkpoint", required=True, help="input checkpoint (required)")
    p.add_argument("--schema", required=True, help="downstream JSON schema (required)")
    p.add_argument("--train", required=True, help="labeled downstream training CSV (required)")
    p.add_argument("--out", required=True, help="output checkpoint path (required)")
    _common(p)
    _add_flags(p, _FINETUNE_FLAGS + [f for f in _CONFIG_FLAGS if f[1] in ("batch_size", "optimizer",
                                                                           "self_exclude", "mi_bins", "dtype")])

    p = sub.add_parser("eval", help="run the evaluation protocol and write a ranked report")
    p.add_argument("--task", required=True, choices=("classification", "regression"), help="task kind (required)")
    p.add_argument("--methods", default="metarep-direct,knn-uniform,knn-softmax",
                   help=f"comma-separated methods from: {', '.join(METHODS)} "
                        "(default: metarep-direct,knn-uniform,knn-softmax)")
    p.add_argument("--shots", default=None, help="comma-separated shots per class, e.g. 4,8,16,32,64 "
                                                 "(default: full-shot)")
    p.add_argument("--seeds", type=int, default=3, help="number of split seeds (default: 3)")
    p.add_argument("--repeats", type=int, default=5, help="few-shot repetitions per shot setting (default: 5)")
    p.add_argument("--knn-k", type=int, default=None, help="K of the kNN baselines (default: the scorer's K)")
    p.add_argument("--checkpoint", default=None, help="pre-trained checkpoint (default: pre-train first)")
    p.add_argument("--synthetic", default=None, metavar="SPEC",
                   help="synthetic pre-training corpus and held-out tasks, e.g. T=8,heldout=2 (default: none)")
    p.add_argument("--data", action="append", default=[], metavar="CSV:SCHEMA",
                   help="pre-training dataset, repeatable (default: none)")
    p.add_argument("--downstream", action="append", default=[], metavar="CSV:SCHEMA",
                   help="downstream dataset, repeatable (default: none)")
    p.add_argument("--out-dir", required=True, help="directory for report.csv and summary.json (required)")
    _common(p)
    _add_flags(p, _CONFIG_FLAGS + _PRETRAIN_FLAGS + _FINETUNE_FLAGS)
    return parser


def derive_seeds(seed: int) -> dict[str, int]:
    """Fixed expansion of the master seed into per-component seeds."""
    state = np.random.SeedSequence(seed).generate_state(4)
    return {"corpus": int(state[0]), "split": int(state[1]), "train": int(state[2]), "finetune": int(state[3])}


def _resolve_config(args, task: str, base: TrainConfig | None = None) -> TrainConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            values[key[4:]] = value
    values["task"] = task
    return TrainConfig.from_mapping(values, base=base)


def _parse_pairs(items) -> list[tuple[str, str]]:
    pairs = []
    for item in items:
        if ":" not in item:
            raise ConfigError(f"expected CSV:SCHEMA, got {item!r}")
        csv_path, schema_path = item.rsplit(":", 1)
        pairs.append((csv_path, schema_path))
    return pairs


def _parse_synthetic(text: str) -> dict:
    out = {"T": 8, "heldout": 2, "dims": (4, 20), "classes": (2, 5), "sizes": (500, 2000)}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ConfigError(f"synthetic spec item {part!r} must be key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        try:
            if key in ("T", "heldout"):
                out[key] = int(value)
            elif key in ("dims", "classes", "sizes"):
                lo, hi = value.split("-")
                out[key] = (int(lo), int(hi))
            else:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
        except ValueError:
            raise ConfigError(f"cannot parse synthetic spec item {part!r}") from None
    return out


def _load_tables(pairs, task: str | None = None):
    tables = []
    for csv_path, schema_path in pairs:
        schema = load_schema(schema_path)
        if task is not None and schema.task != task:
            raise ConfigError(f"{schema_path}: schema task {schema.task} does not match --task {task}")
        tables.append(load_table(csv_path, schema))
    return tables


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(args, argv, cfg, inputs, outputs, seeds, timings, extra=None):
    target = Path(args.manifest) if args.manifest else Path(str(outputs["primary"]) + ".manifest.json")
    doc = {
        "command": args.command,
        "argv": list(argv),
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": inputs,
        "seeds": seeds,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings_seconds": timings,
    }
    if extra:
        doc.update(extra)
    _write_atomic(target, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


def cmd_pretrain(args, argv) -> int:
    t0 = time.perf_counter()
    seeds = derive_seeds(args.seed)
    cfg = _resolve_config(args, args.task)
    cfg = dataclasses.replace(cfg, seed=seeds["train"])
    if bool(args.data) == bool(args.synthetic):
        raise ConfigError("give either --data CSV:SCHEMA (repeatable) or --synthetic SPEC")
    if args.synthetic:
        spec = _parse_synthetic(args.synthetic)
        suite = make_synthetic_corpus(cfg.task, spec["T"], seeds["corpus"], spec["dims"], spec["classes"],
                                      spec["sizes"], heldout=0)
        tables = suite.pretrain_tables
    else:
        tables = _load_tables(_parse_pairs(args.data), cfg.task)
    corpus = build_corpus(tables, cfg, split_seed=seeds["split"])
    t1 = time.perf_counter()
    history = TrainHistory()
    params = pretrain(corpus, cfg, history=history)
    t2 = time.perf_counter()
    save_checkpoint(params, cfg, args.out)
    tail = history.losses[-100:]
    final = float(np.mean(tail)) if tail else float("nan")
    print(f"pretrained on {len(corpus)} datasets, {len(history.losses)} iterations, "
          f"final train loss {final:.6f} -> {args.out}")
    _write_manifest(args, argv, cfg, {"data": args.data, "synthetic": args.synthetic},
                    {"primary": args.out, "checkpoint": args.out}, seeds,
                    {"prepare": t1 - t0, "pretrain": t2 - t1, "total": time.perf_counter() - t0},
                    {"final_train_loss": final, "iterations": len(history.losses)})
    return EXIT_OK


def _downstream(args, ckpt):
    schema = load_schema(args.schema)
    if schema.task != ckpt.task:
        raise ConfigError(f"checkpoint is for {ckpt.task} but schema {schema.name!r} is {schema.task}")
    train_raw = load_table(args.train, schema)
    stats = fit_encoder(train_raw)
    return schema, train_raw, stats, encode(train_raw, stats)


def cmd_predict(args, argv) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_for_checkpoint(ckpt)
    schema, _, stats, ds = _downstream(args, ckpt)
    query = encode(load_table(args.query, schema, require_label=False), stats)
    specs = metric_specs(ds.X, ds.Y, ds.task, cfg.kind_list, MiConfig(bins=cfg.mi_bins))
    preds = predict_batch(ckpt.params, ds, np.arange(ds.n), specs, cfg, query.X)
    lines = ["prediction"]
    if schema.task == CLASSIFICATION:
        lines += [stats.label_levels[int(p)] for p in preds]
    else:
        lines += [repr(float(p)) for p in preds]
    buf = []
    writer = csv.writer(_ListWriter(buf), lineterminator="\n")
    for line in lines:
        writer.writerow([line])
    _write_atomic(Path(args.out), "".join(buf))
    print(f"wrote {len(preds)} predictions -> {args.out}")
    _write_manifest(args, argv, cfg, {"checkpoint": args.checkpoint, "schema": args.schema,
                                      "train": args.train, "query": args.query},
                    {"primary": args.out, "predictions": args.out}, {}, {"total": time.perf_counter() - t0})
    return EXIT_OK


class _ListWriter:
    def __init__(self, buf):
        self.buf = buf

    def write(self, s):
        self.buf.append(s)


def cmd_finetune(args, argv) -> int:
    t0 = time.perf_counter()
    seeds = derive_seeds(args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_for_checkpoint(ckpt, base=_resolve_config(args, ckpt.task))
    cfg = dataclasses.replace(cfg, seed=seeds["finetune"])
    _, _, _, ds = _downstream(args, ckpt)
    rows = np.arange(ds.n)
    member = make_member(ds, SplitIndices(rows, rows[:0], rows[:0]), cfg.kind_list, cfg.mi_bins)
    tuned = finetune(ckpt.params, member, cfg)
    loss = training_loss(tuned, member, cfg)
    # metrics are refit at predict time; keeping the input ones makes --epochs 0 a byte-exact copy
    save_checkpoint(tuned, cfg, args.out, specs=ckpt.specs)
    print(f"fine-tuned {cfg.finetune_epochs} epochs ({cfg.finetune_mode}), final train loss {loss:.6f} -> {args.out}")
    _write_manifest(args, argv, cfg, {"checkpoint": args.checkpoint, "schema": args.schema, "train": args.train},
                    {"primary": args.out, "checkpoint": args.out}, seeds, {"total": time.perf_counter() - t0},
                    {"final_train_loss": loss})
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    seeds = derive_seeds(args.seed)
    methods = check_methods([m.strip() for m in args.methods.split(",") if m.strip()])
    shots = None
    if args.shots:
        try:
            shots = [int(s) for s in args.shots.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse --shots {args.shots!r}") from None
    params = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.task != args.task:
            raise ConfigError(f"checkpoint is for {ckpt.task}, --task is {args.task}")
        params = ckpt.params
        cfg = config_for_checkpoint(ckpt, base=_resolve_config(args, args.task))
    else:
        cfg = _resolve_config(args, args.task)
    cfg = dataclasses.replace(cfg, seed=seeds["train"])

    corpus, downstream = None, []
    if args.synthetic:
        spec = _parse_synthetic(args.synthetic)
        suite = make_synthetic_corpus(cfg.task, spec["T"], seeds["corpus"], spec["dims"], spec["classes"],
                                      spec["sizes"], heldout=spec["heldout"])
        downstream.extend(suite.heldout)
        if params is None and any(m.startswith("metarep") for m in methods):
            corpus = build_corpus(suite.pretrain_tables, cfg, split_seed=seeds["split"])
    if args.data and params is None:
        corpus = build_corpus(_load_tables(_parse_pairs(args.data), cfg.task), cfg, split_seed=seeds["split"])
    downstream.extend(_load_tables(_parse_pairs(args.downstream), cfg.task))
    if not downstream:
        raise ConfigError("no downstream datasets: use --synthetic or --downstream")

    split_seeds = [int(s) for s in np.random.SeedSequence(seeds["split"]).generate_state(args.seeds)]
    report = run_protocol(corpus, downstream, methods, cfg, shots=shots, seeds=split_seeds, params=params,
                          repeats=args.repeats, knn_k=args.knn_k)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "summary.json")
    for method, rank in report.average_ranks().items():
        print(f"{method:20s} average rank {rank:.3f}")
    _write_manifest(args, argv, cfg, {"checkpoint": args.checkpoint, "synthetic": args.synthetic,
                                      "data": args.data, "downstream": args.downstream},
                    {"primary": out_dir / "report", "report_csv": out_dir / "report.csv",
                     "summary_json": out_dir / "summary.json"},
                    {**seeds, "protocol": split_seeds}, {"total": time.perf_counter() - t0})
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "predict": cmd_predict, "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.replay:
        try:
            with open(args.replay, encoding="utf-8") as fh:
                recorded = json.load(fh)["argv"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"tabmeta: error: cannot replay {args.replay}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return main(recorded)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("tabmeta: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, argv)
    except (ConfigError, CorruptCheckpoint) as exc:
        print(f"tabmeta {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptyContext) as exc:
        # an empty class context comes from the user's table, not from the code
        print(f"tabmeta {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TabMetaError as exc:
        print(f"tabmeta {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 4
        log.debug("internal error", exc_info=True)
        print(f"tabmeta {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
