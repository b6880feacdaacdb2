"""Command-line entry point: ``gcpkge {train,eval,export,stats,gradcheck,rank-sweep}``.

Results go to stdout, telemetry to stderr.  Exit codes: 0 success,
1 usage/config error, 2 runtime error, 3 gradcheck tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data_io import (
    DatasetFormatError,
    UnseenLabelError,
    ArtifactError,
    dataset_stats,
    export_tsv,
    file_digest,
    labels_digest,
    load_dataset_dir,
    load_labels,
    load_model,
    save_model,
)
from .evaluator import evaluate
from .oracles import gradcheck
from .trainer import ConfigError, TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
RUN_KEYS = ("dataset", "unseen")

log = logging.getLogger("gcpkge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config handling ------------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    if errors:
        raise ConfigError(errors)
    return values


def resolve_config(config_path=None, overrides=(), flags=None):
    """Merge file values, ``--set`` overrides and dedicated flags (in that order).

    Returns ``(TrainConfig, run_options)``; all problems are reported together.
    """
    values = {}
    base_dir = Path(".")
    if config_path:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError([f"config file {config_path} not found"])
        values.update(parse_config_text(config_path.read_text(), str(config_path)))
        base_dir = config_path.parent
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"--set expects key=value, got {item!r}")
            continue
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = value
    run = {k: values.pop(k) for k in RUN_KEYS if k in values}
    if "dataset" in run and config_path and not Path(run["dataset"]).is_absolute() \
            and not (flags or {}).get("dataset"):
        run["dataset"] = str(base_dir / run["dataset"])
    try:
        config = TrainConfig.from_mapping(values)
    except ConfigError as exc:
        errors += exc.errors
        config = None
    if config is not None:
        try:
            config.validate()
        except ConfigError as exc:
            errors += exc.errors
    if errors:
        raise ConfigError(errors)
    return config, run


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _emit(record: dict, json_lines: bool, stream=None) -> None:
    stream = stream or sys.stdout
    if json_lines:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
    else:
        stream.write(" ".join(f"{k}={v}" for k, v in record.items()) + "\n")
    stream.flush()


# -- subcommands -------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        config = TrainConfig.from_mapping(manifest["config"]).validate()
        run = {"dataset": manifest["dataset"]["path"], "unseen": manifest["dataset"]["unseen"]}
    else:
        flags = {"n_epochs": args.epochs, "seed": args.seed, "rank": args.rank,
                 "learning_rate": args.lr, "dataset": args.dataset}
        if args.deterministic:
            flags["deterministic"] = "true"
        config, run = resolve_config(args.config, args.set, flags)
    if "dataset" not in run:
        raise ConfigError(["no dataset given (use --dataset or 'dataset = ...' in the config)"])
    out = Path(args.out)
    _prepare_out(out, args.force)

    started = datetime.now(timezone.utc).isoformat()
    bundle = load_dataset_dir(run["dataset"], unseen=run.get("unseen", "extend"))
    known = [bundle.train, bundle.valid, bundle.test]
    (out / "checkpoints").mkdir(exist_ok=True)
    telemetry = open(out / "telemetry.jsonl", "w")
    records, valid_mrr = [], {}
    best = {"mrr": -1.0, "epoch": None}
    peak = 0

    def on_epoch(record, model):
        nonlocal peak
        rec = record.as_dict()
        peak = max(peak, record.peak_transient_bytes)
        save_model(model, config, out / "checkpoints" / "last.kge", bundle.entities, bundle.relations)
        if args.validate_every and (record.epoch + 1) % args.validate_every == 0 and len(bundle.valid):
            rep = evaluate(model, bundle.valid, known, "filtered", "both")
            rec["valid_mrr"] = rep.mrr
            valid_mrr[record.epoch] = rep.mrr
            if rep.mrr > best["mrr"]:
                best.update(mrr=rep.mrr, epoch=record.epoch)
                save_model(model, config, out / "checkpoints" / "best.kge", bundle.entities,
                           bundle.relations)
        records.append(rec)
        telemetry.write(json.dumps(rec, sort_keys=True) + "\n")
        telemetry.flush()
        _emit(rec, args.json_lines, sys.stderr)

    try:
        model = train(bundle.train, config, [on_epoch])
    finally:
        telemetry.close()
    artifact = save_model(model, config, out / "model.kge", bundle.entities, bundle.relations)
    if args.figures and records:
        from .plotting import plot_training_curve
        plot_training_curve(records, out / "figures" / "training.png", valid_mrr)

    manifest = {
        "config": {k: str(v).lower() if isinstance(v, bool) else v
                   for k, v in vars(config).items()},
        "config_digest": config.digest().hex(),
        "dataset": {
            "path": str(Path(run["dataset"]).resolve()),
            "unseen": run.get("unseen", "extend"),
            "digests": bundle.provenance["digests"],
        },
        "seed": config.seed,
        "code_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "epochs_trained": len(records),
        "trained": len(records) > 0,
        "peak_transient_bytes": peak,
        "final_metrics": {
            "loss": records[-1]["loss"] if records else None,
            "mean_loss": records[-1]["mean_loss"] if records else None,
            "best_valid_mrr": best["mrr"] if best["epoch"] is not None else None,
            "best_valid_epoch": best["epoch"],
        },
        "artifact": {"path": str(artifact), "sha256": file_digest(artifact)},
    }
    _write_json_atomic(out / "manifest.json", manifest)
    _emit({"artifact": str(artifact), "sha256": manifest["artifact"]["sha256"],
           "epochs_trained": len(records)}, args.json_lines)
    return EXIT_OK


def _check_vocab(model_path, model, bundle) -> None:
    ents, rels = load_labels(model_path)
    problems = []
    if ents is not None:
        a, b = labels_digest(ents), labels_digest(bundle.entities.labels)
        if a != b:
            problems.append(f"entity vocabulary mismatch: model {a[:16]} vs dataset {b[:16]}")
    if rels is not None:
        a, b = labels_digest(rels), labels_digest(bundle.relations.labels)
        if a != b:
            problems.append(f"relation vocabulary mismatch: model {a[:16]} vs dataset {b[:16]}")
    if (model.n_e, model.n_r) != (len(bundle.entities), len(bundle.relations)):
        problems.append(
            f"dimension mismatch: model ({model.n_e}, {model.n_r}) vs dataset "
            f"({len(bundle.entities)}, {len(bundle.relations)})"
        )
    if problems:
        raise ArtifactError("; ".join(problems))


def cmd_eval(args) -> int:
    model, _ = load_model(args.model)
    bundle = load_dataset_dir(args.dataset, unseen=args.unseen)
    _check_vocab(args.model, model, bundle)
    split = getattr(bundle, args.split)
    report = evaluate(model, split, [bundle.train, bundle.valid, bundle.test],
                      setting=args.setting, directions=args.directions)
    sys.stdout.write(report.to_json() + "\n" if args.json_lines else report.to_text())
    if args.figure:
        from .plotting import plot_eval_report
        plot_eval_report(report, args.figure)
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = load_model(args.model)
    ents, rels = load_labels(args.model)
    out = Path(args.out)
    _prepare_out(out, args.force)
    e, r = export_tsv(model, out, ents, rels)
    _emit({"entities": str(e), "relations": str(r)}, args.json_lines)
    return EXIT_OK


def cmd_stats(args) -> int:
    bundle = load_dataset_dir(args.dataset, unseen=args.unseen)
    stats = dataset_stats(bundle)
    if args.json_lines:
        sys.stdout.write(json.dumps(stats, sort_keys=True) + "\n")
    else:
        for k, v in stats.items():
            sys.stdout.write(f"{k}: {v}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 3:
        raise UsageError("--dims takes three comma-separated sizes, e.g. 20,5,20")
    if dims[0] * dims[1] * dims[2] * args.density > 1e5:
        raise UsageError("too many observed entries for a finite-difference check (max 1e5)")
    res = gradcheck(dims, args.rank, args.density, args.seed, args.family,
                    batch_size=args.batch_size)
    passed = res.passed(args.tol)
    rec = {"family": args.family, "dims": args.dims, "rank": args.rank,
           "n_observed": res.n_observed, "max_rel_error": res.max_rel_error}
    if res.dense_rel_error is not None:
        rec["dense_rel_error"] = res.dense_rel_error
    rec["result"] = "PASS" if passed else "FAIL"
    _emit(rec, args.json_lines)
    return EXIT_OK if passed else EXIT_GRADCHECK


def cmd_rank_sweep(args) -> int:
    flags = {"dataset": args.dataset, "n_epochs": args.epochs, "seed": args.seed}
    config, run = resolve_config(args.config, args.set, flags)
    if "dataset" not in run:
        raise ConfigError(["no dataset given"])
    out = Path(args.out)
    _prepare_out(out, args.force)
    bundle = load_dataset_dir(run["dataset"], unseen=run.get("unseen", "extend"))
    known = [bundle.train, bundle.valid, bundle.test]
    rows = []
    for rank in (int(r) for r in args.ranks.split(",")):
        t0 = time.perf_counter()
        model = train(bundle.train, config.replace(rank=rank))
        rep = evaluate(model, bundle.test, known, "filtered", args.directions)
        row = {"rank": rank, "mrr": rep.mrr, "hits1": rep.hits1, "hits3": rep.hits3,
               "hits10": rep.hits10, "seconds": round(time.perf_counter() - t0, 2)}
        rows.append(row)
        _emit(row, args.json_lines)
    with open(out / "ranks.tsv", "w") as fh:
        fh.write("\t".join(rows[0]) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row.values()) + "\n")
    from .plotting import plot_rank_sweep
    plot_rank_sweep(rows, out / "ranks.png")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcpkge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="factorize a dataset and write a .kge artifact")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--dataset", help="directory with train.txt, valid.txt, test.txt")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--validate-every", type=int, default=0, metavar="N")
    t.add_argument("--from-manifest", help="re-run the configuration recorded in a manifest")
    t.add_argument("--no-figures", dest="figures", action="store_false")
    t.add_argument("--force", action="store_true")
    t.add_argument("--json-lines", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="link-prediction metrics for a trained artifact")
    e.add_argument("model")
    e.add_argument("--dataset", required=True)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--filtered", dest="setting", action="store_const", const="filtered")
    g.add_argument("--unfiltered", dest="setting", action="store_const", const="unfiltered")
    e.set_defaults(setting="filtered")
    e.add_argument("--directions", choices=("both", "tail_only"), default="both")
    e.add_argument("--split", choices=("test", "valid"), default="test")
    e.add_argument("--unseen", choices=("extend", "strict", "lenient"), default="extend")
    e.add_argument("--figure", help="write a bar chart of the metrics to this path")
    e.add_argument("--json-lines", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="dump embeddings as TSV")
    x.add_argument("model")
    x.add_argument("--out", required=True)
    x.add_argument("--force", action="store_true")
    x.add_argument("--json-lines", action="store_true")
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("--dataset", required=True)
    s.add_argument("--unseen", choices=("extend", "strict", "lenient"), default="extend")
    s.add_argument("--json-lines", action="store_true")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("gradcheck", help="finite-difference check of the gradient kernel")
    c.add_argument("--dims", default="20,5,20")
    c.add_argument("--rank", type=int, default=8)
    c.add_argument("--density", type=float, default=0.1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--family", choices=("bernoulli", "gaussian"), default="bernoulli")
    c.add_argument("--batch-size", type=int, default=64)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--json-lines", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("rank-sweep", help="train and evaluate at several ranks; table + figure")
    r.add_argument("--config")
    r.add_argument("--dataset")
    r.add_argument("--ranks", default="20,50,100,200")
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--directions", choices=("both", "tail_only"), default="both")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.add_argument("--json-lines", action="store_true")
    r.set_defaults(func=cmd_rank_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, UnseenLabelError, ArtifactError, TrainingDiverged,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
