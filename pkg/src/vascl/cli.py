"""Command-line entry point: ``vascl train | eval | analyze``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import data as data_mod
from . import evaluation as ev
from . import numcore as nc
from .config import EVAL_TASKS, ConfigError, load_config
from .model import CheckpointFormatError, ModelParams, encode, load_checkpoint
from .train import NumericalFailure, Streams, annotate, build_data, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ANALYZE_K = (1, 5, 10, 20)

log = logging.getLogger("vascl")


def load_eval_data(path: str, seed: int = 0) -> data_mod.Dataset:
    """An embedding file, or a JSON experiment config whose validation split is used."""
    p = Path(path)
    if p.suffix == ".json":
        cfg = load_config(p)
        return build_data(cfg, Streams.from_seed(cfg.seed).data).val
    ds = data_mod.load_embeddings(p)
    return annotate(ds, 0, 1000, seed)


def _load_ckpt(path: str) -> ModelParams:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise data_mod.DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    except CheckpointFormatError as exc:
        raise data_mod.DataFormatError(f"{path}: {exc}") from exc


def _check_dims(params: ModelParams, ds: data_mod.Dataset, label: str) -> None:
    if params.input_dim != ds.dim:
        raise data_mod.DataFormatError(f"{label}: checkpoint expects dim {params.input_dim}, data has {ds.dim}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(config_path: str, out_dir: str) -> dict:
    cfg = load_config(config_path)
    result = train(cfg, Path(out_dir))
    summary = {"best_step": result.best_step, "best_value": result.best_value, "final": result.records[-1]}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_eval(ckpt: str, data_path: str, tasks: Sequence[str], out: Optional[str] = None, seed: int = 0) -> dict:
    bad = set(tasks) - set(EVAL_TASKS)
    if bad:
        raise ConfigError(f"unknown tasks {sorted(bad)}; choose from {EVAL_TASKS}")
    params = _load_ckpt(ckpt)
    ds = load_eval_data(data_path, seed)
    _check_dims(params, ds, ckpt)
    metrics = evaluate(params, ds, list(tasks), ANALYZE_K, seed=seed, strict=True)
    record = {"checkpoint": str(ckpt), "data": str(data_path), "seed": seed, "eval": dict(sorted(metrics.items()))}
    line = json.dumps(record, sort_keys=True)
    if out:
        with open(out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    return record


def analysis_report(params_a: ModelParams, params_b: ModelParams, ds: data_mod.Dataset) -> dict:
    report: Dict[str, dict] = {}
    reps = {"a": encode(params_a, ds.X), "b": encode(params_b, ds.X)}
    if ds.labels is None:
        report["purity"] = {"status": "skipped", "reason": "no labels"}
    else:
        ks = [k for k in ANALYZE_K if k < len(ds)]
        report["purity"] = {
            "status": "ok",
            "k": ks,
            **{
                name: {
                    str(k): {"true_positive_rate": tpr, "mean_distance": dist}
                    for k, (tpr, dist) in ev.neighborhood_purity(E, ds.labels, ks).items()
                }
                for name, E in reps.items()
            },
        }
    report["distances"] = {}
    for name, E in reps.items():
        report["distances"][name] = {"mean_pairwise_cosine": ev.mean_pairwise_cosine(E)}
    if ds.triples is None:
        report["triples"] = {"status": "skipped", "reason": "no triples"}
    else:
        t = ds.triples
        out = {"status": "ok"}
        for name, E in reps.items():
            rep = ev.triple_distance_analysis(E[t[:, 0]], E[t[:, 1]], E[t[:, 2]])
            out[name] = {
                "win_rate": rep.win_rate,
                "tie_rate": rep.tie_rate,
                "positive": vars(rep.positive),
                "negative": vars(rep.negative),
            }
        report["triples"] = out
    return report


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "key", "a", "b"])
    pur = report["purity"]
    if pur.get("status") == "ok":
        for k in pur["k"]:
            for field in ("true_positive_rate", "mean_distance"):
                w.writerow(["purity", f"{field}@{k}", pur["a"][str(k)][field], pur["b"][str(k)][field]])
    else:
        w.writerow(["purity", "status", "skipped", "skipped"])
    d = report["distances"]
    w.writerow(["distances", "mean_pairwise_cosine", d["a"]["mean_pairwise_cosine"], d["b"]["mean_pairwise_cosine"]])
    tr = report["triples"]
    if tr.get("status") == "ok":
        w.writerow(["triples", "win_rate", tr["a"]["win_rate"], tr["b"]["win_rate"]])
        w.writerow(["triples", "positive_mean", tr["a"]["positive"]["mean"], tr["b"]["positive"]["mean"]])
        w.writerow(["triples", "negative_mean", tr["a"]["negative"]["mean"], tr["b"]["negative"]["mean"]])
    else:
        w.writerow(["triples", "status", "skipped", "skipped"])
    return buf.getvalue()


def cmd_analyze(ckpt_a: str, ckpt_b: str, data_path: str, out_dir: Optional[str] = None, seed: int = 0) -> dict:
    pa, pb = _load_ckpt(ckpt_a), _load_ckpt(ckpt_b)
    if pa.input_dim != pb.input_dim or pa.embed_dim != pb.embed_dim:
        raise data_mod.DataFormatError("checkpoints have incompatible dimensions")
    ds = load_eval_data(data_path, seed)
    _check_dims(pa, ds, ckpt_a)
    report = analysis_report(pa, pb, ds)
    report["inputs"] = {"a": str(ckpt_a), "b": str(ckpt_b), "data": str(data_path)}
    text = report_csv(report)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "report.csv").write_text(text)
    print(text, end="")
    return report


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vascl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="embedding file or experiment config JSON")
    p.add_argument("--tasks", default="purity", help=f"comma-separated subset of {','.join(EVAL_TASKS)}")
    p.add_argument("--out", help="append the record to this JSONL file")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="compare two checkpoints")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for report.json and report.csv")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cmd_train(args.config, args.out)
        elif args.command == "eval":
            tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
            cmd_eval(args.ckpt, args.data, tasks, args.out, args.seed)
        else:
            cmd_analyze(args.a, args.b, args.data, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataFormatError, ev.EvaluationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, nc.NonFiniteError, nc.DegenerateInputError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
