"""Training loop and periodic evaluation."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from . import numcore as nc
from .config import ExperimentConfig
from .model import (
    DegenerateViewsWarning,
    ModelParams,
    encode,
    forward_twice_on_tape,
    init_params,
    save_checkpoint,
)
from .objective import NeighborhoodSizeWarning, build_neighborhood, vascl_loss_on_tape, virtual_augment

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class Streams:
    """Independent RNG streams derived from one run seed."""

    data: np.random.Generator
    init: np.random.Generator
    batches: int
    dropout: np.random.Generator
    perturb: np.random.Generator
    eval: int

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed)
        d, i, b, dr, p, e = ss.spawn(6)
        return cls(
            np.random.default_rng(d),
            np.random.default_rng(i),
            int(b.generate_state(1)[0]),
            np.random.default_rng(dr),
            np.random.default_rng(p),
            int(e.generate_state(1)[0]),
        )


@dataclass
class Splits:
    train: data_mod.Dataset
    val: data_mod.Dataset


def build_data(config: ExperimentConfig, rng: np.random.Generator) -> Splits:
    dc = config.data
    if dc.source == "mixture":
        seed = int(rng.integers(2**63))
        means = data_mod.blob_means(dc.components, dc.dim, dc.separation, dc.offset, seed=[seed, 0])
        spec = data_mod.MixtureSpec(means, dc.std, np.full(dc.components, 1.0 / dc.components), dc.n)
        full = data_mod.generate_mixture(spec, [seed, 1])
    else:
        full = data_mod.load_embeddings(dc.path)
    n_val = int(round(dc.val_fraction * len(full)))
    order = rng.permutation(len(full))
    train = full.subset(np.sort(order[n_val:]))
    val = full.subset(np.sort(order[:n_val])) if n_val else full.subset(np.sort(order[n_val:]))
    val = annotate(val, dc.pairs, dc.triples, int(rng.integers(2**63)))
    return Splits(train, val)


def annotate(ds: data_mod.Dataset, n_pairs: int, n_triples: int, seed: int) -> data_mod.Dataset:
    """Attach graded pairs and triples when the data supports them."""
    if ds.labels is not None and ds.means is not None and n_pairs and len(np.unique(ds.labels)) > 1:
        ds = data_mod.generate_graded_pairs(ds, [seed, 0], n_pairs)
    if ds.labels is not None and n_triples and len(np.unique(ds.labels)) > 1:
        ds = data_mod.generate_triples(ds, [seed, 1], n_triples)
    return ds


def make_model(config: ExperimentConfig, input_dim: int, rng: np.random.Generator) -> ModelParams:
    mc = config.model
    return init_params(
        input_dim,
        mc.encoder_dims,
        head_out=mc.head_dim,
        activation=mc.activation,
        head_activation=mc.head_activation,
        output_activation=mc.output_activation,
        dropout=mc.dropout,
        rng=rng,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    params: ModelParams,
    ds: data_mod.Dataset,
    tasks,
    purity_k=(1, 5, 10, 20),
    seed: int = 0,
    clustering_runs: int = 10,
    probe_shots: int = 8,
    probe_splits: int = 5,
    strict: bool = False,
) -> Dict[str, float]:
    """Eval-mode metrics on ``ds``; ``strict`` raises when a task lacks the data it needs."""
    E = encode(params, ds.X)
    out: Dict[str, float] = {}

    def missing(task, what):
        if strict:
            raise ev.EvaluationError(f"task {task!r} needs {what}")

    for task in tasks:
        try:
            out.update(_run_task(task, E, ds, purity_k, seed, clustering_runs, probe_shots, probe_splits, missing))
        except ev.EvaluationError as exc:
            if strict:
                raise
            log.warning("skipping %s: %s", task, exc)
    return dict(sorted(out.items()))


def _run_task(task, E, ds, purity_k, seed, clustering_runs, probe_shots, probe_splits, missing) -> Dict[str, float]:
    out: Dict[str, float] = {}
    if task == "purity":
        if ds.labels is None:
            missing("purity", "labels")
        else:
            ks = [k for k in purity_k if k < len(ds)]
            for k, (tpr, dist) in ev.neighborhood_purity(E, ds.labels, ks).items():
                out[f"purity@{k}"] = tpr
                out[f"distance@{k}"] = dist
    elif task == "spearman":
        if ds.pairs is None:
            missing("spearman", "graded pairs")
        else:
            out["spearman"] = ev.sts_spearman(E, ds.pairs, ds.gold)
    elif task == "clustering":
        if ds.labels is None:
            missing("clustering", "labels")
        else:
            mean, std = ev.clustering_accuracy(E, ds.labels, seed=seed, runs=clustering_runs)
            out["clustering_acc"] = mean
            out["clustering_acc_std"] = std
    elif task == "probe":
        if ds.labels is None:
            missing("probe", "labels")
        else:
            rng = np.random.default_rng([seed, 7])
            order = rng.permutation(len(ds))
            half = len(ds) // 2
            pool = ev.LabeledEmbeddings(E[order[:half]], ds.labels[order[:half]])
            test = ev.LabeledEmbeddings(E[order[half:]], ds.labels[order[half:]])
            mean, std = ev.few_shot_probe(pool, test, probe_shots, probe_splits, seed)
            out["probe_acc"] = mean
            out["probe_acc_std"] = std
    elif task == "triples":
        if ds.triples is None:
            missing("triples", "triples or labels")
        else:
            t = ds.triples
            rep = ev.triple_distance_analysis(E[t[:, 0]], E[t[:, 1]], E[t[:, 2]])
            out["triple_win_rate"] = rep.win_rate
    else:
        raise ev.EvaluationError(f"unknown task {task!r}")
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    initial_params: ModelParams
    records: List[dict]
    timings: List[dict]
    splits: Splits
    best_step: int = 0
    best_value: float = float("-inf")


def _select_value(metrics: Dict[str, float], name: str) -> float:
    return metrics.get(name, float("-inf"))


def train(config: ExperimentConfig, out_dir: Optional[Path] = None) -> TrainResult:
    """Run the full loop. Writes checkpoints and logs when ``out_dir`` is given."""
    streams = Streams.from_seed(config.seed)
    splits = build_data(config, streams.data)
    params = make_model(config, splits.train.dim, streams.init)
    initial = params.copy()
    oc = config.optimizer
    state = nc.AdamState(
        {"encoder": oc.lr_encoder, "head": oc.lr_head},
        params.groups(),
        oc.beta1,
        oc.beta2,
        oc.eps,
    )
    loss_cfg = config.loss.to_loss_config()
    sc = config.schedule
    sampler = data_mod.BatchSampler(len(splits.train), sc.batch_size, streams.batches, sc.drop_last)
    steps_per_epoch = len(sampler.epoch(0))
    total = sc.epochs * steps_per_epoch if sc.max_steps is None else sc.max_steps
    vascl_mode = config.mode == "vascl"
    cfg_hash = config.hash()
    ec = config.eval

    records: List[dict] = []
    timings: List[dict] = []
    best = params.copy()
    best_step, best_value = 0, float("-inf")
    acc: Dict[str, List[float]] = {}
    t0 = time.perf_counter()

    def snapshot(step: int):
        nonlocal best, best_step, best_value
        metrics = evaluate(
            params, splits.val, ec.tasks, ec.purity_k, streams.eval, ec.clustering_runs, ec.probe_shots, ec.probe_splits
        )
        rec = {"step": step, "seed": config.seed, "config_hash": cfg_hash, "mode": config.mode}
        rec["train"] = {k: float(np.mean(v)) for k, v in sorted(acc.items())}
        rec["eval"] = {k: float(v) for k, v in sorted(metrics.items())}
        records.append(rec)
        timings.append({"step": step, "wall_time": time.perf_counter() - t0})
        acc.clear()
        value = _select_value(metrics, ec.select_metric)
        if value > best_value:
            best, best_step, best_value = params.copy(), step, value
        log.info("step %d eval %s", step, rec["eval"])

    snapshot(0)
    X = splits.train.X
    step = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NeighborhoodSizeWarning)
        if params.dropout == 0.0:
            warnings.warn("dropout is 0: dropout views coincide", DegenerateViewsWarning, stacklevel=2)
        warnings.simplefilter("ignore", DegenerateViewsWarning)
        for batch_index, idx in enumerate(sampler):
            if step >= total:
                break
            parts = train_step(params, state, X[idx], loss_cfg, vascl_mode, streams)
            if not all(np.isfinite(v) for v in parts.values()):
                raise NumericalFailure(f"non-finite loss at step {step + 1} (batch {batch_index}): {parts}")
            for k, v in parts.items():
                acc.setdefault(k, []).append(v)
            step += 1
            if step % sc.eval_every == 0 or step == total:
                snapshot(step)

    result = TrainResult(params, best, initial, records, timings, splits, best_step, best_value)
    if out_dir is not None:
        write_outputs(result, Path(out_dir), config)
    return result


def train_step(
    params: ModelParams,
    state: nc.AdamState,
    x: np.ndarray,
    loss_cfg,
    vascl_mode: bool,
    streams: Streams,
) -> Dict[str, float]:
    """Forward twice, augment, loss, Adam. Returns the loss components."""
    tape = nc.Tape()
    tp = params.on_tape(tape)
    views = forward_twice_on_tape(tp, tape.constant(x), streams.dropout)
    nbr = pert = None
    if vascl_mode:
        nbr = build_neighborhood(views.E.value, loss_cfg.k)
        pert = virtual_augment(views.E.value, nbr, params, loss_cfg, streams.perturb).delta
    try:
        parts = vascl_loss_on_tape(tp, views.Z, views.Z2, views.E, nbr, pert, loss_cfg)
    except nc.NonFiniteError as exc:
        raise NumericalFailure(str(exc)) from exc
    tape.backward(parts.total)
    nc.adam_step(state, params.arrays(), tp.grads())
    return parts.scalars()


def write_outputs(result: TrainResult, out_dir: Path, config: ExperimentConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out_dir / "final.ckpt")
    save_checkpoint(result.best_params, out_dir / "best.ckpt")
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out_dir / "timings.jsonl", "w") as fh:
        for rec in result.timings:
            fh.write(json.dumps(rec) + "\n")
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
