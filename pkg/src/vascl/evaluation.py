"""Downstream evaluation and representation-space analysis.

Everything here works on frozen vectors: rank correlation against graded
scores, K-Means clustering accuracy with Hungarian matching, few-shot linear
probes, neighborhood purity and (anchor, positive, negative) distance stats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import numcore as nc
from .objective import cosine_matrix, top_k_cosine


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


def spearman(pred, gold) -> float:
    """Spearman's rho with average ranks for ties."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gold = np.asarray(gold, dtype=np.float64).ravel()
    if pred.shape != gold.shape:
        raise EvaluationError(f"length mismatch: {pred.size} vs {gold.size}")
    if pred.size < 3:
        raise EvaluationError("need at least 3 pairs")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gold))):
        raise EvaluationError("scores must be finite")
    rp = rankdata(pred, method="average")
    rg = rankdata(gold, method="average")
    rp -= rp.mean()
    rg -= rg.mean()
    denom = np.sqrt((rp @ rp) * (rg @ rg))
    if denom == 0:
        raise EvaluationError("rank correlation undefined for a constant input")
    return float(np.clip((rp @ rg) / denom, -1.0, 1.0))


def pair_cosines(X: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    a = X[pairs[:, 0]]
    b = X[pairs[:, 1]]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= nc.NORM_EPS) or np.any(nb <= nc.NORM_EPS):
        raise nc.DegenerateInputError("zero vector in a scored pair")
    return np.sum(a * b, axis=1) / (na * nb)


def sts_spearman(X: np.ndarray, pairs: np.ndarray, gold: np.ndarray) -> float:
    """Rank correlation between pair cosine similarities and gold scores."""
    return spearman(pair_cosines(X, pairs), gold)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: List[float]  # inertia after each Lloyd iteration of the winning run
    iterations: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, c):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    history = []
    c = centroids.shape[0]
    assign = None
    for it in range(1, max_iters + 1):
        d = _sq_dists(X, centroids)
        assign = d.argmin(1)
        inertia = float(d[np.arange(len(X)), assign].sum())
        history.append(inertia)
        new = centroids.copy()
        counts = np.bincount(assign, minlength=c)
        for k in np.flatnonzero(counts):
            new[k] = X[assign == k].mean(0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed emptied clusters at the points farthest from their centroids
            own = _sq_dists(X, new)[np.arange(len(X)), assign]
            far = np.argsort(-own, kind="stable")[: empty.size]
            new[empty] = X[far]
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift <= tol:
            break
    d = _sq_dists(X, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(len(X)), assign].sum())
    history.append(inertia)
    return assign, centroids, inertia, history, it


def kmeans(X, c: int, seed=0, max_iters: int = 300, restarts: int = 10, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm from k-means++ starts; lowest-inertia restart wins."""
    X = nc.as_matrix(X, name="X")
    if not 1 <= c <= X.shape[0]:
        raise EvaluationError(f"need 1 <= C <= N, got C={c}, N={X.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        init = kmeans_plusplus(X, c, rng)
        res = KMeansResult(*_lloyd(X, init, max_iters, tol))
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def contingency(pred, true) -> np.ndarray:
    pred = np.asarray(pred)
    true = np.asarray(true)
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(true, return_inverse=True)
    size = max(p.max(), t.max()) + 1
    table = np.zeros((size, size), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def hungarian_accuracy(pred, true) -> float:
    """Best one-to-one cluster-to-class matching, as a fraction of all points."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.size == 0:
        raise EvaluationError("empty label arrays")
    if pred.size != true.size:
        raise EvaluationError(f"length mismatch: {pred.size} vs {true.size}")
    table = contingency(pred, true)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / pred.size)


def clustering_accuracy(X, labels, seed=0, runs: int = 10, restarts: int = 1) -> Tuple[float, float]:
    """Mean and std of Hungarian accuracy over ``runs`` independent K-Means runs."""
    labels = np.asarray(labels)
    c = len(np.unique(labels))
    seeds = np.random.SeedSequence(seed).spawn(runs)
    accs = [hungarian_accuracy(kmeans(X, c, seed=s, restarts=restarts).assignments, labels) for s in seeds]
    return float(np.mean(accs)), float(np.std(accs))


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    iterations: int = 1000
    eval_every: int = 100
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0


@dataclass
class LabeledEmbeddings:
    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.X = nc.as_matrix(self.X, name="X")
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.shape[0] != self.X.shape[0]:
            raise EvaluationError("labels and rows differ in count")


def _accuracy(W: np.ndarray, b: np.ndarray, data: LabeledEmbeddings) -> float:
    return float(np.mean((data.X @ W + b).argmax(1) == data.labels))


def linear_probe(
    train: LabeledEmbeddings,
    val: LabeledEmbeddings,
    test: LabeledEmbeddings,
    config: Optional[ProbeConfig] = None,
    n_classes: Optional[int] = None,
) -> float:
    """Softmax-regression probe on frozen vectors; returns test accuracy at the
    best validation checkpoint (earliest on ties)."""
    config = config or ProbeConfig()
    d = train.X.shape[1]
    if val.X.shape[1] != d or test.X.shape[1] != d:
        raise EvaluationError("train/val/test dimensions differ")
    missing = set(np.unique(test.labels)) - set(np.unique(train.labels))
    if missing:
        raise EvaluationError(f"classes {sorted(missing)} appear in test but not in train")
    c = n_classes or int(max(train.labels.max(), val.labels.max(), test.labels.max())) + 1
    params = {"W": np.zeros((d, c)), "b": np.zeros((1, c))}
    state = nc.AdamState({"default": config.lr})
    rng = np.random.default_rng(config.seed)
    n = train.X.shape[0]
    bs = min(config.batch_size, n)
    best_val, best_test = -1.0, 0.0
    order = rng.permutation(n)
    cursor = 0
    for it in range(1, config.iterations + 1):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + bs]
        cursor += bs
        tape = nc.Tape()
        W = tape.leaf(params["W"], requires_grad=True)
        b = tape.leaf(params["b"], requires_grad=True)
        logits = nc.affine(tape.constant(train.X[idx]), W, b)
        loss = nc.mean_all(nc.softmax_xent_rows(logits, train.labels[idx]))
        tape.backward(loss)
        nc.adam_step(state, params, {"W": W.grad, "b": b.grad})
        if it % config.eval_every == 0 or it == config.iterations:
            v = _accuracy(params["W"], params["b"], val)
            if v > best_val:
                best_val, best_test = v, _accuracy(params["W"], params["b"], test)
    return best_test


def few_shot_splits(labels, shots: int, n_splits: int = 5, seed=0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Fixed (train, val) index splits with ``shots`` examples per class each."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    out = []
    for s in np.random.SeedSequence(seed).spawn(n_splits):
        rng = np.random.default_rng(s)
        tr, va = [], []
        for c in classes:
            members = np.flatnonzero(labels == c)
            if len(members) < 2 * shots:
                raise EvaluationError(f"class {c} has {len(members)} examples, need {2 * shots}")
            pick = rng.choice(members, size=2 * shots, replace=False)
            tr.append(pick[:shots])
            va.append(pick[shots:])
        out.append((np.concatenate(tr), np.concatenate(va)))
    return out


def few_shot_probe(
    pool: LabeledEmbeddings,
    test: LabeledEmbeddings,
    shots: int,
    n_splits: int = 5,
    seed=0,
    config: Optional[ProbeConfig] = None,
) -> Tuple[float, float]:
    """Mean and std of probe test accuracy over fixed few-shot splits."""
    accs = []
    n_classes = int(max(pool.labels.max(), test.labels.max())) + 1
    for tr, va in few_shot_splits(pool.labels, shots, n_splits, seed):
        accs.append(
            linear_probe(
                LabeledEmbeddings(pool.X[tr], pool.labels[tr]),
                LabeledEmbeddings(pool.X[va], pool.labels[va]),
                test,
                config,
                n_classes,
            )
        )
    return float(np.mean(accs)), float(np.std(accs))


# ---------------------------------------------------------------------------
# Representation-space analysis
# ---------------------------------------------------------------------------


def _distances(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        if np.any(na <= nc.NORM_EPS) or np.any(nb <= nc.NORM_EPS):
            raise nc.DegenerateInputError("zero vector has no cosine distance")
        return 1.0 - np.sum(a * b, axis=-1) / (na * nb)
    if metric == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    raise ValueError(f"unknown metric {metric!r}")


def neighborhood_purity(X, labels, k_list: Sequence[int], metric: str = "cosine") -> Dict[int, Tuple[float, float]]:
    """Per K: (fraction of top-K neighbors sharing the label, mean distance to them).

    Neighbors are exact top-K by cosine similarity (self excluded).
    """
    X = nc.as_matrix(X, name="X")
    labels = np.asarray(labels).ravel()
    n = X.shape[0]
    if labels.size != n:
        raise EvaluationError("labels and rows differ in count")
    k_list = sorted({int(k) for k in k_list})
    if not k_list or k_list[0] < 1 or k_list[-1] >= n:
        raise EvaluationError(f"K values must be in [1, N-1], got {k_list}")
    idx, sims = top_k_cosine(X, k_list[-1])
    same = labels[idx] == labels[:, None]
    if metric == "cosine":
        dist = 1.0 - sims
    else:
        dist = _distances(X[:, None, :], X[idx], metric)
    return {k: (float(same[:, :k].mean()), float(dist[:, :k].mean())) for k in k_list}


@dataclass
class DistanceSummary:
    mean: float
    std: float
    deciles: List[float]

    @classmethod
    def of(cls, values: np.ndarray) -> "DistanceSummary":
        return cls(float(values.mean()), float(values.std()), [float(q) for q in np.quantile(values, np.linspace(0.1, 0.9, 9))])


@dataclass
class TripleReport:
    positive: DistanceSummary
    negative: DistanceSummary
    win_rate: float  # d(anchor, positive) < d(anchor, negative)
    loss_rate: float  # reversed strict inequality
    tie_rate: float
    ratio: DistanceSummary  # d(a, p) / d(a, n) per triple, where defined


def triple_distance_analysis(anchors, positives, negatives, metric: str = "cosine") -> TripleReport:
    a = nc.as_matrix(anchors, name="anchors")
    p = nc.as_matrix(positives, name="positives")
    n = nc.as_matrix(negatives, name="negatives")
    if not (a.shape == p.shape == n.shape):
        raise EvaluationError("anchor/positive/negative shapes differ")
    dp = _distances(a, p, metric)
    dn = _distances(a, n, metric)
    win = float(np.mean(dp < dn))
    loss = float(np.mean(dp > dn))
    tie = float(np.mean(dp == dn))
    ok = dn > 0
    ratio = dp[ok] / dn[ok] if ok.any() else np.zeros(1)
    return TripleReport(DistanceSummary.of(dp), DistanceSummary.of(dn), win, loss, tie, DistanceSummary.of(ratio))


def mean_pairwise_cosine(X) -> float:
    """Average off-diagonal cosine similarity: high means a tight cone."""
    S = cosine_matrix(X)
    n = S.shape[0]
    return float((S.sum() - np.trace(S)) / (n * (n - 1)))
