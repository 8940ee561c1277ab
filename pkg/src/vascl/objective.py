"""Contrastive losses, in-batch neighborhoods and the virtual augmentation solver.

Loss functions come in two flavours: ``*_on_tape`` versions that build on
an existing :class:`~vascl.numcore.Tape` (used during training so gradients
reach the model), and plain array versions that return floats.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import numcore as nc
from .model import ModelParams, TapedParams, encode_on_tape, project_on_tape


class NeighborhoodSizeWarning(UserWarning):
    """K exceeded M - 1 and was clamped."""


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    k: int = 16
    delta: float = 15.0
    inner_steps: int = 1
    init_std: float = 1.0
    stop_gradient_through_delta: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if int(self.inner_steps) != self.inner_steps or self.inner_steps < 1:
            raise ValueError(f"inner_steps must be an integer >= 1, got {self.inner_steps}")
        if not self.init_std > 0:
            raise ValueError(f"init_std must be > 0, got {self.init_std}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def cosine_sim(a, b, eps: float = nc.NORM_EPS) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise nc.DegenerateInputError("cosine similarity of a near-zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """All-pairs cosine similarity between rows (arrays, no tape)."""
    def unit(x):
        x = np.asarray(x, dtype=np.float64)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        bad = np.flatnonzero(norms[:, 0] <= nc.NORM_EPS)
        if bad.size:
            raise nc.DegenerateInputError(f"rows {bad.tolist()[:8]} have near-zero norm")
        return x / norms

    ua = unit(a)
    ub = ua if b is None else unit(b)
    return ua @ ub.T


# ---------------------------------------------------------------------------
# In-batch instance discrimination (dropout views)
# ---------------------------------------------------------------------------


def instance_disc_terms_on_tape(z1: nc.Node, z2: nc.Node, tau: float) -> nc.Node:
    """Directed terms for every instance in both views, shape (2M, 1).

    Row ``i`` is the term anchored at ``z_i`` with positive ``z_i'``; row
    ``M + i`` swaps the roles. Negatives are the other 2M - 2 view vectors.
    """
    _check_tau(tau)
    if z1.shape != z2.shape:
        raise nc.ShapeError(f"views misaligned: {z1.shape} vs {z2.shape}")
    m = z1.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 instances, got {m}")
    both = nc.concat_rows([z1, z2])
    logits = nc.scale(nc.cosine_matrix(both, both), 1.0 / tau)
    mask = ~np.eye(2 * m, dtype=bool)
    targets = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    return nc.softmax_xent_rows(logits, targets, mask)


def instance_disc_loss_on_tape(z1: nc.Node, z2: nc.Node, tau: float) -> nc.Node:
    """Mean directed term. Both view orders are averaged so that swapping the
    views gives a bitwise-identical value (summation order would otherwise
    differ in the last bits)."""
    a = nc.mean_all(instance_disc_terms_on_tape(z1, z2, tau))
    b = nc.mean_all(instance_disc_terms_on_tape(z2, z1, tau))
    return nc.scale(nc.add(a, b), 0.5)


def instance_disc_loss(z1, z2, tau: float) -> float:
    """Mean over instances and both directions of the in-batch InfoNCE term."""
    tape = nc.Tape()
    return float(instance_disc_loss_on_tape(tape.leaf(z1), tape.leaf(z2), tau).value[0, 0])


# ---------------------------------------------------------------------------
# Neighborhoods
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborhoodIndex:
    indices: np.ndarray  # (M, K) neighbor ids, most similar first
    similarities: np.ndarray  # (M, K)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    def permuted(self, perm: np.ndarray) -> "NeighborhoodIndex":
        """Index for the batch ``E[perm]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return NeighborhoodIndex(inv[self.indices[perm]], self.similarities[perm])


def top_k_cosine(
    queries: np.ndarray, k: int, exclude_self: bool = True, keys: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact top-k by cosine similarity; ties go to the lower index."""
    sims = cosine_matrix(queries, keys)
    if exclude_self:
        np.fill_diagonal(sims, -np.inf)
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def build_neighborhood(E, k: int) -> NeighborhoodIndex:
    E = nc.as_matrix(E, name="E")
    m = E.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 instances, got {m}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > m - 1:
        warnings.warn(f"K={k} exceeds batch size - 1; clamped to {m - 1}", NeighborhoodSizeWarning, stacklevel=2)
        k = m - 1
    idx, sims = top_k_cosine(E, k)
    return NeighborhoodIndex(idx, sims)


# ---------------------------------------------------------------------------
# Neighborhood discrimination
# ---------------------------------------------------------------------------


def candidate_xent_on_tape(query: nc.Node, pool: nc.Node, candidates: np.ndarray, tau: float) -> nc.Node:
    """Per-row ``-log softmax`` where column 0 of ``candidates`` is the positive.

    ``candidates[i]`` lists rows of ``pool`` competing for query row ``i``.
    """
    _check_tau(tau)
    sims = nc.cosine_matrix(query, pool)
    logits = nc.scale(nc.take_per_row(sims, candidates), 1.0 / tau)
    return nc.softmax_xent_rows(logits, np.zeros(candidates.shape[0], dtype=np.intp))


def neighborhood_terms_on_tape(z_delta: nc.Node, z_anchor: nc.Node, neighbors: np.ndarray, tau: float) -> nc.Node:
    """Per-instance neighborhood loss for a whole batch, shape (M, 1).

    ``z_anchor`` holds every instance's clean head output; ``neighbors[i]``
    indexes rows of it.
    """
    neighbors = np.asarray(neighbors, dtype=np.intp)
    m = z_delta.shape[0]
    if neighbors.ndim != 2 or neighbors.shape[0] != m or neighbors.shape[1] == 0:
        raise ValueError(f"neighbor index must be (M, K>=1), got {neighbors.shape}")
    cands = np.hstack([np.arange(m)[:, None], neighbors])
    return candidate_xent_on_tape(z_delta, z_anchor, cands, tau)


def neighborhood_loss(z_delta, z_anchor, z_neighbors, tau: float) -> float:
    """Single-instance loss of classifying the perturbed view as its anchor
    rather than any of its neighbors."""
    _check_tau(tau)
    z_neighbors = np.atleast_2d(np.asarray(z_neighbors, dtype=np.float64))
    if z_neighbors.size == 0:
        raise ValueError("neighbor set is empty")
    tape = nc.Tape()
    q = tape.leaf(z_delta)
    pool = tape.leaf(np.vstack([np.ravel(z_anchor), z_neighbors]))
    cands = np.arange(pool.shape[0])[None, :]
    return float(candidate_xent_on_tape(q, pool, cands, tau).value[0, 0])


def augmented_neighborhood_terms_on_tape(z: nc.Node, z_star: nc.Node, neighbors: np.ndarray, tau: float) -> nc.Node:
    """Both directed augmented-neighborhood terms per instance, summed: (M, 1).

    Candidates for instance ``i``: its positive (the other of ``z_i``/``z_i*``)
    then ``z_k`` and ``z_k*`` for each neighbor ``k``.
    """
    if z.shape != z_star.shape:
        raise nc.ShapeError(f"Z and Z* misaligned: {z.shape} vs {z_star.shape}")
    neighbors = np.asarray(neighbors, dtype=np.intp)
    m = z.shape[0]
    if neighbors.ndim != 2 or neighbors.shape[0] != m or neighbors.shape[1] == 0:
        raise ValueError(f"neighbor index must be (M, K>=1), got {neighbors.shape}")
    pool = nc.concat_rows([z, z_star])
    rows = np.arange(m)[:, None]
    negatives = np.hstack([neighbors, neighbors + m])
    from_star = candidate_xent_on_tape(z_star, pool, np.hstack([rows, negatives]), tau)
    from_clean = candidate_xent_on_tape(z, pool, np.hstack([rows + m, negatives]), tau)
    return nc.add(from_star, from_clean)


def augmented_neighborhood_loss(i: int, Z, Z_star, neighborhood: NeighborhoodIndex, tau: float) -> float:
    """Augmented-neighborhood loss of instance ``i`` (sum of both directions)."""
    Z = nc.as_matrix(Z, name="Z")
    Z_star = nc.as_matrix(Z_star, name="Z_star")
    if Z.shape != Z_star.shape or len(neighborhood) != Z.shape[0]:
        raise nc.ShapeError("Z, Z* and neighborhood are not aligned")
    tape = nc.Tape()
    terms = augmented_neighborhood_terms_on_tape(tape.leaf(Z), tape.leaf(Z_star), neighborhood.indices, tau)
    return float(terms.value[i, 0])


# ---------------------------------------------------------------------------
# Virtual augmentation
# ---------------------------------------------------------------------------


@dataclass
class PerturbationResult:
    delta: np.ndarray  # (M, d), every row inside the radius
    perturbed: np.ndarray  # E + delta
    loss_init: np.ndarray  # (M,) inner loss at the projected Gaussian start
    loss_final: np.ndarray  # (M,) inner loss at delta
    zero_grad: np.ndarray  # (M,) bool, rows whose ascent direction was undefined
    delta_init: np.ndarray


def project_to_ball(delta: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    factor = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    return delta * factor


def inner_losses(head: ModelParams, E: np.ndarray, delta: np.ndarray, neighbors: np.ndarray, tau: float, z_anchor=None):
    """Per-row neighborhood loss of ``h(E + delta)`` and its gradient wrt ``delta``.

    Anchor and neighbor head outputs are constants.
    """
    tape = nc.Tape()
    tp = head.on_tape(tape, trainable=False)
    if z_anchor is None:
        z_anchor = project_on_tape(tp, tape.constant(E)).value
    zc = tape.constant(z_anchor)
    d = tape.leaf(delta, requires_grad=True, name="delta")
    z_delta = project_on_tape(tp, nc.add(tape.constant(E), d))
    terms = neighborhood_terms_on_tape(z_delta, zc, neighbors, tau)
    total = nc.sum_all(terms)
    tape.backward(total)
    return terms.value[:, 0].copy(), d.grad


def virtual_augment(
    E,
    neighborhood: NeighborhoodIndex,
    head_params: ModelParams,
    config: LossConfig,
    rng: np.random.Generator,
    max_backtracks: int = 20,
) -> PerturbationResult:
    """Perturbations inside the L2 ball that most confuse each instance with its neighbors.

    Gaussian start projected onto the ball, then ``inner_steps`` steps of
    normalized-gradient ascent, each followed by projection. All rows are
    solved together: row ``i`` of the summed loss only depends on ``delta_i``.

    A ReLU head can send a perturbed point to the zero vector, where cosine
    similarity is undefined; such rows halve their step (up to
    ``max_backtracks`` times) and otherwise keep their previous iterate.
    """
    E = nc.as_matrix(E, name="E")
    if len(neighborhood) != E.shape[0]:
        raise nc.ShapeError(f"neighborhood has {len(neighborhood)} rows, batch has {E.shape[0]}")
    radius = config.delta
    step = radius / config.inner_steps
    z_anchor = project(head_params, E)
    delta0 = project_to_ball(nc.sample_gaussian(E.shape, config.init_std, rng), radius)
    delta0 = _retreat_degenerate(head_params, E, np.zeros_like(delta0), delta0, max_backtracks)
    delta = delta0
    zero_grad = np.zeros(E.shape[0], dtype=bool)
    loss0 = None
    for _ in range(config.inner_steps):
        loss, grad = inner_losses(head_params, E, delta, neighborhood.indices, config.temperature, z_anchor)
        if loss0 is None:
            loss0 = loss
        gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
        flat = gnorm[:, 0] == 0.0
        zero_grad |= flat
        direction = np.where(flat[:, None], 0.0, grad / np.where(flat[:, None], 1.0, gnorm))
        proposal = project_to_ball(delta + step * direction, radius)
        delta = _retreat_degenerate(head_params, E, delta, proposal, max_backtracks)
    final, _ = inner_losses(head_params, E, delta, neighborhood.indices, config.temperature, z_anchor)
    if not (np.all(np.isfinite(loss0)) and np.all(np.isfinite(final))):
        raise nc.NonFiniteError("inner loss is not finite")
    return PerturbationResult(delta, E + delta, loss0, final, zero_grad, delta0)


def _degenerate_rows(head: ModelParams, E: np.ndarray, delta: np.ndarray) -> np.ndarray:
    z = project(head, E + delta)
    return np.linalg.norm(z, axis=1) <= nc.NORM_EPS


def _retreat_degenerate(head: ModelParams, E, previous, proposal, max_backtracks: int) -> np.ndarray:
    """Pull rows whose head output vanishes back toward ``previous``."""
    bad = _degenerate_rows(head, E, proposal)
    frac = 1.0
    out = proposal.copy()
    for _ in range(max_backtracks):
        if not bad.any():
            return out
        frac *= 0.5
        out[bad] = previous[bad] + frac * (proposal[bad] - previous[bad])
        bad = _degenerate_rows(head, E, out)
    out[bad] = previous[bad]
    if _degenerate_rows(head, E, out).any():
        raise nc.DegenerateInputError("head output vanishes at the unperturbed embedding")
    return out


def project(params: ModelParams, E: np.ndarray) -> np.ndarray:
    tape = nc.Tape()
    tp = params.on_tape(tape, trainable=False)
    return project_on_tape(tp, tape.constant(E)).value


# ---------------------------------------------------------------------------
# Full objective
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: nc.Node
    instance: nc.Node  # mean dropout-view term, already scaled into ``total``
    neighborhood: Optional[nc.Node]  # augmented-neighborhood share of ``total``
    delta_node: Optional[nc.Node] = None

    def scalars(self) -> dict:
        out = {"loss": float(self.total.value[0, 0]), "instance_loss": float(self.instance.value[0, 0])}
        if self.neighborhood is not None:
            out["neighborhood_loss"] = float(self.neighborhood.value[0, 0])
        return out


def vascl_loss_on_tape(
    tp: TapedParams,
    z1: nc.Node,
    z2: nc.Node,
    e: nc.Node,
    neighborhood: Optional[NeighborhoodIndex],
    delta: Optional[np.ndarray],
    config: LossConfig,
) -> LossParts:
    """``1/(2M) * sum_i [two dropout-view terms + two augmented-neighborhood terms]``.

    With ``neighborhood`` or ``delta`` None only the dropout-view part is built
    (the dropout-only baseline).
    """
    tau = config.temperature
    m = z1.shape[0]
    inst = instance_disc_loss_on_tape(z1, z2, tau)
    if neighborhood is None or delta is None:
        return LossParts(inst, inst, None)
    tape = e.tape
    if config.stop_gradient_through_delta:
        d = tape.constant(delta, name="delta_star")
    else:
        d = tape.leaf(delta, requires_grad=True, name="delta_star")
    z_star = project_on_tape(tp, nc.add(e, d))
    aug = augmented_neighborhood_terms_on_tape(z1, z_star, neighborhood.indices, tau)
    nbr = nc.scale(nc.sum_all(aug), 1.0 / (2 * m))
    return LossParts(nc.add(inst, nbr), inst, nbr, d)


def vascl_loss(params: ModelParams, views, neighborhood, perturbation: Optional[PerturbationResult], config: LossConfig):
    """Scalar objective and parameter gradients for fixed inputs, masks, neighbors and perturbation.

    ``views`` is ``(x, masks1, masks2)``: the raw batch and the dropout masks
    of each pass. Returns ``(loss, grads, parts)``; ``grads`` also carries
    ``"delta"`` when gradients through the perturbation are enabled.
    """
    x, masks1, masks2 = views
    tape = nc.Tape()
    tp = params.on_tape(tape)
    xn = tape.leaf(x, name="inputs")
    e1 = encode_on_tape(tp, xn, masks1)
    e2 = encode_on_tape(tp, xn, masks2)
    z1, z2 = project_on_tape(tp, e1), project_on_tape(tp, e2)
    delta = None if perturbation is None else perturbation.delta
    parts = vascl_loss_on_tape(tp, z1, z2, e1, neighborhood, delta, config)
    tape.backward(parts.total)
    grads = tp.grads()
    if parts.delta_node is not None and parts.delta_node.requires_grad:
        grads["delta"] = parts.delta_node.grad
    return float(parts.total.value[0, 0]), grads, parts.scalars()

