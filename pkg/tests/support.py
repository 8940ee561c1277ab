"""Shared builders for the test suite."""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

import reference
from vascl import numcore as nc
from vascl.model import Layer, ModelParams, TapedParams, dropout_masks, encode_on_tape, init_params, project_on_tape
from vascl.objective import (
    augmented_neighborhood_terms_on_tape,
    build_neighborhood,
    instance_disc_loss_on_tape,
    neighborhood_terms_on_tape,
    vascl_loss_on_tape,
    LossConfig,
)


def random_model(rng, d_in=6, dims=(6,), head_out=8, activation="tanh", head_activation="relu", dropout=0.1):
    """Small model with non-zero biases, so a ReLU head never returns an exact zero row."""
    p = init_params(d_in, dims, head_out=head_out, activation=activation, head_activation=head_activation,
                    dropout=dropout, rng=rng)
    for layer in p.encoder + p.head:
        layer.bias[...] = rng.normal(0.0, 0.5, size=layer.bias.shape)
    return p


def random_head(rng, d=6, p=8, head_activation="relu") -> ModelParams:
    """Head-only model (identity encoder) with Gaussian biases."""
    h0 = Layer(rng.normal(size=(d, d)) / np.sqrt(d), rng.normal(0.0, 0.5, size=(1, d)), head_activation)
    h1 = Layer(rng.normal(size=(d, p)) / np.sqrt(d), rng.normal(0.0, 0.5, size=(1, p)), "linear")
    return ModelParams([], [h0, h1], dropout=0.0, input_dim=d)


def check_named(build: Callable[[nc.Tape, Dict[str, nc.Node]], nc.Node], arrays: Dict[str, np.ndarray],
                step=1e-5, tolerance=1e-4, ref: Optional[Callable[[Dict[str, np.ndarray]], float]] = None
                ) -> Dict[str, float]:
    """Grad-check ``build`` wrt each named array; returns the max relative error per name.

    With ``ref`` the finite differences are taken on that function of the
    named arrays instead of on the tape graph.
    """
    out = {}
    for name in arrays:
        def fn(x, name=name):
            tape = nc.Tape()
            leaves = {k: tape.leaf(x if k == name else v, requires_grad=(k == name)) for k, v in arrays.items()}
            loss = build(tape, leaves)
            tape.backward(loss)
            g = leaves[name].grad
            return float(loss.value[0, 0]), (np.zeros_like(x) if g is None else g)

        def value(x, name=name):
            if ref is not None:
                return ref({**arrays, name: x})
            tape = nc.Tape()
            return float(build(tape, {k: tape.leaf(x if k == name else v) for k, v in arrays.items()}).value[0, 0])

        report = nc.grad_check(fn, arrays[name], step=step, tolerance=tolerance, value_fn=value)
        out[name] = report.max_rel_error
    return out


def with_params(params: ModelParams, nodes: Dict[str, nc.Node], tape: nc.Tape) -> TapedParams:
    """Taped view of ``params`` using ``nodes`` where given, constants elsewhere."""
    return TapedParams(params, {k: nodes[k] if k in nodes else tape.constant(v) for k, v in params.arrays().items()})


class GradientProblem:
    """A random small batch plus everything the four losses need.

    Draws are repeated (from the same seeded stream) until every ReLU
    pre-activation sits at least ``kink_margin`` from zero: central
    differences across a kink do not estimate a derivative.
    """

    def __init__(self, seed: int, m=8, d=6, k=2, tau=0.5, kink_margin=1e-3):
        rng = np.random.default_rng(seed)
        while True:
            self._draw(rng, m, d, k, tau)
            if self.min_relu_preactivation() >= kink_margin:
                break

    def _draw(self, rng, m, d, k, tau):
        self.params = random_model(rng, d_in=d, dims=(d,), head_out=8)
        self.x = rng.normal(size=(m, d))
        self.masks1 = dropout_masks(self.params, m, rng)
        self.masks2 = dropout_masks(self.params, m, rng)
        self.delta = rng.normal(size=(m, d)) * 0.5
        self.tau = tau
        tape = nc.Tape()
        tp = self.params.on_tape(tape, trainable=False)
        self.E = encode_on_tape(tp, tape.constant(self.x), self.masks1).value
        self.nbr = build_neighborhood(self.E, k)
        self.z_anchor = project_on_tape(tp, tape.constant(self.E)).value
        self.config = LossConfig(temperature=tau, k=k, delta=1.0, stop_gradient_through_delta=False)

    def min_relu_preactivation(self) -> float:
        tape = nc.Tape()
        tp = self.params.on_tape(tape, trainable=False)
        xn = tape.constant(self.x)
        e1 = self.E
        e2 = encode_on_tape(tp, xn, self.masks2).value
        h = self.params.head[0]
        return float(min(np.abs(e @ h.weight + h.bias).min() for e in (e1, e2, e1 + self.delta)))

    # plain numpy versions of the four losses (finite-difference side)

    def _ref_views(self, a):
        acts = [layer.activation for layer in self.params.encoder]
        e1 = reference.encode(a, acts, self.x, self.masks1)
        e2 = reference.encode(a, acts, self.x, self.masks2)
        hact = self.params.head[0].activation
        return e1, reference.head(a, hact, e1), reference.head(a, hact, e2), hact

    def ref_instance(self, a):
        _, z1, z2, _ = self._ref_views(a)
        return reference.instance_loss(z1, z2, self.tau)

    def ref_neighborhood(self, a):
        hact = self.params.head[0].activation
        zd = reference.head(a, hact, self.E + a["delta"])
        terms = [reference.neighborhood_term(zd[i], self.z_anchor[i], self.z_anchor[n], self.tau)
                 for i, n in enumerate(self.nbr.indices)]
        return float(np.mean(terms))

    def ref_augmented(self, a):
        e1, z1, _, hact = self._ref_views(a)
        zs = reference.head(a, hact, e1 + a["delta"])
        return reference.augmented_sum(z1, zs, self.nbr.indices, self.tau) / len(z1)

    def ref_total(self, a):
        e1, z1, z2, hact = self._ref_views(a)
        zs = reference.head(a, hact, e1 + a["delta"])
        m = len(z1)
        return reference.instance_loss(z1, z2, self.tau) + reference.augmented_sum(z1, zs, self.nbr.indices, self.tau) / (2 * m)

    def arrays(self, with_delta=True) -> Dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.params.arrays().items()}
        if with_delta:
            out["delta"] = self.delta.copy()
        return out

    def _views(self, tape, nodes):
        tp = with_params(self.params, nodes, tape)
        xn = tape.constant(self.x)
        e1 = encode_on_tape(tp, xn, self.masks1)
        e2 = encode_on_tape(tp, xn, self.masks2)
        return tp, e1, project_on_tape(tp, e1), project_on_tape(tp, e2)

    def instance(self, tape, nodes):
        _, _, z1, z2 = self._views(tape, nodes)
        return instance_disc_loss_on_tape(z1, z2, self.tau)

    def neighborhood(self, tape, nodes):
        # inner loss: anchors and neighbors fixed, gradient through the head and delta
        tp = with_params(self.params, nodes, tape)
        z_delta = project_on_tape(tp, nc.add(tape.constant(self.E), nodes["delta"]))
        terms = neighborhood_terms_on_tape(z_delta, tape.constant(self.z_anchor), self.nbr.indices, self.tau)
        return nc.mean_all(terms)

    def augmented(self, tape, nodes):
        tp, e1, z1, _ = self._views(tape, nodes)
        z_star = project_on_tape(tp, nc.add(e1, nodes["delta"]))
        return nc.mean_all(augmented_neighborhood_terms_on_tape(z1, z_star, self.nbr.indices, self.tau))

    def total(self, tape, nodes):
        tp, e1, z1, z2 = self._views(tape, nodes)
        return _total_with_delta(tp, z1, z2, e1, self.nbr, nodes["delta"], self.config)


def _total_with_delta(tp, z1, z2, e, nbr, delta_node, config):
    m = z1.shape[0]
    inst = instance_disc_loss_on_tape(z1, z2, config.temperature)
    z_star = project_on_tape(tp, nc.add(e, delta_node))
    aug = augmented_neighborhood_terms_on_tape(z1, z_star, nbr.indices, config.temperature)
    return nc.add(inst, nc.scale(nc.sum_all(aug), 1.0 / (2 * m)))


def full_loss_consistent(problem: GradientProblem) -> float:
    """Difference between ``vascl_loss_on_tape`` and the hand-assembled total."""
    tape = nc.Tape()
    tp = problem.params.on_tape(tape)
    xn = tape.constant(problem.x)
    e1 = encode_on_tape(tp, xn, problem.masks1)
    z1, z2 = project_on_tape(tp, e1), project_on_tape(tp, encode_on_tape(tp, xn, problem.masks2))
    parts = vascl_loss_on_tape(tp, z1, z2, e1, problem.nbr, problem.delta, problem.config)
    tape2 = nc.Tape()
    nodes = {k: tape2.leaf(v) for k, v in problem.arrays().items()}
    ref = problem.total(tape2, nodes)
    return abs(float(parts.total.value[0, 0]) - float(ref.value[0, 0]))
