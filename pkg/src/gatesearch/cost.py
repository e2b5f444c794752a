"""Resource-cost model over mask groups.

Each learnable group owns one bilinear cost term: its own gate value times
a weighted sum over adjacent groups' gates, plus a constant for
connections to always-on channels and for per-channel weights that ride on
the group (depthwise kernels, feature scales, optionally bias/norm
parameters). Every weight connection is counted exactly once, so the total
at all-ones gates equals the parameter (or multiply) count of the gated
network, and the expectation under independent gates is exact, not an
approximation.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, StructuralError
from .graph import NetworkGraph
from .grouping import GroupMap

METRICS = ("params", "flops")
BRUTEFORCE_LIMIT = 20


@dataclass
class CostTerm:
    owner: str
    metric: str
    adjacency: list[tuple[str, float]] = field(default_factory=list)
    const: float = 0.0


@dataclass
class CostReport:
    metric: str
    total: float
    fixed: float
    per_term: dict[str, float]
    pi: dict[str, float]

    def to_json(self) -> dict:
        return {"metric": self.metric, "total": self.total, "fixed": self.fixed,
                "per_term": self.per_term, "pi": self.pi}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _connection_coeff(node, metric: str) -> float:
    """Cost of one (input-channel, output-channel) connection of a layer."""
    if node.kind == "dense":
        k2 = 1
    else:
        k2 = int(node.attrs["kernel"]) ** 2
    if metric == "params":
        return float(k2)
    return float(k2 * node.out_positions())  # multiplies


def _unit_coeff(node, metric: str) -> float:
    """Cost of one per-channel weight (depthwise kernel, scale)."""
    if node.kind == "depthwise_conv2d":
        k2 = int(node.attrs["kernel"]) ** 2
    else:
        k2 = 1
    if metric == "params":
        return float(k2)
    return float(k2 * node.out_positions())


def cost_terms(gmap: GroupMap, graph: NetworkGraph, metric: str,
               count_aux: bool = False) -> tuple[list[CostTerm], float]:
    """Build one cost term per learnable group; returns (terms, fixed cost).

    `fixed` is the cost of connections between two always-on channels,
    which no gate can remove; it is reported but carries no gradient.
    """
    if metric not in METRICS:
        raise ConfigurationError(f"unknown cost metric '{metric}'")
    always = {g for g, grp in gmap.groups.items() if grp.always_on}
    terms: dict[str, CostTerm] = {
        g: CostTerm(g, metric) for g in gmap.groups if g not in always}
    adj: dict[str, dict[str, float]] = {g: {} for g in terms}
    fixed = 0.0

    for nid in graph.topo_order():
        node = graph.nodes[nid]
        if node.kind in ("conv2d", "dense"):
            coeff = _connection_coeff(node, metric)
            out_l = gmap.node_groups[nid]
            in_l = gmap.node_groups[node.inputs[0]]
            in_counts: dict[str, int] = {}
            for gi in in_l:
                in_counts[gi] = in_counts.get(gi, 0) + 1
            for go in out_l:
                for gi, n_in in in_counts.items():
                    w = coeff * n_in
                    if go not in always:
                        if gi in always or gi == go:
                            terms[go].const += w
                        else:
                            adj[go][gi] = adj[go].get(gi, 0.0) + w
                    elif gi not in always:
                        terms[gi].const += w
                    else:
                        fixed += w
        elif node.kind in ("depthwise_conv2d", "scale"):
            unit = _unit_coeff(node, metric)
            for g in gmap.node_groups[nid]:
                if g in always:
                    fixed += unit
                else:
                    terms[g].const += unit

    if count_aux and metric == "params":
        for g, grp in gmap.groups.items():
            if g in always:
                fixed += len(grp.aux)
            else:
                terms[g].const += len(grp.aux)

    for g, t in terms.items():
        t.adjacency = sorted(adj[g].items())
    return [terms[g] for g in sorted(terms)], fixed


def _bilinear(terms: list[CostTerm], values: dict[str, float]) -> float:
    total = 0.0
    for t in terms:
        total += values[t.owner] * (
            sum(c * values[g] for g, c in t.adjacency) + t.const)
    return total


def _bilinear_grad(terms: list[CostTerm],
                   values: dict[str, float]) -> dict[str, float]:
    grad = {t.owner: 0.0 for t in terms}
    for t in terms:
        vo = values[t.owner]
        acc = t.const
        for g, c in t.adjacency:
            acc += c * values[g]
            grad[g] = grad.get(g, 0.0) + c * vo
        grad[t.owner] += acc
    return grad


def expected_cost(terms: list[CostTerm], pi: dict[str, float]) -> float:
    """Cost expectation under independent gates with keep probabilities pi."""
    return _bilinear(terms, pi)


def expected_cost_grad(terms: list[CostTerm],
                       pi: dict[str, float]) -> dict[str, float]:
    return _bilinear_grad(terms, pi)


def sampled_cost(terms: list[CostTerm], masks: dict[str, float]) -> float:
    """Cost of one sampled mask configuration (same bilinear form)."""
    return _bilinear(terms, masks)


def sampled_cost_grad(terms: list[CostTerm],
                      masks: dict[str, float]) -> dict[str, float]:
    return _bilinear_grad(terms, masks)


def exact_expected_cost_bruteforce(terms: list[CostTerm],
                                   pi: dict[str, float]) -> float:
    """Enumerate all hard-mask configurations: sum Pr(config) * cost(config)."""
    gids = sorted({t.owner for t in terms}
                  | {g for t in terms for g, _ in t.adjacency})
    if len(gids) > BRUTEFORCE_LIMIT:
        raise ConfigurationError(
            f"brute-force enumeration refuses {len(gids)} groups "
            f"(limit {BRUTEFORCE_LIMIT})")
    total = 0.0
    for bits in itertools.product((0.0, 1.0), repeat=len(gids)):
        prob = 1.0
        for g, b in zip(gids, bits):
            prob *= pi[g] if b else (1.0 - pi[g])
        if prob == 0.0:
            continue
        total += prob * _bilinear(terms, dict(zip(gids, bits)))
    return total


def count_network(graph: NetworkGraph, metric: str,
                  count_aux: bool = False) -> float:
    """Exact cost of a materialized (mask-free) network by direct counting."""
    if metric not in METRICS:
        raise ConfigurationError(f"unknown cost metric '{metric}'")
    total = 0.0
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        if node.kind in ("conv2d", "dense"):
            w = graph.params[f"{nid}.w"]
            cin, cout = ((w.shape[1], w.shape[0]) if node.kind == "conv2d"
                         else (w.shape[0], w.shape[1]))
            total += _connection_coeff(node, metric) * cin * cout
            if count_aux and metric == "params" and f"{nid}.b" in graph.params:
                total += node.channels
        elif node.kind in ("depthwise_conv2d", "scale"):
            total += _unit_coeff(node, metric) * node.channels
        elif node.kind == "batchnorm" and count_aux and metric == "params":
            total += 2 * node.channels
        elif node.kind == "mask":
            raise StructuralError(
                f"node '{nid}': count_network expects a mask-free graph")
    return total


def architecture_cost(space, arch, metric: str, count_aux: bool = False) -> float:
    """Exact cost of the network an architecture materializes to."""
    from .search import materialize  # local import: search builds on cost
    return count_network(materialize(space, arch), metric, count_aux=count_aux)


def report(terms: list[CostTerm], fixed: float, pi: dict[str, float],
           metric: str) -> CostReport:
    per_term = {t.owner: pi[t.owner] * (sum(c * pi[g] for g, c in t.adjacency)
                                        + t.const)
                for t in terms}
    return CostReport(metric, sum(per_term.values()), fixed, per_term, dict(pi))
