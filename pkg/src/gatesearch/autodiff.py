"""Reverse-mode differentiation over a NetworkGraph.

`forward` evaluates every node in topological order and (in train mode)
retains per-node caches; `backward` walks the reverse order and produces
gradients for every parameter tensor and every mask group value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, StateError, StructuralError
from .graph import BN_DECAY_DEFAULT, BN_EPS, NetworkGraph


@dataclass
class ForwardResult:
    activations: dict[str, np.ndarray]
    loss: float | None
    mode: str
    retained: bool
    mask_values: dict[str, float]
    labels: np.ndarray | None
    caches: dict[str, object] = field(default_factory=dict)


@dataclass
class Grads:
    params: dict[str, np.ndarray]
    masks: dict[str, float]


def _check_batch(graph: NetworkGraph, x: np.ndarray) -> None:
    node = graph.nodes[graph.input_id]
    if node.spatial:
        want = (node.channels, node.height, node.width)
        if x.ndim != 4 or x.shape[1:] != want:
            raise StructuralError(
                f"node '{node.id}': batch shape {x.shape} incompatible with "
                f"input {want}")
    else:
        if x.ndim != 2 or x.shape[1] != node.channels:
            raise StructuralError(
                f"node '{node.id}': batch shape {x.shape} incompatible with "
                f"{node.channels} input features")


def _mask_vector(node, mask_values) -> np.ndarray:
    groups = node.attrs["groups"]
    vals = np.empty(len(groups))
    for j, gid in enumerate(groups):
        if gid not in mask_values:
            raise ConfigurationError(
                f"mask node '{node.id}': no mask value for group '{gid}'")
        vals[j] = mask_values[gid]
    return vals


def forward(graph: NetworkGraph, x: np.ndarray, labels: np.ndarray | None = None,
            mode: str = "train", mask_values: dict[str, float] | None = None,
            retain: bool | None = None) -> ForwardResult:
    """Evaluate the graph on a batch; returns all activations and the loss.

    Mask nodes multiply each channel by its group's value from
    `mask_values` (pass 1.0 to disable a gate). Train mode uses batch
    statistics in batchnorm and updates the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode '{mode}'")
    training = mode == "train"
    if retain is None:
        retain = training
    mask_values = mask_values or {}
    _check_batch(graph, x)

    acts: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    loss = None
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        ins = [acts[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            out = x
        elif k == "dense":
            out = ops.dense_forward(ins[0], graph.params[f"{nid}.w"],
                                    graph.params.get(f"{nid}.b"))
        elif k == "conv2d":
            out, cache = ops.conv2d_forward(ins[0], graph.params[f"{nid}.w"],
                                            graph.params.get(f"{nid}.b"),
                                            node.attrs["stride"], retain)
            caches[nid] = cache
        elif k == "depthwise_conv2d":
            out, cache = ops.depthwise_forward(ins[0], graph.params[f"{nid}.w"],
                                               node.attrs["stride"], retain)
            caches[nid] = cache
        elif k == "scale":
            out = ops.scale_forward(ins[0], graph.params[f"{nid}.w"])
        elif k == "batchnorm":
            out, cache = ops.batchnorm_forward(
                ins[0], graph.params[f"{nid}.gamma"], graph.params[f"{nid}.beta"],
                graph.buffers[f"{nid}.running_mean"],
                graph.buffers[f"{nid}.running_var"],
                node.attrs.get("eps", BN_EPS),
                node.attrs.get("decay", BN_DECAY_DEFAULT),
                training, retain)
            caches[nid] = cache
        elif k == "relu":
            out = np.maximum(ins[0], 0.0)
        elif k == "avgpool":
            out = ops.avgpool_forward(ins[0], node.attrs.get("kernel", 2),
                                      node.attrs.get("stride", 2))
        elif k == "global_pool":
            out = ops.global_pool_forward(ins[0])
        elif k == "add":
            out = ins[0].copy()
            for extra in ins[1:]:
                out += extra
        elif k == "concat":
            out = np.concatenate(ins, axis=1)
        elif k == "mask":
            m = _mask_vector(node, mask_values)
            caches[nid] = m
            out = ins[0] * (m[None, :, None, None] if ins[0].ndim == 4
                            else m[None, :])
        elif k == "softmax_xent":
            if labels is None:
                out = ins[0]  # loss skipped when no labels supplied
                caches[nid] = None
            else:
                loss, probs = ops.softmax_xent_forward(ins[0], labels)
                caches[nid] = probs
                out = np.array([loss])
        else:  # pragma: no cover
            raise StructuralError(f"node '{nid}': no forward rule")
        if not np.all(np.isfinite(out)):
            raise StateError(f"node '{nid}': non-finite activation")
        acts[nid] = out

    return ForwardResult(acts, loss, mode, retain, dict(mask_values), labels,
                         caches)


def backward(graph: NetworkGraph, result: ForwardResult) -> Grads:
    """Gradient of the task loss w.r.t. parameters and mask group values."""
    if result.mode != "train" or not result.retained:
        raise StateError("backward requires a retained train-mode forward")
    if result.loss is None:
        raise StateError("backward requires a forward pass that computed a loss")

    acts = result.activations
    dparams: dict[str, np.ndarray] = {}
    dmasks: dict[str, float] = {}
    douts: dict[str, np.ndarray] = {}

    for nid in reversed(graph.topo_order()):
        node = graph.nodes[nid]
        k = node.kind
        if k == "softmax_xent":
            g = ops.softmax_xent_backward(result.caches[nid], result.labels)
            _accum(douts, node.inputs[0], g)
            continue
        if nid not in douts:
            continue  # no path to the loss
        g = douts[nid]
        if k == "input":
            continue
        if k == "dense":
            x = acts[node.inputs[0]]
            dx, dw, db = ops.dense_backward(g, x, graph.params[f"{nid}.w"],
                                            f"{nid}.b" in graph.params)
            dparams[f"{nid}.w"] = dw
            if db is not None:
                dparams[f"{nid}.b"] = db
        elif k == "conv2d":
            dx, dw, db = ops.conv2d_backward(g, result.caches[nid])
            dparams[f"{nid}.w"] = dw
            if db is not None:
                dparams[f"{nid}.b"] = db
        elif k == "depthwise_conv2d":
            dx, dw = ops.depthwise_backward(g, graph.params[f"{nid}.w"],
                                            result.caches[nid])
            dparams[f"{nid}.w"] = dw
        elif k == "scale":
            dx, dw = ops.scale_backward(g, acts[node.inputs[0]],
                                        graph.params[f"{nid}.w"])
            dparams[f"{nid}.w"] = dw
        elif k == "batchnorm":
            dx, dgamma, dbeta = ops.batchnorm_backward(
                g, graph.params[f"{nid}.gamma"], result.caches[nid])
            dparams[f"{nid}.gamma"] = dgamma
            dparams[f"{nid}.beta"] = dbeta
        elif k == "relu":
            dx = g * (acts[node.inputs[0]] > 0)
        elif k == "avgpool":
            dx = ops.avgpool_backward(g, acts[node.inputs[0]].shape,
                                      node.attrs.get("kernel", 2),
                                      node.attrs.get("stride", 2))
        elif k == "global_pool":
            dx = ops.global_pool_backward(g, acts[node.inputs[0]].shape)
        elif k == "add":
            for ref in node.inputs:
                _accum(douts, ref, g)
            continue
        elif k == "concat":
            off = 0
            for ref in node.inputs:
                c = graph.nodes[ref].channels
                _accum(douts, ref, g[:, off:off + c])
                off += c
            continue
        elif k == "mask":
            x = acts[node.inputs[0]]
            m = result.caches[nid]
            dx = g * (m[None, :, None, None] if x.ndim == 4 else m[None, :])
            axes = (0, 2, 3) if x.ndim == 4 else (0,)
            per_channel = (g * x).sum(axis=axes)
            for j, gid in enumerate(node.attrs["groups"]):
                dmasks[gid] = dmasks.get(gid, 0.0) + float(per_channel[j])
        else:  # pragma: no cover
            raise StructuralError(f"node '{nid}': no backward rule")
        _accum(douts, node.inputs[0], dx)

    return Grads(dparams, dmasks)


def _accum(douts: dict[str, np.ndarray], nid: str, g: np.ndarray) -> None:
    if nid in douts:
        douts[nid] = douts[nid] + g
    else:
        douts[nid] = g


@dataclass
class FDReport:
    max_rel_error: float
    errors: list[tuple[str, int, float]]      # (tensor, flat index, rel err)
    excluded: list[tuple[str, int, str]]      # (tensor, flat index, reason)
    nan_count: int

    def __str__(self):
        return (f"FDReport(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={len(self.errors)}, excluded={len(self.excluded)}, "
                f"nan={self.nan_count})")


def finite_difference_check(graph: NetworkGraph, x: np.ndarray,
                            labels: np.ndarray,
                            coordinates: list[tuple[str, int]] | None = None,
                            step: float = 1e-4,
                            mask_values: dict[str, float] | None = None,
                            rng: np.random.Generator | None = None,
                            max_coordinates: int = 200) -> FDReport:
    """Compare analytic task-loss gradients against central finite differences.

    Mask values (and hence any gate noise) are frozen by the caller, so the
    loss is a deterministic function of the parameters. Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-12).
    """
    saved_buffers = {k: v.copy() for k, v in graph.buffers.items()}
    result = forward(graph, x, labels, mode="train", mask_values=mask_values)
    grads = backward(graph, result)
    if coordinates is None:
        rng = rng or np.random.default_rng(0)
        pool = [(name, int(i)) for name in sorted(graph.params)
                for i in range(graph.params[name].size)]
        take = min(max_coordinates, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        coordinates = [pool[int(i)] for i in idx]

    def loss_at() -> float:
        return forward(graph, x, labels, mode="train", mask_values=mask_values,
                       retain=False).loss

    errors: list[tuple[str, int, float]] = []
    nan_count = 0
    for name, flat in coordinates:
        t = graph.params[name]
        orig = t.flat[flat]
        t.flat[flat] = orig + step
        lp = loss_at()
        t.flat[flat] = orig - step
        lm = loss_at()
        t.flat[flat] = orig
        fd = (lp - lm) / (2.0 * step)
        analytic = float(grads.params[name].flat[flat]) if name in grads.params else 0.0
        if not np.isfinite(fd):
            nan_count += 1
            continue
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
        errors.append((name, flat, rel))

    for k, v in saved_buffers.items():
        graph.buffers[k][...] = v

    max_err = max((e for _, _, e in errors), default=float("nan"))
    return FDReport(max_err, errors, [], nan_count)
