"""Row-column channel grouping and mask-node insertion.

A group ties together everything that must die when one channel is pruned:
the producing weight row, the channel's bias/norm parameters, any
per-channel kernels riding on it (depthwise, scale), and every consuming
weight column downstream. Add nodes unify the groups of their addends
channel-wise; channels that cannot be pruned (graph input, classifier
output, fanout before a gate) resolve to always-on sentinel groups.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .graph import NetworkGraph, Node
from . import autodiff

PRODUCER_KINDS = ("conv2d", "dense", "scale")
_PASS_KINDS = ("batchnorm", "relu", "avgpool")

MASK_ALL = "mask-all-convs"
MASK_OP_OUTPUTS = "mask-operator-outputs-only"
POLICIES = (MASK_ALL, MASK_OP_OUTPUTS)


@dataclass(frozen=True)
class Slice:
    """One channel's stake in a parameter tensor."""
    param: str
    axis: int
    index: int


@dataclass
class MaskGroup:
    gid: str
    always_on: bool = False
    producing: list[Slice] = field(default_factory=list)
    consuming: list[Slice] = field(default_factory=list)
    through: list[Slice] = field(default_factory=list)   # depthwise/scale weights
    aux: list[Slice] = field(default_factory=list)       # bias, batchnorm affine
    channels: list[tuple[str, int]] = field(default_factory=list)  # gated (mask, ch)


@dataclass
class GroupMap:
    groups: dict[str, MaskGroup]
    node_groups: dict[str, list[str]]          # node id -> group id per out channel
    upstream: dict[str, set[str]]
    downstream: dict[str, set[str]]

    def learnable(self) -> list[str]:
        return [g for g, grp in self.groups.items() if not grp.always_on]

    def default_mask_values(self) -> dict[str, float]:
        return {g: 1.0 for g in self.groups}

    def to_json(self) -> dict:
        return {
            gid: {
                "always_on": grp.always_on,
                "producing": [[s.param, s.axis, s.index] for s in grp.producing],
                "consuming": [[s.param, s.axis, s.index] for s in grp.consuming],
                "through": [[s.param, s.axis, s.index] for s in grp.through],
                "aux": [[s.param, s.axis, s.index] for s in grp.aux],
                "channels": [list(c) for c in grp.channels],
                "upstream": sorted(self.upstream.get(gid, ())),
                "downstream": sorted(self.downstream.get(gid, ())),
            }
            for gid, grp in self.groups.items()
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


# ------------------------------------------------------------ mask insertion

def classifier_layer(graph: NetworkGraph) -> str | None:
    """The producer whose output reaches the logits with no producer between."""
    cur = graph.output_id
    while cur is not None:
        node = graph.nodes[cur]
        if node.kind in PRODUCER_KINDS or node.kind in ("conv2d",):
            return cur
        if not node.inputs:
            return None
        cur = node.inputs[0]
    return None


def insert_masks(graph: NetworkGraph, policy: str = MASK_ALL,
                 include: list[str] | None = None) -> NetworkGraph:
    """Return a copy of `graph` with a mask node after each gated producer.

    Placement: directly after the producer's batchnorm when one follows,
    otherwise directly after the producer, always before the nonlinearity.
    The classifier layer and the graph input are never masked.
    """
    if graph.has_masks():
        raise StructuralError("graph already contains mask nodes")
    if policy not in POLICIES:
        raise StructuralError(f"unknown mask policy '{policy}'")
    clf = classifier_layer(graph)
    if include is not None:
        if clf in include:
            raise StructuralError(
                f"node '{clf}': masking the classifier logits is not allowed")
        targets = list(include)
        for t in targets:
            if graph.nodes[t].kind not in PRODUCER_KINDS:
                raise StructuralError(f"node '{t}': not a maskable producer")
    else:
        targets = []
        for nid, node in graph.nodes.items():
            if node.kind not in PRODUCER_KINDS or nid == clf:
                continue
            if policy == MASK_OP_OUTPUTS and not node.attrs.get("op_out", False):
                continue
            targets.append(nid)

    # attach point: ride through a single batchnorm if present
    attach_for: dict[str, str] = {}
    for t in targets:
        attach = t
        cons = graph.consumers(attach)
        if len(cons) == 1 and graph.nodes[cons[0]].kind == "batchnorm":
            attach = cons[0]
        attach_for[attach] = t

    out = NetworkGraph()
    rename: dict[str, str] = {}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        copy = Node(nid, node.kind,
                    [rename.get(i, i) for i in node.inputs],
                    {k: (list(v) if isinstance(v, list) else v)
                     for k, v in node.attrs.items()})
        if node.kind == "input":
            copy.channels, copy.height, copy.width = (node.channels,
                                                      node.height, node.width)
        out.add_node(copy)
        if nid in attach_for:
            mask_id = f"{attach_for[nid]}.mask"
            out.add_node(Node(mask_id, "mask", [nid]))
            rename[nid] = mask_id
    out.params = {k: v.copy() for k, v in graph.params.items()}
    out.buffers = {k: v.copy() for k, v in graph.buffers.items()}
    out.input_id, out.loss_id = graph.input_id, graph.loss_id
    out.output_id = graph.output_id
    return out


# --------------------------------------------------------- group assignment

class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> str:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra
        return ra

    def classes(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return out


def _bound_producer(graph: NetworkGraph, mask_id: str) -> str | None:
    """Producer whose sole output path (through per-channel ops) hits the mask."""
    cur = graph.nodes[mask_id].inputs[0]
    while True:
        if len(graph.consumers(cur)) != 1:
            return None
        node = graph.nodes[cur]
        if node.kind in PRODUCER_KINDS:
            return cur
        if node.kind in _PASS_KINDS and len(node.inputs) == 1:
            cur = node.inputs[0]
            continue
        return None


def _is_sentinel(label: str) -> bool:
    return label.startswith("~")


def assign_groups(graph: NetworkGraph) -> GroupMap:
    """Partition every channel into its mask group.

    Canonicalizes mask-node group ids in place; calling twice is a no-op
    (the second pass reproduces identical groups).
    """
    if not graph.has_masks():
        raise StructuralError("assign_groups requires a masked graph")
    uf = _UnionFind()
    labels: dict[str, list[str]] = {}
    bound: dict[str, str] = {}
    for mask in graph.mask_nodes():
        producer = _bound_producer(graph, mask.id)
        if producer is not None:
            bound[producer] = mask.id

    for nid in graph.topo_order():
        node = graph.nodes[nid]
        k = node.kind
        if k == "input":
            labels[nid] = [f"~{nid}:c{j:03d}" for j in range(node.channels)]
        elif k in ("conv2d", "dense"):
            if nid in bound:
                labels[nid] = list(graph.nodes[bound[nid]].attrs["groups"])
            else:
                labels[nid] = [f"~{nid}:c{j:03d}" for j in range(node.channels)]
        elif k == "scale":
            sel = node.attrs.get("select")
            src = labels[node.inputs[0]]
            in_labels = [src[s] for s in sel] if sel is not None else list(src)
            if nid in bound:
                labels[nid] = list(graph.nodes[bound[nid]].attrs["groups"])
                # a prunable input channel drags the scale channel with it
                for j, lab in enumerate(in_labels):
                    if not _is_sentinel(lab):
                        uf.union(labels[nid][j], lab)
            else:
                labels[nid] = in_labels
        elif k == "depthwise_conv2d":
            labels[nid] = list(labels[node.inputs[0]])
        elif k in ("batchnorm", "relu", "avgpool", "global_pool"):
            labels[nid] = list(labels[node.inputs[0]])
        elif k == "add":
            per = [labels[i] for i in node.inputs]
            merged = []
            for j in range(node.channels):
                root = per[0][j]
                for other in per[1:]:
                    root = uf.union(root, other[j])
                merged.append(root)
            labels[nid] = merged
        elif k == "concat":
            labels[nid] = [lab for i in node.inputs for lab in labels[i]]
        elif k == "mask":
            in_l = labels[node.inputs[0]]
            gids = node.attrs["groups"]
            merged = []
            for j in range(node.channels):
                if gids[j] == in_l[j]:
                    merged.append(uf.find(gids[j]))
                else:
                    merged.append(uf.union(gids[j], in_l[j]))
            labels[nid] = merged
        elif k == "softmax_xent":
            labels[nid] = []
        else:  # pragma: no cover
            raise StructuralError(f"node '{nid}': no grouping rule")
        for lab in labels[nid]:
            uf.find(lab)

    # canonical name per class: the smallest gate id, else the smallest sentinel
    canon: dict[str, str] = {}
    always: dict[str, bool] = {}
    for root, members in uf.classes().items():
        gate_ids = sorted(m for m in members if not _is_sentinel(m))
        has_sentinel = any(_is_sentinel(m) for m in members)
        name = gate_ids[0] if gate_ids else sorted(members)[0]
        for m in members:
            canon[m] = name
        always[name] = has_sentinel or not gate_ids

    node_groups = {nid: [canon.get(l, l) for l in labs]
                   for nid, labs in labels.items()}
    for nid, labs in node_groups.items():
        node = graph.nodes[nid]
        if node.kind == "mask":
            node.attrs["groups"] = list(labs)
        for lab in labs:
            always.setdefault(lab, _is_sentinel(lab))

    groups = {gid: MaskGroup(gid, always_on=flag)
              for gid, flag in sorted(always.items())}
    upstream: dict[str, set[str]] = {g: set() for g in groups}
    downstream: dict[str, set[str]] = {g: set() for g in groups}

    for nid in graph.topo_order():
        node = graph.nodes[nid]
        k = node.kind
        out_l = node_groups[nid]
        if k in ("conv2d", "dense"):
            in_l = node_groups[node.inputs[0]]
            out_axis, in_axis = (0, 1) if k == "conv2d" else (1, 0)
            w = f"{nid}.w"
            for j, g in enumerate(out_l):
                groups[g].producing.append(Slice(w, out_axis, j))
                if f"{nid}.b" in graph.params:
                    groups[g].aux.append(Slice(f"{nid}.b", 0, j))
            for c, g in enumerate(in_l):
                groups[g].consuming.append(Slice(w, in_axis, c))
            for go in set(out_l):
                for gi in set(in_l):
                    if go != gi:
                        upstream[go].add(gi)
                        downstream[gi].add(go)
        elif k == "depthwise_conv2d":
            for j, g in enumerate(out_l):
                groups[g].through.append(Slice(f"{nid}.w", 0, j))
        elif k == "scale":
            for j, g in enumerate(out_l):
                groups[g].through.append(Slice(f"{nid}.w", 0, j))
        elif k == "batchnorm":
            for j, g in enumerate(out_l):
                groups[g].aux.append(Slice(f"{nid}.gamma", 0, j))
                groups[g].aux.append(Slice(f"{nid}.beta", 0, j))
        elif k == "mask":
            for j, g in enumerate(out_l):
                groups[g].channels.append((nid, j))

    return GroupMap(groups, node_groups, upstream, downstream)


# ------------------------------------------------------ structural deletion

def delete_group(graph: NetworkGraph, gmap: GroupMap, gid: str) -> NetworkGraph:
    """Physically remove every channel of `gid`: rows, columns, norms, gates."""
    grp = gmap.groups.get(gid)
    if grp is None:
        raise StructuralError(f"unknown group '{gid}'")
    if grp.always_on:
        raise StructuralError(f"group '{gid}' is always-on and cannot be deleted")
    keep: dict[str, list[int]] = {}
    for nid, labs in gmap.node_groups.items():
        keep[nid] = [j for j, lab in enumerate(labs) if lab != gid]
        node = graph.nodes[nid]
        if node.kind != "softmax_xent" and not keep[nid]:
            raise StructuralError(
                f"node '{nid}': deleting group '{gid}' removes every channel")

    out = NetworkGraph()
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        attrs = {k: (list(v) if isinstance(v, list) else v)
                 for k, v in node.attrs.items()}
        kept = keep[nid]
        if node.kind == "conv2d" or node.kind == "dense":
            attrs["units"] = len(kept)
        elif node.kind == "mask":
            attrs["groups"] = [node.attrs["groups"][j] for j in kept]
        elif node.kind == "scale":
            sel = attrs.get("select") or list(range(node.channels))
            sel = [sel[j] for j in kept]
            in_keep = keep[node.inputs[0]]
            pos = {old: new for new, old in enumerate(in_keep)}
            try:
                attrs["select"] = [pos[s] for s in sel]
            except KeyError:
                raise StructuralError(
                    f"node '{nid}': scale selects a deleted input channel")
        new = Node(nid, node.kind, list(node.inputs), attrs)
        if node.kind == "input":
            new.channels, new.height, new.width = node.channels, node.height, node.width
        out.add_node(new)

    for name, t in graph.params.items():
        nid = graph.owner_of(name)
        node = graph.nodes[nid]
        kept = keep[nid]
        if name.endswith(".w") and node.kind == "conv2d":
            t = t[kept][:, keep[node.inputs[0]]]
        elif name.endswith(".w") and node.kind == "dense":
            t = t[np.ix_(keep[node.inputs[0]], kept)]
        elif name.endswith(".w") and node.kind in ("depthwise_conv2d", "scale"):
            t = t[kept]
        else:  # bias / gamma / beta
            t = t[kept]
        if out.params[name].shape != t.shape:
            raise StructuralError(
                f"deletion produced shape {t.shape} for '{name}', "
                f"expected {out.params[name].shape}")
        out.params[name] = t.copy()
    for name, t in graph.buffers.items():
        out.buffers[name] = t[keep[graph.owner_of(name)]].copy()

    out.input_id, out.output_id, out.loss_id = (graph.input_id, graph.output_id,
                                                graph.loss_id)
    return out


def group_zero_equivalence(graph: NetworkGraph, gmap: GroupMap, gid: str,
                           x: np.ndarray, mode: str = "eval") -> bool:
    """True iff hard-zero masking of `gid` matches structural deletion exactly."""
    grp = gmap.groups[gid]
    if grp.always_on:
        return True
    values = gmap.default_mask_values()
    values[gid] = 0.0
    masked = autodiff.forward(graph.clone(), x, mode=mode, mask_values=values,
                              retain=False)
    deleted_graph = delete_group(graph, gmap, gid)
    deleted = autodiff.forward(deleted_graph, x, mode=mode,
                               mask_values=gmap.default_mask_values(),
                               retain=False)
    a = masked.activations[graph.output_id]
    b = deleted.activations[graph.output_id]
    keep = [j for j, lab in enumerate(gmap.node_groups[graph.output_id])
            if lab != gid]
    return bool(np.array_equal(a[:, keep], b))
