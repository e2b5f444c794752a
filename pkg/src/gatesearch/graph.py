"""Computation graph: typed nodes, shape inference, parameters, serialization.

Activations are float64 arrays shaped (N, C, H, W) for spatial data and
(N, C) for flat feature data. A node with height == 0 produces flat data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructuralError

# Node kinds understood by the engine.
KINDS = (
    "input", "dense", "conv2d", "depthwise_conv2d", "scale", "batchnorm",
    "relu", "avgpool", "global_pool", "add", "concat", "mask", "softmax_xent",
)

BN_DECAY_DEFAULT = 0.99  # short desk-scale runs want fast-adapting stats
BN_EPS = 1e-5


@dataclass
class Node:
    """One operation in the graph.

    `attrs` holds kind-specific settings (kernel, stride, groups, ...).
    Output shape metadata (channels/height/width) is filled by shape
    inference when the node is added.
    """
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    channels: int = 0
    height: int = 0
    width: int = 0

    @property
    def spatial(self) -> bool:
        return self.height > 0

    def out_positions(self) -> int:
        """Number of spatial positions of the output (1 for flat data)."""
        return self.height * self.width if self.spatial else 1


class NetworkGraph:
    """Directed acyclic graph of nodes plus owned parameter tensors.

    Single-writer: one training step may mutate parameters/buffers at a
    time. Forward in eval mode on an unshared instance is side-effect free.
    """

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.input_id: str | None = None
        self.output_id: str | None = None
        self.loss_id: str | None = None
        self._topo: list[str] | None = None

    # ------------------------------------------------------------------ build

    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise StructuralError(f"node '{node.id}': duplicate id")
        if node.kind not in KINDS:
            raise StructuralError(f"node '{node.id}': unknown kind '{node.kind}'")
        for ref in node.inputs:
            if ref not in self.nodes:
                raise StructuralError(
                    f"node '{node.id}': input '{ref}' not defined before use")
        self._infer_shape(node)
        self.nodes[node.id] = node
        self._alloc_params(node)
        self._topo = None
        if node.kind == "input":
            self.input_id = node.id
        if node.kind == "softmax_xent":
            self.loss_id = node.id
            self.output_id = node.inputs[0]
        return node

    def _infer_shape(self, node: Node) -> None:
        ins = [self.nodes[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            if node.channels <= 0:
                raise StructuralError(f"node '{node.id}': input needs channels")
            return
        if not ins:
            raise StructuralError(f"node '{node.id}': {k} needs inputs")
        a = ins[0]
        if k == "dense":
            if a.spatial:
                raise StructuralError(
                    f"node '{node.id}': dense requires flat input, got spatial "
                    f"from '{a.id}'")
            node.channels = int(node.attrs["units"])
            node.height = node.width = 0
        elif k in ("conv2d", "depthwise_conv2d"):
            if not a.spatial:
                raise StructuralError(f"node '{node.id}': {k} requires spatial input")
            kk = int(node.attrs["kernel"])
            s = int(node.attrs.get("stride", 1))
            if kk not in (1, 3, 5) or s not in (1, 2):
                raise StructuralError(
                    f"node '{node.id}': unsupported kernel={kk} stride={s}")
            pad = kk // 2
            node.attrs["stride"] = s
            node.height = (a.height + 2 * pad - kk) // s + 1
            node.width = (a.width + 2 * pad - kk) // s + 1
            if k == "conv2d":
                node.channels = int(node.attrs["units"])
            else:
                node.channels = a.channels
        elif k in ("batchnorm", "relu", "scale", "mask"):
            node.channels, node.height, node.width = a.channels, a.height, a.width
            if k == "mask":
                if len(node.inputs) != 1:
                    raise StructuralError(f"node '{node.id}': mask takes one input")
                groups = node.attrs.get("groups")
                if groups is None:
                    node.attrs["groups"] = [f"{node.id}:c{j}" for j in range(a.channels)]
                elif len(groups) != a.channels:
                    raise StructuralError(
                        f"node '{node.id}': mask has {len(groups)} groups for "
                        f"{a.channels} channels")
        elif k == "avgpool":
            kk = int(node.attrs.get("kernel", 2))
            s = int(node.attrs.get("stride", kk))
            node.channels = a.channels
            node.height = (a.height - kk) // s + 1
            node.width = (a.width - kk) // s + 1
        elif k == "global_pool":
            node.channels, node.height, node.width = a.channels, 0, 0
        elif k == "add":
            shapes = {(i.channels, i.height, i.width) for i in ins}
            if len(shapes) != 1:
                raise StructuralError(
                    f"node '{node.id}': add inputs disagree on shape: "
                    + ", ".join(f"{i.id}={(i.channels, i.height, i.width)}" for i in ins))
            node.channels, node.height, node.width = ins[0].channels, a.height, a.width
        elif k == "concat":
            hw = {(i.height, i.width) for i in ins}
            if len(hw) != 1:
                raise StructuralError(f"node '{node.id}': concat spatial mismatch")
            node.channels = sum(i.channels for i in ins)
            node.height, node.width = a.height, a.width
        elif k == "softmax_xent":
            if a.spatial:
                raise StructuralError(f"node '{node.id}': loss requires flat logits")
            node.channels, node.height, node.width = a.channels, 0, 0
        else:  # pragma: no cover - KINDS check above
            raise StructuralError(f"node '{node.id}': unhandled kind {k}")

    def _alloc_params(self, node: Node) -> None:
        """Allocate zero-filled parameter tensors owned by `node`."""
        k, nid = node.kind, node.id
        cin = self.nodes[node.inputs[0]].channels if node.inputs else 0
        if k == "dense":
            self.params[f"{nid}.w"] = np.zeros((cin, node.channels))
            if node.attrs.get("bias", True):
                self.params[f"{nid}.b"] = np.zeros(node.channels)
        elif k == "conv2d":
            kk = node.attrs["kernel"]
            self.params[f"{nid}.w"] = np.zeros((node.channels, cin, kk, kk))
            if node.attrs.get("bias", False):
                self.params[f"{nid}.b"] = np.zeros(node.channels)
        elif k == "depthwise_conv2d":
            kk = node.attrs["kernel"]
            self.params[f"{nid}.w"] = np.zeros((node.channels, kk, kk))
        elif k == "scale":
            self.params[f"{nid}.w"] = np.ones(node.channels)
        elif k == "batchnorm":
            self.params[f"{nid}.gamma"] = np.ones(node.channels)
            self.params[f"{nid}.beta"] = np.zeros(node.channels)
            self.buffers[f"{nid}.running_mean"] = np.zeros(node.channels)
            self.buffers[f"{nid}.running_var"] = np.ones(node.channels)

    # --------------------------------------------------------------- queries

    def topo_order(self) -> list[str]:
        """Topological order; deterministic (insertion order is already one)."""
        if self._topo is None:
            seen: set[str] = set()
            order: list[str] = []
            for nid, node in self.nodes.items():
                for ref in node.inputs:
                    if ref not in seen:
                        raise StructuralError(
                            f"node '{nid}': input '{ref}' appears after consumer")
                seen.add(nid)
                order.append(nid)
            self._topo = order
        return self._topo

    def consumers(self, node_id: str) -> list[str]:
        return [nid for nid, n in self.nodes.items() if node_id in n.inputs]

    def owner_of(self, param_name: str) -> str:
        return param_name.rsplit(".", 1)[0]

    def has_masks(self) -> bool:
        return any(n.kind == "mask" for n in self.nodes.values())

    def mask_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind == "mask"]

    def clone(self) -> "NetworkGraph":
        g = NetworkGraph()
        for node in self.nodes.values():
            g.nodes[node.id] = Node(node.id, node.kind, list(node.inputs),
                                    {k: (list(v) if isinstance(v, list) else v)
                                     for k, v in node.attrs.items()},
                                    node.channels, node.height, node.width)
        g.params = {k: v.copy() for k, v in self.params.items()}
        g.buffers = {k: v.copy() for k, v in self.buffers.items()}
        g.input_id, g.output_id, g.loss_id = self.input_id, self.output_id, self.loss_id
        return g

    def init_parameters(self, rng: np.random.Generator) -> None:
        """Fan-in-scaled uniform init for weights; identity for norm/scale."""
        for name in self.params:
            node = self.nodes[self.owner_of(name)]
            t = self.params[name]
            if name.endswith(".w") and node.kind in ("dense", "conv2d", "depthwise_conv2d"):
                if node.kind == "dense":
                    fan_in = t.shape[0]
                elif node.kind == "conv2d":
                    fan_in = t.shape[1] * t.shape[2] * t.shape[3]
                else:
                    fan_in = t.shape[1] * t.shape[2]
                bound = float(np.sqrt(6.0 / max(fan_in, 1)))
                t[...] = rng.uniform(-bound, bound, size=t.shape)
            elif name.endswith(".b") or name.endswith(".beta"):
                t[...] = 0.0
            elif name.endswith(".gamma") or (name.endswith(".w") and node.kind == "scale"):
                t[...] = 1.0
        for name, t in self.buffers.items():
            t[...] = 1.0 if name.endswith(".running_var") else 0.0

    # --------------------------------------------------------- serialization

    def to_json(self) -> dict:
        return {
            "input": self.input_id,
            "output": self.output_id,
            "loss": self.loss_id,
            "nodes": [
                {"id": n.id, "kind": n.kind, "inputs": n.inputs, "attrs": n.attrs,
                 "channels": n.channels, "height": n.height, "width": n.width}
                for n in self.nodes.values()
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkGraph":
        g = cls()
        for spec in doc["nodes"]:
            node = Node(spec["id"], spec["kind"], list(spec["inputs"]),
                        dict(spec["attrs"]))
            if node.kind == "input":
                node.channels = spec["channels"]
                node.height, node.width = spec["height"], spec["width"]
            g.add_node(node)
        g.input_id, g.output_id, g.loss_id = doc["input"], doc["output"], doc["loss"]
        return g

    def save(self, directory: str | Path, prefix: str = "graph") -> None:
        """Write `<prefix>.json` (structure) and `<prefix>.npz` (tensors)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{prefix}.json").write_text(json.dumps(self.to_json(), indent=2))
        blobs = {f"param/{k}": v for k, v in self.params.items()}
        blobs.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        np.savez(directory / f"{prefix}.npz", **blobs)

    @classmethod
    def load(cls, directory: str | Path, prefix: str = "graph") -> "NetworkGraph":
        directory = Path(directory)
        g = cls.from_json(json.loads((directory / f"{prefix}.json").read_text()))
        with np.load(directory / f"{prefix}.npz") as blobs:
            for key in blobs.files:
                kind, name = key.split("/", 1)
                target = g.params if kind == "param" else g.buffers
                if name not in target:
                    raise StructuralError(f"checkpoint tensor '{name}' unknown to graph")
                if target[name].shape != blobs[key].shape:
                    raise StructuralError(
                        f"checkpoint tensor '{name}' shape {blobs[key].shape} != "
                        f"{target[name].shape}")
                target[name] = blobs[key].astype(np.float64)
        return g
