"""Desk-scale search-space builders.

Three families: a dense chain (`mlp`, optionally with per-feature input
gates), a cell space with parallel operators per block and dense
intra-cell connectivity (`oneshot_cell`), and a stage space of
inverted-bottleneck blocks with additive skips (`fbnet_stage`).

Builders are the single construction path: `build_space` instantiates the
full supernetwork, and materializing a pruned architecture re-runs the
same builder with width/presence overrides.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, StructuralError
from .graph import NetworkGraph, Node

SPACE_KINDS = ("mlp", "oneshot_cell", "fbnet_stage")
AGGREGATORS = ("add", "concat")


@dataclass
class SpaceConfig:
    kind: str = "mlp"
    classes: int = 2
    input_shape: tuple = (20,)          # (features,) or (C, H, W)
    # mlp
    hidden: tuple = (16, 16)
    feature_gates: bool = False
    batchnorm_mlp: bool = False
    # cell / stage spaces
    cells: int = 2
    blocks: int = 2
    base_width: int = 8
    operators: tuple = ("conv1x1", "sep3")
    aggregator: str = "concat"
    stem_width: int = 8
    stem_stride: int = 2
    downsample_every: int = 2
    stages: int = 2
    blocks_per_stage: int = 2
    expansion: int = 2

    def validate(self) -> None:
        if self.kind not in SPACE_KINDS:
            raise ConfigurationError(f"unknown space kind '{self.kind}'")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"unknown aggregator '{self.aggregator}'")
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")


@dataclass
class LayerInfo:
    width: int
    operator: str | None = None
    mandatory: bool = True
    selectable: bool = False   # scale layers: materialization picks channels
    block: str | None = None   # aggregator plumbing dies with its block


@dataclass
class OpInfo:
    block: str
    layers: list[str] = field(default_factory=list)


@dataclass
class Space:
    cfg: SpaceConfig
    graph: NetworkGraph
    layers: dict[str, LayerInfo]
    operators: dict[str, OpInfo]
    blocks: dict[str, list[str]]


@dataclass
class Architecture:
    """Exported result: layer widths plus operator presence flags."""
    widths: dict[str, int]
    operators: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"widths": dict(sorted(self.widths.items())),
                "operators": dict(sorted(self.operators.items()))}

    @classmethod
    def from_json(cls, doc: dict) -> "Architecture":
        return cls({k: int(v) for k, v in doc["widths"].items()},
                   {k: bool(v) for k, v in doc.get("operators", {}).items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Architecture":
        return cls.from_json(json.loads(Path(path).read_text()))


def dedupe_operator_menu(menu) -> tuple:
    """Drop menu entries that differ only in width, keeping the widest.

    Entries are `name` or `name:width`; a narrower duplicate is subsumed
    because per-channel gates can shrink the wider one to it.
    """
    best: dict[str, int | None] = {}
    order: list[str] = []
    for entry in menu:
        name, _, w = entry.partition(":")
        width = int(w) if w else None
        if name not in best:
            order.append(name)
            best[name] = width
        elif width is not None and (best[name] is None or width > best[name]):
            best[name] = width
    return tuple(name if best[name] is None else f"{name}:{best[name]}"
                 for name in order)


class _Builder:
    """Shared plumbing for the three space families."""

    def __init__(self, cfg: SpaceConfig, widths=None, present=None, select=None):
        cfg.validate()
        self.cfg = cfg
        self.widths = widths or {}
        self.present = present or {}
        self.select = select or {}
        self.g = NetworkGraph()
        self.layers: dict[str, LayerInfo] = {}
        self.operators: dict[str, OpInfo] = {}
        self.blocks: dict[str, list[str]] = {}

    def width_of(self, layer: str, full: int) -> int:
        w = int(self.widths.get(layer, full))
        if w < 0 or w > full:
            raise StructuralError(
                f"layer '{layer}': width {w} outside [0, {full}]")
        return w

    def op_present(self, op: str) -> bool:
        return bool(self.present.get(op, True))

    def register_layer(self, layer: str, full: int, operator=None,
                       mandatory=True, selectable=False, block=None) -> None:
        self.layers[layer] = LayerInfo(full, operator, mandatory, selectable,
                                       block)

    def conv_unit(self, name: str, x: str, full_width: int, kernel: int,
                  stride: int = 1, bn: bool = True, act: bool = True,
                  operator=None, mandatory=True, op_out=False,
                  block=None) -> str:
        self.register_layer(name, full_width, operator, mandatory, block=block)
        w = self.width_of(name, full_width)
        if w == 0:
            raise StructuralError(f"layer '{name}': materialized width 0")
        self.g.add_node(Node(name, "conv2d", [x],
                             {"units": w, "kernel": kernel, "stride": stride,
                              "bias": False, "op_out": op_out}))
        cur = name
        if bn:
            self.g.add_node(Node(f"{name}.bn", "batchnorm", [cur]))
            cur = f"{name}.bn"
        if act:
            self.g.add_node(Node(f"{name}.act", "relu", [cur]))
            cur = f"{name}.act"
        return cur

    def head(self, x: str, flat: bool) -> None:
        if not flat:
            self.g.add_node(Node("head.pool", "global_pool", [x]))
            x = "head.pool"
        self.g.add_node(Node("head.fc", "dense", [x],
                             {"units": self.cfg.classes, "bias": True}))
        self.g.add_node(Node("loss", "softmax_xent", ["head.fc"]))

    def space(self) -> Space:
        return Space(self.cfg, self.g, self.layers, self.operators, self.blocks)


def _build_mlp(b: _Builder) -> None:
    cfg = b.cfg
    if len(cfg.input_shape) != 1:
        raise ConfigurationError("mlp expects a flat input shape (features,)")
    feats = int(cfg.input_shape[0])
    b.g.add_node(Node("in", "input", channels=feats))
    cur = "in"
    if cfg.feature_gates:
        name = "featgate"
        b.register_layer(name, feats, mandatory=True, selectable=True)
        w = b.width_of(name, feats)
        sel = b.select.get(name)
        if sel is None:
            sel = list(range(w))
        if len(sel) != w:
            raise StructuralError(f"layer '{name}': {len(sel)} selected for width {w}")
        attrs = {"op_out": True}
        if w != feats or sel != list(range(feats)):
            attrs["select"] = list(sel)
        b.g.add_node(Node(name, "scale", [cur], attrs))
        cur = name
    for i, h in enumerate(cfg.hidden):
        name = f"h{i}"
        b.register_layer(name, int(h), mandatory=True)
        w = b.width_of(name, int(h))
        if w == 0:
            raise StructuralError(f"layer '{name}': materialized width 0")
        b.g.add_node(Node(name, "dense", [cur],
                          {"units": w, "bias": True, "op_out": True}))
        cur = name
        if cfg.batchnorm_mlp:
            b.g.add_node(Node(f"{name}.bn", "batchnorm", [cur]))
            cur = f"{name}.bn"
        b.g.add_node(Node(f"{name}.act", "relu", [cur]))
        cur = f"{name}.act"
    b.head(cur, flat=True)


def _operator_nodes(b: _Builder, op_kind: str, op_id: str, block: str,
                    x: str, width: int) -> str:
    """One parallel operator; returns its output node id."""
    if op_kind == "conv1x1":
        out = b.conv_unit(f"{op_id}.pw", x, width, 1,
                          operator=op_id, mandatory=False, op_out=True)
    elif op_kind in ("sep3", "sep5"):
        k = 3 if op_kind == "sep3" else 5
        dw = f"{op_id}.dw"
        b.g.add_node(Node(dw, "depthwise_conv2d", [x],
                          {"kernel": k, "stride": 1}))
        out = b.conv_unit(f"{op_id}.pw", dw, width, 1,
                          operator=op_id, mandatory=False, op_out=True)
    else:
        raise ConfigurationError(f"unknown operator kind '{op_kind}'")
    return out


def _aggregate(b: _Builder, block: str, outputs: list[str], width: int) -> str:
    cfg = b.cfg
    if cfg.aggregator == "add":
        widths = {b.g.nodes[o].channels for o in outputs}
        if len(widths) != 1:
            raise StructuralError(
                f"block '{block}': additive aggregator needs equal operator "
                f"widths, got {sorted(widths)}")
        if len(outputs) == 1:
            return outputs[0]
        b.g.add_node(Node(f"{block}.agg", "add", outputs))
        return f"{block}.agg"
    # concat aggregator: append a pointwise projection
    if len(outputs) == 1:
        cat = outputs[0]
    else:
        b.g.add_node(Node(f"{block}.cat", "concat", outputs))
        cat = f"{block}.cat"
    return b.conv_unit(f"{block}.proj", cat, width, 1, mandatory=True,
                       block=block)


def _build_oneshot(b: _Builder) -> None:
    cfg = b.cfg
    if len(cfg.input_shape) != 3:
        raise ConfigurationError("oneshot_cell expects input shape (C, H, W)")
    c, h, w = cfg.input_shape
    b.g.add_node(Node("in", "input", channels=c))
    b.g.nodes["in"].height, b.g.nodes["in"].width = h, w
    cur = b.conv_unit("stem", "in", cfg.stem_width, 3, stride=cfg.stem_stride)
    menu = dedupe_operator_menu(cfg.operators)
    for ci in range(cfg.cells):
        feeds = [cur]
        for bi in range(cfg.blocks):
            block = f"c{ci}.b{bi}"
            if len(feeds) == 1:
                x = feeds[0]
            else:
                b.g.add_node(Node(f"{block}.in", "concat", list(feeds)))
                x = f"{block}.in"
            b.blocks[block] = []
            outputs = []
            for entry in menu:
                kind, _, ww = entry.partition(":")
                op_width = int(ww) if ww else cfg.base_width
                op_id = f"{block}.{kind}"
                b.blocks[block].append(op_id)
                b.operators[op_id] = OpInfo(block)
                if not b.op_present(op_id):
                    continue
                out = _operator_nodes(b, kind, op_id, block, x, op_width)
                b.operators[op_id].layers = [
                    lid for lid, info in b.layers.items() if info.operator == op_id]
                outputs.append(out)
            if outputs:
                cur = _aggregate(b, block, outputs, cfg.base_width)
                feeds.append(cur)
            # a block with every operator deselected simply drops out of
            # the cell's concat wiring
        cur = feeds[-1]
        if (cfg.downsample_every and (ci + 1) % cfg.downsample_every == 0
                and ci != cfg.cells - 1):
            b.g.add_node(Node(f"down{ci}", "avgpool", [cur],
                              {"kernel": 2, "stride": 2}))
            cur = f"down{ci}"
    b.head(cur, flat=False)


def _build_fbnet(b: _Builder) -> None:
    cfg = b.cfg
    if len(cfg.input_shape) != 3:
        raise ConfigurationError("fbnet_stage expects input shape (C, H, W)")
    c, h, w = cfg.input_shape
    b.g.add_node(Node("in", "input", channels=c))
    b.g.nodes["in"].height, b.g.nodes["in"].width = h, w
    cur = b.conv_unit("stem", "in", cfg.stem_width, 3, stride=cfg.stem_stride)
    menu = dedupe_operator_menu(cfg.operators)
    for si in range(cfg.stages):
        stage_width = cfg.base_width * (2 ** si)
        for bi in range(cfg.blocks_per_stage):
            block = f"s{si}.b{bi}"
            stride = 2 if (bi == 0 and si > 0) else 1
            block_in = cur
            b.blocks[block] = []
            outputs = []
            for entry in menu:
                kind, _, _ = entry.partition(":")
                k = {"mb3": 3, "mb5": 5, "sep3": 3, "sep5": 5}.get(kind)
                if k is None:
                    raise ConfigurationError(
                        f"unknown operator kind '{kind}' for fbnet_stage")
                op_id = f"{block}.{kind}"
                b.blocks[block].append(op_id)
                b.operators[op_id] = OpInfo(block)
                if not b.op_present(op_id):
                    continue
                exp = b.conv_unit(f"{op_id}.expand", block_in,
                                  cfg.expansion * stage_width, 1,
                                  operator=op_id, mandatory=False)
                dw = f"{op_id}.dw"
                b.g.add_node(Node(dw, "depthwise_conv2d", [exp],
                                  {"kernel": k, "stride": stride}))
                proj = b.conv_unit(f"{op_id}.project", dw, stage_width, 1,
                                   act=False, operator=op_id, mandatory=False,
                                   op_out=True)
                b.operators[op_id].layers = [
                    lid for lid, info in b.layers.items()
                    if info.operator == op_id]
                outputs.append(proj)
            if not outputs:
                if stride != 1:
                    raise StructuralError(
                        f"block '{block}': no operators present and no bypass")
                cur = block_in  # skip connection only: identity block
                continue
            skip_ok = (stride == 1 and
                       b.g.nodes[block_in].channels == b.g.nodes[outputs[0]].channels)
            addends = outputs + ([block_in] if skip_ok else [])
            if len(addends) == 1:
                cur = addends[0]
            else:
                b.g.add_node(Node(f"{block}.agg", "add", addends))
                cur = f"{block}.agg"
    b.head(cur, flat=False)


def build_graph(cfg: SpaceConfig, widths=None, present=None, select=None) -> Space:
    b = _Builder(cfg, widths, present, select)
    if cfg.kind == "mlp":
        _build_mlp(b)
    elif cfg.kind == "oneshot_cell":
        _build_oneshot(b)
    else:
        _build_fbnet(b)
    return b.space()


def build_space(cfg: SpaceConfig) -> Space:
    """Instantiate the full (unmasked, unpruned) supernetwork."""
    return build_graph(cfg)


def full_architecture(space: Space) -> Architecture:
    return Architecture({lid: info.width for lid, info in space.layers.items()},
                        {op: True for op in space.operators})


def equivalence_projection(widths: list[int]) -> np.ndarray:
    """Pointwise projection weights making concat+1x1 equal an elementwise sum.

    For n operator outputs of equal width w, returns (w, n*w, 1, 1) weights
    made of n horizontally stacked identity blocks.
    """
    if len(set(widths)) != 1:
        raise StructuralError(
            f"equivalence undefined for unequal widths {sorted(set(widths))}")
    w, n = widths[0], len(widths)
    proj = np.zeros((w, n * w, 1, 1))
    for j in range(n):
        proj[:, j * w:(j + 1) * w, 0, 0] = np.eye(w)
    return proj


def apply_width_multiplier(space: Space, alpha: float) -> Architecture:
    """Uniformly scale every searchable width: w -> max(1, floor(alpha*w))."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"width multiplier must be in (0, 1], got {alpha}")
    widths = {lid: max(1, int(np.floor(alpha * info.width)))
              for lid, info in space.layers.items()}
    return Architecture(widths, {op: True for op in space.operators})


def sample_random_architecture(space: Space, rng: np.random.Generator,
                               alpha_range=(0.25, 1.0)) -> Architecture:
    """Random operator subset (>=1 per block) plus one global width multiplier."""
    present: dict[str, bool] = {}
    for block, ops in space.blocks.items():
        while True:
            flags = [bool(rng.random() < 0.5) for _ in ops]
            if any(flags) or not ops:
                break
        for op, f in zip(ops, flags):
            present[op] = f
    alpha = float(rng.uniform(*alpha_range))
    widths = {}
    for lid, info in space.layers.items():
        if info.operator is not None and not present.get(info.operator, True):
            widths[lid] = 0
        else:
            widths[lid] = max(1, int(np.floor(alpha * info.width)))
    return Architecture(widths, present)
