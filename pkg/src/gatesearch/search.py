"""Two-phase pipeline: gate learning, export, materialization, retraining.

The learning phase minimizes task loss plus lambda times the expected
resource cost, jointly updating weights and gate logits with ADAM. Export
floors each layer's summed keep probability into a width; retraining
trains the pruned network from scratch on the task loss alone. Width
multiplier, random search and deterministic-L1 baselines share the same
spaces, cost terms and export format.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import cost as costmod
from .autodiff import FDReport, backward, forward
from .errors import ConfigurationError, DivergenceError
from .gates import GateSet, mask_logit_grad, sigmoid
from .graph import NetworkGraph
from .grouping import GroupMap, MASK_ALL, assign_groups, insert_masks
from .optim import AdamConfig, AdamState, adam_step
from .rng import spawn_streams
from .spaces import Architecture, Space, build_graph, sample_random_architecture

log = logging.getLogger(__name__)

GATE_PARAM = "gates.nu"
L1_EXPORT_THRESHOLD = 1e-2


@dataclass
class SearchConfig:
    lam: float = 1e-5
    tau: float = 0.001
    nu_init: float = 2.5
    penalty: str = "expected"       # expected | sampled
    metric: str = "params"
    mask_policy: str = MASK_ALL
    count_aux_params: bool = False
    al_epochs: int = 10
    retrain_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.02
    lr_decay: float = 0.5
    lr_decay_epochs: float = 10.0
    retrain_lr: float | None = None
    retrain_batch_size: int | None = None
    weight_decay: float = 1.7e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigurationError("regularization strength must be >= 0")
        if self.penalty not in ("expected", "sampled"):
            raise ConfigurationError(f"unknown penalty mode '{self.penalty}'")
        if self.tau <= 0:
            raise ConfigurationError("temperature must be positive")

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.adam_beta1,
                          beta2=self.adam_beta2, eps=self.adam_eps,
                          weight_decay=self.weight_decay)


@dataclass
class RunHistory:
    records: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, **rec) -> None:
        self.records.append(rec)


@dataclass
class LearnedState:
    space: Space
    graph: NetworkGraph          # masked, trained
    gates: GateSet
    gmap: GroupMap
    terms: list
    fixed_cost: float
    cfg: SearchConfig

    def pi_for_node(self, node_id: str) -> np.ndarray:
        """Keep probability per output channel of a node (1 for always-on)."""
        pis = self.gates.pi_map()
        return np.array([pis.get(g, 1.0)
                         for g in self.gmap.node_groups[node_id]])

    def channel_scores(self) -> dict[str, np.ndarray]:
        return {lid: self.pi_for_node(lid) for lid in self.space.layers}


def _lr_at(cfg: SearchConfig, epoch_float: float, base: float) -> float:
    return base * cfg.lr_decay ** (epoch_float / cfg.lr_decay_epochs)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_accuracy(graph: NetworkGraph, x: np.ndarray, y: np.ndarray,
                      mask_values: dict[str, float] | None = None,
                      batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        res = forward(graph, xb, mode="eval", mask_values=mask_values,
                      retain=False)
        pred = res.activations[graph.output_id].argmax(axis=1)
        hits += int((pred == y[start:start + batch_size]).sum())
    return hits / len(x)


# ------------------------------------------------------------- gate learning

def prepare_state(space: Space, cfg: SearchConfig) -> LearnedState:
    """Masked graph + groups + cost terms + fresh gates, parameters zeroed."""
    cfg.validate()
    masked = insert_masks(space.graph, cfg.mask_policy)
    gmap = assign_groups(masked)
    terms, fixed = costmod.cost_terms(gmap, masked, cfg.metric,
                                      cfg.count_aux_params)
    gates = GateSet(gmap.learnable(), cfg.nu_init, cfg.tau)
    return LearnedState(space, masked, gates, gmap, terms, fixed, cfg)


def _always_on_values(gmap: GroupMap) -> dict[str, float]:
    return {g: 1.0 for g, grp in gmap.groups.items() if grp.always_on}


def architecture_learn(space: Space, data, cfg: SearchConfig
                       ) -> tuple[LearnedState, RunHistory]:
    """Jointly train weights and gate logits under the penalized objective."""
    state = prepare_state(space, cfg)
    graph, gates, gmap, terms = state.graph, state.gates, state.gmap, state.terms
    streams = spawn_streams(cfg.seed)
    graph.init_parameters(streams["init"])
    adam = AdamState()
    acfg = cfg.adam()
    fixed_values = _always_on_values(gmap)
    history = RunHistory()
    n = len(data.x_train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))

    for epoch in range(cfg.al_epochs):
        order = streams["data"].permutation(n)
        task_losses = []
        for step, idx in enumerate(_batches(n, cfg.batch_size, order)):
            noise = gates.sample_noise(streams["noise"])  # fresh draw per step
            masks = gates.relaxed(noise)
            mask_values = dict(fixed_values)
            mask_values.update(gates.mask_map(masks))
            res = forward(graph, data.x_train[idx], data.y_train[idx],
                          mode="train", mask_values=mask_values)
            pi_map = gates.pi_map()
            if cfg.penalty == "expected":
                penalty = costmod.expected_cost(terms, pi_map)
                dpen_dpi = costmod.expected_cost_grad(terms, pi_map)
                pi = gates.keep_probs()
                dnu_pen = np.array([dpen_dpi[g] for g in gates.groups]) \
                    * pi * (1.0 - pi)
            else:
                mask_map = gates.mask_map(masks)
                penalty = costmod.sampled_cost(terms, mask_map)
                dpen_dm = costmod.sampled_cost_grad(terms, mask_map)
                dnu_pen = np.array([dpen_dm[g] for g in gates.groups]) \
                    * mask_logit_grad(masks, gates.tau)
            total = res.loss + cfg.lam * penalty
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss (task={res.loss}, penalty={penalty}) "
                    f"at lambda={cfg.lam}, epoch={epoch}")
            if epoch == 0 and step == 0:
                history.meta["initial_penalty_ratio"] = (
                    cfg.lam * penalty / res.loss if res.loss else float("inf"))
                log.info("initial penalty/task ratio: %.3g",
                         history.meta["initial_penalty_ratio"])
            grads = backward(graph, res)
            dnu = gates.logit_grads(grads.masks, masks) + cfg.lam * dnu_pen
            params = dict(graph.params)
            params[GATE_PARAM] = gates.nu
            all_grads = dict(grads.params)
            all_grads[GATE_PARAM] = dnu
            lr = _lr_at(cfg, epoch + step / steps_per_epoch, cfg.lr)
            adam_step(params, all_grads, adam, acfg, lr=lr,
                      decay_filter=lambda name: name != GATE_PARAM)
            task_losses.append(res.loss)

        pi = gates.keep_probs()
        eval_masks = dict(fixed_values)
        eval_masks.update(gates.mask_map((pi > 0.5).astype(np.float64)))
        acc = evaluate_accuracy(graph, data.x_eval, data.y_eval, eval_masks)
        history.append(epoch=epoch,
                       task_loss=float(np.mean(task_losses)),
                       expected_cost=float(costmod.expected_cost(
                           terms, gates.pi_map())),
                       pi_mean=float(pi.mean()),
                       pi_saturated=float(((pi < 0.05) | (pi > 0.95)).mean()),
                       eval_accuracy=acc,
                       lr=_lr_at(cfg, epoch + 1.0, cfg.lr))
    return state, history


# ------------------------------------------------------------------- export

def export_architecture(state: LearnedState, mode: str = "expected",
                        rng: np.random.Generator | None = None) -> Architecture:
    """Widths from floored summed keep probabilities; deterministic given nu.

    `mode="sample"` draws one hard mask instead and counts surviving
    channels (optional alternative export).
    """
    if mode == "sample":
        if rng is None:
            rng = spawn_streams(state.cfg.seed)["eval"]
        draws = state.gates.hard(rng)
        value = {g: draws[i] for i, g in enumerate(state.gates.groups)}
    else:
        value = state.gates.pi_map()

    widths: dict[str, int] = {}
    for lid in state.space.layers:
        per_channel = [value.get(g, 1.0) for g in state.gmap.node_groups[lid]]
        widths[lid] = int(math.floor(sum(per_channel)))
    operators = {}
    for op, info in state.space.operators.items():
        operators[op] = all(widths[lid] > 0 for lid in info.layers)
        if not operators[op]:
            for lid in info.layers:
                widths[lid] = 0
    # aggregator plumbing of a fully deselected block goes away with it
    empty_blocks = {blk for blk, ops in state.space.blocks.items()
                    if ops and not any(operators[op] for op in ops)}
    for lid, info in state.space.layers.items():
        if info.block in empty_blocks:
            widths[lid] = 0
        elif widths[lid] == 0 and info.mandatory:
            log.warning("layer '%s': exported width 0 on a mandatory layer, "
                        "clamping to 1", lid)
            widths[lid] = 1
    return Architecture(widths, operators)


def materialize(space: Space, arch: Architecture,
                channel_scores: dict[str, np.ndarray] | None = None
                ) -> NetworkGraph:
    """Standalone pruned network: exact widths, no masks, parameters unset.

    Selectable layers (per-feature gates) keep the top-scoring channels,
    ties broken toward the lower channel index; other layers only need
    counts since retraining starts from a fresh init.
    """
    select: dict[str, list[int]] = {}
    for lid, info in space.layers.items():
        if not info.selectable:
            continue
        w = arch.widths.get(lid, info.width)
        if channel_scores is not None and lid in channel_scores:
            scores = np.asarray(channel_scores[lid])
            order = np.argsort(-scores, kind="stable")[:w]
            select[lid] = sorted(int(i) for i in order)
        else:
            select[lid] = list(range(w))
    present = {op: arch.operators.get(op, True) for op in space.operators}
    return build_graph(space.cfg, widths=dict(arch.widths), present=present,
                       select=select).graph


# ------------------------------------------------------------------ retrain

def retrain(graph: NetworkGraph, data, cfg: SearchConfig
            ) -> tuple[float, RunHistory]:
    """Train a materialized network from scratch on the task loss alone."""
    streams = spawn_streams(cfg.seed)
    graph.init_parameters(streams["init"])
    adam = AdamState()
    base_lr = cfg.retrain_lr if cfg.retrain_lr is not None else cfg.lr
    acfg = replace(cfg.adam(), lr=base_lr)
    batch = cfg.retrain_batch_size or cfg.batch_size
    history = RunHistory()
    best = evaluate_accuracy(graph, data.x_eval, data.y_eval)
    history.append(epoch=-1, eval_accuracy=best)
    n = len(data.x_train)
    steps_per_epoch = max(1, math.ceil(n / batch))
    for epoch in range(cfg.retrain_epochs):
        order = streams["data"].permutation(n)
        losses = []
        for step, idx in enumerate(_batches(n, batch, order)):
            res = forward(graph, data.x_train[idx], data.y_train[idx],
                          mode="train")
            if not np.isfinite(res.loss):
                raise DivergenceError(
                    f"retraining diverged at epoch {epoch} (lr={base_lr})")
            grads = backward(graph, res)
            lr = _lr_at(cfg, epoch + step / steps_per_epoch, base_lr)
            adam_step(graph.params, grads.params, adam, acfg, lr=lr)
            losses.append(res.loss)
        acc = evaluate_accuracy(graph, data.x_eval, data.y_eval)
        best = max(best, acc)
        history.append(epoch=epoch, task_loss=float(np.mean(losses)),
                       eval_accuracy=acc)
    history.meta["best_accuracy"] = best
    return best, history


# ------------------------------------------------------------ full pipeline

@dataclass
class SearchOutcome:
    architecture: Architecture
    cost: float
    accuracy: float | None
    state: LearnedState
    al_history: RunHistory
    retrain_history: RunHistory | None
    model: NetworkGraph | None = None   # the retrained pruned network


def run_search(space: Space, data, cfg: SearchConfig,
               with_retrain: bool = True) -> SearchOutcome:
    state, al_history = architecture_learn(space, data, cfg)
    arch = export_architecture(state)
    arch_cost = costmod.architecture_cost(space, arch, cfg.metric,
                                          cfg.count_aux_params)
    accuracy, retrain_history, net = None, None, None
    if with_retrain:
        net = materialize(space, arch, state.channel_scores())
        accuracy, retrain_history = retrain(net, data, cfg)
    return SearchOutcome(arch, arch_cost, accuracy, state, al_history,
                         retrain_history, net)


# ----------------------------------------------------------------- baselines

def width_multiplier_point(space: Space, alpha: float, data,
                           cfg: SearchConfig) -> tuple[Architecture, float, float]:
    from .spaces import apply_width_multiplier
    arch = apply_width_multiplier(space, alpha)
    c = costmod.architecture_cost(space, arch, cfg.metric, cfg.count_aux_params)
    net = materialize(space, arch)
    acc, _ = retrain(net, data, cfg)
    return arch, c, acc


def random_search(space: Space, n_samples: int, data, cfg: SearchConfig
                  ) -> tuple[tuple[Architecture, float, float], list[dict]]:
    """Retrain `n_samples` random architectures; returns best and all points."""
    if n_samples < 1:
        raise ConfigurationError("random search needs at least one sample")
    rng = spawn_streams(cfg.seed)["search"]
    points = []
    best = None
    for i in range(n_samples):
        arch = sample_random_architecture(space, rng)
        c = costmod.architecture_cost(space, arch, cfg.metric,
                                      cfg.count_aux_params)
        net = materialize(space, arch)
        acc, _ = retrain(net, data, replace(cfg, seed=cfg.seed + i))
        points.append({"index": i, "cost": c, "accuracy": acc, "arch": arch})
        if best is None or acc > best[2]:
            best = (arch, c, acc)
    return best, points


def l1_baseline(space: Space, data, cfg: SearchConfig
                ) -> tuple[Architecture, LearnedState, RunHistory]:
    """Deterministic multiplicative gates under an L1-weighted cost penalty.

    Gates start at 1, shrink under lambda * sum coeff * |gate| with the
    same cost-term adjacency, and export thresholds |gate| > 1e-2.
    """
    state = prepare_state(space, cfg)
    graph, gmap, terms = state.graph, state.gmap, state.terms
    streams = spawn_streams(cfg.seed)
    graph.init_parameters(streams["init"])
    gate_names = gmap.learnable()
    g = np.ones(len(gate_names))
    index = {name: i for i, name in enumerate(gate_names)}
    adam = AdamState()
    acfg = cfg.adam()
    fixed_values = _always_on_values(gmap)
    history = RunHistory()
    n = len(data.x_train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))

    for epoch in range(cfg.al_epochs):
        order = streams["data"].permutation(n)
        losses = []
        for step, idx in enumerate(_batches(n, cfg.batch_size, order)):
            mask_values = dict(fixed_values)
            mask_values.update({name: float(g[i]) for name, i in index.items()})
            res = forward(graph, data.x_train[idx], data.y_train[idx],
                          mode="train", mask_values=mask_values)
            abs_map = {name: abs(float(g[i])) for name, i in index.items()}
            penalty = costmod.sampled_cost(terms, abs_map)
            if not np.isfinite(res.loss + cfg.lam * penalty):
                raise DivergenceError(
                    f"non-finite loss (task={res.loss}, penalty={penalty}) "
                    f"at lambda={cfg.lam}, epoch={epoch}")
            dpen = costmod.sampled_cost_grad(terms, abs_map)
            grads = backward(graph, res)
            dg = np.zeros_like(g)
            for name, i in index.items():
                dg[i] = grads.masks.get(name, 0.0) \
                    + cfg.lam * dpen[name] * np.sign(g[i])
            params = dict(graph.params)
            params[GATE_PARAM] = g
            all_grads = dict(grads.params)
            all_grads[GATE_PARAM] = dg
            lr = _lr_at(cfg, epoch + step / steps_per_epoch, cfg.lr)
            adam_step(params, all_grads, adam, acfg, lr=lr,
                      decay_filter=lambda name: name != GATE_PARAM)
            losses.append(res.loss)
        history.append(epoch=epoch, task_loss=float(np.mean(losses)),
                       gate_mean=float(np.abs(g).mean()))

    on = {name: float(abs(g[i]) > L1_EXPORT_THRESHOLD)
          for name, i in index.items()}
    widths: dict[str, int] = {}
    for lid, info in state.space.layers.items():
        widths[lid] = int(sum(on.get(grp, 1.0)
                              for grp in gmap.node_groups[lid]))
        if widths[lid] == 0 and info.mandatory:
            widths[lid] = 1
    operators = {}
    for op, info in state.space.operators.items():
        operators[op] = all(widths[lid] > 0 for lid in info.layers)
        if not operators[op]:
            for lid in info.layers:
                widths[lid] = 0
    # scores for selectable layers: surviving gate magnitude
    state.gates.nu = np.array([
        50.0 if abs(g[i]) > L1_EXPORT_THRESHOLD else -50.0
        for i in range(len(gate_names))])
    return Architecture(widths, operators), state, history


def pareto_sweep(space: Space, lambdas: list[float], data, cfg: SearchConfig,
                 seeds: list[int] | None = None,
                 al_epochs_for: dict[float, int] | None = None) -> list[dict]:
    """One search+retrain per (lambda, seed); optional per-lambda AL budget."""
    if not lambdas:
        raise ConfigurationError("lambda grid must be non-empty")
    seeds = seeds if seeds is not None else [cfg.seed]
    rows = []
    for lam in lambdas:
        epochs = (al_epochs_for or {}).get(lam, cfg.al_epochs)
        for seed in seeds:
            run_cfg = replace(cfg, lam=lam, seed=seed, al_epochs=epochs)
            outcome = run_search(space, data, run_cfg)
            rows.append({"lambda": lam, "seed": seed, "cost": outcome.cost,
                         "accuracy": outcome.accuracy,
                         "al_epochs": epochs,
                         "arch": outcome.architecture})
    return rows


# ------------------------------------------------------------ gradient check

def objective_fd_check(state: LearnedState, x: np.ndarray, y: np.ndarray,
                       coordinates: list[tuple[str, int]] | None = None,
                       step: float = 1e-4, rng: np.random.Generator | None = None,
                       max_coordinates: int = 200,
                       saturation_tol: float = 1e-12) -> FDReport:
    """FD check of the full objective w.r.t. weights and gate logits.

    Logistic noise is frozen to one draw for the whole check. Gate
    coordinates whose relaxation factor m*(1-m)/tau underflows are
    saturated and reported as excluded rather than checked.
    """
    graph, gates, gmap, terms, cfg = (state.graph, state.gates, state.gmap,
                                      state.terms, state.cfg)
    rng = rng or np.random.default_rng(0)
    noise = gates.sample_noise(rng)
    fixed_values = _always_on_values(gmap)
    saved_buffers = {k: v.copy() for k, v in graph.buffers.items()}

    def objective() -> tuple[float, object, np.ndarray]:
        masks = gates.relaxed(noise)
        mask_values = dict(fixed_values)
        mask_values.update(gates.mask_map(masks))
        res = forward(graph, x, y, mode="train", mask_values=mask_values)
        penalty = costmod.expected_cost(terms, gates.pi_map())
        return res.loss + cfg.lam * penalty, res, masks

    total, res, masks = objective()
    grads = backward(graph, res)
    dpen_dpi = costmod.expected_cost_grad(terms, gates.pi_map())
    pi = gates.keep_probs()
    dnu = gates.logit_grads(grads.masks, masks) + cfg.lam * np.array(
        [dpen_dpi[g] for g in gates.groups]) * pi * (1.0 - pi)
    analytic = dict(grads.params)
    analytic[GATE_PARAM] = dnu

    if coordinates is None:
        pool = [(name, int(i)) for name in sorted(graph.params)
                for i in range(graph.params[name].size)]
        pool += [(GATE_PARAM, i) for i in range(len(gates))]
        take = min(max_coordinates, len(pool))
        chosen = rng.choice(len(pool), size=take, replace=False)
        coordinates = [pool[int(i)] for i in chosen]

    errors, excluded = [], []
    nan_count = 0
    factor = mask_logit_grad(masks, gates.tau)
    for name, flat in coordinates:
        tensor = gates.nu if name == GATE_PARAM else graph.params[name]
        if name == GATE_PARAM and factor[flat] < saturation_tol \
                and pi[flat] * (1 - pi[flat]) < saturation_tol:
            excluded.append((name, flat, "saturated"))
            log.warning("gate coordinate %d saturated at tau=%g, excluded",
                        flat, gates.tau)
            continue
        orig = tensor.flat[flat]
        tensor.flat[flat] = orig + step
        lp = objective()[0]
        tensor.flat[flat] = orig - step
        lm = objective()[0]
        tensor.flat[flat] = orig
        fd = (lp - lm) / (2 * step)
        if not np.isfinite(fd):
            nan_count += 1
            continue
        a = float(analytic[name].flat[flat]) if name in analytic else 0.0
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
        errors.append((name, flat, rel))
    for k, v in saved_buffers.items():
        graph.buffers[k][...] = v
    max_err = max((e for _, _, e in errors), default=float("nan"))
    return FDReport(max_err, errors, excluded, nan_count)


# ---------------------------------------------------------------- checkpoint

def save_state(state: LearnedState, directory, adam: AdamState | None = None
               ) -> None:
    import json
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state.graph.save(directory, prefix="model")
    (directory / "gates.json").write_text(
        json.dumps(state.gates.state_dict()))
    cfg_doc = dataclasses.asdict(state.cfg)
    space_doc = dataclasses.asdict(state.space.cfg)
    (directory / "search_state.json").write_text(
        json.dumps({"search": cfg_doc, "space": space_doc}, indent=2))
    if adam is not None:
        blobs = {f"m/{k}": v for k, v in adam.m.items()}
        blobs.update({f"v/{k}": v for k, v in adam.v.items()})
        blobs["step"] = np.array(adam.step)
        np.savez(directory / "optimizer.npz", **blobs)


def load_state(directory) -> LearnedState:
    import json
    from pathlib import Path
    from .spaces import SpaceConfig, build_space
    directory = Path(directory)
    doc = json.loads((directory / "search_state.json").read_text())
    space_doc = doc["space"]
    for key in ("input_shape", "hidden", "operators"):
        if key in space_doc and isinstance(space_doc[key], list):
            space_doc[key] = tuple(space_doc[key])
    cfg = SearchConfig(**doc["search"])
    space = build_space(SpaceConfig(**space_doc))
    graph = NetworkGraph.load(directory, prefix="model")
    gmap = assign_groups(graph)
    terms, fixed = costmod.cost_terms(gmap, graph, cfg.metric,
                                      cfg.count_aux_params)
    gates = GateSet.from_state(
        json.loads((directory / "gates.json").read_text()))
    return LearnedState(space, graph, gates, gmap, terms, fixed, cfg)
