"""Built-in oracle suite behind the `verify` CLI subcommand.

Fast self-checks of the core numerics: gradients against finite
differences, the closed-form expected cost against brute-force
enumeration, the gate sampling laws, masking/deletion equivalence, and
the concat-aggregator identity construction.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import cost as costmod
from .autodiff import forward
from .gates import GateSet, sigmoid
from .graph import NetworkGraph, Node
from .grouping import assign_groups, group_zero_equivalence, insert_masks
from .rng import make_rng
from .search import SearchConfig, objective_fd_check, prepare_state
from .spaces import (Space, SpaceConfig, build_space, equivalence_projection,
                     build_graph)

KS_CRITICAL_01 = 1.628  # asymptotic Kolmogorov critical value at alpha=0.01


def random_mini_space(rng: np.random.Generator) -> Space:
    """A tiny random space drawn from all three families (widths >= 2)."""
    kind = rng.choice(["mlp", "oneshot_cell", "fbnet_stage"])
    if kind == "mlp":
        cfg = SpaceConfig(
            kind="mlp", classes=int(rng.integers(2, 4)),
            input_shape=(int(rng.integers(4, 9)),),
            hidden=tuple(int(rng.integers(2, 5))
                         for _ in range(int(rng.integers(1, 4)))),
            feature_gates=bool(rng.random() < 0.5),
            batchnorm_mlp=bool(rng.random() < 0.5))
    elif kind == "oneshot_cell":
        menu = [["conv1x1"], ["sep3"], ["conv1x1", "sep3"],
                ["conv1x1", "sep3", "sep5"]][int(rng.integers(0, 4))]
        cfg = SpaceConfig(
            kind="oneshot_cell", classes=int(rng.integers(2, 4)),
            input_shape=(1, 8, 8),
            cells=int(rng.integers(1, 3)), blocks=int(rng.integers(1, 3)),
            base_width=int(rng.integers(2, 5)),
            operators=tuple(menu),
            aggregator=str(rng.choice(["add", "concat"])),
            stem_width=int(rng.integers(2, 5)), stem_stride=1,
            downsample_every=2)
    else:
        cfg = SpaceConfig(
            kind="fbnet_stage", classes=int(rng.integers(2, 4)),
            input_shape=(1, 8, 8),
            stages=int(rng.integers(1, 3)),
            blocks_per_stage=int(rng.integers(1, 3)),
            base_width=int(rng.integers(2, 4)), expansion=2,
            operators=("mb3",) if rng.random() < 0.5 else ("mb3", "mb5"),
            stem_width=int(rng.integers(2, 4)), stem_stride=1)
    return build_space(cfg)


def sample_batch(space: Space, rng: np.random.Generator, n: int = 4
                 ) -> tuple[np.ndarray, np.ndarray]:
    node = space.graph.nodes[space.graph.input_id]
    if node.spatial:
        x = rng.standard_normal((n, node.channels, node.height, node.width))
    else:
        x = rng.standard_normal((n, node.channels))
    y = rng.integers(0, space.cfg.classes, size=n)
    return x, y


def ks_statistic_logistic(samples: np.ndarray) -> float:
    """Kolmogorov statistic of samples against the standard logistic CDF."""
    s = np.sort(np.asarray(samples))
    n = len(s)
    cdf = sigmoid(s)
    upper = np.max(np.arange(1, n + 1) / n - cdf)
    lower = np.max(cdf - np.arange(0, n) / n)
    return float(max(upper, lower))


# ----------------------------------------------------------------- suites

def check_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    cfg = SpaceConfig(kind="oneshot_cell", classes=3, input_shape=(1, 8, 8),
                      cells=1, blocks=2, base_width=3,
                      operators=("conv1x1", "sep3"), aggregator="concat",
                      stem_width=3, stem_stride=1)
    space = build_space(cfg)
    scfg = SearchConfig(lam=1e-4, tau=0.5, al_epochs=0, seed=seed)
    state = prepare_state(space, scfg)
    state.graph.init_parameters(rng)
    x, y = sample_batch(space, rng, n=4)
    rep = objective_fd_check(state, x, y, step=1e-4, rng=rng,
                             max_coordinates=120)
    ok = rep.max_rel_error < 1e-3 and rep.nan_count == 0
    return ok, f"max relative error {rep.max_rel_error:.2e} over {len(rep.errors)} coords"


def check_cost_bruteforce(seed: int = 0, instances: int = 10) -> tuple[bool, str]:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n_groups = int(rng.integers(2, 9))
        gids = [f"g{i}" for i in range(n_groups)]
        terms = []
        for i, g in enumerate(gids):
            others = [h for h in gids if h != g]
            k = int(rng.integers(0, len(others) + 1))
            chosen = list(rng.choice(others, size=k, replace=False)) if k else []
            terms.append(costmod.CostTerm(
                g, "params",
                adjacency=[(h, float(rng.integers(1, 10))) for h in sorted(chosen)],
                const=float(rng.integers(0, 5))))
        pi = {g: float(rng.random()) for g in gids}
        exact = costmod.exact_expected_cost_bruteforce(terms, pi)
        closed = costmod.expected_cost(terms, pi)
        worst = max(worst, abs(exact - closed))
    return worst < 1e-9, f"max |closed-form - enumeration| = {worst:.2e}"


def check_sampler(seed: int = 0, n: int = 100_000) -> tuple[bool, str]:
    rng = make_rng(seed)
    from .gates import sample_logistic, relaxed_mask
    details = []
    ok = True
    draw = sample_logistic(rng, size=n)
    ks = ks_statistic_logistic(draw.ell)
    crit = KS_CRITICAL_01 / np.sqrt(n)
    ok &= ks < crit
    details.append(f"KS={ks:.4f} (crit {crit:.4f})")
    for nu in (-2.5, 0.0, 2.5):
        for tau in (1.0, 0.001):
            noise = sample_logistic(rng, size=n)
            m = relaxed_mask(nu, noise.ell, tau)
            rate = float((m > 0.5).mean())
            pi = float(sigmoid(nu))
            tol = 3.0 * np.sqrt(pi * (1 - pi) / n)
            ok &= abs(rate - pi) <= tol
            details.append(f"nu={nu} tau={tau}: |{rate:.4f}-{pi:.4f}|<={tol:.4f}")
    return bool(ok), "; ".join(details)


def check_group_equivalence(seed: int = 0, spaces: int = 3) -> tuple[bool, str]:
    rng = make_rng(seed)
    checked = 0
    for _ in range(spaces):
        space = random_mini_space(rng)
        masked = insert_masks(space.graph)
        masked.init_parameters(rng)
        gmap = assign_groups(masked)
        x, _ = sample_batch(space, rng, n=3)
        for gid in gmap.learnable():
            if not group_zero_equivalence(masked, gmap, gid, x):
                return False, f"group '{gid}' not deletion-equivalent"
            checked += 1
    return True, f"{checked} groups exactly deletion-equivalent"


def check_aggregator_identity(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    n_ops, w, size = 3, 4, 6
    g = NetworkGraph()
    g.add_node(Node("in", "input", channels=2))
    g.nodes["in"].height = g.nodes["in"].width = size
    outs = []
    for i in range(n_ops):
        g.add_node(Node(f"op{i}", "conv2d", ["in"],
                        {"units": w, "kernel": 3, "stride": 1, "bias": True}))
        outs.append(f"op{i}")
    g.add_node(Node("sum", "add", outs))
    g.add_node(Node("cat", "concat", outs))
    g.add_node(Node("proj", "conv2d", ["cat"],
                    {"units": w, "kernel": 1, "stride": 1, "bias": False}))
    g.init_parameters(rng)
    g.params["proj.w"] = equivalence_projection([w] * n_ops)
    x = rng.standard_normal((2, 2, size, size))
    g.input_id = "in"
    res = forward(g, x, mode="eval", retain=False)
    dev = float(np.max(np.abs(res.activations["proj"] - res.activations["sum"])))
    return dev < 1e-5, f"max |concat+projection - sum| = {dev:.2e}"


SUITES = [
    ("gradient-check", check_gradients),
    ("cost-bruteforce", check_cost_bruteforce),
    ("sampler-law", check_sampler),
    ("group-deletion-equivalence", check_group_equivalence),
    ("aggregator-identity", check_aggregator_identity),
]


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in SUITES:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
