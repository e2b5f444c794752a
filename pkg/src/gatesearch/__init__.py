"""Differentiable width/operator search with stochastic channel gates."""

from .errors import (ConfigurationError, DataError, DivergenceError,
                     GateSearchError, StateError, StructuralError)
from .graph import NetworkGraph, Node
from .autodiff import backward, finite_difference_check, forward
from .optim import AdamConfig, AdamState, adam_step
from .gates import (GateSet, MaskGate, NoiseDraw, hard_sample, keep_prob,
                    relaxed_mask, sample_logistic, sigmoid)
from .grouping import (GroupMap, MaskGroup, Slice, assign_groups, delete_group,
                       group_zero_equivalence, insert_masks)
from .cost import (CostReport, CostTerm, architecture_cost, cost_terms,
                   exact_expected_cost_bruteforce, expected_cost,
                   expected_cost_grad, sampled_cost, count_network)
from .spaces import (Architecture, Space, SpaceConfig, apply_width_multiplier,
                     build_space, equivalence_projection,
                     sample_random_architecture)
from .search import (LearnedState, RunHistory, SearchConfig, SearchOutcome,
                     architecture_learn, export_architecture, l1_baseline,
                     materialize, objective_fd_check, pareto_sweep,
                     random_search, retrain, run_search)
from .data import Dataset, load_dataset
from .estimator import GateSearchClassifier

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "AdamState", "Architecture", "ConfigurationError",
    "CostReport", "CostTerm", "DataError", "Dataset", "DivergenceError",
    "GateSearchClassifier", "GateSearchError", "GateSet", "GroupMap",
    "LearnedState", "MaskGate", "MaskGroup", "NetworkGraph", "Node",
    "NoiseDraw", "RunHistory", "SearchConfig", "SearchOutcome", "Slice",
    "Space", "SpaceConfig", "StateError", "StructuralError", "adam_step",
    "architecture_cost", "architecture_learn", "assign_groups", "backward",
    "build_space", "cost_terms", "count_network", "delete_group",
    "equivalence_projection", "exact_expected_cost_bruteforce",
    "expected_cost", "expected_cost_grad", "export_architecture",
    "finite_difference_check", "forward", "group_zero_equivalence",
    "hard_sample", "insert_masks", "keep_prob", "l1_baseline", "load_dataset",
    "materialize", "objective_fd_check", "pareto_sweep", "random_search",
    "relaxed_mask", "retrain", "run_search", "sample_logistic",
    "sample_random_architecture", "sampled_cost", "sigmoid",
    "apply_width_multiplier",
]
