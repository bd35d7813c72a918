"""Report-level poisoning attacks against the tree and grid protocols."""

from .tree import (
    Assignment,
    AdaptiveTreeAttack,
    MgaTreeAttack,
    OptimalTreeAttack,
    aaot_transform,
    aot_assignment_bruteforce,
    aot_assignment_fast,
    aot_zero_coeff_strategy,
    assignment_objective,
    expected_layer_estimates,
    layer_coefficients,
    mga_tree,
    tree_coefficients,
)
from .grid import (
    AdaptiveGridAttack,
    ColumnBook,
    GridRangeAttack,
    HeuristicGridAttack,
    MgaGridAttack,
    SizeConstraints,
    aaog_compute_load_limit,
    aog_find_hash_pair,
    aog_size_constraints,
    haog_best_pair,
    haog_preference,
    match_functions_to_grids,
    mga_grid,
)

__all__ = [
    "Assignment",
    "AdaptiveTreeAttack",
    "MgaTreeAttack",
    "OptimalTreeAttack",
    "aaot_transform",
    "aot_assignment_bruteforce",
    "aot_assignment_fast",
    "aot_zero_coeff_strategy",
    "assignment_objective",
    "expected_layer_estimates",
    "layer_coefficients",
    "mga_tree",
    "tree_coefficients",
    "AdaptiveGridAttack",
    "ColumnBook",
    "GridRangeAttack",
    "HeuristicGridAttack",
    "MgaGridAttack",
    "SizeConstraints",
    "aaog_compute_load_limit",
    "aog_find_hash_pair",
    "aog_size_constraints",
    "haog_best_pair",
    "haog_preference",
    "match_functions_to_grids",
    "mga_grid",
]
