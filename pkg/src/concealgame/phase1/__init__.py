"""Phase-I Bayesian game: tree, beliefs, occupation programs and equilibria."""
from .belief import OffEquilibriumObservation, belief_product_form, iterated_belief, update_belief
from .equilibrium import (BaselineResult, EquilibriumSolution, VerificationReport,
                          attacker_value_recursion, defender_best_response,
                          defender_value_recursion, extract_attacker_strategy,
                          full_information_baseline, leaf_payoffs, solve_phase1_sad,
                          verify_equilibrium)
from .program import (OccupationTree, Phase1Problem, evaluate_objective, induced_occupation,
                      leaf_value, occupation_residuals, solve_phase1_lp)
from .tree import GameTree, TreeTooLarge, enumerate_tree

__all__ = [
    "BaselineResult", "EquilibriumSolution", "GameTree", "OccupationTree",
    "OffEquilibriumObservation", "Phase1Problem", "TreeTooLarge", "VerificationReport",
    "attacker_value_recursion", "belief_product_form", "defender_best_response",
    "defender_value_recursion", "enumerate_tree", "evaluate_objective",
    "extract_attacker_strategy", "full_information_baseline", "induced_occupation",
    "iterated_belief", "leaf_payoffs", "leaf_value", "occupation_residuals",
    "solve_phase1_lp", "solve_phase1_sad", "update_belief", "verify_equilibrium",
]
