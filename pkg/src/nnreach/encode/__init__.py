"""Exporters for standalone network reachability: big-M MILP and SMT-LIB formulas."""

from ..neural import UnsupportedActivation
from .formula import (ExpFreeNeedsSingleHiddenLayer, FormulaRewrite, NonRationalWeightGuard,
                      declared, export_formula, formula_residuals, formula_rewrite,
                      parse_predicate, point_model)
from .milp import LpParseError, LpProblem, brute_force, count_rows, export_milp, neuron_bounds, read_lp
from .pwl import PwlSandwich, pwl_sandwich

__all__ = [
    "ExpFreeNeedsSingleHiddenLayer", "FormulaRewrite", "LpParseError", "LpProblem", "NonRationalWeightGuard",
    "PwlSandwich", "UnsupportedActivation", "brute_force", "count_rows", "declared",
    "export_formula", "export_milp", "formula_residuals", "formula_rewrite", "neuron_bounds",
    "parse_predicate", "point_model", "pwl_sandwich", "read_lp",
]
