"""Objective-function-free adaptive regularization with approximate p-th order tensors."""

from .driver import RunAborted, RunTrace, SolverConfig, SolverState, run, second_order_measure, step
from .problems import CountingProblem, available_problems, get_problem, register_problem
from .subsolver import BudgetExhausted, SubsolverConfig, minimize_model
from .tensor_update import Strategy, StrategyConfig, hosu_update, tensor_p

__all__ = [
    "BudgetExhausted",
    "CountingProblem",
    "RunAborted",
    "RunTrace",
    "SolverConfig",
    "SolverState",
    "Strategy",
    "StrategyConfig",
    "SubsolverConfig",
    "available_problems",
    "get_problem",
    "hosu_update",
    "minimize_model",
    "register_problem",
    "run",
    "second_order_measure",
    "step",
    "tensor_p",
]

__version__ = "0.1.0"
