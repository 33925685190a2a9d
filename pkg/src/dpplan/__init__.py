"""Differentially private plans for linear counting queries over a protected kernel."""

from .kernel import BudgetExceeded, ProtectedKernel, SourceRef, TranscriptEntry
from .matrix import DataVector, LinOp
from .plans import PLANS, PlanResult, run_plan, with_workload_reduction

__all__ = [
    "BudgetExceeded",
    "DataVector",
    "LinOp",
    "PLANS",
    "PlanResult",
    "ProtectedKernel",
    "SourceRef",
    "TranscriptEntry",
    "run_plan",
    "with_workload_reduction",
]
__version__ = "0.1.0"
