"""Independent references: loop-based forwards and finite-difference gradient checks."""

from .gradcheck import GradCheckReport, available_checks, finite_diff_grad, gradcheck_all
from .naive import OPS, oracle_forward

__all__ = ["GradCheckReport", "OPS", "available_checks", "finite_diff_grad", "gradcheck_all", "oracle_forward"]
