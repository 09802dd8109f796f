from .base_backend import BaseBackend, BackendSolution, SolveStatus
from .cvxpy_backend import CvxpyBackend
