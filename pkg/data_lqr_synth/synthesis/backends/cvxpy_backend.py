from typing import Dict, List, Sequence, Tuple

import cvxpy as cp
import numpy as np
from loguru import logger

from data_lqr_synth.synthesis.backends.base_backend import BaseBackend, BackendSolution, SolveStatus
from data_lqr_synth.synthesis.problem import AffineExpr, SdpProblem

DEFAULT_SOLVER = "CLARABEL"
DEFAULT_ACCURACY = 1e-8
DEFAULT_FALLBACKS = ("SCS",)
# Clarabel retry after a failed first attempt
RELAXED_ACCURACY = 1e-6


def _solver_options(solver: str, accuracy: float) -> Dict[str, float]:
    solver = solver.upper()
    if solver == "CLARABEL":
        return {"tol_gap_abs": accuracy, "tol_gap_rel": accuracy, "tol_feas": accuracy}
    if solver == "SCS":
        # first-order method, 1e-8 is out of reach within the default iteration cap
        return {"eps_abs": max(accuracy, 1e-7), "eps_rel": max(accuracy, 1e-7), "max_iters": 200000}
    if solver == "CVXOPT":
        return {"abstol": accuracy, "reltol": accuracy, "feastol": accuracy}
    return {}


class CvxpyBackend(BaseBackend):
    """
    Translates SdpProblem into a cvxpy problem and solves it with a conic solver.

    A numerical failure of the configured solver is retried with Clarabel at
    relaxed tolerances, then with each installed fallback solver. An
    infeasibility verdict is returned as is.

    Args:
        solver: name of an installed cvxpy solver, CLARABEL by default.
        accuracy: gap and feasibility tolerance handed to the solver.
        verbose: forward solver output.
        fallbacks: solvers tried after the configured one fails, empty to disable retries.
    """

    def __init__(self, solver: str = DEFAULT_SOLVER, accuracy: float = DEFAULT_ACCURACY, verbose: bool = False,
                 fallbacks: Sequence[str] = DEFAULT_FALLBACKS):
        self.solver = solver.upper()
        self.accuracy = accuracy
        self.verbose = verbose
        self.fallbacks = tuple(s.upper() for s in fallbacks)

    def post_init(self):
        self.backend_name = f"cvxpy:{self.solver.lower()}"
        if self.solver not in cp.installed_solvers():
            logger.warning(f"Solver {self.solver} is not installed, available: {cp.installed_solvers()}")

    def attempts(self) -> List[Tuple[str, float]]:
        """(solver, accuracy) pairs in the order they are tried."""
        ladder = [(self.solver, self.accuracy)]
        if not self.fallbacks:
            return ladder
        installed = set(cp.installed_solvers())
        if "CLARABEL" in installed and RELAXED_ACCURACY > self.accuracy:
            ladder.append(("CLARABEL", RELAXED_ACCURACY))
        for solver in self.fallbacks:
            if solver in installed and solver != self.solver:
                ladder.append((solver, self.accuracy))
        return ladder

    @staticmethod
    def _expression(expr: AffineExpr, cvars: Dict[str, cp.Variable]):
        out = cp.Constant(expr.constant if expr.constant is not None else np.zeros(expr.shape))
        for term in expr.terms:
            value = cvars[term.variable.name]
            if term.transpose:
                value = value.T
            if term.left is not None:
                value = term.left @ value
            if term.right is not None:
                value = value @ term.right
            out = out + value
        return out

    def _build(self, problem: SdpProblem):
        cvars = {name: cp.Variable(var.shape, symmetric=var.symmetric, name=name)
                 for name, var in problem.variables.items()}

        constraints = []
        for psd in problem.psd_constraints:
            k = len(psd.sizes)
            grid = []
            for i in range(k):
                row = []
                for j in range(k):
                    block = psd.block(i, j)
                    if block is None:
                        row.append(cp.Constant(np.zeros((psd.sizes[i], psd.sizes[j]))))
                    else:
                        row.append(self._expression(block, cvars))
                grid.append(row)
            lmi = cp.bmat(grid)
            constraints.append(0.5 * (lmi + lmi.T) >> 0)

        for eq in problem.equality_constraints:
            constraints.append(self._expression(eq.expr, cvars) == 0)

        objective = 0
        for term in problem.objective:
            value = cvars[term.variable.name]
            if term.weight is not None:
                value = term.weight @ value
            objective = objective + term.scale * cp.trace(value)

        return cp.Problem(cp.Minimize(objective), constraints), cvars

    def _attempt(self, problem: SdpProblem, solver: str, accuracy: float) -> BackendSolution:
        cvx_problem, cvars = self._build(problem)
        options = _solver_options(solver, accuracy)
        try:
            cvx_problem.solve(solver=solver, verbose=self.verbose, **options)
        except cp.error.SolverError as e:
            logger.debug(f"cvxpy:{solver.lower()} failed on {problem.name}: {e}")
            return BackendSolution(status=SolveStatus.NUMERICAL_FAILURE, message=f"{solver}: {e}")

        status = cvx_problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return BackendSolution(status=SolveStatus.INFEASIBLE, message=status)
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return BackendSolution(status=SolveStatus.NUMERICAL_FAILURE, message=f"{solver}: {status}")
        if status == cp.OPTIMAL_INACCURATE:
            logger.warning(f"cvxpy:{solver.lower()} returned an inaccurate optimum for {problem.name}")

        values = {name: np.array(var.value, dtype=float).reshape(problem.variables[name].shape)
                  for name, var in cvars.items()}
        return BackendSolution(status=SolveStatus.OPTIMAL, values=values,
                               objective=float(cvx_problem.value), message=status)

    def _solve(self, problem: SdpProblem) -> BackendSolution:
        failures = []
        for solver, accuracy in self.attempts():
            solution = self._attempt(problem, solver, accuracy)
            if solution.status is not SolveStatus.NUMERICAL_FAILURE:
                if failures:
                    logger.info(f"{problem.name} solved by {solver} at {accuracy:g} after {'; '.join(failures)}")
                    solution.message = f"{solution.message} ({solver} at {accuracy:g})"
                return solution
            failures.append(solution.message)
        return BackendSolution(status=SolveStatus.NUMERICAL_FAILURE, message="; ".join(failures))
