from abc import ABCMeta, ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional
import threading

import numpy as np

from data_lqr_synth.synthesis.problem import SdpProblem


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class BackendSolution:
    status: SolveStatus
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    objective: Optional[float] = None
    message: str = ""


class BaseInitMeta(ABCMeta):
    """
    Runs BaseBackend.__init__ after the subclass constructor, then ``post_init``.

    Subclass constructors only store their own arguments and need not call
    super().__init__(); the shared solve counter and lock are set up
    afterwards either way. ``post_init`` sees both and is where a backend sets
    its ``backend_name``, since BaseBackend.__init__ resets it to "unknown".
    """

    def __call__(cls, *args, **kwargs):
        instance = super().__call__(*args, **kwargs)

        BaseBackend.__init__(instance)

        if hasattr(instance, "post_init"):
            instance.post_init()

        return instance


class BaseBackend(ABC, metaclass=BaseInitMeta):
    """
    Solver contract for SdpProblem.

    An instance serves one solve at a time; parallel trials build their own.
    """

    def __init__(self):
        self.backend_name = "unknown"
        self.solve_count = 0
        self._lock = threading.Lock()

    def solve(self, problem: SdpProblem) -> BackendSolution:
        if not self._lock.acquire(blocking=False):
            raise RuntimeError(f"{self.backend_name} backend is already solving, use one instance per worker")
        try:
            self.solve_count += 1
            return self._solve(problem)
        finally:
            self._lock.release()

    @abstractmethod
    def _solve(self, problem: SdpProblem) -> BackendSolution:
        """
        Solve the problem.

        Returns:
            BackendSolution: values keyed by variable name when the status is OPTIMAL.
        """
        raise NotImplementedError("The _solve method must be implemented by the derived class.")

    def shutdown(self):
        pass
