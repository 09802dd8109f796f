from .problem import SdpProblem, AffineExpr, MatrixVariable, SynthesisError, MalformedProblem
from .backends import BaseBackend, BackendSolution, SolveStatus, CvxpyBackend
from .programs import (
    ProgramVariant,
    VariantKind,
    SynthesisResult,
    InvalidProgram,
    MissingD0,
    AllInfeasible,
    SolveInfeasible,
    SolveNumericalFailure,
    build_model_based,
    build_ideal,
    build_baseline,
    build_soft,
    build_sproc,
    build_program,
    solve,
    synthesize,
    mu_from_bound,
    sproc_line_search,
)
