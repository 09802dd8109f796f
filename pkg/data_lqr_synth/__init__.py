from .lti_core import DiscreteLtiSystem, PerformanceWeights, solve_dare, h2_norm_squared
from .data_gen import NoiseSpec, DataMatrices, simulate, build_data_matrices
from .synthesis import ProgramVariant, SynthesisResult, CvxpyBackend, solve, synthesize, sproc_line_search
from .certificates import NoiseBound, CertificateReport, assemble_report

__version__ = "0.1.0"
