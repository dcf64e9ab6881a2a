"""Instance-adaptive unrolled sparse recovery with momentum and CG refinement."""
from .dictionary import build_setup, mutual_coherence, solve_dictionary
from .metrics import nmse_db
from .problems import GenConfig, Instance, ProblemSetup, generate_dictionary, generate_instances
from .solvers import CgSwitchConfig, HyperParams, LayerParams, run_hyperlista, run_unrolled
from .thresholding import soft_threshold, support_select_threshold

__all__ = [
    "build_setup", "mutual_coherence", "solve_dictionary", "nmse_db", "GenConfig", "Instance",
    "ProblemSetup", "generate_dictionary", "generate_instances", "CgSwitchConfig",
    "HyperParams", "LayerParams", "run_hyperlista", "run_unrolled", "soft_threshold",
    "support_select_threshold",
]

__version__ = "0.1.0"
