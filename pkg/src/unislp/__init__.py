"""Adapter-based multi-task encoder-decoder for toy speech tasks, on a small numpy autodiff core."""

from .adapters import FUSION, SINGLE, STACK, AdapterTaskModule, build_task_module
from .backbone import ModelConfig, UnifiedModel, count_parameters
from .decoding import DecodeConfig, joint_beam_search
from .harness import ExperimentConfig, ModuleSpec, Workspace
from .objective import LossBreakdown, ObjectiveConfig, total_objective
from .taskspace import Vocabulary, format_target, parse_output

__version__ = "0.1.0"

__all__ = [
    "FUSION", "SINGLE", "STACK", "AdapterTaskModule", "build_task_module",
    "ModelConfig", "UnifiedModel", "count_parameters",
    "DecodeConfig", "joint_beam_search",
    "ExperimentConfig", "ModuleSpec", "Workspace",
    "LossBreakdown", "ObjectiveConfig", "total_objective",
    "Vocabulary", "format_target", "parse_output",
]
