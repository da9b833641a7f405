"""
Camadas de processamento: dados → aprendizado ao longo da vida → seleção/avaliação → limites.
"""

from .bounds import BoundsConfig, BoundsTracker, HypothesisSet
from .data import Dataset, Task, TaskSpec, TaskStream, TaskStreamBuilder
from .lifelong import RunResult, TrainConfig, run_degm, run_gr_hier, run_gr_single
from .select_eval import MetricsRecord, NodeView, SelectionResult, evaluate_stream

__all__ = [
    "BoundsConfig", "BoundsTracker", "Dataset", "HypothesisSet", "MetricsRecord", "NodeView",
    "RunResult", "SelectionResult", "Task", "TaskSpec", "TaskStream", "TaskStreamBuilder",
    "TrainConfig", "evaluate_stream", "run_degm", "run_gr_hier", "run_gr_single",
]
