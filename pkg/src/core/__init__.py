"""
Núcleo numérico e modelos do DEGM.
"""

from .errors import (CheckpointError, ConfigError, ContractError, DegmError, DimensionError,
                     FormatError, StructuralError, TrainingError)
from .graph import GraphModel, KnowledgeScores, SpecificNode, edge_weights, expansion_decide, knowledge_similarity
from .nnkit import AdamState, DenseLayer, Parameter, Rng, Tape, Tensor, adam_step, backprop
from .policies import POLICIES, EdgePolicy, get_policy
from .vae import BasicNode, HierVae, VaeComponent

__all__ = [
    "AdamState", "BasicNode", "CheckpointError", "ConfigError", "ContractError", "DegmError",
    "DenseLayer", "DimensionError", "EdgePolicy", "FormatError", "GraphModel", "HierVae",
    "KnowledgeScores", "POLICIES", "Parameter", "Rng", "SpecificNode", "StructuralError", "Tape",
    "Tensor", "TrainingError", "VaeComponent", "adam_step", "backprop", "edge_weights",
    "expansion_decide", "get_policy", "knowledge_similarity",
]
