"""
DEGM Lab - laboratório de modelagem generativa ao longo da vida

Grafo de componentes VAE com expansão guiada por conhecimento, sub-módulos
compartilhados, seleção de componente no teste, linhas de base com replay
generativo e estimadores empíricos das grandezas dos limites.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, config_hash, parse_config, serialize_config
from .engine import ExperimentEngine

__all__ = [
    "ExperimentConfig",
    "ExperimentEngine",
    "config_hash",
    "parse_config",
    "serialize_config",
]
