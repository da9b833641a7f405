"""
Políticas de arestas para novos nós específicos (DEGM e ablações DEGM-2/4/5/6/7).
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .graph import GraphModel, KnowledgeScores, edge_weights


class EdgePolicy(ABC):
    """
    Classe base para políticas de arestas.

    ``plan`` devolve as fontes (índices de nós) e os pesos π no simplex.
    """

    name = 'base'
    force_basic = False

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}

    @abstractmethod
    def plan(self, scores: KnowledgeScores, tau: float,
             graph: Optional[GraphModel]) -> Tuple[List[int], np.ndarray]:
        """
        Calcula as arestas de um novo nó específico.

        Args:
            scores: similaridades com cada nó básico (ordem de 𝒢𝓘)
            tau: limiar τ
            graph: grafo atual

        Returns:
            (fontes, pesos)
        """

    def get_config(self) -> Dict[str, Any]:
        return {'name': self.name, **self.config}

    @staticmethod
    def _basic_sources(scores: KnowledgeScores, graph: Optional[GraphModel]) -> List[int]:
        return list(graph.gi) if graph is not None else list(range(len(scores)))


class AdaptiveEdgePolicy(EdgePolicy):
    """Pesos adaptativos a partir de ks (DEGM)."""

    name = 'degm'

    def plan(self, scores, tau, graph):
        return self._basic_sources(scores, graph), edge_weights(scores)


class NewComponentPolicy(AdaptiveEdgePolicy):
    """DEGM-2: sempre um novo VAE por tarefa."""

    name = 'degm-2'
    force_basic = True


class AllNodesPolicy(EdgePolicy):
    """DEGM-4: fluxo de todos os componentes aprendidos, pesos iguais, sem adaptação."""

    name = 'degm-4'

    def plan(self, scores, tau, graph):
        if graph is None:
            raise ConfigError("degm-4 needs the graph to enumerate every node", 'ablation')
        sources = list(range(len(graph.nodes)))
        return sources, np.full(len(sources), 1.0 / len(sources))


class ThresholdMaskPolicy(EdgePolicy):
    """DEGM-5: aresta binária para cada ks ≤ τ, normalizada."""

    name = 'degm-5'

    def plan(self, scores, tau, graph):
        mask = (scores.ks <= tau).astype(np.float64)
        return self._basic_sources(scores, graph), mask / mask.sum()


class UniformPolicy(EdgePolicy):
    """DEGM-6: o mesmo peso 1/K para cada nó básico."""

    name = 'degm-6'

    def plan(self, scores, tau, graph):
        k = len(scores)
        return self._basic_sources(scores, graph), np.full(k, 1.0 / k)


class SingleEdgePolicy(EdgePolicy):
    """DEGM-7: uma única aresta para o nó de menor ks (empate → menor índice)."""

    name = 'degm-7'

    def plan(self, scores, tau, graph):
        weights = np.zeros(len(scores))
        weights[int(np.argmin(scores.ks))] = 1.0
        return self._basic_sources(scores, graph), weights


POLICIES = {
    'degm': AdaptiveEdgePolicy,
    'degm-1': AdaptiveEdgePolicy,
    'degm-2': NewComponentPolicy,
    'degm-4': AllNodesPolicy,
    'degm-5': ThresholdMaskPolicy,
    'degm-6': UniformPolicy,
    'degm-7': SingleEdgePolicy,
}


def get_policy(name: str, config: Optional[Dict[str, Any]] = None) -> EdgePolicy:
    """Instancia a política registrada sob ``name``."""
    if name not in POLICIES:
        raise ConfigError(f"Unknown ablation '{name}', expected one of {sorted(POLICIES)}", 'ablation')
    return POLICIES[name](config)
