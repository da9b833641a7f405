"""
Estrutura do DEGM: registro de nós, matriz de adjacência V, similaridade de
conhecimento, decisão de expansão, pesos adaptativos das arestas e o MELBO.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import nnkit as nk
from .errors import ContractError, StructuralError
from .nnkit import DenseLayer, Parameter, Rng, Tensor
from .vae import DEFAULT_HIDDEN, DEFAULT_SIGMA, BasicNode, VaeComponent

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
DEFAULT_PROBE_SIZE = 1000
EVAL_BATCH = 256


@dataclass
class KnowledgeScores:
    """𝒦 = {ks_1, …, ks_K}, uma pontuação não negativa por nó básico."""

    ks: np.ndarray

    def __post_init__(self):
        self.ks = np.asarray(self.ks, dtype=np.float64).reshape(-1)
        if np.any(self.ks < 0) or not np.all(np.isfinite(self.ks)):
            raise ContractError(f"Knowledge scores must be finite and >= 0, got {self.ks}")

    def __len__(self) -> int:
        return int(self.ks.size)

    def min(self) -> float:
        if not len(self):
            raise ContractError("Empty knowledge scores")
        return float(self.ks.min())


def edge_weights(scores: Union[KnowledgeScores, Sequence[float]]) -> np.ndarray:
    """
    Pesos adaptativos π_i = (w* − ks_i) / Σ_j (w* − ks_j), w* = Σ_j ks_j.

    Para K = 1 a fórmula é 0/0 e π = [1]; com todos os ks nulos π é uniforme.

    Args:
        scores: pontuações de similaridade

    Returns:
        vetor π no simplex
    """
    if not isinstance(scores, KnowledgeScores):
        scores = KnowledgeScores(np.asarray(scores, dtype=np.float64))
    ks = scores.ks
    k = ks.size
    if k == 0:
        raise ContractError("edge_weights() needs at least one score")
    if k == 1:
        return np.ones(1)
    total = ks.sum()
    if total == 0.0:
        return np.full(k, 1.0 / k)
    return (total - ks) / ((k - 1) * total)


def check_simplex(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.size == 0 or np.any(weights < 0) or abs(weights.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"Edge weights must lie on the simplex, got {weights}")
    return weights


def _eval_rows(model_fn, x: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    return np.concatenate([model_fn(x[i:i + batch]) for i in range(0, x.shape[0], batch)])


def knowledge_similarity(node: BasicNode, probe: np.ndarray, eval_seed: int = 0) -> float:
    """
    ks = |L_ELBO(B) − E_{x∼probe} L_ELBO(x; B)|.

    Uma amostra de Monte-Carlo por exemplo, com ruído determinado pela
    semente de avaliação e pelo conteúdo de cada exemplo.

    Args:
        node: nó básico treinado
        probe: amostras da próxima tarefa [m × d]
        eval_seed: semente fixa de avaliação

    Returns:
        pontuação ks >= 0
    """
    if not node.trained:
        raise ContractError(f"Basic node of task {node.task_id} has no reference ELBO")
    probe = np.asarray(probe, dtype=np.float64)
    if probe.ndim != 2 or probe.shape[0] == 0:
        raise ContractError("Probe set must be a non-empty [m x d] matrix")
    vae = node.vae

    def score(xb):
        eps = nk.keyed_normal(xb, vae.latent_dim, eval_seed)[0]
        return vae.elbo(xb, eps=eps).data

    values = _eval_rows(score, probe)
    return abs(node.reference_elbo - math.fsum(values) / values.size)


@dataclass
class ExpansionDecision:
    kind: str
    weights: Optional[np.ndarray] = None
    sources: List[int] = field(default_factory=list)

    @property
    def is_basic(self) -> bool:
        return self.kind == 'basic'


def expansion_decide(scores: Optional[KnowledgeScores], tau: float, policy: Any = None,
                     graph: Optional["GraphModel"] = None) -> ExpansionDecision:
    """
    Decide entre criar um nó básico ou um nó específico.

    min(ks) > τ constrói um nó básico; caso contrário um nó específico com
    pesos dados pela política (adaptativa por padrão). Sem nós básicos
    (primeira tarefa) a resposta é sempre básica.

    Args:
        scores: pontuações (None ou vazio quando não há nós básicos)
        tau: limiar τ > 0
        policy: política de arestas (``src.core.policies``)
        graph: grafo atual, necessário para políticas que escolhem as fontes

    Returns:
        decisão de expansão
    """
    if scores is None:
        return ExpansionDecision('basic')
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if not len(scores):
        raise ContractError("expansion_decide() needs at least one score")
    if getattr(policy, 'force_basic', False) or scores.min() > tau:
        return ExpansionDecision('basic')
    if policy is None:
        sources = list(graph.gi) if graph is not None else list(range(len(scores)))
        return ExpansionDecision('specific', edge_weights(scores), sources)
    sources, weights = policy.plan(scores, tau, graph)
    return ExpansionDecision('specific', check_simplex(weights), list(sources))


class SpecificNode:
    """
    Nó específico: só possui um novo sub-encoder inferior (ω′) e um novo
    sub-decoder superior (θ′); reutiliza os sub-módulos congelados das fontes
    ponderados por π.

    Args:
        enc_lower_new: camada entrada → oculta
        dec_upper_new: camada oculta → saída
        weights: π sobre as fontes
        sources: índices (no grafo) dos nós fonte
        task_id: tarefa dona do nó
        likelihood: 'bernoulli' ou 'gaussian'
        sigma: desvio fixo do decoder gaussiano
    """

    def __init__(self, enc_lower_new: DenseLayer, dec_upper_new: DenseLayer, weights: np.ndarray,
                 sources: Sequence[int], task_id: int, likelihood: str = 'bernoulli',
                 sigma: float = DEFAULT_SIGMA):
        self.weights = check_simplex(weights)
        if len(sources) != self.weights.size:
            raise StructuralError(f"{len(sources)} sources for {self.weights.size} weights")
        self.enc_lower_new = enc_lower_new
        self.dec_upper_new = dec_upper_new
        self.sources = [int(s) for s in sources]
        self.task_id = task_id
        self.likelihood = likelihood
        self.sigma = float(sigma)

    @property
    def input_dim(self) -> int:
        return self.enc_lower_new.in_dim

    def active(self) -> List[Tuple[int, int, float]]:
        """(posição, índice da fonte, peso) das arestas com peso positivo."""
        return [(j, s, float(w)) for j, (s, w) in enumerate(zip(self.sources, self.weights)) if w > 0]

    def layers(self) -> Dict[str, DenseLayer]:
        return {'enc_lower_new': self.enc_lower_new, 'dec_upper_new': self.dec_upper_new}

    def parameters(self) -> Dict[str, Parameter]:
        params = dict(self.enc_lower_new.parameters())
        params.update(self.dec_upper_new.parameters())
        return params

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if not p.frozen}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def freeze(self) -> None:
        self.enc_lower_new.freeze()
        self.dec_upper_new.freeze()

    def log_likelihood(self, x, out: Tensor) -> Tensor:
        if self.likelihood == 'bernoulli':
            return nk.bernoulli_log_likelihood(x, out)
        return nk.gaussian_log_likelihood(x, out, self.sigma)

    def __repr__(self) -> str:
        return f"SpecificNode(task={self.task_id}, sources={self.sources}, weights={np.round(self.weights, 4)})"


Node = Union[BasicNode, SpecificNode]


class GraphModel:
    """
    Grafo de componentes do DEGM.

    Mantém a lista ordenada de nós, o mapa 𝒢𝓘 (slot básico → índice do nó),
    as linhas da matriz V (tarefa × nó básico) e o limiar τ.

    Args:
        tau: limiar de expansão τ
        config: configurações opcionais (hidden_dim, likelihood, sigma)
    """

    def __init__(self, tau: float, config: Optional[Dict[str, Any]] = None):
        self.tau = float(tau)
        self.config = config or {}
        self.nodes: List[Node] = []
        self.gi: List[int] = []
        self.v_rows: List[Tuple[int, Dict[int, float]]] = []
        self.history: List[Dict[str, Any]] = []

    # Registro

    @property
    def basics(self) -> List[BasicNode]:
        return [self.nodes[i] for i in self.gi]

    @property
    def specifics(self) -> List[SpecificNode]:
        return [n for n in self.nodes if isinstance(n, SpecificNode)]

    @property
    def num_basics(self) -> int:
        return len(self.gi)

    def is_basic(self, index: int) -> bool:
        return isinstance(self.nodes[index], BasicNode)

    def task_ids(self) -> List[int]:
        return [task_id for task_id, _ in self.v_rows]

    def node_for_task(self, task_id: int) -> int:
        for index, node in enumerate(self.nodes):
            if node.task_id == task_id:
                return index
        raise StructuralError(f"No node owns task {task_id}")

    def _check_task_unused(self, task_id: int) -> None:
        if task_id in self.task_ids():
            raise StructuralError(f"Task {task_id} already owned by a node")

    def add_basic_node(self, input_dim: int, latent_dim: int, task_id: int, rng: Rng,
                       hidden_dim: Optional[int] = None, likelihood: Optional[str] = None,
                       sigma: Optional[float] = None) -> int:
        """
        Cria um nó básico B_{K+1}; a linha de V dessa tarefa é toda nula.

        Returns:
            índice do novo nó
        """
        self._check_task_unused(task_id)
        if self.gi:
            reference = self.basics[0].vae
            if latent_dim != reference.latent_dim:
                raise StructuralError(f"Basic nodes must share latent_dim {reference.latent_dim}")
        vae = VaeComponent(
            input_dim, latent_dim,
            hidden_dim=hidden_dim or self.config.get('hidden_dim', DEFAULT_HIDDEN),
            likelihood=likelihood or self.config.get('likelihood', 'bernoulli'),
            sigma=sigma or self.config.get('sigma', DEFAULT_SIGMA),
            rng=rng, name=f"B{len(self.gi) + 1}",
        )
        self.nodes.append(BasicNode(vae=vae, task_id=task_id))
        index = len(self.nodes) - 1
        self.gi.append(index)
        self.v_rows.append((task_id, {}))
        self._log_operation('add_basic_node', {'task_id': task_id, 'node': index, 'K': len(self.gi)})
        logger.info("task %s: new basic node %d (K=%d)", task_id, index, len(self.gi))
        return index

    def add_specific_node(self, weights: np.ndarray, task_id: int, rng: Optional[Rng] = None,
                          sources: Optional[Sequence[int]] = None, init: str = 'random') -> int:
        """
        Cria um nó específico ligado às fontes com pesos π.

        Args:
            weights: π (simplex)
            task_id: tarefa do novo nó
            rng: gerador para inicializar ω′ e θ′
            sources: índices dos nós fonte (por padrão todos os básicos, na ordem de 𝒢𝓘)
            init: 'random' ou 'copy' (copia enc_lower/dec_upper da fonte básica de maior peso)

        Returns:
            índice do novo nó
        """
        self._check_task_unused(task_id)
        if not self.gi:
            raise StructuralError("A specific node needs at least one basic node")
        sources = list(self.gi) if sources is None else [int(s) for s in sources]
        weights = check_simplex(weights)
        if len(sources) != weights.size:
            raise StructuralError(f"{len(sources)} sources for {weights.size} weights")
        for s in sources:
            if not 0 <= s < len(self.nodes):
                raise StructuralError(f"Unknown source node {s}")

        reference = self.basics[0].vae
        name = f"S{task_id}"
        if init == 'copy':
            anchor = max((w, s) for s, w in zip(sources, weights) if self.is_basic(s))[1]
            enc_new = self.nodes[anchor].vae.enc_lower.copy(f"{name}.enc_lower_new")
            dec_new = self.nodes[anchor].vae.dec_upper.copy(f"{name}.dec_upper_new")
        elif init == 'random':
            if rng is None:
                raise ContractError("Random init of a specific node needs an Rng")
            out_act = reference.dec_upper.activation
            enc_new = DenseLayer(reference.input_dim, reference.hidden_dim, 'leaky_relu', rng,
                                 f"{name}.enc_lower_new")
            dec_new = DenseLayer(reference.hidden_dim, reference.input_dim, out_act, rng,
                                 f"{name}.dec_upper_new")
        else:
            raise ContractError(f"Unknown specific-node init: {init}")

        node = SpecificNode(enc_new, dec_new, weights, sources, task_id,
                            reference.likelihood, reference.sigma)
        self.nodes.append(node)
        index = len(self.nodes) - 1
        row = {self.gi.index(s): float(w) for s, w in zip(sources, weights) if s in self.gi}
        self.v_rows.append((task_id, row))
        self._log_operation('add_specific_node', {'task_id': task_id, 'node': index,
                                                  'weights': weights.tolist(), 'sources': sources})
        logger.info("task %s: new specific node %d, pi=%s", task_id, index, np.round(weights, 4).tolist())
        return index

    def adjacency(self) -> np.ndarray:
        """Matriz V [tarefas × K]; linhas de nós básicos são nulas."""
        v = np.zeros((len(self.v_rows), len(self.gi)))
        for r, (_, row) in enumerate(self.v_rows):
            for slot, weight in row.items():
                v[r, slot] = weight
        return v

    def v_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.adjacency(), columns=[f"C{k + 1}" for k in range(len(self.gi))])
        frame.insert(0, 'task_id', self.task_ids())
        return frame

    def export_v(self, path: str) -> None:
        self.v_frame().to_csv(path, index=False)
        self._log_operation('export_v', {'path': str(path)})

    # Passagens pelos sub-módulos

    def latent_params(self, index: int, h: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Gaussiana do sub-encoder superior do nó ``index`` aplicado a ``h``.

        Para um nó específico é a gaussiana da soma ponderada Σπ_j z_j:
        N(Σπ_j μ_j, Σπ_j² σ_j²).
        """
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.encode_upper(h)
        return self._weighted_gaussian(node, h)

    def _weighted_gaussian(self, node: SpecificNode, h: Tensor) -> Tuple[Tensor, Tensor]:
        active = node.active()
        parts = [self.latent_params(s, h) for _, s, _ in active]
        weights = [w for _, _, w in active]
        mu = nk.weighted_sum([p[0] for p in parts], weights)
        var = nk.weighted_sum([nk.exp(p[1]) for p in parts], [w * w for w in weights])
        return mu, nk.clip(nk.log(var), nk.LOGVAR_MIN, nk.LOGVAR_MAX)

    def lower_decode(self, index: int, z: Tensor) -> Tensor:
        """Representação intermediária do sub-decoder inferior do nó ``index``."""
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.decode_lower(z)
        active = node.active()
        return nk.weighted_sum([self.lower_decode(s, z) for _, s, _ in active], [w for _, _, w in active])

    def latent_dim(self) -> int:
        if not self.gi:
            raise StructuralError("Graph has no basic node")
        return self.basics[0].vae.latent_dim

    def _check_specific(self, node: SpecificNode) -> None:
        latent = {self.nodes[s].vae.latent_dim for s in node.sources if self.is_basic(s)}
        if len(latent) > 1:
            raise StructuralError(f"Source basic nodes disagree on latent_dim: {sorted(latent)}")

    def specific_encode(self, node: SpecificNode, x, rng: Optional[Rng] = None,
                        eps: Optional[np.ndarray] = None
                        ) -> Tuple[Tensor, List[Optional[Tuple[Tensor, Tensor]]]]:
        """
        Inferência do nó específico.

        h = ω′(x); para cada fonte j: (μ_j, logvar_j) = sub-encoder superior de j
        aplicado a h; z_j reparametrizado; z = Σ π_j z_j.

        Args:
            node: nó específico
            x: lote [n × d]
            rng: gerador para ε
            eps: ruído explícito [fontes × n × L]

        Returns:
            (z, posteriors) com None nas fontes de peso zero
        """
        self._check_specific(node)
        h = node.enc_lower_new(x)
        n, latent = h.shape[0], self.latent_dim()
        if eps is None:
            if rng is None:
                raise ContractError("specific_encode() needs an Rng or explicit eps")
            eps = rng.normal((len(node.sources), n, latent))
        posteriors: List[Optional[Tuple[Tensor, Tensor]]] = [None] * len(node.sources)
        codes, weights = [], []
        for j, s, w in node.active():
            mu, logvar = self.latent_params(s, h)
            posteriors[j] = (mu, logvar)
            codes.append(nk.reparameterize(mu, logvar, eps=eps[j]))
            weights.append(w)
        return nk.weighted_sum(codes, weights), posteriors

    def specific_decode(self, node: SpecificNode, z: Tensor) -> Tensor:
        """x̃ = Σ π_j g_j(z) pelos sub-decoders inferiores; saída θ′(x̃)."""
        active = node.active()
        x_tilde = nk.weighted_sum([self.lower_decode(s, z) for _, s, _ in active], [w for _, _, w in active])
        return node.dec_upper_new(x_tilde)

    def melbo(self, node: SpecificNode, x, rng: Optional[Rng] = None,
              eps: Optional[np.ndarray] = None) -> Tensor:
        """
        MELBO por amostra: log p(x | decode(encode(x))) − Σ π_i KL(q_i || N(0, I)).
        """
        z, posteriors = self.specific_encode(node, x, rng, eps)
        log_px = node.log_likelihood(x, self.specific_decode(node, z))
        kls = [nk.kl_diag_gaussian_to_standard(*post) for post in posteriors if post is not None]
        return nk.sub(log_px, nk.weighted_sum(kls, [w for _, _, w in node.active()]))

    def mixture_posterior(self, node: SpecificNode, x) -> Tuple[Tensor, Tensor]:
        """Q(z|x) = N(Σπμ_j, Σπ²σ_j²) da construção por soma ponderada."""
        return self._weighted_gaussian(node, node.enc_lower_new(x))

    def melbo_iw(self, node: SpecificNode, x, k: int, rng: Optional[Rng] = None,
                 eps: Optional[np.ndarray] = None) -> Tensor:
        """
        MELBO ponderado por importância com k amostras de Q(z|x).

        k = 1 devolve exatamente o ``melbo`` (mesmo ε); para k > 1, eps é [k × n × L].
        """
        if k < 1:
            raise ContractError(f"K' must be >= 1, got {k}")
        if k == 1:
            return self.melbo(node, x, rng, eps)
        x = nk.as_tensor(x)
        n = x.shape[0]
        mu, logvar = self.mixture_posterior(node, x)
        mu_k, lv_k = nk.tile_rows(mu, k), nk.tile_rows(logvar, k)
        flat_eps = None if eps is None else np.reshape(eps, (k * n, mu.shape[1]))
        z = nk.reparameterize(mu_k, lv_k, rng, flat_eps)
        log_px = node.log_likelihood(Tensor(np.tile(x.data, (k, 1))), self.specific_decode(node, z))
        log_w = nk.sub(nk.add(log_px, nk.standard_normal_log_density(z)),
                       nk.diag_gaussian_log_density(z, mu_k, lv_k))
        return nk.log_mean_exp(nk.reshape(log_w, (k, n)), axis=0)

    # Interface comum por nó

    def noise_draws(self, index: int, k: int = 1) -> int:
        """Quantos blocos de ruído [n × L] a avaliação do nó consome."""
        node = self.nodes[index]
        if isinstance(node, SpecificNode) and k == 1:
            return len(node.sources)
        return k

    def node_objective(self, index: int, x, k: int = 1, rng: Optional[Rng] = None,
                       eps: Optional[np.ndarray] = None) -> Tensor:
        """ELBO/IWELBO para nós básicos e MELBO/MELBO_K' para específicos."""
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.iwelbo(x, k, rng, eps)
        return self.melbo_iw(node, x, k, rng, eps)

    def node_eval(self, index: int, x: np.ndarray, k: int = 1, eval_seed: int = 0) -> np.ndarray:
        """Objetivo por amostra com ruído chaveado pelo conteúdo (determinístico)."""
        latent = self.latent_dim()
        draws = self.noise_draws(index, k)

        def score(xb):
            eps = nk.keyed_normal(xb, latent, eval_seed, draws)
            return self.node_objective(index, xb, k, eps=eps).data

        return _eval_rows(score, np.asarray(x, dtype=np.float64))

    def node_parameters(self, index: int) -> Dict[str, Parameter]:
        node = self.nodes[index]
        return node.vae.parameters() if isinstance(node, BasicNode) else node.parameters()

    def node_trainable(self, index: int) -> Dict[str, Parameter]:
        return {k: p for k, p in self.node_parameters(index).items() if not p.frozen}

    def freeze_node(self, index: int) -> None:
        node = self.nodes[index]
        (node.vae if isinstance(node, BasicNode) else node).freeze()

    def encode(self, index: int, x) -> Tuple[Tensor, Tensor]:
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.encode(x)
        return self.mixture_posterior(node, x)

    def reconstruct_with(self, index: int, x) -> np.ndarray:
        """Reconstrução pela média da posterior do nó ``index``."""
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.reconstruct(x)
        mu, _ = self.mixture_posterior(node, x)
        return self.specific_decode(node, mu).data

    def generate_with(self, index: int, n: int, rng: Rng) -> np.ndarray:
        node = self.nodes[index]
        if isinstance(node, BasicNode):
            return node.vae.generate(n, rng)
        if n == 0:
            return np.empty((0, node.input_dim))
        out = self.specific_decode(node, Tensor(rng.normal((n, self.latent_dim())))).data
        return rng.bernoulli(out) if node.likelihood == 'bernoulli' else np.clip(out, 0.0, 1.0)

    def num_parameters(self) -> Dict[str, int]:
        counts = {f"node{i}": sum(p.size for p in self.node_parameters(i).values())
                  for i in range(len(self.nodes))}
        counts['total'] = sum(counts.values())
        return counts

    def parameter_bytes(self, index: int) -> bytes:
        """Bytes dos parâmetros de um nó, para verificar o congelamento."""
        params = self.node_parameters(index)
        return b''.join(params[k].data.tobytes() for k in sorted(params))

    def describe(self) -> List[Dict[str, Any]]:
        rows = []
        for i, node in enumerate(self.nodes):
            if isinstance(node, BasicNode):
                rows.append({'node': i, 'kind': 'basic', 'task_id': node.task_id,
                             'reference_elbo': node.reference_elbo})
            else:
                rows.append({'node': i, 'kind': 'specific', 'task_id': node.task_id,
                             'sources': node.sources, 'weights': node.weights.tolist()})
        return rows

    def _log_operation(self, operation: str, params: Dict[str, Any]) -> None:
        """Registra uma operação no histórico."""
        self.history.append({
            'operation': operation,
            'timestamp': np.datetime64('now'),
            'params': params
        })
