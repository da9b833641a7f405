"""
Seleção de componentes sem rótulo de tarefa e métricas de avaliação
(NLL por IWELBO, perda quadrática, PSNR e SSIM).
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax

from ..core import nnkit as nk
from ..core.errors import ContractError, DimensionError, StructuralError
from ..core.graph import EVAL_BATCH, GraphModel
from ..core.nnkit import Rng
from ..core.vae import HierVae, VaeComponent

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
MSE_FLOOR = 1e-12
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8
SSIM_STRIDE = 4


class NodeView:
    """Um nó do grafo visto como hipótese isolada (encode/reconstruct/objetivo)."""

    def __init__(self, graph: GraphModel, index: int):
        if not 0 <= index < len(graph.nodes):
            raise StructuralError(f"Unknown node {index}")
        self.graph = graph
        self.index = index

    @property
    def input_dim(self) -> int:
        node = self.graph.nodes[self.index]
        return node.vae.input_dim if self.graph.is_basic(self.index) else node.input_dim

    @property
    def likelihood(self) -> str:
        node = self.graph.nodes[self.index]
        return node.vae.likelihood if self.graph.is_basic(self.index) else node.likelihood

    def encode(self, x):
        return self.graph.encode(self.index, x)

    def reconstruct(self, x) -> np.ndarray:
        return self.graph.reconstruct_with(self.index, x)

    def generate(self, n: int, rng: Rng) -> np.ndarray:
        return self.graph.generate_with(self.index, n, rng)

    def __repr__(self) -> str:
        return f"NodeView(node={self.index})"


Hypothesis = Union[VaeComponent, HierVae, NodeView]


def _batched(fn, x: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    if x.shape[0] == 0:
        return np.empty(0)
    return np.concatenate([fn(x[i:i + batch]) for i in range(0, x.shape[0], batch)])


def objective_values(model: Hypothesis, x: np.ndarray, k: int = 1, eval_seed: int = 0) -> np.ndarray:
    """
    ELBO (k=1) ou IWELBO/MELBO_k por amostra, com ruído fixo de avaliação.

    Args:
        model: componente, VAE hierárquico ou nó do grafo
        x: amostras [n × d]
        k: número de amostras ponderadas K'
        eval_seed: semente de avaliação

    Returns:
        objetivo por amostra [n]
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ContractError(f"K' must be >= 1, got {k}")
    if isinstance(model, NodeView):
        return model.graph.node_eval(model.index, x, k, eval_seed)
    if isinstance(model, HierVae):
        if not model.use_second_layer:
            return objective_values(model.base, x, k, eval_seed)
        if k != 1:
            raise ContractError("Two-layer VAE is evaluated with K'=1 only")
        l1, l2 = model.base.latent_dim, model.second['enc2_mu'].out_dim

        def hier_score(xb):
            noise = nk.keyed_normal(xb, l1 + l2, eval_seed, 1)[0]
            return model.hier_elbo(xb, eps=(noise[:, :l1], noise[:, l1:])).data
        return _batched(hier_score, x)
    if isinstance(model, VaeComponent):
        def score(xb):
            eps = nk.keyed_normal(xb, model.latent_dim, eval_seed, k)
            return model.iwelbo(xb, k, eps=eps).data
        return _batched(score, x)
    raise ContractError(f"Cannot evaluate {type(model).__name__}")


def reconstruct(model: Hypothesis, x: np.ndarray) -> np.ndarray:
    return _batched(lambda xb: model.reconstruct(xb), np.asarray(x, dtype=np.float64))


@dataclass
class SelectionResult:
    """Escolha de componente por amostra: índices, pontuações e posterior."""

    chosen: np.ndarray
    scores: np.ndarray
    posterior: np.ndarray

    def histogram(self, num_nodes: int) -> np.ndarray:
        return np.bincount(self.chosen, minlength=num_nodes)


def select_component(graph: GraphModel, x: np.ndarray, k_eval: int = 1, eval_seed: int = 0) -> SelectionResult:
    """
    Escolhe, para cada amostra, o nó de maior log-verossimilhança estimada.

    A pontuação é o ELBO (nós básicos) ou o MELBO (nós específicos) médio
    sobre ``k_eval`` sorteios; com prior uniforme 1/t a posterior é o
    softmax das pontuações. Empates ficam com o menor índice.

    Args:
        graph: grafo treinado
        x: amostras [n × d]
        k_eval: sorteios de Monte-Carlo por pontuação
        eval_seed: semente de avaliação

    Returns:
        SelectionResult
    """
    if not graph.nodes:
        raise StructuralError("Cannot select a component from an empty graph")
    if k_eval < 1:
        raise ContractError(f"k_eval must be >= 1, got {k_eval}")
    x = np.asarray(x, dtype=np.float64)
    scores = np.empty((x.shape[0], len(graph.nodes)))
    for j in range(len(graph.nodes)):
        draws = [graph.node_eval(j, x, 1, eval_seed + r) for r in range(k_eval)]
        scores[:, j] = np.mean(draws, axis=0)
    return SelectionResult(np.argmax(scores, axis=1), scores, softmax(scores, axis=1))


def _per_node(graph: GraphModel, x: np.ndarray, selection: SelectionResult, fn) -> np.ndarray:
    out: Optional[np.ndarray] = None
    for j in np.unique(selection.chosen):
        rows = np.flatnonzero(selection.chosen == j)
        values = fn(int(j), x[rows])
        if out is None:
            out = np.empty((x.shape[0],) + values.shape[1:])
        out[rows] = values
    return out


def nll_values(model: Union[GraphModel, Hypothesis], x: np.ndarray, kprime: int = 1, eval_seed: int = 0,
               selection: Optional[SelectionResult] = None) -> np.ndarray:
    """NLL estimada por amostra; no grafo cada amostra usa o nó selecionado."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, GraphModel):
        selection = selection or select_component(model, x, eval_seed=eval_seed)
        return -_per_node(model, x, selection, lambda j, rows: model.node_eval(j, rows, kprime, eval_seed))
    return -objective_values(model, x, kprime, eval_seed)


def eval_nll(model: Union[GraphModel, Hypothesis], x: np.ndarray, kprime: int = 1, eval_seed: int = 0) -> float:
    """
    Média da NLL estimada (−IWELBO / −MELBO_K') sobre o conjunto.

    Args:
        model: grafo DEGM ou modelo único
        x: amostras [n × d]
        kprime: K'
        eval_seed: semente de avaliação

    Returns:
        NLL média
    """
    values = nll_values(model, x, kprime, eval_seed)
    if values.size == 0:
        raise ContractError("eval_nll() needs a non-empty dataset")
    return math.fsum(values) / values.size


def reconstructions(model: Union[GraphModel, Hypothesis], x: np.ndarray,
                    selection: Optional[SelectionResult] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, GraphModel):
        selection = selection or select_component(model, x)
        return _per_node(model, x, selection, lambda j, rows: model.reconstruct_with(j, rows))
    return reconstruct(model, x)


# Métricas

def _check_pair(x: np.ndarray, recon: np.ndarray) -> None:
    if x.shape != recon.shape:
        raise DimensionError(f"Shapes differ: {x.shape} vs {recon.shape}")


def square_loss(x, recon) -> float:
    """SL = Σ (x − recon)²."""
    x, recon = np.asarray(x, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    _check_pair(x, recon)
    return float(np.sum((x - recon) ** 2))


def psnr(x, recon, max_val: float = 1.0) -> float:
    """PSNR em dB, limitado a 99 dB quando o MSE é praticamente nulo."""
    x, recon = np.asarray(x, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    _check_pair(x, recon)
    if max_val <= 0:
        raise ContractError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((x - recon) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def _ssim_window(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> np.ndarray:
    axes = tuple(range(a.ndim - 2, a.ndim)) if a.ndim > 1 else (-1,)
    mu_a, mu_b = a.mean(axis=axes), b.mean(axis=axes)
    var_a, var_b = a.var(axis=axes), b.var(axis=axes)
    shape = mu_a.shape + (1,) * len(axes)
    cov = ((a - mu_a.reshape(shape)) * (b - mu_b.reshape(shape))).mean(axis=axes)
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(x, recon, max_val: float = 1.0, window: int = SSIM_WINDOW, stride: int = SSIM_STRIDE) -> float:
    """
    SSIM médio sobre janelas deslizantes.

    Imagens 2-D usam janelas ``window``×``window`` com passo ``stride`` (uma
    única janela cobrindo a imagem inteira se ela for menor); vetores usam
    uma única janela global.

    Args:
        x: imagem ou vetor de referência
        recon: reconstrução com a mesma forma
        max_val: faixa dinâmica (C1=(0.01·max)², C2=(0.03·max)²)
        window: lado da janela
        stride: passo entre janelas

    Returns:
        SSIM em [−1, 1]
    """
    x, recon = np.asarray(x, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    _check_pair(x, recon)
    if max_val <= 0:
        raise ContractError(f"max_val must be positive, got {max_val}")
    c1, c2 = (SSIM_K1 * max_val) ** 2, (SSIM_K2 * max_val) ** 2
    if x.ndim < 2:
        return float(_ssim_window(x.ravel(), recon.ravel(), c1, c2))
    rows, cols = x.shape[-2:]
    if rows < window or cols < window:
        return float(np.mean(_ssim_window(x, recon, c1, c2)))
    wa = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    wb = sliding_window_view(recon, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return float(np.mean(_ssim_window(wa, wb, c1, c2)))


@dataclass
class MetricsRecord:
    nll: float
    sl: float
    psnr: float
    ssim: float


def task_metrics(x: np.ndarray, recon: np.ndarray, nll: np.ndarray,
                 image_shape: Optional[tuple] = None, max_val: float = 1.0) -> MetricsRecord:
    """Médias por amostra das quatro métricas de um conjunto de teste."""
    n = x.shape[0]
    shape = image_shape or (x.shape[1],)
    psnrs = [psnr(x[i], recon[i], max_val) for i in range(n)]
    ssims = [ssim(x[i].reshape(shape), recon[i].reshape(shape), max_val) for i in range(n)]
    return MetricsRecord(
        nll=math.fsum(nll) / n,
        sl=square_loss(x, recon) / n,
        psnr=math.fsum(psnrs) / n,
        ssim=math.fsum(ssims) / n,
    )


def evaluate_stream(model: Union[GraphModel, Hypothesis], stream: Any, kprime: int = 1,
                    eval_seed: int = 0, k_select: int = 1) -> pd.DataFrame:
    """
    Tabela de métricas por tarefa no conjunto de teste.

    Colunas: task, nll, nll_se, sl, psnr, ssim e, para o grafo, a contagem
    de amostras atribuídas a cada nó (chosen_node_j).

    Args:
        model: grafo DEGM ou modelo único
        stream: TaskStream
        kprime: K' da estimativa de NLL
        eval_seed: semente de avaliação
        k_select: sorteios usados na seleção

    Returns:
        DataFrame com uma linha por tarefa
    """
    rows: List[Dict[str, Any]] = []
    for task in stream:
        x = task.test.data
        selection = None
        if isinstance(model, GraphModel):
            selection = select_component(model, x, k_select, eval_seed)
        nll = nll_values(model, x, kprime, eval_seed, selection)
        recon = reconstructions(model, x, selection)
        record = task_metrics(x, recon, nll, task.test.image_shape)
        row = {'task': task.name, 'nll': record.nll,
               'nll_se': float(np.std(nll, ddof=1) / np.sqrt(nll.size)) if nll.size > 1 else 0.0,
               'sl': record.sl, 'psnr': record.psnr, 'ssim': record.ssim}
        if selection is not None:
            for j, count in enumerate(selection.histogram(len(model.nodes))):
                row[f"chosen_node_{j}"] = int(count)
        rows.append(row)
        logger.info("eval %s: nll=%.4f sl=%.4f", task.name, record.nll, record.sl)
    return pd.DataFrame(rows)
