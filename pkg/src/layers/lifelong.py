"""
Orquestração da sequência de tarefas: o laço de treino do DEGM e as linhas
de base de modelo único com replay generativo (ELBO-GR, IWELBO-GR-K', ELBO-GR*).
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..core import nnkit as nk
from ..core.errors import ConfigError
from ..core.graph import (DEFAULT_PROBE_SIZE, GraphModel, KnowledgeScores, expansion_decide,
                          knowledge_similarity)
from ..core.nnkit import AdamState, Parameter, Rng, Tape, Tensor
from ..core.policies import EdgePolicy, get_policy
from ..core.vae import DEFAULT_HIDDEN, DEFAULT_SIGMA, LIKELIHOODS, HierVae, VaeComponent
from .data import Task, TaskStream
from .select_eval import Hypothesis, NodeView, objective_values, reconstruct

logger = logging.getLogger(__name__)

OBJECTIVES = ('elbo', 'iwelbo', 'auto')
METRIC_COLUMNS = ['run_id', 'task_index', 'epoch', 'global_epoch', 'eval_task',
                  'objective_value', 'square_loss', 'risk']


@dataclass
class TrainConfig:
    """
    Hiperparâmetros de treino (padrões: 500 épocas, lote 64, lr 1e-4).

    ``objective='auto'`` treina com IWELBO/MELBO_K' quando ``kprime > 1`` e
    com ELBO/MELBO caso contrário.
    """

    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-4
    objective: str = 'elbo'
    kprime: int = 1
    tau: float = 40.0
    probe_size: int = DEFAULT_PROBE_SIZE
    seed: int = 0
    specific_epochs: Optional[int] = None
    latent_dim: int = 50
    hidden_dim: int = DEFAULT_HIDDEN
    likelihood: str = 'bernoulli'
    sigma: float = float(DEFAULT_SIGMA)
    hier_latent_dims: List[int] = field(default_factory=lambda: [100, 50])
    use_second_layer: bool = True
    specific_init: str = 'random'
    replay_scale: float = 1.0
    eval_seed: int = 0
    eval_size: Optional[int] = None
    progress: bool = False

    def __post_init__(self):
        for key in ('epochs', 'batch_size', 'kprime', 'probe_size', 'latent_dim', 'hidden_dim'):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, key)}", f'train.{key}')
        if self.specific_epochs is not None and self.specific_epochs < 1:
            raise ConfigError(f"must be positive, got {self.specific_epochs}", 'train.specific_epochs')
        if self.eval_size is not None and self.eval_size < 1:
            raise ConfigError(f"must be positive, got {self.eval_size}", 'train.eval_size')
        if self.lr <= 0:
            raise ConfigError(f"must be positive, got {self.lr}", 'train.lr')
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", 'train.tau')
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective '{self.objective}', expected one of {OBJECTIVES}",
                              'train.objective')
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"unknown likelihood '{self.likelihood}'", 'train.likelihood')
        if self.sigma <= 0:
            raise ConfigError(f"must be positive, got {self.sigma}", 'train.sigma')
        if self.replay_scale < 0:
            raise ConfigError(f"must be >= 0, got {self.replay_scale}", 'train.replay_scale')
        if self.specific_init not in ('random', 'copy'):
            raise ConfigError(f"unknown init '{self.specific_init}'", 'train.specific_init')
        if len(self.hier_latent_dims) != 2 or min(self.hier_latent_dims) < 1:
            raise ConfigError(f"expected two positive sizes, got {self.hier_latent_dims}",
                              'train.hier_latent_dims')

    @property
    def train_k(self) -> int:
        if self.objective == 'elbo':
            return 1
        return self.kprime

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EpochContext:
    """Estado entregue aos callbacks ao fim de cada época (ou no início de cada tarefa)."""

    mode: str
    task_index: int
    epoch: int
    task: Task
    seen: List[Task]
    source: np.ndarray
    model: Hypothesis
    snapshots: List[Hypothesis]
    cfg: TrainConfig
    rng: Rng


class TrainingCallback:
    """Ganchos opcionais chamados pelos laços de treino."""

    def on_task_start(self, ctx: EpochContext) -> None:
        pass

    def on_epoch_end(self, ctx: EpochContext) -> None:
        pass


@dataclass
class ReplayBuffer:
    """Amostras geradas pelo snapshot congelado do modelo anterior."""

    samples: np.ndarray
    generation: int

    @classmethod
    def from_snapshot(cls, snapshot: Hypothesis, n: int, rng: Rng, generation: int) -> "ReplayBuffer":
        return cls(snapshot.generate(n, rng), generation)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class RunResult:
    """Resultado de uma execução de aprendizado ao longo da vida."""

    mode: str
    model: Any
    stream: TaskStream
    metrics: List[Dict[str, Any]]
    snapshots: List[Any] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics, columns=METRIC_COLUMNS)


def fit(params: Dict[str, Parameter], objective: Callable[[np.ndarray, Rng], Tensor], data: np.ndarray,
        cfg: TrainConfig, rng: Rng, epochs: int, desc: str = 'train',
        on_epoch: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """
    Maximiza ``objective`` com Adam em minilotes embaralhados.

    Args:
        params: parâmetros treináveis (os demais ficam fora do passo)
        objective: função (lote, rng) → objetivo por amostra
        data: conjunto de treino [n × d]
        cfg: configuração de treino
        rng: gerador do embaralhamento e do ruído
        epochs: número de épocas
        desc: rótulo da barra de progresso
        on_epoch: chamado com (época, média do objetivo) ao fim de cada época

    Returns:
        média do objetivo em cada época
    """
    if data.shape[0] == 0:
        raise ConfigError("Cannot train on an empty task", 'tasks')
    state = AdamState(lr=cfg.lr)
    curve: List[float] = []
    for epoch in tqdm(range(1, epochs + 1), desc=desc, disable=not cfg.progress, leave=False):
        order = rng.permutation(data.shape[0])
        sums: List[float] = []
        for start in range(0, order.size, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            with Tape() as tape:
                values = objective(batch, rng)
                loss = -values.mean()
            grads = nk.backprop(tape, loss)
            nk.adam_step(state, params, {k: g for k, g in grads.items() if k in params})
            sums.append(float(np.sum(values.data)))
        curve.append(math.fsum(sums) / data.shape[0])
        logger.debug("%s epoch %d: objective %.4f", desc, epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return curve


def _eval_subset(task: Task, cfg: TrainConfig) -> np.ndarray:
    x = task.test.data
    return x if cfg.eval_size is None else x[:cfg.eval_size]


def metric_rows(run_id: str, task_index: int, epoch: int, global_epoch: int,
                seen: Sequence[Task], models: Sequence[Hypothesis], cfg: TrainConfig) -> List[Dict[str, Any]]:
    """Uma linha por tarefa já vista: objetivo, perda quadrática e risco no teste."""
    rows = []
    for task, model in zip(seen, models):
        x = _eval_subset(task, cfg)
        objective = objective_values(model, x, 1, cfg.eval_seed)
        sl = np.sum((x - reconstruct(model, x)) ** 2, axis=1)
        rows.append({
            'run_id': run_id, 'task_index': task_index, 'epoch': epoch, 'global_epoch': global_epoch,
            'eval_task': task.name,
            'objective_value': math.fsum(objective) / objective.size,
            'square_loss': math.fsum(sl) / sl.size,
            'risk': math.fsum(sl) / (sl.size * x.shape[1]),
        })
    return rows


def _notify(callbacks: Sequence[TrainingCallback], hook: str, ctx: EpochContext) -> None:
    for callback in callbacks:
        getattr(callback, hook)(ctx)


def run_degm(stream: TaskStream, cfg: TrainConfig, rng: Rng, policy: Optional[EdgePolicy] = None,
             run_id: str = 'degm', callbacks: Sequence[TrainingCallback] = ()) -> RunResult:
    """
    Treina o DEGM sobre o fluxo de tarefas.

    A primeira tarefa cria um nó básico. Para cada tarefa seguinte, uma sonda
    de ``probe_size`` amostras do seu treino mede ks contra cada nó básico;
    a decisão de expansão cria um nó básico ou um nó específico e só os
    sub-módulos novos são treinados. Cada nó é congelado ao fim da sua tarefa.

    Args:
        stream: fluxo de tarefas
        cfg: configuração de treino
        rng: gerador raiz (filhos derivados do nome de cada tarefa)
        policy: política de arestas (adaptativa por padrão)
        run_id: identificador gravado nas métricas
        callbacks: ganchos por época

    Returns:
        RunResult com o GraphModel e o log de métricas
    """
    policy = policy or get_policy('degm')
    graph = GraphModel(cfg.tau, {'hidden_dim': cfg.hidden_dim, 'likelihood': cfg.likelihood,
                                 'sigma': cfg.sigma, 'policy': policy.name})
    metrics: List[Dict[str, Any]] = []
    seen: List[Task] = []
    global_epoch = 0

    for i, task in enumerate(stream, start=1):
        if task.train.n == 0 or task.test.n == 0:
            raise ConfigError(f"Task '{task.name}' has an empty split", 'tasks')
        scores = None
        if graph.num_basics:
            probe = task.train.sample(cfg.probe_size, rng.fork('probe', task.name)).data
            scores = KnowledgeScores(np.array([knowledge_similarity(b, probe, cfg.eval_seed)
                                               for b in graph.basics]))
            logger.info("task %d (%s): ks=%s", i, task.name, np.round(scores.ks, 4).tolist())
        decision = expansion_decide(scores, cfg.tau, policy, graph)

        if decision.is_basic:
            index = graph.add_basic_node(stream.input_dim, cfg.latent_dim, i, rng.fork('init', task.name))
            epochs = cfg.epochs
        else:
            index = graph.add_specific_node(decision.weights, i, rng.fork('init', task.name),
                                            decision.sources, init=cfg.specific_init)
            epochs = cfg.specific_epochs or cfg.epochs
        seen.append(task)
        models = [NodeView(graph, graph.node_for_task(j)) for j in range(1, i + 1)]
        k = cfg.train_k

        def on_epoch(epoch: int, value: float) -> None:
            nonlocal global_epoch
            global_epoch += 1
            metrics.extend(metric_rows(run_id, i, epoch, global_epoch, seen, models, cfg))
            ctx = EpochContext('degm', i, epoch, task, list(seen), task.train.data, models[-1], [], cfg, rng)
            _notify(callbacks, 'on_epoch_end', ctx)

        curve = fit(graph.node_trainable(index),
                    lambda xb, r: graph.node_objective(index, xb, k, r),
                    task.train.data, cfg, rng.fork('train', task.name), epochs,
                    desc=f"{run_id}:{task.name}", on_epoch=on_epoch)

        if decision.is_basic:
            node = graph.nodes[index]
            if k == 1:
                node.reference_elbo = curve[-1]
            else:
                values = objective_values(node.vae, task.train.data, 1, cfg.eval_seed)
                node.reference_elbo = math.fsum(values) / values.size
        graph.freeze_node(index)
        logger.info("task %d (%s) done: node %d, final objective %.4f", i, task.name, index, curve[-1])

    return RunResult('degm', graph, stream, metrics, history=graph.history)


def _train_single(model, mode: str, stream: TaskStream, cfg: TrainConfig, rng: Rng, run_id: str,
                  callbacks: Sequence[TrainingCallback]) -> RunResult:
    metrics: List[Dict[str, Any]] = []
    snapshots: List[Any] = []
    history: List[Dict[str, Any]] = []
    seen: List[Task] = []
    global_epoch = 0
    k = cfg.train_k

    for i, task in enumerate(stream, start=1):
        if task.train.n == 0 or task.test.n == 0:
            raise ConfigError(f"Task '{task.name}' has an empty split", 'tasks')
        source = task.train.data
        if snapshots:
            n_replay = int(round(task.train.n * (i - 1) * cfg.replay_scale))
            replay = ReplayBuffer.from_snapshot(snapshots[-1], n_replay, rng.fork('replay', task.name), i - 1)
            source = np.vstack([source, replay.samples])
            history.append({'operation': 'replay', 'timestamp': np.datetime64('now'),
                            'params': {'task': task.name, 'replay': len(replay), 'real': task.train.n}})
            logger.info("task %d (%s): %d real + %d replay samples", i, task.name, task.train.n, len(replay))
        seen.append(task)
        _notify(callbacks, 'on_task_start',
                EpochContext(mode, i, 0, task, list(seen), source, model, list(snapshots), cfg, rng))

        def on_epoch(epoch: int, value: float) -> None:
            nonlocal global_epoch
            global_epoch += 1
            metrics.extend(metric_rows(run_id, i, epoch, global_epoch, seen, [model] * len(seen), cfg))
            ctx = EpochContext(mode, i, epoch, task, list(seen), source, model, list(snapshots), cfg, rng)
            _notify(callbacks, 'on_epoch_end', ctx)

        fit(model.trainable_parameters(), lambda xb, r: model.objective(xb, r, k), source, cfg,
            rng.fork('train', task.name), cfg.epochs, desc=f"{run_id}:{task.name}", on_epoch=on_epoch)
        snapshots.append(model.snapshot())
        history.append({'operation': 'snapshot', 'timestamp': np.datetime64('now'),
                        'params': {'task': task.name, 'generation': i}})

    return RunResult(mode, model, stream, metrics, snapshots, history)


def run_gr_single(stream: TaskStream, cfg: TrainConfig, rng: Rng, run_id: str = 'gr',
                  callbacks: Sequence[TrainingCallback] = ()) -> RunResult:
    """
    Linha de base de modelo único com replay generativo.

    Na tarefa i > 1 o snapshot congelado do modelo gera |train_i|·(i−1)
    amostras, e o modelo treina na união embaralhada com os dados reais.
    Um snapshot é guardado ao fim de cada tarefa (uma geração de replay).

    Args:
        stream: fluxo de tarefas
        cfg: configuração (``objective``/``kprime`` selecionam ELBO-GR ou IWELBO-GR-K')
        rng: gerador raiz
        run_id: identificador gravado nas métricas
        callbacks: ganchos por época (ex.: BoundsTracker)

    Returns:
        RunResult com o VaeComponent, métricas e snapshots
    """
    model = VaeComponent(stream.input_dim, cfg.latent_dim, cfg.hidden_dim, cfg.likelihood, cfg.sigma,
                         rng.fork('init', stream[0].name), name='gr')
    return _train_single(model, 'gr', stream, cfg, rng, run_id, callbacks)


def run_gr_hier(stream: TaskStream, cfg: TrainConfig, rng: Rng, run_id: str = 'gr-hier',
                callbacks: Sequence[TrainingCallback] = ()) -> RunResult:
    """Linha de base ELBO-GR*: como ``run_gr_single`` com o VAE de duas camadas estocásticas."""
    if cfg.train_k != 1:
        raise ConfigError("The two-layer baseline trains with the ELBO only", 'train.objective')
    l1, l2 = cfg.hier_latent_dims
    if not cfg.use_second_layer:
        l1 = cfg.latent_dim
    model = HierVae(stream.input_dim, (l1, l2), cfg.hidden_dim, cfg.likelihood, cfg.sigma,
                    rng.fork('init', stream[0].name), name='hier', use_second_layer=cfg.use_second_layer)
    return _train_single(model, 'gr-hier', stream, cfg, rng, run_id, callbacks)


def final_risks(result: RunResult) -> Dict[str, float]:
    """Risco de teste de cada tarefa ao fim da execução."""
    frame = result.metrics_frame()
    last = frame[frame['global_epoch'] == frame['global_epoch'].max()]
    return dict(zip(last['eval_task'], last['risk']))


def order_experiment(stream: TaskStream, orders: Sequence[Sequence[str]], cfg: TrainConfig,
                     policy: Optional[EdgePolicy] = None, seed: Optional[int] = None) -> pd.DataFrame:
    """
    Executa DEGM e o modelo único GR para cada ordem de tarefas.

    Args:
        stream: tarefas (a ordem original é irrelevante)
        orders: permutações dos nomes das tarefas
        cfg: configuração de treino
        policy: política de arestas do DEGM
        seed: semente (por padrão ``cfg.seed``)

    Returns:
        DataFrame: order, model, accumulated_risk e o risco final por tarefa
    """
    if not orders:
        raise ConfigError("order_experiment() needs at least one order", 'orders')
    streams = [stream.reordered(order) for order in orders]
    seed = cfg.seed if seed is None else seed
    rows = []
    for o, ordered in enumerate(streams):
        label = '>'.join(ordered.names)
        for model_name, runner in (('mixture', lambda s, r: run_degm(s, cfg, r, policy, f"order{o}-degm")),
                                   ('single', lambda s, r: run_gr_single(s, cfg, r, f"order{o}-gr"))):
            risks = final_risks(runner(ordered, Rng(seed)))
            row = {'order': label, 'model': model_name,
                   'accumulated_risk': math.fsum(risks.values()) / len(risks)}
            row.update({f"risk_{name}": risks[name] for name in stream.names})
            rows.append(row)
            logger.info("order %s [%s]: accumulated risk %.6f", label, model_name, row['accumulated_risk'])
    return pd.DataFrame(rows)
