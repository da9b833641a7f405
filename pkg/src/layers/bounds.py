"""
Estimadores empíricos das grandezas dos limites de generalização:
risco, distância de discrepância sobre uma família finita de hipóteses,
diferença de KL, curvas de esquecimento e proxies do erro acumulado.

Todos os valores de discrepância são limites inferiores do supremo real.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..core import nnkit as nk
from ..core.errors import ConfigError, ContractError, StructuralError
from ..core.nnkit import Rng, Tensor
from ..core.vae import HierVae, VaeComponent
from .data import TaskStream
from .lifelong import EpochContext, TrainingCallback, fit
from .select_eval import Hypothesis, objective_values, reconstruct

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_SIZE = 10000


@dataclass
class BoundsConfig:
    """Tamanhos amostrais e treino do modelo auxiliar h*."""

    sample_size: int = DEFAULT_SAMPLE_SIZE
    aux_epochs: int = 10
    eval_seed: int = 0

    def __post_init__(self):
        for key in ('sample_size', 'aux_epochs'):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, key)}", f'bounds.{key}')


class HypothesisSet:
    """
    Família finita e ordenada de hipóteses (modelo atual, auxiliar, snapshots).

    Uma hipótese registrada não pode ser substituída.
    """

    def __init__(self, members: Optional[Sequence[Tuple[str, Hypothesis]]] = None):
        self._members: Dict[str, Hypothesis] = {}
        for name, h in members or []:
            self.register(name, h)

    def register(self, name: str, h: Hypothesis) -> None:
        if name in self._members:
            raise StructuralError(f"Hypothesis '{name}' is already registered")
        if self._members:
            dim = next(iter(self._members.values())).input_dim
            if h.input_dim != dim:
                raise StructuralError(f"Hypothesis '{name}' has input_dim {h.input_dim}, expected {dim}")
        self._members[name] = h

    @property
    def names(self) -> List[str]:
        return list(self._members)

    def items(self):
        return list(self._members.items())

    def __len__(self) -> int:
        return len(self._members)


def _check_samples(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"{what} must be a non-empty [n x d] matrix")
    return x


def risk(h: Hypothesis, x: np.ndarray) -> float:
    """
    Risco sob perda quadrática da hipótese encode-decode contra a identidade,
    normalizado pela dimensão d.
    """
    x = _check_samples(x, 'risk() dataset')
    per_sample = np.sum((x - reconstruct(h, x)) ** 2, axis=1) / x.shape[1]
    return math.fsum(per_sample) / per_sample.size


def _pair_loss(a: np.ndarray, b: np.ndarray) -> float:
    per_sample = np.sum((a - b) ** 2, axis=1) / a.shape[1]
    return math.fsum(per_sample) / per_sample.size


def estimate_discrepancy(p: np.ndarray, q: np.ndarray, hypotheses: HypothesisSet) -> float:
    """
    max sobre pares ordenados (h, h′) de |E_P L(h, h′) − E_Q L(h, h′)|.

    Args:
        p: amostras da primeira distribuição
        q: amostras da segunda distribuição
        hypotheses: família finita com ao menos duas hipóteses

    Returns:
        limite inferior da discrepância (≥ 0)
    """
    if len(hypotheses) < 2:
        raise ContractError(f"Discrepancy needs at least 2 hypotheses, got {len(hypotheses)}")
    p, q = _check_samples(p, 'P'), _check_samples(q, 'Q')
    outs = [(reconstruct(h, p), reconstruct(h, q)) for _, h in hypotheses.items()]
    best = 0.0
    for a, (hp, hq) in enumerate(outs):
        for b, (gp, gq) in enumerate(outs):
            if a == b:
                continue
            best = max(best, abs(_pair_loss(hp, gp) - _pair_loss(hq, gq)))
    return best


def encoder_kl(h: Hypothesis, x: np.ndarray) -> np.ndarray:
    """KL(q(z|x) || N(0, I)) por amostra."""
    mu, logvar = h.encode(Tensor(_check_samples(x, 'encoder_kl() samples')))
    return nk.kl_diag_gaussian_to_standard(mu, logvar).data


def _mean_se(values: np.ndarray) -> Tuple[float, float]:
    mean = math.fsum(values) / values.size
    se = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


def kl_gap_with_se(h: Hypothesis, targets: Sequence[np.ndarray], source: np.ndarray) -> Tuple[float, float]:
    """|E_fonte KL − média das tarefas de E_alvo KL| e o erro padrão da diferença."""
    if not targets:
        raise ContractError("estimate_kl_gap() needs at least one target set")
    src_mean, src_se = _mean_se(encoder_kl(h, source))
    stats = [_mean_se(encoder_kl(h, t)) for t in targets]
    tgt_mean = math.fsum(m for m, _ in stats) / len(stats)
    tgt_se = math.sqrt(sum(se ** 2 for _, se in stats)) / len(stats)
    return abs(src_mean - tgt_mean), math.hypot(src_se, tgt_se)


def estimate_kl_gap(h: Hypothesis, targets: Sequence[np.ndarray], source: np.ndarray) -> float:
    """
    Diferença de KL entre a fonte evoluída e a média das distribuições alvo.

    Args:
        h: modelo com encoder
        targets: amostras de cada tarefa alvo
        source: amostras da fonte evoluída (dados reais + replay)

    Returns:
        |KL₁ − KL₂| ≥ 0
    """
    return kl_gap_with_se(h, targets, source)[0]


def _cap(x: np.ndarray, n: int) -> np.ndarray:
    """Até ``n`` linhas igualmente espaçadas (determinístico)."""
    if x.shape[0] <= n:
        return x
    return x[np.linspace(0, x.shape[0] - 1, n).astype(np.int64)]


class BoundsTracker(TrainingCallback):
    """
    Registra, a cada época de uma execução GR, as grandezas do limite:
    −ELBO e risco na fonte e em cada alvo, diferença de KL, limite inferior
    da discrepância e o risco do modelo auxiliar h* como proxy de ε.

    Na primeira tarefa h* = h; nas seguintes h* é treinado na fonte evoluída.

    Args:
        config: BoundsConfig
    """

    def __init__(self, config: Optional[BoundsConfig] = None):
        self.config = config or BoundsConfig()
        self.records: List[Dict[str, Any]] = []
        self.history: List[Dict[str, Any]] = []
        self.aux: Optional[Hypothesis] = None
        self._global_epoch = 0

    def on_task_start(self, ctx: EpochContext) -> None:
        if ctx.task_index == 1:
            self.aux = None
            return
        cfg = dataclasses.replace(ctx.cfg, epochs=self.config.aux_epochs, progress=False)
        aux = VaeComponent(ctx.source.shape[1], cfg.latent_dim, cfg.hidden_dim, cfg.likelihood, cfg.sigma,
                           ctx.rng.fork('aux-init', ctx.task.name), name=f"aux{ctx.task_index}")
        fit(aux.trainable_parameters(), lambda xb, r: aux.objective(xb, r), ctx.source, cfg,
            ctx.rng.fork('aux-train', ctx.task.name), cfg.epochs, desc=f"aux:{ctx.task.name}")
        aux.freeze()
        self.aux = aux
        self._log_operation('train_auxiliary', {'task_t': ctx.task_index, 'samples': int(ctx.source.shape[0])})

    def on_epoch_end(self, ctx: EpochContext) -> None:
        self._global_epoch += 1
        n = self.config.sample_size
        seed = self.config.eval_seed
        h = ctx.model
        h_star = self.aux if self.aux is not None else h
        source = _cap(ctx.source, n)
        targets = [_cap(t.test.data, n) for t in ctx.seen]
        share = min(min(t.shape[0] for t in targets), max(1, n // len(targets)))
        target_union = np.vstack([_cap(t, share) for t in targets])

        src_nelbo, src_se = _mean_se(-objective_values(h, source, 1, seed))
        record: Dict[str, Any] = {
            'epoch': self._global_epoch, 'task_t': ctx.task_index, 'epoch_in_task': ctx.epoch,
            'source_nelbo': src_nelbo, 'source_nelbo_se': src_se, 'source_risk': risk(h, source),
        }
        nelbo_stats, risks = [], []
        for task, x in zip(ctx.seen, targets):
            stats = _mean_se(-objective_values(h, x, 1, seed))
            nelbo_stats.append(stats)
            risks.append(risk(h, x))
            record[f"target_nelbo_{task.name}"] = stats[0]
            record[f"target_risk_{task.name}"] = risks[-1]
        t = len(ctx.seen)
        record['target_nelbo_avg'] = math.fsum(m for m, _ in nelbo_stats) / t
        record['target_nelbo_se'] = math.sqrt(sum(se ** 2 for _, se in nelbo_stats)) / t
        record['target_risk_avg'] = math.fsum(risks) / t
        record['kl_gap'], record['kl_gap_se'] = kl_gap_with_se(h, targets, source)

        hypotheses = HypothesisSet([('h', h), ('h_star', h_star)])
        for g, snap in enumerate(ctx.snapshots, start=1):
            hypotheses.register(f"snapshot_{g}", snap)
        record['disc_lower_bound'] = estimate_discrepancy(source, target_union, hypotheses)
        record['eps_proxy'] = risk(h_star, source) + risk(h_star, target_union)
        record['err_d_proxy'] = abs(record['target_risk_avg'] - record['source_risk'])
        record['err_a_proxy'] = record['disc_lower_bound'] + record['eps_proxy']
        self.records.append(record)
        logger.debug("bounds epoch %d: disc=%.5f kl_gap=%.5f", self._global_epoch,
                     record['disc_lower_bound'], record['kl_gap'])

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)

    def _log_operation(self, operation: str, params: Dict[str, Any]) -> None:
        """Registra uma operação no histórico."""
        self.history.append({
            'operation': operation,
            'timestamp': np.datetime64('now'),
            'params': params
        })


REQUIRED_BOUNDS_COLUMNS = ('epoch', 'task_t', 'source_nelbo', 'source_nelbo_se', 'source_risk',
                           'target_nelbo_avg', 'target_nelbo_se', 'target_risk_avg', 'kl_gap',
                           'disc_lower_bound', 'eps_proxy')


def bound_report(records: pd.DataFrame) -> pd.DataFrame:
    """
    Verificação por época da desigualdade: −ELBO médio nos alvos (LHS)
    contra −ELBO na fonte + |KL₁ − KL₂| + (discrepância + ε proxy) (RHS).

    Args:
        records: quadro produzido pelo BoundsTracker

    Returns:
        quadro com lhs, rhs, slack = rhs − lhs, slack_se e as colunas de risco
    """
    if records is None or records.empty:
        raise ContractError("bound_report() needs per-epoch bound records; the run has none")
    missing = [c for c in REQUIRED_BOUNDS_COLUMNS if c not in records.columns]
    if missing:
        raise ContractError(f"Bound records are missing columns {missing}")
    report = pd.DataFrame({
        'epoch': records['epoch'],
        'task_t': records['task_t'],
        'source_risk': records['source_risk'],
        'target_risk_avg': records['target_risk_avg'],
    })
    for column in records.columns:
        if column.startswith('target_risk_') and column != 'target_risk_avg':
            report[column] = records[column]
    report['kl_gap'] = records['kl_gap']
    report['disc_lower_bound'] = records['disc_lower_bound']
    report['eps_proxy'] = records['eps_proxy']
    report['err_a_proxy'] = records['disc_lower_bound'] + records['eps_proxy']
    report['err_d_proxy'] = (records['target_risk_avg'] - records['source_risk']).abs()
    report['lhs'] = records['target_nelbo_avg']
    report['rhs'] = records['source_nelbo'] + records['kl_gap'] + report['err_a_proxy']
    report['slack'] = report['rhs'] - report['lhs']
    report['slack_se'] = np.hypot(records['source_nelbo_se'], records['target_nelbo_se'])
    return report


def task_end_values(report: pd.DataFrame, column: str) -> pd.Series:
    """Valor de ``column`` na última época de cada tarefa."""
    return report.groupby('task_t')[column].last()


def forgetting_curves(metrics: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """
    Curvas de risco por tarefa e por época, em formato longo.

    Args:
        metrics: quadros de métricas por rótulo de modelo ('mixture' para o DEGM, 'single' para GR)

    Returns:
        colunas model, task_index, epoch, global_epoch, eval_task, risk
    """
    frames = []
    for label, frame in metrics.items():
        part = frame[['task_index', 'epoch', 'global_epoch', 'eval_task', 'risk']].copy()
        part.insert(0, 'model', label)
        frames.append(part)
    if not frames:
        return pd.DataFrame(columns=['model', 'task_index', 'epoch', 'global_epoch', 'eval_task', 'risk'])
    return pd.concat(frames, ignore_index=True)


def regenerate(model: Hypothesis, x: np.ndarray, rng: Rng) -> np.ndarray:
    """Passa amostras por um snapshot: codifica, sorteia z, decodifica e binariza."""
    vae = model.base if isinstance(model, HierVae) else model
    if not isinstance(vae, VaeComponent):
        raise ContractError(f"Cannot regenerate through {type(model).__name__}")
    mu, logvar = vae.encode(Tensor(x))
    out = vae.decode(nk.reparameterize(mu, logvar, rng)).data
    return rng.bernoulli(out) if vae.likelihood == 'bernoulli' else np.clip(out, 0.0, 1.0)


def accumulated_error_proxy(snapshots: Sequence[Hypothesis], stream: TaskStream, final_model: Hypothesis,
                            rng: Rng, sample_size: int = DEFAULT_SAMPLE_SIZE) -> pd.DataFrame:
    """
    Cadeia de gerações de replay por tarefa, avaliada no modelo final.

    A geração 0 da tarefa i são os seus dados reais de treino; a geração k
    passa a geração k−1 pelo snapshot do fim da tarefa i+k−1. A tarefa i de
    um fluxo com t tarefas tem cadeia de comprimento t − i.

    Args:
        snapshots: um snapshot por tarefa, na ordem do fluxo
        stream: fluxo de tarefas
        final_model: modelo ao fim da execução
        rng: gerador dos sorteios
        sample_size: máximo de amostras por tarefa

    Returns:
        colunas task, task_index, generation, chain_length, risk, delta (proxy)
    """
    t = len(stream)
    if len(snapshots) < t:
        raise ContractError(f"Missing generation snapshots: {len(snapshots)} for {t} tasks")
    rows = []
    for i, task in enumerate(stream, start=1):
        x = _cap(task.train.data, sample_size)
        previous = None
        for generation in range(0, t - i + 1):
            if generation:
                x = regenerate(snapshots[i + generation - 2], x, rng.fork('chain', task.name, generation))
            value = risk(final_model, x)
            rows.append({'task': task.name, 'task_index': i, 'generation': generation,
                         'chain_length': t - i, 'risk': value,
                         'delta': 0.0 if previous is None else value - previous})
            previous = value
    return pd.DataFrame(rows)
