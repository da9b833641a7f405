"""
Experiment Engine: executa cada família de experimentos a partir de um
ExperimentConfig e grava os artefatos em runs/<config-hash>/.
"""

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, load_snapshots, save_checkpoint, save_snapshots
from .config import ExperimentConfig, EvalConfig, config_hash, parse_config, serialize_config
from .core.errors import CheckpointError, ContractError
from .core.graph import GraphModel
from .core.nnkit import Rng
from .core.policies import get_policy
from .core.vae import HierVae
from .layers.bounds import BoundsTracker, accumulated_error_proxy, forgetting_curves, bound_report
from .layers.data import TaskStream, TaskStreamBuilder
from .layers.lifelong import (RunResult, TrainConfig, final_risks, order_experiment, run_degm,
                              run_gr_hier, run_gr_single)
from .layers.select_eval import evaluate_stream

logger = logging.getLogger(__name__)

DEGM1_SPECIFIC_EPOCHS = 5
CONFIG_FILE = 'config.json'
SUMMARY_FILE = 'summary.json'


def ablation_train_config(name: str, train: TrainConfig) -> TrainConfig:
    """DEGM-1 treina os nós específicos por poucas épocas (5, se não configurado)."""
    if name == 'degm-1' and train.specific_epochs is None:
        return dataclasses.replace(train, specific_epochs=DEGM1_SPECIFIC_EPOCHS)
    return train


def _graph_row(graph: GraphModel) -> Dict[str, Any]:
    return {'num_basic': graph.num_basics, 'num_specific': len(graph.specifics),
            'parameters': graph.num_parameters()['total']}


def run_ablation(stream: TaskStream, train: TrainConfig, ablations: Sequence[str],
                 eval_cfg: Optional[EvalConfig] = None) -> pd.DataFrame:
    """
    Executa cada variante trocando a política de arestas e compara a perda
    quadrática por tarefa lado a lado.

    Args:
        stream: fluxo de tarefas
        train: configuração de treino base
        ablations: nomes das variantes ('degm', 'degm-1', 'degm-2', 'degm-4', …)
        eval_cfg: protocolo de avaliação

    Returns:
        uma linha por variante: contagens de nós, sl por tarefa, sl_mean e nll_mean
    """
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for name in ablations:
        policy = get_policy(name)
        cfg = ablation_train_config(name, train)
        result = run_degm(stream, cfg, Rng(cfg.seed), policy, run_id=name)
        table = evaluate_stream(result.model, stream, eval_cfg.kprime, eval_cfg.eval_seed, eval_cfg.k_select)
        row: Dict[str, Any] = {'ablation': name, **_graph_row(result.model)}
        row.update({f"sl_{task}": sl for task, sl in zip(table['task'], table['sl'])})
        row['sl_mean'] = math.fsum(table['sl']) / len(table)
        row['nll_mean'] = math.fsum(table['nll']) / len(table)
        rows.append(row)
        logger.info("ablation %s: sl_mean=%.4f basics=%d", name, row['sl_mean'], row['num_basic'])
    return pd.DataFrame(rows)


def tau_sweep(stream: TaskStream, train: TrainConfig, taus: Sequence[float],
              eval_cfg: Optional[EvalConfig] = None) -> pd.DataFrame:
    """Número de nós básicos e perda quadrática média em função de τ."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for tau in taus:
        cfg = dataclasses.replace(train, tau=float(tau))
        result = run_degm(stream, cfg, Rng(cfg.seed), run_id=f"tau{tau}")
        table = evaluate_stream(result.model, stream, eval_cfg.kprime, eval_cfg.eval_seed, eval_cfg.k_select)
        rows.append({'tau': float(tau), **_graph_row(result.model),
                     'sl_mean': math.fsum(table['sl']) / len(table)})
    return pd.DataFrame(rows)


class ExperimentEngine:
    """
    Orquestra um experimento: constrói o fluxo de tarefas, despacha para o
    runner do modo configurado e grava tabelas, checkpoint e resumo.

    Args:
        config: configuração validada
        out_dir: raiz dos resultados (``config.output_dir`` por padrão)
        run_dir: diretório exato da execução (sobrepõe out_dir/<hash>)
    """

    def __init__(self, config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                 run_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.config_hash = config_hash(config)
        self.run_dir = Path(run_dir) if run_dir is not None else Path(out_dir or config.output_dir) / self.config_hash
        self.runners: Dict[str, Callable[[TaskStream], Dict[str, Any]]] = {}
        self.history: List[Dict[str, Any]] = []
        self._stream: Optional[TaskStream] = None
        for mode, runner in (('degm', self._run_degm), ('gr', self._run_gr), ('gr-hier', self._run_gr_hier),
                             ('bounds', self._run_bounds), ('order-study', self._run_order_study),
                             ('ablation', self._run_ablation)):
            self.register_runner(mode, runner)

    @classmethod
    def from_run_dir(cls, run_dir: Union[str, Path]) -> "ExperimentEngine":
        path = Path(run_dir) / CONFIG_FILE
        if not path.is_file():
            raise CheckpointError(f"No run configuration at {path}")
        return cls(parse_config(path.read_text(encoding='utf-8')), run_dir=run_dir)

    def register_runner(self, mode: str, runner: Callable[[TaskStream], Dict[str, Any]]) -> None:
        """
        Registra um runner para um modo.

        Args:
            mode: nome do modo
            runner: função (stream) → resumo
        """
        self.runners[mode] = runner
        self._log_operation('register_runner', {'mode': mode})

    @property
    def rng(self) -> Rng:
        return Rng(self.config.seed)

    def build_stream(self) -> TaskStream:
        if self._stream is None:
            builder = TaskStreamBuilder({'desk_scale': self.config.desk_scale})
            self._stream = builder.build(self.config.tasks, self.rng.fork('data'))
        return self._stream

    # Comandos

    def train(self) -> Dict[str, Any]:
        """Executa o modo configurado e devolve o resumo gravado em summary.json."""
        mode = self.config.mode
        if mode not in self.runners:
            raise ValueError(f"Runner {mode} not found")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / CONFIG_FILE).write_text(serialize_config(self.config), encoding='utf-8')
        stream = self.build_stream()
        logger.info("run %s: mode=%s tasks=%s", self.config_hash, mode, stream.names)
        summary = {'config_hash': self.config_hash, 'mode': mode, 'seed': self.config.seed,
                   'tasks': stream.names}
        summary.update(self.runners[mode](stream))
        self._write_summary(summary)
        self._log_operation('train', {'mode': mode, 'run_dir': str(self.run_dir)})
        return summary

    def load_model(self):
        return load_checkpoint(self.run_dir / 'checkpoint')

    def evaluate(self, kprime: Optional[int] = None, out_path: Optional[Union[str, Path]] = None) -> pd.DataFrame:
        """
        Avalia o checkpoint em cada tarefa de teste (seleção sem rótulo no grafo).

        Args:
            kprime: K' da NLL (``eval.kprime`` por padrão)
            out_path: CSV de saída (run_dir/eval_metrics.csv por padrão)

        Returns:
            tabela por tarefa
        """
        model = self.load_model()
        kprime = kprime or self.config.eval.kprime
        if isinstance(model, HierVae) and model.use_second_layer and kprime != 1:
            logger.warning("two-layer model evaluated with K'=1 instead of %d", kprime)
            kprime = 1
        ev = self.config.eval
        table = evaluate_stream(model, self.build_stream(), kprime, ev.eval_seed, ev.k_select)
        table.insert(1, 'kprime', kprime)
        self._write_table(table, Path(out_path) if out_path else self.run_dir / 'eval_metrics.csv')
        summary = self._read_summary()
        summary['eval'] = {'kprime': kprime,
                           **{f"{c}_mean": float(table[c].mean()) for c in ('nll', 'sl', 'psnr', 'ssim')}}
        self._write_summary(summary)
        self._log_operation('evaluate', {'kprime': kprime})
        return table

    def diagnose(self) -> Dict[str, Path]:
        """
        Gera bounds_report.csv, forgetting_curves.csv e accumulated_error.csv
        a partir dos artefatos da execução.
        """
        outputs: Dict[str, Path] = {}
        metrics_path = self.run_dir / 'metrics.csv'
        if not metrics_path.is_file():
            raise CheckpointError(f"No metrics log at {metrics_path}")
        label = 'mixture' if self.config.mode == 'degm' else 'single'
        curves = forgetting_curves({label: pd.read_csv(metrics_path)})
        outputs['forgetting_curves'] = self._write_table(curves, self.run_dir / 'forgetting_curves.csv')

        records_path = self.run_dir / 'bounds_epochs.csv'
        if records_path.is_file():
            report = bound_report(pd.read_csv(records_path).drop(columns=['config_hash']))
            outputs['bounds_report'] = self._write_table(report, self.run_dir / 'bounds_report.csv')
        else:
            logger.warning("no per-epoch bound records in %s; bounds_report.csv skipped", self.run_dir)

        snapshots_dir = self.run_dir / 'checkpoint' / 'snapshots'
        if snapshots_dir.is_dir():
            chain = accumulated_error_proxy(load_snapshots(snapshots_dir), self.build_stream(), self.load_model(),
                                            self.rng.fork('diagnose'), self.config.bounds.sample_size)
            outputs['accumulated_error'] = self._write_table(chain, self.run_dir / 'accumulated_error.csv')
        self._log_operation('diagnose', {'outputs': sorted(outputs)})
        return outputs

    def export_v(self, path: Optional[Union[str, Path]] = None) -> Path:
        model = self.load_model()
        if not isinstance(model, GraphModel):
            raise ContractError("export-v needs a DEGM checkpoint")
        return self._write_table(model.v_frame(), Path(path) if path else self.run_dir / 'v_matrix.csv')

    # Runners

    def _single_artifacts(self, result: RunResult) -> Dict[str, Any]:
        save_checkpoint(result.model, self.run_dir / 'checkpoint')
        save_snapshots(result.snapshots, self.run_dir / 'checkpoint' / 'snapshots')
        self._write_table(result.metrics_frame(), self.run_dir / 'metrics.csv')
        risks = final_risks(result)
        return {'parameters': {'total': result.model.num_parameters()},
                'final_risk_mean': math.fsum(risks.values()) / len(risks),
                'final_risks': risks}

    def _run_degm(self, stream: TaskStream) -> Dict[str, Any]:
        name = self.config.ablations[0] if self.config.ablations else 'degm'
        train = ablation_train_config(name, self.config.train)
        result = run_degm(stream, train, self.rng, get_policy(name), run_id=self.config_hash)
        graph = result.model
        save_checkpoint(graph, self.run_dir / 'checkpoint')
        self._write_table(result.metrics_frame(), self.run_dir / 'metrics.csv')
        self._write_table(graph.v_frame(), self.run_dir / 'v_matrix.csv')
        risks = final_risks(result)
        return {'num_nodes': len(graph.nodes), 'num_basic': graph.num_basics,
                'num_specific': len(graph.specifics), 'parameters': graph.num_parameters(),
                'nodes': graph.describe(),
                'final_risk_mean': math.fsum(risks.values()) / len(risks), 'final_risks': risks}

    def _run_gr(self, stream: TaskStream) -> Dict[str, Any]:
        return self._single_artifacts(run_gr_single(stream, self.config.train, self.rng, self.config_hash))

    def _run_gr_hier(self, stream: TaskStream) -> Dict[str, Any]:
        return self._single_artifacts(run_gr_hier(stream, self.config.train, self.rng, self.config_hash))

    def _run_bounds(self, stream: TaskStream) -> Dict[str, Any]:
        tracker = BoundsTracker(self.config.bounds)
        result = run_gr_single(stream, self.config.train, self.rng, self.config_hash, callbacks=[tracker])
        summary = self._single_artifacts(result)
        self._write_table(tracker.frame(), self.run_dir / 'bounds_epochs.csv')
        summary['bound_epochs'] = len(tracker.records)
        return summary

    def _run_order_study(self, stream: TaskStream) -> Dict[str, Any]:
        policy = get_policy(self.config.ablations[0]) if self.config.ablations else None
        report = order_experiment(stream, self.config.orders, self.config.train, policy)
        self._write_table(report, self.run_dir / 'order_study.csv')
        return {'orders': len(self.config.orders),
                'accumulated_risk': {f"{r['order']}|{r['model']}": r['accumulated_risk']
                                     for r in report.to_dict('records')}}

    def _run_ablation(self, stream: TaskStream) -> Dict[str, Any]:
        table = run_ablation(stream, self.config.train, self.config.ablations, self.config.eval)
        self._write_table(table, self.run_dir / 'ablation.csv')
        summary: Dict[str, Any] = {'ablations': dict(zip(table['ablation'], table['sl_mean']))}
        if self.config.taus:
            sweep = tau_sweep(stream, self.config.train, self.config.taus, self.config.eval)
            self._write_table(sweep, self.run_dir / 'tau_sweep.csv')
            summary['tau_sweep'] = dict(zip(map(str, sweep['tau']), sweep['num_basic'].astype(int).tolist()))
        return summary

    # Persistência

    def _write_table(self, frame: pd.DataFrame, path: Path) -> Path:
        frame = frame.copy()
        frame['config_hash'] = self.config_hash
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    def _read_summary(self) -> Dict[str, Any]:
        path = self.run_dir / SUMMARY_FILE
        return json.loads(path.read_text(encoding='utf-8')) if path.is_file() else {'config_hash': self.config_hash}

    def _write_summary(self, summary: Dict[str, Any]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True, default=str),
                                                 encoding='utf-8')

    def save_state(self, filepath: Union[str, Path]) -> None:
        """
        Salva a configuração e o histórico da engine.

        Args:
            filepath: caminho do arquivo de estado
        """
        state_data = {'config': json.loads(serialize_config(self.config)), 'config_hash': self.config_hash,
                      'runners': sorted(self.runners), 'history': self.history}
        with open(filepath, 'w') as f:
            json.dump(state_data, f, indent=2, default=str)
        self._log_operation('save_state', {'filepath': str(filepath)})

    def _log_operation(self, operation: str, params: Dict[str, Any]) -> None:
        """Registra uma operação no histórico."""
        self.history.append({
            'operation': operation,
            'timestamp': np.datetime64('now'),
            'params': params
        })
