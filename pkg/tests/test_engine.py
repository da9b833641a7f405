import json

import numpy as np
import pandas as pd
import pytest

from src.checkpoint import load_checkpoint, load_snapshots, save_checkpoint, save_snapshots
from src.cli import cmd_ablate, cmd_eval, cmd_export_v, main
from src.config import parse_config
from src.core.errors import CheckpointError, ContractError
from src.core.graph import GraphModel
from src.core.nnkit import Rng
from src.core.vae import HierVae, VaeComponent
from src.engine import ExperimentEngine, ablation_train_config
from src.layers.data import load_idx
from src.layers.lifelong import TrainConfig, run_degm


@pytest.fixture
def trained(tmp_path, tiny_config_text):
    engine = ExperimentEngine(parse_config(tiny_config_text()), out_dir=tmp_path)
    summary = engine.train()
    return engine, summary


def _all_bytes(model):
    params = model.parameters()
    return {k: params[k].data.tobytes() for k in params}


class TestCheckpoint:
    """Testes da persistência de modelos."""

    def test_graph_round_trip(self, tmp_path, tiny_cfg, three_task_stream):
        """Testa que o grafo recarregado tem os mesmos bytes, topologia e V."""
        graph = run_degm(three_task_stream, tiny_cfg, Rng(0)).model
        save_checkpoint(graph, tmp_path / 'ckpt')
        loaded = load_checkpoint(tmp_path / 'ckpt')
        assert isinstance(loaded, GraphModel)
        assert loaded.gi == graph.gi
        assert loaded.describe() == graph.describe()
        np.testing.assert_array_equal(loaded.adjacency(), graph.adjacency())
        for i in range(len(graph.nodes)):
            assert loaded.parameter_bytes(i) == graph.parameter_bytes(i)
            assert loaded.node_trainable(i) == {}

    def test_vae_and_hier_round_trip(self, tmp_path):
        """Testa o modelo único e o VAE hierárquico."""
        models = (VaeComponent(16, 2, 8, rng=Rng(0)), HierVae(16, (3, 2), 8, rng=Rng(1)),
                  HierVae(16, (2, 2), 8, rng=Rng(2), use_second_layer=False))
        for i, model in enumerate(models):
            save_checkpoint(model, tmp_path / f"m{i}")
            loaded = load_checkpoint(tmp_path / f"m{i}")
            assert type(loaded) is type(model)
            assert _all_bytes(loaded) == _all_bytes(model)

    def test_snapshots(self, tmp_path):
        """Testa um checkpoint por geração."""
        snaps = [VaeComponent(16, 2, 8, rng=Rng(g)).snapshot() for g in range(3)]
        save_snapshots(snaps, tmp_path / 'snapshots')
        loaded = load_snapshots(tmp_path / 'snapshots')
        assert [_all_bytes(s) for s in loaded] == [_all_bytes(s) for s in snaps]
        assert all(s.frozen for s in loaded)

    def test_missing_manifest(self, tmp_path):
        """Testa que um diretório vazio não é um checkpoint."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_truncated_array(self, tmp_path):
        """Testa que um array truncado é detectado."""
        save_checkpoint(VaeComponent(16, 2, 8, rng=Rng(0), name='v'), tmp_path)
        blob = tmp_path / 'v.enc_mu.weight.f8'
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_unknown_version(self, tmp_path):
        """Testa a rejeição de versões desconhecidas."""
        path = save_checkpoint(VaeComponent(16, 2, 8, rng=Rng(0)), tmp_path)
        manifest = json.loads(path.read_text())
        manifest['format_version'] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)


class TestExperimentEngine:
    """Testes da engine de experimentos."""

    def test_degm_artifacts(self, trained):
        """Testa os artefatos de uma execução DEGM."""
        engine, summary = trained
        run = engine.run_dir
        assert run.name == summary['config_hash'] == engine.config_hash
        for name in ('config.json', 'summary.json', 'metrics.csv', 'v_matrix.csv', 'checkpoint/manifest.json'):
            assert (run / name).is_file()
        metrics = pd.read_csv(run / 'metrics.csv')
        assert set(metrics['config_hash']) == {engine.config_hash}
        assert summary['num_nodes'] == 2

    def test_eval_table(self, trained):
        """Testa a tabela de avaliação com uma linha por tarefa."""
        engine, _ = trained
        table = cmd_eval(str(engine.run_dir))
        assert table['task'].tolist() == ['top', 'bottom']
        assert (engine.run_dir / 'eval_metrics.csv').is_file()
        summary = json.loads((engine.run_dir / 'summary.json').read_text())
        assert summary['eval']['kprime'] == 1

    def test_eval_is_deterministic(self, trained):
        """Testa que avaliar duas vezes dá a mesma tabela."""
        engine, _ = trained
        first = cmd_eval(str(engine.run_dir), kprime=3)
        second = cmd_eval(str(engine.run_dir), kprime=3)
        assert first.equals(second)

    def test_export_v(self, trained):
        """Testa a exportação da matriz V."""
        engine, _ = trained
        path = cmd_export_v(str(engine.run_dir), str(engine.run_dir / 'v.csv'))
        frame = pd.read_csv(path)
        assert frame['task_id'].tolist() == [1, 2]
        assert 'C1' in frame.columns

    def test_export_v_needs_graph(self, tmp_path, tiny_config_text):
        """Testa que a exportação de V exige um checkpoint DEGM."""
        engine = ExperimentEngine(parse_config(tiny_config_text('gr')), out_dir=tmp_path)
        engine.train()
        with pytest.raises(ContractError):
            engine.export_v()

    def test_bounds_diagnose(self, tmp_path, tiny_config_text):
        """Testa o modo de limites e o diagnóstico."""
        engine = ExperimentEngine(parse_config(tiny_config_text('bounds')), out_dir=tmp_path)
        summary = engine.train()
        assert summary['bound_epochs'] == 4
        outputs = engine.diagnose()
        assert set(outputs) == {'forgetting_curves', 'bounds_report', 'accumulated_error'}
        report = pd.read_csv(outputs['bounds_report'])
        assert {'lhs', 'rhs', 'slack', 'slack_se', 'config_hash'} <= set(report.columns)
        chain = pd.read_csv(outputs['accumulated_error'])
        assert chain['chain_length'].max() == 1

    def test_gr_hier_eval(self, tmp_path, tiny_config_text):
        """Testa treino e avaliação da linha de base hierárquica."""
        engine = ExperimentEngine(parse_config(tiny_config_text('gr-hier')), out_dir=tmp_path)
        engine.train()
        assert isinstance(engine.load_model(), HierVae)
        assert len(engine.evaluate(kprime=5)) == 2

    def test_order_study(self, tmp_path, tiny_config_text):
        """Testa o estudo de ordem das tarefas."""
        cfg = parse_config(tiny_config_text('order-study', orders=[['top', 'bottom'], ['bottom', 'top']]))
        engine = ExperimentEngine(cfg, out_dir=tmp_path)
        summary = engine.train()
        assert summary['orders'] == 2
        assert len(pd.read_csv(engine.run_dir / 'order_study.csv')) == 4

    def test_ablation_with_tau_sweep(self, tmp_path, tiny_config_text):
        """Testa a comparação de variantes e a varredura de τ."""
        cfg = parse_config(tiny_config_text('degm', ablations=['degm', 'degm-2'], taus=[1e-9, 1e9]))
        summary = cmd_ablate(cfg, str(tmp_path))
        run = tmp_path / summary['config_hash']
        table = pd.read_csv(run / 'ablation.csv')
        assert table['ablation'].tolist() == ['degm', 'degm-2']
        assert table.loc[1, 'num_basic'] == 2
        sweep = pd.read_csv(run / 'tau_sweep.csv')
        assert sweep['num_basic'].tolist() == [2, 1]

    def test_degm1_specific_epochs(self):
        """Testa que DEGM-1 limita as épocas dos nós específicos."""
        assert ablation_train_config('degm-1', TrainConfig()).specific_epochs == 5
        assert ablation_train_config('degm', TrainConfig()).specific_epochs is None

    def test_save_state(self, trained, tmp_path):
        """Testa a gravação do estado da engine."""
        engine, _ = trained
        engine.save_state(tmp_path / 'state.json')
        state = json.loads((tmp_path / 'state.json').read_text())
        assert state['config_hash'] == engine.config_hash
        assert 'degm' in state['runners']


class TestCli:
    """Testes da linha de comando."""

    def test_gen_synthetic(self, tmp_path, capsys):
        """Testa a gravação de uma tarefa sintética em IDX."""
        code = main(['gen-synthetic', '--kind', 'bars', '--n', '5', '--dim', '16', '--seed', '1',
                     '--out', str(tmp_path)])
        assert code == 0
        path = tmp_path / 'bars-5x16-seed1-images.idx'
        assert str(path) in capsys.readouterr().out
        d = load_idx(path)
        assert d.n == 5 and d.dim == 16

    def test_train_then_eval(self, tmp_path, tiny_config_text, capsys):
        """Testa train e eval pela linha de comando."""
        config = tmp_path / 'cfg.json'
        config.write_text(tiny_config_text(), encoding='utf-8')
        assert main(['train', '--config', str(config), '--out', str(tmp_path / 'runs')]) == 0
        run_hash = capsys.readouterr().out.strip().splitlines()[-1]
        assert (tmp_path / 'runs' / run_hash / 'summary.json').is_file()
        assert main(['eval', '--config', str(config), '--out', str(tmp_path / 'runs')]) == 0
        assert 'top' in capsys.readouterr().out

    def test_invalid_config_exit_code(self, tmp_path):
        """Testa que uma configuração inválida devolve código 1."""
        config = tmp_path / 'bad.json'
        config.write_text(json.dumps({'mode': 'degm', 'tasks': []}), encoding='utf-8')
        assert main(['train', '--config', str(config), '--out', str(tmp_path)]) == 1

    def test_missing_run(self, tmp_path):
        """Testa que avaliar uma execução inexistente devolve código 1."""
        assert main(['eval', '--run', str(tmp_path / 'nothing')]) == 1
