import dataclasses
import json
import logging

import pytest

from src.config import (apply_desk_scale, config_hash, load_config, parse_config, serialize_config,
                        validate_config)
from src.core.errors import ConfigError


class TestParseConfig:
    """Testes da leitura da configuração."""

    def test_defaults(self):
        """Testa os padrões de uma configuração mínima."""
        cfg = parse_config(json.dumps({'mode': 'degm', 'tasks': [{'name': 'a', 'kind': 'bars'}]}))
        assert cfg.train.epochs == 500
        assert cfg.train.batch_size == 64
        assert cfg.train.lr == 1e-4
        assert cfg.train.probe_size == 1000
        assert cfg.eval.kprime == 1
        assert cfg.bounds.sample_size == 10000
        assert cfg.output_dir == 'runs'

    def test_negative_tau(self, tiny_config_text):
        """Testa que τ = −1 é rejeitado com o caminho da chave."""
        data = json.loads(tiny_config_text())
        data['train']['tau'] = -1
        with pytest.raises(ConfigError) as exc:
            parse_config(json.dumps(data))
        assert exc.value.key_path == 'train.tau'

    def test_unknown_key(self, tiny_config_text):
        """Testa que chaves desconhecidas são apontadas."""
        data = json.loads(tiny_config_text())
        data['train']['epoch'] = 3
        with pytest.raises(ConfigError) as exc:
            parse_config(json.dumps(data))
        assert exc.value.key_path == 'train.epoch'

    def test_unknown_mode(self, tiny_config_text):
        """Testa a rejeição de modos desconhecidos."""
        with pytest.raises(ConfigError) as exc:
            parse_config(tiny_config_text('replay'))
        assert exc.value.key_path == 'mode'

    def test_missing_tasks(self):
        """Testa que ao menos uma tarefa é exigida."""
        with pytest.raises(ConfigError):
            parse_config(json.dumps({'mode': 'degm', 'tasks': []}))

    def test_unknown_synthetic_kind(self):
        """Testa a rejeição de geradores desconhecidos."""
        with pytest.raises(ConfigError) as exc:
            parse_config(json.dumps({'mode': 'gr', 'tasks': [{'name': 'a', 'kind': 'noise'}]}))
        assert exc.value.key_path == 'tasks[0].kind'

    def test_duplicate_task_names(self):
        """Testa que nomes de tarefas precisam ser únicos."""
        text = json.dumps({'mode': 'gr', 'tasks': [{'name': 'a', 'kind': 'bars'}, {'name': 'a', 'kind': 'bars'}]})
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_ablation_mode_needs_names(self, tiny_config_text):
        """Testa que o modo de ablação exige variantes válidas."""
        with pytest.raises(ConfigError):
            parse_config(tiny_config_text('ablation'))
        with pytest.raises(ConfigError) as exc:
            parse_config(tiny_config_text('ablation', ablations=['degm-9']))
        assert exc.value.key_path == 'ablations[0]'

    def test_order_study_needs_orders(self, tiny_config_text):
        """Testa que o estudo de ordem exige ao menos uma ordem."""
        with pytest.raises(ConfigError):
            parse_config(tiny_config_text('order-study'))

    def test_yaml_text(self):
        """Testa que texto YAML também é aceito."""
        cfg = parse_config("mode: gr\ntasks:\n  - name: a\n    kind: bars\n")
        assert cfg.mode == 'gr'
        assert cfg.tasks[0].kind == 'bars'

    def test_yaml_fallback_logs_warning(self, caplog):
        """Testa que a leitura como YAML é avisada no log e que JSON não gera aviso."""
        with caplog.at_level(logging.WARNING, logger='src.config'):
            parse_config(json.dumps({'mode': 'gr', 'tasks': [{'name': 'a', 'kind': 'bars'}]}))
            assert not any('YAML' in r.getMessage() for r in caplog.records)
            parse_config("mode: gr\ntasks:\n  - name: a\n    kind: bars\n")
        assert any('YAML' in r.getMessage() for r in caplog.records)

    def test_malformed_text(self):
        """Testa a rejeição de texto que não é um mapeamento."""
        with pytest.raises(ConfigError):
            parse_config('[1, 2, 3]')

    def test_load_from_file(self, tmp_path, tiny_config_text):
        """Testa a leitura a partir de um arquivo."""
        path = tmp_path / 'cfg.json'
        path.write_text(tiny_config_text('gr'), encoding='utf-8')
        assert load_config(str(path)).mode == 'gr'


class TestSerialization:
    """Testes da serialização canônica e do hash."""

    def test_round_trip(self, tiny_config_text):
        """Testa que serializar e ler devolve a mesma configuração."""
        cfg = parse_config(tiny_config_text())
        assert parse_config(serialize_config(cfg)) == cfg

    def test_hash_is_stable(self, tiny_config_text):
        """Testa que o hash tem 12 dígitos e depende só do conteúdo."""
        first = config_hash(parse_config(tiny_config_text()))
        assert len(first) == 12
        assert first == config_hash(parse_config(tiny_config_text()))

    def test_hash_changes_with_training_values(self, tiny_config_text):
        """Testa que mudar um hiperparâmetro muda o hash."""
        cfg = parse_config(tiny_config_text())
        other = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=1))
        assert config_hash(cfg) != config_hash(other)

    def test_hash_ignores_output_dir_and_progress(self, tiny_config_text):
        """Testa que diretório de saída e barra de progresso não entram no hash."""
        cfg = parse_config(tiny_config_text())
        other = dataclasses.replace(cfg, output_dir='elsewhere',
                                    train=dataclasses.replace(cfg.train, progress=True))
        assert config_hash(cfg) == config_hash(other)


class TestDeskScale:
    """Testes do perfil de bancada."""

    def test_caps(self, tiny_config_text):
        """Testa os limites de épocas, sonda e amostras."""
        data = json.loads(tiny_config_text())
        data['train'].update({'epochs': 500, 'probe_size': 5000})
        data['bounds'] = {'sample_size': 10000}
        cfg = apply_desk_scale(parse_config(json.dumps(data)))
        assert cfg.desk_scale
        assert cfg.train.epochs == 30
        assert cfg.train.probe_size == 1000
        assert cfg.bounds.sample_size == 1000
        validate_config(cfg)

    def test_idx_tasks_are_downsampled(self):
        """Testa que tarefas IDX ganham a redução para 14×14."""
        text = json.dumps({'mode': 'degm', 'tasks': [{'name': 'm', 'source': 'idx', 'train_images': 'x.idx',
                                                      'n_train': 60000, 'n_test': 10000}]})
        cfg = parse_config(text)
        scaled = apply_desk_scale(cfg)
        assert scaled.tasks[0].transforms == ['downsample']
        assert (scaled.tasks[0].n_train, scaled.tasks[0].n_test) == (2000, 500)
        assert cfg.tasks[0].transforms == []
