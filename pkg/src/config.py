"""
Configuração de experimentos: leitura e validação (com caminho da chave nos
erros), padrões dos hiperparâmetros, serialização canônica e hash.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import yaml

from .core.errors import ConfigError
from .core.policies import POLICIES
from .layers.bounds import BoundsConfig
from .layers.data import SYNTHETIC_KINDS, TaskSpec
from .layers.lifelong import TrainConfig

logger = logging.getLogger(__name__)

MODES = ('degm', 'gr', 'gr-hier', 'bounds', 'order-study', 'ablation')
HASH_LENGTH = 12
DESK_EPOCHS = 30
DESK_TRAIN = 2000
DESK_TEST = 500
DESK_SAMPLES = 1000


@dataclass
class EvalConfig:
    """Protocolo de avaliação: K' da NLL, semente fixa e sorteios da seleção."""

    kprime: int = 1
    eval_seed: int = 0
    k_select: int = 1

    def __post_init__(self):
        for key in ('kprime', 'k_select'):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, key)}", f'eval.{key}')


@dataclass
class ExperimentConfig:
    mode: str
    tasks: List[TaskSpec]
    train: TrainConfig = field(default_factory=TrainConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablations: List[str] = field(default_factory=list)
    orders: List[List[str]] = field(default_factory=list)
    taus: List[float] = field(default_factory=list)
    output_dir: str = 'runs'
    desk_scale: bool = False

    @property
    def seed(self) -> int:
        return self.train.seed


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", f"{path}.{key}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from exc


def _check_number(value: Any, path: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)


def _parse_task(data: Any, index: int) -> TaskSpec:
    path = f"tasks[{index}]"
    spec = _build(TaskSpec, data, path)
    if spec.source not in ('synthetic', 'idx'):
        raise ConfigError(f"unknown source '{spec.source}'", f"{path}.source")
    if spec.source == 'synthetic' and spec.kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind '{spec.kind}', expected one of {SYNTHETIC_KINDS}",
                          f"{path}.kind")
    if spec.source == 'idx' and not spec.train_images:
        raise ConfigError("IDX tasks need train_images", f"{path}.train_images")
    for key in ('dim', 'n_train', 'n_test'):
        value = getattr(spec, key)
        _check_number(value, f"{path}.{key}")
        if value < 1:
            raise ConfigError(f"must be positive, got {value}", f"{path}.{key}")
    spec.transforms = list(spec.transforms)
    return spec


def _load_text(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    logger.warning("configuration text is not JSON; parsing it as YAML")
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed configuration text: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """
    Lê e valida um texto de configuração (JSON; YAML também é aceito).

    Padrões: 500 épocas, lote 64, lr 1e-4, sonda de 1000 amostras, K'=1.

    Args:
        text: conteúdo do arquivo de configuração

    Returns:
        ExperimentConfig validado

    Raises:
        ConfigError: chave desconhecida ou valor fora da faixa, com o caminho da chave
    """
    data = _load_text(text)
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", key)
    mode = data.get('mode')
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}", 'mode')
    raw_tasks = data.get('tasks')
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ConfigError("at least one task is required", 'tasks')

    train = _build(TrainConfig, data.get('train', {}), 'train')
    for key in ('lr', 'tau', 'sigma', 'replay_scale'):
        _check_number(getattr(train, key), f"train.{key}")
    cfg = ExperimentConfig(
        mode=mode,
        tasks=[_parse_task(t, i) for i, t in enumerate(raw_tasks)],
        train=train,
        bounds=_build(BoundsConfig, data.get('bounds', {}), 'bounds'),
        eval=_build(EvalConfig, data.get('eval', {}), 'eval'),
        ablations=list(data.get('ablations', [])),
        orders=[list(o) for o in data.get('orders', [])],
        taus=[float(t) for t in data.get('taus', [])],
        output_dir=str(data.get('output_dir', 'runs')),
        desk_scale=bool(data.get('desk_scale', False)),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    """Verifica os campos exigidos por cada modo."""
    names = [t.name for t in cfg.tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"task names must be unique, got {names}", 'tasks')
    for i, name in enumerate(cfg.ablations):
        if name not in POLICIES:
            raise ConfigError(f"unknown ablation '{name}', expected one of {sorted(POLICIES)}", f"ablations[{i}]")
    if cfg.mode == 'ablation' and not cfg.ablations:
        raise ConfigError("ablation mode needs at least one ablation name", 'ablations')
    if cfg.mode == 'order-study' and not cfg.orders:
        raise ConfigError("order-study mode needs at least one order", 'orders')
    for i, tau in enumerate(cfg.taus):
        if tau <= 0:
            raise ConfigError(f"tau must be positive, got {tau}", f"taus[{i}]")


def to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return asdict(cfg)


def serialize_config(cfg: ExperimentConfig) -> str:
    """JSON canônico (chaves ordenadas); ``parse_config`` devolve o mesmo objeto."""
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 do JSON canônico sem diretório de saída nem barra de progresso, 12 dígitos hexadecimais."""
    data = to_dict(cfg)
    data.pop('output_dir', None)
    data['train'].pop('progress', None)
    text = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:HASH_LENGTH]


def load_config(path: str) -> ExperimentConfig:
    with open(path, 'r', encoding='utf-8') as fh:
        return parse_config(fh.read())


def apply_desk_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """
    Perfil de bancada: imagens IDX reduzidas a 14×14, conjuntos e épocas limitados.
    """
    tasks = []
    for spec in cfg.tasks:
        spec = dataclasses.replace(spec, transforms=list(spec.transforms), params=dict(spec.params))
        if spec.source == 'idx':
            if 'downsample' not in spec.transforms:
                spec.transforms.insert(0, 'downsample')
            spec.n_train = min(spec.n_train, DESK_TRAIN)
            spec.n_test = min(spec.n_test, DESK_TEST)
        tasks.append(spec)
    train = dataclasses.replace(cfg.train, epochs=min(cfg.train.epochs, DESK_EPOCHS),
                                probe_size=min(cfg.train.probe_size, DESK_SAMPLES))
    bounds = dataclasses.replace(cfg.bounds, sample_size=min(cfg.bounds.sample_size, DESK_SAMPLES))
    scaled = dataclasses.replace(cfg, tasks=tasks, train=train, bounds=bounds, desk_scale=True)
    logger.info("desk scale: epochs=%d, probe=%d", train.epochs, train.probe_size)
    return scaled
