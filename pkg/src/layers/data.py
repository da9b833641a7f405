"""
Camada de dados: leitura de arquivos IDX, transformações de pixels,
fluxos Split por rótulos e geradores sintéticos de tarefas.
"""

import gzip
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.errors import ConfigError, ContractError, FormatError
from ..core.nnkit import Rng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLIT_MNIST_GROUPS = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
SYNTHETIC_KINDS = ('half-active-top', 'half-active-bottom', 'bars', 'stripes', 'gauss-blob')
RANGE_TOL = 1e-12


@dataclass
class Dataset:
    """Amostras achatadas em [0, 1] com rótulos opcionais."""

    data: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = ''
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ContractError(f"Dataset '{self.name}' must be a non-empty [n x dim] matrix")
        if self.data.min() < -RANGE_TOL or self.data.max() > 1.0 + RANGE_TOL:
            raise ContractError(f"Dataset '{self.name}' has values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64)
            if self.labels.shape[0] != self.data.shape[0]:
                raise ContractError(f"Dataset '{self.name}': {self.labels.shape[0]} labels "
                                    f"for {self.data.shape[0]} samples")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def subset(self, index: np.ndarray, name: Optional[str] = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.data[index], labels, name or self.name, self.image_shape)

    def sample(self, n: int, rng: Rng) -> "Dataset":
        """Subconjunto aleatório sem reposição (ou o conjunto inteiro se n ≥ |d|)."""
        if n >= self.n:
            return self
        return self.subset(np.sort(rng.choice(self.n, n, replace=False)))


@dataclass
class Task:
    name: str
    train: Dataset
    test: Dataset

    @property
    def input_dim(self) -> int:
        return self.train.dim


@dataclass
class TaskStream:
    """Sequência ordenada de tarefas com a mesma dimensão de entrada."""

    tasks: List[Task]

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("Task stream is empty", 'tasks')
        dims = {t.train.dim for t in self.tasks} | {t.test.dim for t in self.tasks}
        if len(dims) != 1:
            raise ConfigError(f"Tasks disagree on input_dim: {sorted(dims)}", 'tasks')

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim

    @property
    def names(self) -> List[str]:
        return [t.name for t in self.tasks]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def reordered(self, names: Sequence[str]) -> "TaskStream":
        if sorted(names) != sorted(self.names):
            raise ConfigError(f"Order {list(names)} is not a permutation of {self.names}", 'orders')
        by_name = {t.name: t for t in self.tasks}
        return TaskStream([by_name[n] for n in names])


@dataclass
class TaskSpec:
    """
    Descrição declarativa de uma tarefa (ou de um fluxo Split, via ``groups``).
    """

    name: str
    source: str = 'synthetic'
    kind: Optional[str] = None
    dim: int = 64
    n_train: int = 1000
    n_test: int = 200
    params: Dict[str, Any] = field(default_factory=dict)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    labels: Optional[List[int]] = None
    groups: Optional[List[List[int]]] = None
    transforms: List[str] = field(default_factory=list)


# Formato IDX

def _open_bytes(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b'\x1f\x8b':
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """
    Decodifica um buffer IDX de bytes sem sinal (big-endian).

    Returns:
        array uint8 com as dimensões do cabeçalho
    """
    if len(raw) < 4:
        raise FormatError("Truncated IDX header", offset=len(raw))
    magic = struct.unpack('>I', raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"Bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("Truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(f'>{ndim}I', raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"Truncated IDX payload: expected {count} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(path: Union[str, Path]) -> np.ndarray:
    return parse_idx(_open_bytes(path))


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ContractError(f"IDX payload must be uint8, got {array.dtype}")
    if array.ndim not in (1, 3):
        raise ContractError(f"IDX arrays must be 1-D labels or 3-D images, got {array.ndim}-D")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    return struct.pack(f'>I{array.ndim}I', magic, *array.shape) + array.tobytes()


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def load_idx(path: Union[str, Path], labels_path: Optional[Union[str, Path]] = None,
             name: str = '') -> Dataset:
    """
    Carrega imagens IDX (0x00000803) como Dataset com pixels em [0, 1].

    Args:
        path: arquivo de imagens (opcionalmente gzip)
        labels_path: arquivo de rótulos (0x00000801)
        name: nome do conjunto

    Returns:
        Dataset [n × linhas·colunas]
    """
    images = read_idx(path)
    if images.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D image file, got {images.ndim}-D", offset=0)
    labels = load_idx_labels(labels_path) if labels_path is not None else None
    n, rows, cols = images.shape
    data = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    logger.info("loaded %d images %dx%d from %s", n, rows, cols, path)
    return Dataset(data, labels, name or Path(path).stem, (rows, cols))


def load_idx_labels(path: Union[str, Path]) -> np.ndarray:
    labels = read_idx(path)
    if labels.ndim != 1:
        raise FormatError(f"{path}: expected a 1-D label file, got {labels.ndim}-D", offset=0)
    return labels.astype(np.int64)


def to_idx_images(d: Dataset) -> np.ndarray:
    """Converte um Dataset quadrado de volta para uint8 [n × lado × lado]."""
    rows, cols = d.image_shape or _square_shape(d.dim)
    return np.rint(d.data * 255.0).astype(np.uint8).reshape(d.n, rows, cols)


# Fluxos Split

def split_by_labels(d: Dataset, groups: Sequence[Sequence[int]], test: Optional[Dataset] = None,
                    test_fraction: float = 0.2) -> TaskStream:
    """
    Uma tarefa por grupo de rótulos.

    Sem conjunto de teste, a última fração de cada grupo é reservada para teste.

    Args:
        d: conjunto de treino rotulado
        groups: grupos disjuntos de rótulos
        test: conjunto de teste rotulado (opcional)
        test_fraction: fração reservada quando ``test`` é None

    Returns:
        TaskStream com uma tarefa por grupo
    """
    if d.labels is None or (test is not None and test.labels is None):
        raise ConfigError("split_by_labels() needs labelled datasets", 'groups')
    seen: set = set()
    for g, group in enumerate(groups):
        if not group:
            raise ConfigError("Empty label group", f'groups[{g}]')
        overlap = seen.intersection(group)
        if overlap:
            raise ConfigError(f"Label(s) {sorted(overlap)} appear in more than one group", f'groups[{g}]')
        seen.update(group)

    tasks = []
    for group in groups:
        tag = '-'.join(str(label) for label in group)
        index = np.flatnonzero(np.isin(d.labels, list(group)))
        if index.size == 0:
            raise ConfigError(f"No samples with labels {list(group)}", 'groups')
        if test is None:
            if index.size < 2:
                raise ConfigError(f"Label group {list(group)} needs at least 2 samples to split", 'groups')
            cut = min(max(1, int(round(index.size * (1.0 - test_fraction)))), index.size - 1)
            train_part = d.subset(index[:cut], f"{d.name}-{tag}")
            test_part = d.subset(index[cut:])
        else:
            train_part = d.subset(index, f"{d.name}-{tag}")
            test_index = np.flatnonzero(np.isin(test.labels, list(group)))
            test_part = test.subset(test_index, f"{test.name}-{tag}")
        tasks.append(Task(f"{d.name}-{tag}" if d.name else tag, train_part, test_part))
    return TaskStream(tasks)


# Transformações

def _square_shape(dim: int) -> Tuple[int, int]:
    side = int(round(np.sqrt(dim)))
    if side * side != dim:
        raise ContractError(f"dim {dim} is not a square image")
    return side, side


def _parse_transform(t: str) -> Tuple[str, Optional[float]]:
    match = re.fullmatch(r'\s*([a-z0-9\-]+)\s*(?:\(\s*([0-9.eE+\-]+)\s*\))?\s*', t)
    if not match:
        raise ContractError(f"Malformed transform '{t}'")
    name, arg = match.groups()
    return name, None if arg is None else float(arg)


def transform(d: Dataset, t: str, rng: Optional[Rng] = None) -> Dataset:
    """
    Aplica uma transformação de pixels.

    Args:
        d: conjunto de entrada
        t: 'none', 'invert', 'rotate90', 'binarize(p)', 'stochastic-binarize' ou 'downsample'
        rng: gerador (só para binarização estocástica)

    Returns:
        novo Dataset em [0, 1]
    """
    name, arg = _parse_transform(t)
    if name == 'none':
        return d
    if name == 'invert':
        return Dataset(1.0 - d.data, d.labels, d.name, d.image_shape)
    if name == 'binarize':
        threshold = 0.5 if arg is None else arg
        return Dataset((d.data >= threshold).astype(np.float64), d.labels, d.name, d.image_shape)
    if name == 'stochastic-binarize':
        if rng is None:
            raise ContractError("stochastic-binarize needs an Rng")
        return Dataset(rng.bernoulli(d.data), d.labels, d.name, d.image_shape)
    rows, cols = d.image_shape or _square_shape(d.dim)
    images = d.data.reshape(d.n, rows, cols)
    if name == 'rotate90':
        if rows != cols:
            raise ContractError(f"rotate90 needs square images, got {rows}x{cols}")
        rotated = np.rot90(images, k=1, axes=(1, 2))
        return Dataset(rotated.reshape(d.n, -1), d.labels, d.name, (rows, cols))
    if name == 'downsample':
        if rows % 2 or cols % 2:
            raise ContractError(f"downsample needs even image sides, got {rows}x{cols}")
        pooled = images.reshape(d.n, rows // 2, 2, cols // 2, 2).mean(axis=(2, 4))
        return Dataset(pooled.reshape(d.n, -1), d.labels, d.name, (rows // 2, cols // 2))
    raise ContractError(f"Unknown transform '{t}'")


# Tarefas sintéticas

def synthetic_task(kind: str, n: int, dim: int, rng: Rng, **params) -> Dataset:
    """
    Gera uma tarefa sintética de imagens quadradas.

    - half-active-top / half-active-bottom: pixels Bernoulli(0.5) só na metade superior/inferior
    - bars: barras verticais completas, só nas colunas da metade esquerda
    - stripes: faixas horizontais, só nas colunas da metade direita
    - gauss-blob: mancha gaussiana contínua em torno de ``center`` (linha, coluna)

    Args:
        kind: tipo do gerador
        n: número de amostras
        dim: dimensão (lado² com lado par)
        rng: gerador com semente
        params: parâmetros do tipo (center, width, p)

    Returns:
        Dataset com ``n`` amostras
    """
    if kind not in SYNTHETIC_KINDS:
        raise ContractError(f"Unknown synthetic kind '{kind}', expected one of {SYNTHETIC_KINDS}")
    side, _ = _square_shape(dim)
    if side % 2:
        raise ContractError(f"Synthetic tasks need an even image side, got {side}")
    half = side // 2
    p = float(params.get('p', 0.5))
    images = np.zeros((n, side, side))

    if kind in ('half-active-top', 'half-active-bottom'):
        rows = slice(0, half) if kind == 'half-active-top' else slice(half, side)
        images[:, rows, :] = rng.bernoulli(np.full((n, half, side), p))
    elif kind == 'bars':
        on = rng.bernoulli(np.full((n, half), p))
        empty = on.sum(axis=1) == 0
        on[empty, rng.integers(0, half, size=int(empty.sum()))] = 1.0
        images[:, :, :half] = on[:, None, :]
    elif kind == 'stripes':
        on = rng.bernoulli(np.full((n, side), p))
        empty = on.sum(axis=1) == 0
        on[empty, rng.integers(0, side, size=int(empty.sum()))] = 1.0
        images[:, :, half:] = on[:, :, None]
    else:
        center = np.asarray(params.get('center', [(side - 1) / 2.0] * 2), dtype=np.float64)
        width = float(params.get('width', side / 6.0))
        jitter = rng.uniform(-0.5, 0.5, (n, 2))
        scale = width * rng.uniform(0.8, 1.2, (n, 1, 1))
        r, c = np.meshgrid(np.arange(side), np.arange(side), indexing='ij')
        dr = r[None] - (center[0] + jitter[:, 0])[:, None, None]
        dc = c[None] - (center[1] + jitter[:, 1])[:, None, None]
        images = np.exp(-(dr ** 2 + dc ** 2) / (2.0 * scale ** 2))

    return Dataset(images.reshape(n, dim), None, kind, (side, side))


class TaskStreamBuilder:
    """
    Constrói o fluxo de tarefas a partir das especificações: captura
    (IDX ou gerador sintético) e pré-processamento (transformações).

    Args:
        config: configurações opcionais (``desk_scale``)
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}
        self.history: List[Dict[str, Any]] = []

    def capture(self, spec: TaskSpec, rng: Rng) -> Tuple[Dataset, Dataset]:
        """Lê ou gera os conjuntos brutos de treino e teste de uma especificação."""
        if spec.source == 'synthetic':
            if spec.kind is None:
                raise ConfigError("Synthetic task needs a 'kind'", f'tasks.{spec.name}.kind')
            train = synthetic_task(spec.kind, spec.n_train, spec.dim, rng.fork(spec.name, 'train'), **spec.params)
            test = synthetic_task(spec.kind, spec.n_test, spec.dim, rng.fork(spec.name, 'test'), **spec.params)
        elif spec.source == 'idx':
            if spec.train_images is None:
                raise ConfigError("IDX task needs 'train_images'", f'tasks.{spec.name}.train_images')
            train = load_idx(spec.train_images, spec.train_labels, spec.name)
            if spec.test_images is not None:
                test = load_idx(spec.test_images, spec.test_labels, f"{spec.name}-test")
            else:
                cut = int(round(train.n * 0.8))
                train, test = train.subset(np.arange(cut)), train.subset(np.arange(cut, train.n))
        else:
            raise ConfigError(f"Unknown task source '{spec.source}'", f'tasks.{spec.name}.source')
        self._log_operation('capture', {'task': spec.name, 'source': spec.source,
                                        'n_train': train.n, 'n_test': test.n})
        return train, test

    def preprocess(self, d: Dataset, transforms: Sequence[str], rng: Rng) -> Dataset:
        for t in transforms:
            d = transform(d, t, rng)
        return d

    def _finish(self, name: str, train: Dataset, test: Dataset, spec: TaskSpec, rng: Rng) -> Task:
        if spec.source == 'idx':
            train = train.sample(spec.n_train, rng.fork(name, 'cap-train'))
            test = test.sample(spec.n_test, rng.fork(name, 'cap-test'))
        train = self.preprocess(train, spec.transforms, rng.fork(name, 'train-t'))
        test = self.preprocess(test, spec.transforms, rng.fork(name, 'test-t'))
        return Task(name, Dataset(train.data, train.labels, name, train.image_shape),
                    Dataset(test.data, test.labels, f"{name}-test", test.image_shape))

    def build(self, specs: Sequence[TaskSpec], rng: Rng) -> TaskStream:
        """
        Constrói o TaskStream completo.

        Args:
            specs: especificações na ordem das tarefas
            rng: gerador raiz (cada tarefa usa um filho derivado do nome)

        Returns:
            fluxo de tarefas
        """
        tasks: List[Task] = []
        for spec in specs:
            train, test = self.capture(spec, rng)
            if spec.labels is not None:
                if train.labels is None or test.labels is None:
                    raise ConfigError(f"Task '{spec.name}' filters by labels but has no labels file",
                                      f'tasks.{spec.name}.labels')
                keep = list(spec.labels)
                train = train.subset(np.flatnonzero(np.isin(train.labels, keep)))
                test = test.subset(np.flatnonzero(np.isin(test.labels, keep)))
            if spec.groups:
                for task in split_by_labels(train, spec.groups, test):
                    tasks.append(self._finish(task.name, task.train, task.test, spec, rng))
            else:
                tasks.append(self._finish(spec.name, train, test, spec, rng))
        stream = TaskStream(tasks)
        self._log_operation('build', {'tasks': stream.names, 'input_dim': stream.input_dim})
        logger.info("task stream: %s (dim=%d)", stream.names, stream.input_dim)
        return stream

    def _log_operation(self, operation: str, params: Dict[str, Any]) -> None:
        """Registra uma operação no histórico."""
        self.history.append({
            'operation': operation,
            'timestamp': np.datetime64('now'),
            'params': params
        })
