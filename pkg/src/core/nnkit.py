"""
nnkit: núcleo numérico mínimo para redes densas.

Tensores float64 sobre numpy, uma fita (tape) de gradientes reversa,
camadas afins, Adam, gerador de números aleatórios com semente e as
primitivas de verossimilhança/KL usadas por todos os outros módulos.
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _logsumexp
from scipy.special import softmax as _softmax

from .errors import ContractError, DimensionError, TrainingError

logger = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
PROB_EPS = 1e-6
LEAKY_SLOPE = 0.01
LOG_2PI = float(np.log(2.0 * np.pi))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_ACTIVE_TAPES: List["Tape"] = []


class Tensor:
    """
    Tensor: forma + buffer float64 em ordem row-major.

    Args:
        data: valores (qualquer coisa aceita por ``np.asarray``)
        requires_grad: se o tensor participa da fita de gradientes
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, exp(neg_log(other)))
        return mul(self, 1.0 / float(other))

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Folha treinável com nome único; ``freeze`` a remove da fita."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, frozen={self.frozen})"


VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Fita de gradientes reconstruída a cada minibatch.

    Uso::

        with Tape() as tape:
            loss = ...
        grads = tape.backprop(loss)
    """

    def __init__(self):
        self._records: List[Tuple[Tensor, Tuple[Tensor, ...], VJP]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        if self.consumed:
            raise ContractError("Cannot record on a consumed tape")
        self._records.append((out, inputs, vjp))

    def backprop(self, loss: Tensor) -> Dict[str, np.ndarray]:
        return backprop(self, loss)


def backprop(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Propaga o gradiente de uma perda escalar pela fita.

    Args:
        tape: fita gravada durante o forward
        loss: tensor escalar presente na fita

    Returns:
        dLoss/dParam para cada parâmetro gravado, indexado pelo nome
    """
    if tape.consumed:
        raise ContractError("Tape already consumed")
    if loss.size != 1:
        raise ContractError(f"Loss must be scalar, got shape {loss.shape}")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Parameter] = {}

    for out, inputs, vjp in reversed(tape._records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        for tensor, grad in zip(inputs, vjp(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            adjoints[key] = adjoints[key] + grad if key in adjoints else grad
            if isinstance(tensor, Parameter):
                leaves[key] = tensor

    tape._records.clear()
    tape.consumed = True
    return {p.name: adjoints[key] for key, p in leaves.items()}


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(out, inputs, vjp)
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"Incompatible shapes {a.shape} and {b.shape}") from exc


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Operações elementares

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log() of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def neg_log(a: Tensor) -> Tensor:
    return mul(log(a), -1.0)


def square(a: Tensor) -> Tensor:
    return _make(a.data ** 2, (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    mask = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    'identity': identity,
    'leaky_relu': leaky_relu,
    'tanh': tanh,
    'sigmoid': sigmoid,
}


# Reduções e reorganizações

def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _make(a.data.sum(axis=axis), (a,), vjp)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"Cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repete o bloco de linhas ``reps`` vezes: [a; a; ...; a]."""
    n = a.shape[0]

    def vjp(g):
        return (g.reshape((reps, n) + a.shape[1:]).sum(axis=0),)
    return _make(np.tile(a.data, (reps,) + (1,) * (a.data.ndim - 1)), (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack() needs equal shapes, got {sorted(shapes)}")

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def weighted_sum(tensors: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Combinação Σ w_i t_i com pesos constantes (sem gradiente nos pesos)."""
    if len(tensors) != len(weights) or not tensors:
        raise DimensionError("weighted_sum() needs one weight per tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"weighted_sum() needs equal shapes, got {sorted(shapes)}")
    w = [float(x) for x in weights]
    out = np.zeros(tensors[0].shape)
    for wi, t in zip(w, tensors):
        out = out + wi * t.data
    return _make(out, tuple(tensors), lambda g: tuple(wi * g for wi in w))


def logsumexp(a: Tensor, axis: int = 1) -> Tensor:
    out = _logsumexp(a.data, axis=axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * _softmax(a.data, axis=axis),)
    return _make(out, (a,), vjp)


def log_mean_exp(a: Tensor, axis: int = 1) -> Tensor:
    """log (1/K) Σ_k exp(a_k), estabilizado por log-sum-exp."""
    return sub(logsumexp(a, axis), float(np.log(a.shape[axis])))


# Camadas

def affine_forward(layer: "DenseLayer", x: Tensor) -> Tensor:
    """
    Calcula y = act(x·Wᵀ + b) gravando na fita ativa.

    Args:
        layer: camada densa
        x: entrada [batch × in]

    Returns:
        saída [batch × out]
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"{layer.name}: expected input width {layer.in_dim}, got shape {x.shape}"
        )
    w, b = layer.weight, layer.bias
    pre = _make(x.data @ w.data.T + b.data, (x, w, b),
                lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))
    return ACTIVATIONS[layer.activation](pre)


class DenseLayer:
    """
    Camada totalmente conectada com ativação.

    Args:
        in_dim: largura de entrada
        out_dim: largura de saída
        activation: 'identity', 'leaky_relu', 'tanh' ou 'sigmoid'
        rng: gerador para a inicialização uniforme em ±1/√fan_in
        name: prefixo dos nomes dos parâmetros
        zero_init: pesos nulos (sem consumir o gerador)
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = 'identity',
                 rng: Optional["Rng"] = None, name: str = 'dense', zero_init: bool = False):
        if activation not in ACTIVATIONS:
            raise ContractError(f"Unknown activation: {activation}")
        if in_dim <= 0 or out_dim <= 0:
            raise DimensionError(f"{name}: layer sizes must be positive, got {in_dim}x{out_dim}")
        if zero_init:
            weight = np.zeros((out_dim, in_dim))
        else:
            if rng is None:
                raise ContractError(f"{name}: a seeded Rng is required for random init")
            bound = 1.0 / np.sqrt(in_dim)
            weight = rng.uniform(-bound, bound, (out_dim, in_dim))
        self.name = name
        self.activation = activation
        self.weight = Parameter(weight, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return affine_forward(self, x)

    def parameters(self) -> Dict[str, Parameter]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def freeze(self) -> None:
        self.weight.freeze()
        self.bias.freeze()

    def copy(self, name: Optional[str] = None) -> "DenseLayer":
        """Cópia profunda com outro prefixo de nomes."""
        clone = DenseLayer(self.in_dim, self.out_dim, self.activation,
                           name=name or self.name, zero_init=True)
        clone.weight.data[...] = self.weight.data
        clone.bias.data[...] = self.bias.data
        return clone

    def __repr__(self) -> str:
        return f"DenseLayer({self.name}: {self.in_dim}->{self.out_dim}, {self.activation})"


# Aleatoriedade

class Rng:
    """
    Gerador com semente; mesma semente + mesma sequência de chamadas
    produz o mesmo fluxo.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.calls = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        self.calls += 1
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape: Tuple[int, ...]) -> np.ndarray:
        self.calls += 1
        return self._gen.uniform(low, high, shape)

    def bernoulli(self, probs: np.ndarray) -> np.ndarray:
        self.calls += 1
        return (self._gen.random(np.shape(probs)) < probs).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.calls += 1
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size: Optional[int] = None):
        self.calls += 1
        return self._gen.integers(low, high, size=size)

    def fork(self, *keys: Union[int, str]) -> "Rng":
        """Deriva um gerador filho determinístico a partir da semente e das chaves."""
        words = [self.seed & 0xFFFFFFFF]
        for key in keys:
            words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key) & 0xFFFFFFFF)
        child = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0]
        return Rng(int(child))


# Otimização

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, Parameter],
              grads: Dict[str, np.ndarray]) -> AdamState:
    """
    Atualização Adam com correção de viés, aplicada in-place.

    Args:
        state: estado do otimizador
        params: parâmetros indexados pelo nome
        grads: gradientes devolvidos por ``backprop``

    Returns:
        o mesmo estado, com ``step`` incrementado
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"Gradient for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} != {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError("Non-finite gradient", param_name=name)

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        m = state.m.get(name, np.zeros_like(grad))
        v = state.v.get(name, np.zeros_like(grad))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad ** 2
        state.m[name], state.v[name] = m, v
        params[name].data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# Primitivas probabilísticas

def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def reparameterize(mu: Tensor, logvar: Tensor, rng: Optional[Rng] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """z = mu + exp(½·logvar) ⊙ ε, com ε ~ N(0, I) sorteado ou fornecido."""
    _require_same_shape(mu, logvar, 'reparameterize')
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize() needs an Rng or an explicit eps")
        eps = rng.normal(mu.shape)
    elif np.shape(eps) != mu.shape:
        raise DimensionError(f"reparameterize: eps shape {np.shape(eps)} != {mu.shape}")
    std = exp(mul(clip(logvar, LOGVAR_MIN, LOGVAR_MAX), 0.5))
    return add(mu, mul(std, eps))


def kl_diag_gaussian_to_standard(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) por amostra: ½ Σ_d (e^lv + mu² − 1 − lv)."""
    _require_same_shape(mu, logvar, 'kl')
    lv = clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    terms = sub(add(exp(lv), square(mu)), add(lv, 1.0))
    return mul(reduce_sum(terms, axis=1), 0.5)


def kl_diag_gaussians(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)) por amostra, ambas diagonais."""
    _require_same_shape(mu_q, mu_p, 'kl')
    lq = clip(logvar_q, LOGVAR_MIN, LOGVAR_MAX)
    lp = clip(logvar_p, LOGVAR_MIN, LOGVAR_MAX)
    ratio = mul(add(exp(lq), square(sub(mu_q, mu_p))), exp(mul(lp, -1.0)))
    terms = sub(add(sub(lp, lq), ratio), 1.0)
    return mul(reduce_sum(terms, axis=1), 0.5)


def gaussian_log_likelihood(x: ArrayLike, mu: Tensor, sigma: float) -> Tensor:
    """log N(x; mu, σ²I) por amostra, com σ fixo."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    x = as_tensor(x)
    _require_same_shape(x, mu, 'gaussian_log_likelihood')
    d = x.shape[1]
    sq = reduce_sum(square(sub(x, mu)), axis=1)
    return sub(mul(sq, -1.0 / (2.0 * sigma ** 2)), 0.5 * d * np.log(2.0 * np.pi * sigma ** 2))


def bernoulli_log_likelihood(x: ArrayLike, probs: Tensor) -> Tensor:
    """Σ_d x·log p + (1−x)·log(1−p) por amostra, com p limitado a [1e-6, 1−1e-6]."""
    x = as_tensor(x)
    _require_same_shape(x, probs, 'bernoulli_log_likelihood')
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise ContractError("Bernoulli targets must lie in [0, 1]")
    p = clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = add(mul(x, log(p)), mul(sub(1.0, x), log(sub(1.0, p))))
    return reduce_sum(ll, axis=1)


def standard_normal_log_density(z: Tensor) -> Tensor:
    latent = z.shape[1]
    return sub(mul(reduce_sum(square(z), axis=1), -0.5), 0.5 * latent * LOG_2PI)


def diag_gaussian_log_density(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    _require_same_shape(z, mu, 'diag_gaussian_log_density')
    lv = clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    scaled = mul(square(sub(z, mu)), exp(mul(lv, -1.0)))
    latent = z.shape[1]
    return sub(mul(reduce_sum(add(scaled, lv), axis=1), -0.5), 0.5 * latent * LOG_2PI)


def finite_difference_grad(fn: Callable[[], float], param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Gradiente por diferenças centrais de ``fn`` em relação a ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = fn()
        flat[i] = original - h
        down = fn()
        flat[i] = original
        grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def keyed_normal(rows: np.ndarray, width: int, seed: int, draws: int = 1) -> np.ndarray:
    """
    Ruído N(0, 1) [draws × n × width] determinado pela semente e pelo conteúdo
    de cada linha, de modo que a avaliação não depende da ordem das amostras.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    out = np.empty((draws, rows.shape[0], width))
    for i, row in enumerate(rows):
        gen = np.random.Generator(np.random.PCG64([int(seed) & 0xFFFFFFFF, zlib.crc32(row.tobytes())]))
        out[:, i, :] = gen.standard_normal((draws, width))
    return out
