"""
Componente VAE com encoder/decoder divididos em sub-módulos inferior e superior.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import nnkit as nk
from .errors import ContractError, DimensionError
from .nnkit import DenseLayer, Parameter, Rng, Tensor

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 200
DEFAULT_SIGMA = 1.0 / np.sqrt(2.0)
LIKELIHOODS = ('bernoulli', 'gaussian')


class VaeComponent:
    """
    VAE completo: ω = enc_lower∘enc_upper, θ = dec_lower∘dec_upper.

    Args:
        input_dim: dimensão da entrada achatada
        latent_dim: dimensão L do espaço latente
        hidden_dim: unidades das camadas ocultas (200 por padrão)
        likelihood: 'bernoulli' ou 'gaussian'
        sigma: desvio fixo do decoder gaussiano
        rng: gerador para inicializar os pesos
        name: prefixo dos parâmetros
        zero_init: todos os pesos nulos
    """

    def __init__(self, input_dim: int, latent_dim: int, hidden_dim: int = DEFAULT_HIDDEN,
                 likelihood: str = 'bernoulli', sigma: float = DEFAULT_SIGMA,
                 rng: Optional[Rng] = None, name: str = 'vae', zero_init: bool = False):
        if latent_dim <= 0:
            raise DimensionError(f"latent_dim must be positive, got {latent_dim}")
        self._set_likelihood(likelihood, sigma)
        self.name = name
        out_act = 'sigmoid' if likelihood == 'bernoulli' else 'identity'
        self.enc_lower = DenseLayer(input_dim, hidden_dim, 'leaky_relu', rng, f"{name}.enc_lower", zero_init)
        self.enc_mu = DenseLayer(hidden_dim, latent_dim, 'identity', rng, f"{name}.enc_mu", zero_init)
        self.enc_logvar = DenseLayer(hidden_dim, latent_dim, 'identity', rng, f"{name}.enc_logvar", zero_init)
        self.dec_lower = DenseLayer(latent_dim, hidden_dim, 'leaky_relu', rng, f"{name}.dec_lower", zero_init)
        self.dec_upper = DenseLayer(hidden_dim, input_dim, out_act, rng, f"{name}.dec_upper", zero_init)

    @classmethod
    def from_layers(cls, enc_lower: DenseLayer, enc_mu: DenseLayer, enc_logvar: DenseLayer,
                    dec_lower: DenseLayer, dec_upper: DenseLayer, likelihood: str = 'bernoulli',
                    sigma: float = DEFAULT_SIGMA, name: str = 'vae') -> "VaeComponent":
        """Monta um componente a partir de sub-módulos existentes (sem cópia)."""
        if not (enc_lower.out_dim == enc_mu.in_dim == enc_logvar.in_dim
                and enc_mu.out_dim == enc_logvar.out_dim == dec_lower.in_dim
                and dec_lower.out_dim == dec_upper.in_dim
                and dec_upper.out_dim == enc_lower.in_dim):
            raise DimensionError("Sub-module shapes do not chain")
        component = cls.__new__(cls)
        component._set_likelihood(likelihood, sigma)
        component.name = name
        component.enc_lower, component.enc_mu, component.enc_logvar = enc_lower, enc_mu, enc_logvar
        component.dec_lower, component.dec_upper = dec_lower, dec_upper
        return component

    def _set_likelihood(self, likelihood: str, sigma: float) -> None:
        if likelihood not in LIKELIHOODS:
            raise ContractError(f"Unknown likelihood: {likelihood}")
        if sigma <= 0:
            raise ContractError(f"sigma must be positive, got {sigma}")
        self.likelihood = likelihood
        self.sigma = float(sigma)

    @property
    def input_dim(self) -> int:
        return self.enc_lower.in_dim

    @property
    def latent_dim(self) -> int:
        return self.enc_mu.out_dim

    @property
    def hidden_dim(self) -> int:
        return self.enc_lower.out_dim

    def layers(self) -> Dict[str, DenseLayer]:
        return {
            'enc_lower': self.enc_lower,
            'enc_mu': self.enc_mu,
            'enc_logvar': self.enc_logvar,
            'dec_lower': self.dec_lower,
            'dec_upper': self.dec_upper,
        }

    def parameters(self) -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for layer in self.layers().values():
            params.update(layer.parameters())
        return params

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if not p.frozen}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def freeze(self) -> None:
        for layer in self.layers().values():
            layer.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters().values())

    def snapshot(self) -> "VaeComponent":
        """Cópia profunda congelada, usada como gerador de replay e hipótese."""
        clone = copy.deepcopy(self)
        clone.freeze()
        return clone

    # Passos do modelo

    def encode_upper(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        mu = self.enc_mu(h)
        logvar = nk.clip(self.enc_logvar(h), nk.LOGVAR_MIN, nk.LOGVAR_MAX)
        return mu, logvar

    def encode(self, x) -> Tuple[Tensor, Tensor]:
        """
        Parâmetros gaussianos de q_ω(z|x).

        Args:
            x: lote [n × input_dim]

        Returns:
            (mu, logvar), ambos [n × latent_dim]
        """
        return self.encode_upper(self.enc_lower(x))

    def decode_lower(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"{self.name}: z width {z.shape[-1]} != latent_dim {self.latent_dim}")
        return self.dec_lower(z)

    def decode(self, z: Tensor) -> Tensor:
        """Probabilidades Bernoulli ou média gaussiana de p_θ(x|z)."""
        return self.dec_upper(self.decode_lower(z))

    def log_likelihood(self, x, out: Tensor) -> Tensor:
        if self.likelihood == 'bernoulli':
            return nk.bernoulli_log_likelihood(x, out)
        return nk.gaussian_log_likelihood(x, out, self.sigma)

    def elbo(self, x, rng: Optional[Rng] = None, eps: Optional[np.ndarray] = None) -> Tensor:
        """
        ELBO de uma amostra de Monte-Carlo: log p(x|z) − KL(q(z|x) || p(z)).

        Args:
            x: lote [n × input_dim]
            rng: gerador para ε
            eps: ruído explícito [n × latent_dim] (opcional)

        Returns:
            ELBO por amostra [n]
        """
        mu, logvar = self.encode(x)
        z = nk.reparameterize(mu, logvar, rng, eps)
        return nk.sub(self.log_likelihood(x, self.decode(z)), nk.kl_diag_gaussian_to_standard(mu, logvar))

    def log_weights(self, x, k: int, rng: Optional[Rng] = None,
                    eps: Optional[np.ndarray] = None) -> Tensor:
        """log w = log p(x, z) − log q(z|x) para k amostras, forma [k × n]; eps é [k × n × L]."""
        x = nk.as_tensor(x)
        n = x.shape[0]
        mu, logvar = self.encode(x)
        mu_k, lv_k = nk.tile_rows(mu, k), nk.tile_rows(logvar, k)
        flat_eps = None if eps is None else np.reshape(eps, (k * n, self.latent_dim))
        z = nk.reparameterize(mu_k, lv_k, rng, flat_eps)
        log_px = self.log_likelihood(Tensor(np.tile(x.data, (k, 1))), self.decode(z))
        log_w = nk.sub(nk.add(log_px, nk.standard_normal_log_density(z)),
                       nk.diag_gaussian_log_density(z, mu_k, lv_k))
        return nk.reshape(log_w, (k, n))

    def iwelbo(self, x, k: int, rng: Optional[Rng] = None,
               eps: Optional[np.ndarray] = None) -> Tensor:
        """
        ELBO ponderado por importância com k amostras; k=1 é o ELBO padrão.

        Returns:
            IWELBO por amostra [n]
        """
        if k < 1:
            raise ContractError(f"K' must be >= 1, got {k}")
        if k == 1:
            return self.elbo(x, rng, None if eps is None else eps[0])
        return nk.log_mean_exp(self.log_weights(x, k, rng, eps), axis=0)

    def objective(self, x, rng: Rng, k: int = 1) -> Tensor:
        return self.iwelbo(x, k, rng)

    def reconstruct(self, x) -> np.ndarray:
        """Reconstrução determinística pela média da posterior."""
        mu, _ = self.encode(x)
        return self.decode(mu).data

    def generate(self, n: int, rng: Rng) -> np.ndarray:
        """
        Amostras do prior decodificadas; no caso Bernoulli cada pixel é sorteado.

        Returns:
            matriz [n × input_dim] em [0, 1]
        """
        if n == 0:
            return np.empty((0, self.input_dim))
        out = self.decode(Tensor(rng.normal((n, self.latent_dim)))).data
        if self.likelihood == 'bernoulli':
            return rng.bernoulli(out)
        return np.clip(out, 0.0, 1.0)

    def __repr__(self) -> str:
        return (f"VaeComponent({self.name}: {self.input_dim}->{self.hidden_dim}->{self.latent_dim}, "
                f"{self.likelihood})")


@dataclass
class BasicNode:
    """Nó básico do grafo: VAE completo, congelado após a sua tarefa."""

    vae: VaeComponent
    task_id: int
    reference_elbo: Optional[float] = None

    @property
    def trained(self) -> bool:
        return self.reference_elbo is not None and bool(np.isfinite(self.reference_elbo))


class HierVae:
    """
    VAE com duas camadas estocásticas (linha de base ELBO-GR*).

    q(z1|x) q(z2|z1) como posterior e p(z2) p(z1|z2) como prior. Com
    ``use_second_layer=False`` o modelo é exatamente o componente base.

    Args:
        input_dim: dimensão da entrada
        latent_dims: (L1, L2), 100 e 50 por padrão
        hidden_dim: largura das camadas ocultas
        likelihood: 'bernoulli' ou 'gaussian'
        sigma: desvio fixo do decoder gaussiano
        rng: gerador de inicialização
        name: prefixo dos parâmetros
        use_second_layer: liga a segunda camada estocástica
        zero_init: todos os pesos nulos
    """

    def __init__(self, input_dim: int, latent_dims: Tuple[int, int] = (100, 50),
                 hidden_dim: int = DEFAULT_HIDDEN, likelihood: str = 'bernoulli',
                 sigma: float = DEFAULT_SIGMA, rng: Optional[Rng] = None, name: str = 'hier',
                 use_second_layer: bool = True, zero_init: bool = False):
        l1, l2 = latent_dims
        self.name = name
        self.base = VaeComponent(input_dim, l1, hidden_dim, likelihood, sigma, rng, f"{name}.base", zero_init)
        self.use_second_layer = use_second_layer
        self.second: Dict[str, DenseLayer] = {}
        if use_second_layer:
            if l2 <= 0:
                raise DimensionError(f"second latent dim must be positive, got {l2}")
            self.second = {
                'enc2_lower': DenseLayer(l1, hidden_dim, 'leaky_relu', rng, f"{name}.enc2_lower", zero_init),
                'enc2_mu': DenseLayer(hidden_dim, l2, 'identity', rng, f"{name}.enc2_mu", zero_init),
                'enc2_logvar': DenseLayer(hidden_dim, l2, 'identity', rng, f"{name}.enc2_logvar", zero_init),
                'prior_lower': DenseLayer(l2, hidden_dim, 'leaky_relu', rng, f"{name}.prior_lower", zero_init),
                'prior_mu': DenseLayer(hidden_dim, l1, 'identity', rng, f"{name}.prior_mu", zero_init),
                'prior_logvar': DenseLayer(hidden_dim, l1, 'identity', rng, f"{name}.prior_logvar", zero_init),
            }

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    @property
    def likelihood(self) -> str:
        return self.base.likelihood

    def layers(self) -> Dict[str, DenseLayer]:
        layers = {f"base.{k}": v for k, v in self.base.layers().items()}
        layers.update(self.second)
        return layers

    def parameters(self) -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for layer in self.layers().values():
            params.update(layer.parameters())
        return params

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if not p.frozen}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def freeze(self) -> None:
        for layer in self.layers().values():
            layer.freeze()

    def snapshot(self) -> "HierVae":
        clone = copy.deepcopy(self)
        clone.freeze()
        return clone

    def encode(self, x) -> Tuple[Tensor, Tensor]:
        return self.base.encode(x)

    def _second_posterior(self, z1: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.second['enc2_lower'](z1)
        logvar = nk.clip(self.second['enc2_logvar'](h), nk.LOGVAR_MIN, nk.LOGVAR_MAX)
        return self.second['enc2_mu'](h), logvar

    def _conditional_prior(self, z2: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.second['prior_lower'](z2)
        logvar = nk.clip(self.second['prior_logvar'](h), nk.LOGVAR_MIN, nk.LOGVAR_MAX)
        return self.second['prior_mu'](h), logvar

    def hier_elbo(self, x, rng: Optional[Rng] = None,
                  eps: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
        """
        ELBO de duas camadas por amostra.

        log p(x|z1) + log p(z1|z2) − log q(z1|x) − KL(q(z2|z1) || p(z2)), com
        z1, z2 sorteados da posterior fatorada. ``eps`` fixa o ruído das duas
        camadas como ([n × L1], [n × L2]).
        """
        if not self.use_second_layer:
            return self.base.elbo(x, rng, None if eps is None else eps[0])
        eps1, eps2 = (None, None) if eps is None else eps
        mu1, lv1 = self.base.encode(x)
        z1 = nk.reparameterize(mu1, lv1, rng, eps1)
        mu2, lv2 = self._second_posterior(z1)
        z2 = nk.reparameterize(mu2, lv2, rng, eps2)
        pmu, plv = self._conditional_prior(z2)
        log_px = self.base.log_likelihood(x, self.base.decode(z1))
        z1_term = nk.sub(nk.diag_gaussian_log_density(z1, pmu, plv), nk.diag_gaussian_log_density(z1, mu1, lv1))
        return nk.sub(nk.add(log_px, z1_term), nk.kl_diag_gaussian_to_standard(mu2, lv2))

    def objective(self, x, rng: Rng, k: int = 1) -> Tensor:
        if k != 1:
            raise ContractError("HierVae trains with the single-sample ELBO only")
        return self.hier_elbo(x, rng)

    def elbo(self, x, rng: Optional[Rng] = None,
             eps: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
        return self.hier_elbo(x, rng, eps)

    def reconstruct(self, x) -> np.ndarray:
        return self.base.reconstruct(x)

    def generate(self, n: int, rng: Rng) -> np.ndarray:
        if not self.use_second_layer:
            return self.base.generate(n, rng)
        if n == 0:
            return np.empty((0, self.input_dim))
        l2 = self.second['enc2_mu'].out_dim
        pmu, plv = self._conditional_prior(Tensor(rng.normal((n, l2))))
        z1 = nk.reparameterize(pmu, plv, rng)
        out = self.base.decode(z1).data
        if self.base.likelihood == 'bernoulli':
            return rng.bernoulli(out)
        return np.clip(out, 0.0, 1.0)
