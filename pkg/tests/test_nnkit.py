import numpy as np
import pytest

from src.core import nnkit as nk
from src.core.errors import ContractError, DimensionError, TrainingError
from src.core.graph import GraphModel
from src.core.nnkit import AdamState, DenseLayer, Parameter, Rng, Tape, Tensor
from src.core.vae import HierVae, VaeComponent

_X = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0]])


def _bce_loss(layer, x):
    return nk.mul(nk.reduce_mean(nk.bernoulli_log_likelihood(x, layer(Tensor(x)))), -1.0)


def _assert_gradients_match(objective, params):
    def loss_value():
        return float(-objective().data.mean())

    with Tape() as tape:
        loss = nk.mul(nk.reduce_mean(objective()), -1.0)
    grads = tape.backprop(loss)
    for name, param in params.items():
        np.testing.assert_allclose(grads[name], nk.finite_difference_grad(loss_value, param),
                                   rtol=1e-4, atol=1e-7, err_msg=name)
    return grads


def _two_source_graph():
    graph = GraphModel(tau=5.0, config={'hidden_dim': 3})
    for t in (1, 2):
        graph.add_basic_node(4, 2, t, Rng(t))
        graph.freeze_node(t - 1)
    index = graph.add_specific_node(np.array([0.6, 0.4]), 3, Rng(3))
    return graph, index


class TestTape:
    """Testes da fita de gradientes."""

    def test_dense_gradient_matches_finite_differences(self):
        """Testa o gradiente de uma camada sigmoide contra diferenças centrais."""
        layer = DenseLayer(4, 4, 'sigmoid', Rng(0), name='dense')
        x = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 0.0]])
        with Tape() as tape:
            loss = _bce_loss(layer, x)
        grads = tape.backprop(loss)
        for param in (layer.weight, layer.bias):
            fd = nk.finite_difference_grad(lambda: _bce_loss(layer, x).item(), param)
            np.testing.assert_allclose(grads[param.name], fd, rtol=1e-4, atol=1e-7)

    def test_elbo_gradient_with_fixed_noise(self):
        """Testa o gradiente do ELBO com ε fixo contra diferenças centrais."""
        vae = VaeComponent(4, 2, 3, rng=Rng(1), name='v')
        x = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0]])
        eps = Rng(2).normal((2, 2))

        def loss_value():
            return float(-vae.elbo(x, eps=eps).data.mean())

        with Tape() as tape:
            loss = nk.mul(nk.reduce_mean(vae.elbo(x, eps=eps)), -1.0)
        grads = tape.backprop(loss)
        for name in ('v.enc_mu.weight', 'v.dec_upper.bias', 'v.enc_logvar.bias'):
            param = vae.parameters()[name]
            np.testing.assert_allclose(grads[name], nk.finite_difference_grad(loss_value, param),
                                       rtol=1e-4, atol=1e-7)

    def test_iwelbo_gradient_with_fixed_noise(self):
        """Testa o gradiente do IWELBO com K'=3 e ε fixo contra diferenças centrais."""
        vae = VaeComponent(4, 2, 3, rng=Rng(1), name='v')
        eps = Rng(2).normal((3, 2, 2))
        _assert_gradients_match(lambda: vae.iwelbo(_X, 3, eps=eps), vae.parameters())

    def test_melbo_gradient_skips_frozen_sources(self):
        """Testa o gradiente do MELBO e que as fontes congeladas ficam fora do resultado."""
        graph, index = _two_source_graph()
        node = graph.nodes[index]
        eps = Rng(4).normal((2, 2, 2))
        trainable = graph.node_trainable(index)
        grads = _assert_gradients_match(lambda: graph.melbo(node, _X, eps=eps), trainable)
        assert set(grads) == set(trainable)
        assert not any(name.startswith(('B1.', 'B2.')) for name in grads)

    def test_melbo_iw_gradient_with_fixed_noise(self):
        """Testa o gradiente do MELBO_K' com K'=3 e ε fixo contra diferenças centrais."""
        graph, index = _two_source_graph()
        node = graph.nodes[index]
        eps = Rng(5).normal((3, 2, 2))
        trainable = graph.node_trainable(index)
        grads = _assert_gradients_match(lambda: graph.melbo_iw(node, _X, 3, eps=eps), trainable)
        assert set(grads) == set(trainable)

    def test_hier_elbo_gradient_with_fixed_noise(self):
        """Testa o gradiente do ELBO de duas camadas com ε fixo nas duas camadas."""
        model = HierVae(4, (2, 2), 3, rng=Rng(6), name='h')
        eps = (Rng(7).normal((2, 2)), Rng(8).normal((2, 2)))
        grads = _assert_gradients_match(lambda: model.hier_elbo(_X, eps=eps), model.parameters())
        assert 'h.enc2_mu.weight' in grads and 'h.prior_logvar.bias' in grads

    def test_frozen_parameters_get_no_gradient(self):
        """Testa que parâmetros congelados ficam fora do resultado."""
        layer = DenseLayer(2, 2, 'identity', Rng(0), name='d')
        layer.weight.freeze()
        with Tape() as tape:
            loss = nk.reduce_sum(layer(Tensor(np.ones((1, 2)))))
        grads = tape.backprop(loss)
        assert 'd.weight' not in grads
        assert 'd.bias' in grads

    def test_consumed_tape_rejects_second_backprop(self):
        """Testa que a fita só pode ser propagada uma vez."""
        p = Parameter(np.ones(3), 'p')
        with Tape() as tape:
            loss = nk.reduce_sum(nk.square(p))
        tape.backprop(loss)
        with pytest.raises(ContractError):
            tape.backprop(loss)

    def test_non_scalar_loss(self):
        """Testa que a perda precisa ser escalar."""
        p = Parameter(np.ones(3), 'p')
        with Tape() as tape:
            out = nk.square(p)
        with pytest.raises(ContractError):
            tape.backprop(out)


class TestOps:
    """Testes das operações e primitivas."""

    def test_affine_example(self):
        """Testa y = x·Wᵀ + b num exemplo conhecido."""
        layer = DenseLayer(2, 2, 'identity', name='a', zero_init=True)
        layer.weight.data[...] = [[1.0, 2.0], [3.0, 4.0]]
        layer.bias.data[...] = [0.5, -0.5]
        out = layer(Tensor([[1.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[3.5, 6.5]])

    def test_affine_width_mismatch(self):
        """Testa o erro de dimensão da camada densa."""
        layer = DenseLayer(3, 2, 'identity', name='a', zero_init=True)
        with pytest.raises(DimensionError):
            layer(Tensor(np.ones((1, 2))))

    def test_random_init_needs_rng(self):
        """Testa que a inicialização aleatória exige um gerador."""
        with pytest.raises(ContractError):
            DenseLayer(2, 2)

    def test_kl_of_standard_normal_is_zero(self):
        """Testa KL(N(0, I) || N(0, I)) = 0."""
        kl = nk.kl_diag_gaussian_to_standard(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))))
        np.testing.assert_allclose(kl.data, 0.0)

    def test_kl_between_equal_gaussians(self):
        """Testa que a KL entre gaussianas iguais é nula."""
        mu, lv = Tensor(np.full((2, 3), 0.4)), Tensor(np.full((2, 3), -0.7))
        np.testing.assert_allclose(nk.kl_diag_gaussians(mu, lv, mu, lv).data, 0.0, atol=1e-12)

    def test_gaussian_likelihood_at_mean(self):
        """Testa log N(μ; μ, σ²I) = −½·d·log(2πσ²)."""
        x = np.full((1, 4), 0.3)
        ll = nk.gaussian_log_likelihood(x, Tensor(x), 0.5)
        assert ll.item() == pytest.approx(-2.0 * np.log(2.0 * np.pi * 0.25))

    def test_kl_of_unit_mean_shift(self):
        """Testa KL(N(1, 1) || N(0, 1)) = 0.5."""
        kl = nk.kl_diag_gaussian_to_standard(Tensor([[1.0]]), Tensor([[0.0]]))
        assert kl.item() == pytest.approx(0.5)

    def test_gaussian_likelihood_with_half_variance(self):
        """Testa log N(x; μ, ½) em d=1: −½·log π em x=μ e −1 − ½·log π em x−μ=1."""
        sigma = 1.0 / np.sqrt(2.0)
        at_mean = nk.gaussian_log_likelihood(np.array([[0.3]]), Tensor([[0.3]]), sigma)
        shifted = nk.gaussian_log_likelihood(np.array([[1.3]]), Tensor([[0.3]]), sigma)
        assert at_mean.item() == pytest.approx(-0.5 * np.log(np.pi))
        assert at_mean.item() == pytest.approx(-0.5724, abs=1e-4)
        assert shifted.item() == pytest.approx(-1.0 - 0.5 * np.log(np.pi))

    def test_bernoulli_targets_outside_unit_interval(self):
        """Testa a rejeição de alvos Bernoulli fora de [0, 1]."""
        with pytest.raises(ContractError):
            nk.bernoulli_log_likelihood(np.array([[1.5]]), Tensor([[0.5]]))

    def test_log_mean_exp_of_constant(self):
        """Testa que log-média-exp de valores iguais devolve o próprio valor."""
        values = Tensor(np.full((4, 3), -2.5))
        np.testing.assert_allclose(nk.log_mean_exp(values, axis=0).data, -2.5)

    def test_reparameterize_with_zero_noise(self):
        """Testa z = μ quando ε = 0."""
        mu = Tensor([[1.0, -1.0]])
        z = nk.reparameterize(mu, Tensor([[0.3, 0.1]]), eps=np.zeros((1, 2)))
        np.testing.assert_allclose(z.data, mu.data)

    def test_weighted_sum(self):
        """Testa Σ w_i t_i com pesos constantes."""
        out = nk.weighted_sum([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])], [0.25, 0.75])
        np.testing.assert_allclose(out.data, [2.5, 3.5])


class TestAdam:
    """Testes do otimizador Adam."""

    def test_first_step_moves_by_learning_rate(self):
        """Testa que o primeiro passo desloca ~lr na direção oposta ao gradiente."""
        p = Parameter(np.array([1.0]), 'p')
        state = nk.adam_step(AdamState(lr=0.1), {'p': p}, {'p': np.array([2.0])})
        assert state.step == 1
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_non_finite_gradient(self):
        """Testa que gradientes não finitos levantam TrainingError com o nome do parâmetro."""
        p = Parameter(np.array([1.0]), 'p')
        with pytest.raises(TrainingError) as exc:
            nk.adam_step(AdamState(), {'p': p}, {'p': np.array([np.nan])})
        assert exc.value.param_name == 'p'
        assert p.data[0] == 1.0


class TestRng:
    """Testes do gerador com semente."""

    def test_same_seed_same_stream(self):
        """Testa que a mesma semente reproduz o mesmo fluxo."""
        np.testing.assert_array_equal(Rng(7).normal((3, 2)), Rng(7).normal((3, 2)))

    def test_fork_is_deterministic_and_keyed(self):
        """Testa que filhos derivados dependem só da semente e das chaves."""
        a = Rng(3).fork('train', 'top').normal((4,))
        b = Rng(3).fork('train', 'top').normal((4,))
        c = Rng(3).fork('train', 'bottom').normal((4,))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_keyed_normal_follows_row_content(self):
        """Testa que o ruído de avaliação acompanha o conteúdo de cada linha."""
        rows = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        noise = nk.keyed_normal(rows, 3, seed=5, draws=2)
        permuted = nk.keyed_normal(rows[[2, 0, 1]], 3, seed=5, draws=2)
        assert noise.shape == (2, 3, 3)
        np.testing.assert_array_equal(permuted, noise[:, [2, 0, 1], :])
