import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.core.errors import ContractError, DimensionError, StructuralError
from src.core.graph import GraphModel
from src.core.nnkit import Rng
from src.core.vae import VaeComponent
from src.layers.data import synthetic_task
from src.layers.select_eval import (PSNR_CAP, NodeView, eval_nll, evaluate_stream, objective_values, psnr,
                                    select_component, square_loss, ssim, task_metrics)


def _graph(seeds):
    graph = GraphModel(5.0, {'hidden_dim': 8})
    for t, seed in enumerate(seeds, start=1):
        graph.add_basic_node(16, 2, t, Rng(seed))
    return graph


class TestSelection:
    """Testes da seleção de componentes sem rótulo."""

    def test_single_node_posterior(self, binary_batch):
        """Testa que com um único nó a posterior é [1]."""
        result = select_component(_graph([1]), binary_batch)
        np.testing.assert_array_equal(result.chosen, np.zeros(5, dtype=int))
        np.testing.assert_allclose(result.posterior, np.ones((5, 1)))

    def test_tie_takes_lowest_index(self, binary_batch):
        """Testa que empates ficam com o menor índice."""
        result = select_component(_graph([4, 4]), binary_batch)
        np.testing.assert_array_equal(result.chosen, np.zeros(5, dtype=int))
        np.testing.assert_allclose(result.posterior, 0.5)

    def test_histogram(self, binary_batch):
        """Testa a contagem de amostras por nó."""
        result = select_component(_graph([1, 2, 3]), binary_batch)
        counts = result.histogram(3)
        assert counts.sum() == 5 and counts.size == 3

    def test_choice_maximises_score(self, binary_batch):
        """Testa que o nó escolhido tem a maior pontuação."""
        graph = _graph([1, 2])
        result = select_component(graph, binary_batch, k_eval=2, eval_seed=3)
        np.testing.assert_array_equal(result.scores.max(axis=1),
                                      result.scores[np.arange(5), result.chosen])

    def test_selects_matching_half_image_model(self):
        """Testa ao menos 95% de acerto ao escolher entre modelos das metades superior e inferior."""
        graph = _graph([1, 2])
        for j, vae in enumerate(b.vae for b in graph.basics):
            for param in vae.parameters().values():
                param.data[...] = 0.0
            bias = np.full(16, -6.0)
            bias[8 * j:8 * (j + 1)] = 0.0
            vae.dec_upper.bias.data[...] = bias
        x = np.vstack([synthetic_task('half-active-top', 100, 16, Rng(11)).data,
                       synthetic_task('half-active-bottom', 100, 16, Rng(12)).data])
        truth = np.repeat([0, 1], 100)
        result = select_component(graph, x)
        assert np.mean(result.chosen == truth) >= 0.95

    def test_empty_graph(self, binary_batch):
        """Testa que um grafo vazio é rejeitado."""
        with pytest.raises(StructuralError):
            select_component(GraphModel(5.0), binary_batch)

    def test_node_view_matches_graph(self, binary_batch):
        """Testa que a visão de um nó avalia como o próprio grafo."""
        graph = _graph([1])
        np.testing.assert_array_equal(objective_values(NodeView(graph, 0), binary_batch, 1, 2),
                                      graph.node_eval(0, binary_batch, 1, 2))


class TestNll:
    """Testes da estimativa de NLL."""

    def test_deterministic(self, binary_batch):
        """Testa que a NLL com semente fixa se repete."""
        vae = VaeComponent(16, 2, 8, rng=Rng(0))
        assert eval_nll(vae, binary_batch, 3, 1) == eval_nll(vae, binary_batch, 3, 1)

    def test_order_invariant(self, binary_batch):
        """Testa que a NLL média não depende da ordem das amostras."""
        vae = VaeComponent(16, 2, 8, rng=Rng(0))
        assert eval_nll(vae, binary_batch[::-1], 2, 1) == pytest.approx(eval_nll(vae, binary_batch, 2, 1),
                                                                         rel=1e-12)

    def test_positive_for_bernoulli(self, binary_batch):
        """Testa que a NLL Bernoulli estimada é positiva."""
        assert eval_nll(VaeComponent(16, 2, 8, rng=Rng(0)), binary_batch) > 0

    def test_rejects_zero_kprime(self, binary_batch):
        """Testa que K' < 1 é rejeitado."""
        with pytest.raises(ContractError):
            eval_nll(VaeComponent(16, 2, 8, rng=Rng(0)), binary_batch, 0)


class TestMetrics:
    """Testes das métricas de reconstrução."""

    def test_square_loss(self):
        """Testa SL = Σ (x − recon)²."""
        assert square_loss([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(0.5)

    def test_square_loss_shapes(self):
        """Testa o erro de dimensão."""
        with pytest.raises(DimensionError):
            square_loss(np.zeros(3), np.zeros(4))

    def test_psnr_identical_is_capped(self):
        """Testa que imagens idênticas dão PSNR limitado."""
        x = np.linspace(0, 1, 16)
        assert psnr(x, x) == PSNR_CAP

    def test_psnr_known_value(self):
        """Testa PSNR = 20 dB para MSE = 0,01."""
        x = np.zeros(4)
        assert psnr(x, x + 0.1) == pytest.approx(20.0)

    def test_ssim_identity(self):
        """Testa SSIM(x, x) = 1."""
        x = np.random.default_rng(0).random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_ssim_symmetric(self):
        """Testa SSIM(a, b) = SSIM(b, a)."""
        rng = np.random.default_rng(1)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert ssim(a, b) < 1.0

    def test_ssim_small_image_single_window(self):
        """Testa que imagens menores que a janela usam uma janela só."""
        rng = np.random.default_rng(2)
        a, b = rng.random((4, 4)), rng.random((4, 4))
        assert ssim(a, b) == pytest.approx(ssim(a.ravel(), b.ravel()))

    def test_task_metrics(self):
        """Testa as médias por amostra das métricas."""
        x = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        record = task_metrics(x, x.copy(), np.array([2.0, 4.0]), (2, 2))
        assert record.nll == pytest.approx(3.0)
        assert record.sl == 0.0
        assert record.psnr == PSNR_CAP
        assert record.ssim == pytest.approx(1.0)


class TestEvaluateStream:
    """Testes da tabela de avaliação por tarefa."""

    def test_graph_table(self, two_task_stream):
        """Testa colunas e contagens da avaliação do grafo."""
        graph = _graph([1, 2])
        table = evaluate_stream(graph, two_task_stream, kprime=2)
        assert table['task'].tolist() == ['top', 'bottom']
        for column in ('nll', 'nll_se', 'sl', 'psnr', 'ssim', 'chosen_node_0', 'chosen_node_1'):
            assert column in table.columns
        assert (table['chosen_node_0'] + table['chosen_node_1']).tolist() == [12, 12]

    def test_single_model_table(self, two_task_stream):
        """Testa a avaliação de um modelo único."""
        table = evaluate_stream(VaeComponent(16, 2, 8, rng=Rng(0)), two_task_stream)
        assert len(table) == 2
        assert 'chosen_node_0' not in table.columns


images = arrays(float, (8, 8), elements=st.floats(min_value=0.0, max_value=1.0, allow_nan=False))


class TestMetricProperties:
    """Propriedades das métricas de reconstrução."""

    @given(images, images)
    def test_ssim_symmetric_and_bounded(self, a, b):
        """Testa simetria e limite superior do SSIM."""
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert ssim(a, b) <= 1.0 + 1e-9

    @given(images, images)
    def test_psnr_and_square_loss_non_negative(self, a, b):
        """Testa que PSNR e SL são não negativos em [0, 1]."""
        assert square_loss(a, b) >= 0.0
        assert psnr(a, b) >= 0.0
