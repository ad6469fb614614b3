import numpy as np
import pytest

from _gradcheck import assert_gradients_match
from tmur.engine import Tape
from tmur.evidential import DomainError
from tmur.model import ModelConfig, TMURModel
from tmur.objectives import (
    ConfigError,
    LossWeights,
    auxiliary_expert_loss,
    combine,
    digamma_loss,
    diversity_loss,
    load_balance_loss,
    total_loss,
)
from tmur.engine import Tensor


class TestDigammaLoss:
    def test_examples(self):
        assert abs(digamma_loss([[2.0, 1.0]], [0]).item() - 0.5) <= 1e-12
        assert abs(digamma_loss([[1.0, 1.0]], [0]).item() - 1.0) <= 1e-12

    def test_confident_limit(self):
        values = [digamma_loss([[a, 1.0, 1.0]], [0]).item() for a in (1e1, 1e3, 1e6)]
        assert values[0] > values[1] > values[2] > 0
        assert values[2] < 1e-5

    def test_batch_mean(self):
        assert digamma_loss([[2.0, 1.0], [1.0, 1.0]], [0, 1]).item() == pytest.approx(0.75, abs=1e-12)

    @pytest.mark.parametrize("labels", [[2], [-1], [0.5]])
    def test_invalid_labels(self, labels):
        with pytest.raises(DomainError):
            digamma_loss([[2.0, 1.0]], labels)

    def test_alpha_below_one(self):
        with pytest.raises(DomainError):
            digamma_loss([[0.5, 1.0]], [0])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        from tmur.engine import Parameter

        a = Parameter(rng.uniform(1.0, 6.0, (4, 3)), "alpha")
        assert_gradients_match(lambda: digamma_loss(a, [0, 2, 1, 1]), [a])


class TestAuxiliaryLoss:
    def test_mean_of_experts(self):
        assert auxiliary_expert_loss([[[1.0, 1.0]], [[2.0, 1.0]]], [0]).item() == pytest.approx(0.75, abs=1e-12)

    def test_identical_experts(self):
        a = [[3.0, 1.5, 2.0]]
        assert auxiliary_expert_loss([a, a, a], [1]).item() == pytest.approx(digamma_loss(a, [1]).item(), abs=1e-15)

    def test_zero_evidence(self):
        assert auxiliary_expert_loss([[[1.0, 1.0]]] * 3, [1]).item() == pytest.approx(1.0, abs=1e-12)


class TestLoadBalance:
    def test_uniform_is_zero(self):
        assert load_balance_loss(np.full((5, 4), 0.25), 1.5).item() == 0.0

    def test_one_hot(self):
        pi = np.zeros((3, 4))
        pi[:, 2] = 1.0
        assert abs(load_balance_loss(pi, 1.5).item() - 0.625) <= 1e-12

    def test_inactive_region_has_zero_gradient(self):
        from tmur.engine import Parameter
        import tmur.engine as E

        logits = Parameter(np.random.default_rng(1).normal(0, 0.1, (6, 4)), "logits")
        with Tape() as tape:
            loss = load_balance_loss(E.softmax(logits, 1.0), 1.5)
        assert loss.item() == 0.0
        tape.backward(loss)
        assert np.all(logits.grad == 0)

    def test_permutation_invariance(self):
        pi = np.random.default_rng(2).dirichlet([0.3] * 4, size=8)
        perm = [3, 1, 0, 2]
        assert load_balance_loss(pi, 1.2).item() == pytest.approx(load_balance_loss(pi[:, perm], 1.2).item(), abs=1e-15)

    @pytest.mark.parametrize("rho", [1.0, 0.5])
    def test_rho_must_exceed_one(self, rho):
        with pytest.raises(ConfigError):
            load_balance_loss(np.full((1, 2), 0.5), rho)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestDiversity:
    def test_orthogonal(self):
        assert diversity_loss([[[1.0, 0.0]], [[0.0, 1.0]]]).item() == 0.0

    def test_identical_and_negated(self):
        z = unit([[0.3, -0.4, 1.2]])
        assert abs(diversity_loss([z, z]).item() - 1) <= 1e-12
        assert abs(diversity_loss([z, -z]).item() - 1) <= 1e-12

    def test_triple_with_half_cosines(self):
        # three unit vectors with pairwise cosine 0.5
        z = [[[1.0, 0.0, 0.0]], [[0.5, np.sqrt(3) / 2, 0.0]], [[0.5, np.sqrt(3) / 6, np.sqrt(2 / 3)]]]
        assert abs(diversity_loss(z).item() - 0.25) <= 1e-12

    def test_single_view(self):
        assert diversity_loss([[[1.0, 0.0]]]).item() == 0.0

    def test_permutation_and_sign_invariance(self):
        rng = np.random.default_rng(3)
        z = [unit(rng.standard_normal((5, 4))) for _ in range(3)]
        ref = diversity_loss(z).item()
        assert diversity_loss([z[2], z[0], z[1]]).item() == pytest.approx(ref, abs=1e-15)
        assert diversity_loss([-z[0], z[1], -z[2]]).item() == pytest.approx(ref, abs=1e-15)
        assert 0 <= ref <= 1


class TestTotal:
    def test_weighted_sum_example(self):
        parts = [Tensor(v) for v in (1.0, 0.5, 0.0, 0.0)]
        t, br = combine(*parts, LossWeights(lam=0.3))
        assert abs(br.total - 1.15) <= 1e-12
        assert abs(t.item() - 1.15) <= 1e-12

    def test_reduction_to_fused(self):
        parts = [Tensor(v) for v in (0.7, 0.5, 0.2, 0.9)]
        t, br = combine(*parts, LossWeights(0.0, 0.0, 0.0))
        assert t.item() == br.total == 0.7

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(lam=-0.1)
        with pytest.raises(ConfigError):
            LossWeights(rho=1.0)

    def test_full_loss_gradient_through_tiny_model(self):
        cfg = ModelConfig(view_dims=(3, 2), num_classes=2, aligned_dim=3, expert_hidden_dims=(4,))
        model = TMURModel(cfg, seed=11)
        rng = np.random.default_rng(4)
        views = [rng.standard_normal((4, 3)), rng.standard_normal((4, 2))]
        labels = np.array([0, 1, 1, 0])
        # rho just above 1 keeps the balance hinge active so its gradient is exercised too
        weights = LossWeights(lam=0.3, beta=0.5, gamma=0.5, rho=1.0001)

        def loss():
            return total_loss(model.forward(views), labels, weights)[0]

        assert_gradients_match(loss, model.parameters())

    def test_breakdown_components(self):
        cfg = ModelConfig(view_dims=(3, 2), num_classes=2, aligned_dim=3, expert_hidden_dims=(4,))
        model = TMURModel(cfg, seed=1)
        rng = np.random.default_rng(5)
        views = [rng.standard_normal((6, 3)), rng.standard_normal((6, 2))]
        _, br = total_loss(model.forward(views), np.array([0, 1, 0, 1, 1, 0]), LossWeights())
        d = br.as_dict()
        assert d["fused"] > 0 and d["view"] > 0 and d["bal"] >= 0 and 0 <= d["div"] <= 1
        assert abs(br.total - (br.fused + 0.3 * br.view + 0.05 * br.bal + 0.05 * br.div)) <= 1e-12
