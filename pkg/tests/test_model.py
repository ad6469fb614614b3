import dataclasses

import numpy as np
import pytest

import tmur.engine as E
from _gradcheck import assert_gradients_match
from tmur.engine import ShapeError, Tensor
from tmur.evidential import evidence_to_opinion, family_uncertainty, ScaleFamily
from tmur.model import ModelConfig, Standardizer, TMURModel

SMALL = ModelConfig(view_dims=(5, 3, 4), num_classes=3, aligned_dim=6, expert_hidden_dims=(8,))


def batch(cfg, rows=7, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((rows, d)) for d in cfg.view_dims]


@pytest.fixture
def model():
    return TMURModel(SMALL, seed=3)


class TestForwardContract:
    def test_shapes_and_invariants(self, model):
        out = model.forward(batch(SMALL))
        d, k, v = SMALL.aligned_dim, SMALL.num_classes, SMALL.num_views
        assert all(h.shape == (7, d) for h in out.aligned)
        assert out.context.shape == (7, v * d)
        assert len(out.evidence) == v + 1
        assert all(e.shape == (7, k) and np.all(e.data > 0) for e in out.evidence)
        np.testing.assert_allclose(out.pi.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((out.pi.data > 0) & (out.pi.data < 1))
        for z in out.zhat:
            np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-10)
        expected = sum(out.pi.data[:, [i]] * e.data for i, e in enumerate(out.evidence))
        np.testing.assert_allclose(out.fused.data, expected, atol=1e-10)

    def test_collaborative_input_width(self):
        cfg = ModelConfig(view_dims=(4, 2), num_classes=2, aligned_dim=5)
        shapes = dict(TMURModel.parameter_shapes(cfg))
        assert shapes["experts.2.layer1.weight"] == (10, 256)
        assert shapes["experts.0.layer1.weight"] == (5, 256)

    def test_identical_samples_align_identically(self, model):
        views = [np.repeat(x[:1], 2, axis=0) for x in batch(SMALL)]
        for h in model.align_views(views):
            assert h.data[0].tobytes() == h.data[1].tobytes()

    def test_width_mismatch(self, model):
        views = batch(SMALL)
        views[1] = views[1][:, :2]
        with pytest.raises(ShapeError):
            model.forward(views)

    def test_view_count_mismatch(self, model):
        with pytest.raises(ShapeError):
            model.forward(batch(SMALL)[:2])

    def test_fused_convexity(self, model):
        rng = np.random.default_rng(1)
        for _ in range(20):
            views = [rng.normal(0, 3, (16, d)) for d in SMALL.view_dims]
            out = model.forward(views)
            stack = np.stack([e.data for e in out.evidence])
            assert np.all(stack.min(axis=0) - 1e-10 <= out.fused.data)
            assert np.all(out.fused.data <= stack.max(axis=0) + 1e-10)

    def test_predict_argmax_and_uncertainty(self, model):
        labels, p, u = model.predict(batch(SMALL))
        out = model.forward(batch(SMALL))
        s = out.fused.data.sum(axis=1) + SMALL.num_classes
        np.testing.assert_allclose(u, SMALL.num_classes / s, atol=1e-15)
        np.testing.assert_array_equal(labels, np.argmax(p, axis=1))


class TestFuse:
    def test_hand_example(self):
        fused = TMURModel.fuse(Tensor([[0.5, 0.5]]), [Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]])])
        np.testing.assert_array_equal(fused.data, [[1.0, 1.0]])
        assert evidence_to_opinion(fused.data[0]).uncertainty == 0.5

    def test_one_hot_reproduces_expert(self):
        rng = np.random.default_rng(2)
        ev = [Tensor(rng.exponential(1.0, (4, 3))) for _ in range(3)]
        for i in range(3):
            pi = np.zeros((4, 3))
            pi[:, i] = 1.0
            fused = TMURModel.fuse(Tensor(pi), ev)
            assert fused.data.tobytes() == ev[i].data.tobytes()

    def test_identical_experts(self):
        e = Tensor(np.random.default_rng(3).exponential(1.0, (5, 4)))
        pi = np.random.default_rng(4).dirichlet([1.0] * 3, size=5)
        np.testing.assert_allclose(TMURModel.fuse(Tensor(pi), [e, e, e]).data, e.data, rtol=1e-15)

    def test_weight_count_mismatch(self):
        with pytest.raises(ShapeError):
            TMURModel.fuse(Tensor([[1.0]]), [Tensor([[1.0]]), Tensor([[1.0]])])


class TestRouter:
    def test_attention_only_affects_router(self, model):
        views = batch(SMALL)
        before = model.forward(views)
        for name in ("query", "key", "value", "output"):
            model.params[f"attention.{name}"].data[:] = 0.0
        after = model.forward(views)
        for a, b in zip(before.evidence, after.evidence):
            assert a.data.tobytes() == b.data.tobytes()
        assert not np.array_equal(before.pi.data, after.pi.data)

    def test_no_attention_context_is_concatenation(self):
        cfg = dataclasses.replace(SMALL, attention=False)
        m = TMURModel(cfg, seed=3)
        out = m.forward(batch(cfg))
        np.testing.assert_array_equal(out.context.data, np.concatenate([h.data for h in out.aligned], axis=1))
        assert not any(n.startswith("attention.") for n in m.params)

    def test_single_view_identity_attention(self):
        cfg = ModelConfig(view_dims=(4,), num_classes=2, aligned_dim=3, expert_hidden_dims=(5,))
        m = TMURModel(cfg, seed=0)
        for name in ("query", "key", "value", "output"):
            m.params[f"attention.{name}"].data = np.eye(3)
        views = batch(cfg)
        aligned = m.align_views(views)
        np.testing.assert_allclose(m.router_context(aligned).data, aligned[0].data, atol=1e-15)

    def test_temperature_limits(self, model):
        ctx = model.router_context(model.align_views(batch(SMALL)))
        logits = model.router_logits(ctx)
        hot = E.softmax(logits, 1e12).data
        np.testing.assert_allclose(hot, 1 / SMALL.num_experts, atol=1e-9)
        doubled = E.softmax(E.scale(logits, 2.0), 1.0).data
        halved = E.softmax(logits, 0.5).data
        np.testing.assert_allclose(doubled, halved, atol=1e-15)

    def test_local_router_sees_only_expert_totals(self):
        cfg = dataclasses.replace(SMALL, router_input="local")
        m = TMURModel(cfg, seed=3)
        out = m.forward(batch(cfg))
        assert out.context.shape == (7, cfg.num_views)
        totals = np.stack([e.data.sum(axis=1) for e in out.evidence[: cfg.num_views]], axis=1)
        np.testing.assert_allclose(out.context.data, np.log1p(totals), rtol=1e-15)
        assert m.params["router.layer1.weight"].shape == (cfg.num_views, 8)


class TestGradients:
    def test_projector_gradient(self):
        cfg = ModelConfig(view_dims=(3, 2), num_classes=2, aligned_dim=3, expert_hidden_dims=(4,))
        m = TMURModel(cfg, seed=5)
        views = batch(cfg, rows=4, seed=6)
        c = np.random.default_rng(7).standard_normal((4, 2))
        leaves = [m.params[n] for n in ("projectors.0.weight", "projectors.0.bias", "projectors.1.ln.gain")]
        assert_gradients_match(lambda: E.sum_all(E.mul(m.forward(views).fused, c)), leaves)


class TestPersistence:
    def test_round_trip_is_bit_identical(self, model, tmp_path):
        rng = np.random.default_rng(8)
        for p in model.parameters():
            p.data = p.data + rng.normal(0, 1e-3, p.shape)
        model.standardizer = Standardizer.fit(batch(SMALL, rows=20))
        model.meta = {"split_seed": 3407, "split_ratio": 0.8}
        path = tmp_path / "model.json"
        model.save(path)
        loaded = TMURModel.load(path)
        assert loaded.config == model.config
        assert loaded.meta == model.meta
        for name, p in model.params.items():
            assert loaded.params[name].data.tobytes() == p.data.tobytes()
        for a, b in zip(loaded.standardizer.means, model.standardizer.means):
            assert a.tobytes() == b.tobytes()
        views = batch(SMALL)
        assert loaded.forward(views).fused.data.tobytes() == model.forward(views).fused.data.tobytes()
        assert loaded.dumps() == model.dumps()

    def test_shape_mismatch_on_load(self, model):
        text = model.dumps().replace('"projectors.0.bias": {"shape": [1, 6]', '"projectors.0.bias": {"shape": [6, 1]')
        with pytest.raises(ShapeError):
            TMURModel.loads(text)


class TestInit:
    def test_seed_determines_parameters(self):
        a, b, c = TMURModel(SMALL, 1), TMURModel(SMALL, 1), TMURModel(SMALL, 2)
        assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
        assert not np.array_equal(a.params["heads.0.weight"].data, c.params["heads.0.weight"].data)

    def test_untrained_model_is_uncertain(self):
        cfg = ModelConfig(view_dims=(20, 12), num_classes=10, aligned_dim=64)
        m = TMURModel(cfg, seed=3407)
        views = batch(cfg, rows=200, seed=9)
        _, p, u = m.predict(views)
        assert u.mean() > 0.5
        assert p.max(axis=1).mean() < 0.2

    @pytest.mark.parametrize("bad", [dict(num_classes=1), dict(view_dims=()), dict(routing_temperature=0.0), dict(aligned_dim=0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            dataclasses.replace(SMALL, **bad)


def test_scale_bias_demonstration():
    """Two heads with the same p direction but evidence scaled by t disagree on u exactly as the family predicts."""
    r = np.array([3.0, 1.0, 0.5, 0.5])
    fam = ScaleFamily(tuple(r))
    for t in (0.5, 2.0, 40.0):
        a, b = evidence_to_opinion(r), evidence_to_opinion(t * r)
        np.testing.assert_allclose(a.belief / a.belief.sum(), b.belief / b.belief.sum(), atol=1e-15)
        assert a.uncertainty == pytest.approx(family_uncertainty(fam, 1.0), abs=1e-15)
        assert b.uncertainty == pytest.approx(family_uncertainty(fam, t), abs=1e-15)
