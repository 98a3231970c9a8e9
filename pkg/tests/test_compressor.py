import numpy as np
import pytest

from app_config import preset
from compressor import (FirstLayerLogits, compress, fusion_gates, language_branch,
                        language_logits, query_term, segment_pool_matrix, vision_branch,
                        vision_logits)
from numerics import Tensor, grad_check, mul, total
from twinnet import TwinNet

GELU_TANH_RANGE = (-0.171, 0.8412)


@pytest.fixture
def layer0(tiny_model):
    return tiny_model.lfc("ord").scope("0")


class TestBranches:

    def test_vision_scores_columns_sum_to_one(self, layer0, tiny, rng):
        out, scores = vision_branch(rng.standard_normal((tiny.M_h, tiny.d)), layer0)
        assert out.shape == (tiny.n, tiny.d)
        assert scores.shape == (tiny.M_h, tiny.n)
        np.testing.assert_allclose(scores.data.sum(axis=0), 1.0, rtol=0, atol=1e-12)

    def test_equal_logits_give_mean(self, layer0, tiny, rng):
        x = rng.standard_normal((tiny.M_h, tiny.d))
        out, _ = vision_branch(x, layer0, logits=Tensor(np.zeros((tiny.M_h, tiny.n))))
        np.testing.assert_allclose(out.data, np.tile(x.mean(axis=0), (tiny.n, 1)), atol=1e-12)

    def test_identical_rows_pass_through(self, layer0, tiny, rng):
        r = rng.standard_normal(tiny.d)
        x = np.tile(r, (tiny.M_h, 1))
        q = rng.standard_normal(tiny.d)
        for out in (vision_branch(x, layer0)[0], language_branch(x, q, layer0)[0]):
            np.testing.assert_allclose(out.data, np.tile(r, (tiny.n, 1)), atol=1e-12)

    def test_language_scores_columns_sum_to_one(self, layer0, tiny, rng):
        _, scores = language_branch(rng.standard_normal((tiny.M_h, tiny.d)), rng.standard_normal(tiny.d), layer0)
        np.testing.assert_allclose(scores.data.sum(axis=0), 1.0, rtol=0, atol=1e-12)

    def test_language_depends_on_query(self, layer0, tiny, rng):
        x = rng.standard_normal((tiny.M_h, tiny.d))
        a, _ = language_branch(x, rng.standard_normal(tiny.d), layer0)
        b, _ = language_branch(x, rng.standard_normal(tiny.d), layer0)
        assert not np.allclose(a.data, b.data)

    def test_logits_are_row_local(self, layer0, tiny, rng):
        x = rng.standard_normal((tiny.M_h, tiny.d))
        qt = query_term(rng.standard_normal(tiny.d), layer0)
        full_v = vision_logits(x, layer0).data
        full_l = language_logits(x, qt, layer0).data
        for i in range(tiny.M_h):
            np.testing.assert_allclose(vision_logits(x[i:i + 1], layer0).data[0], full_v[i], rtol=0, atol=1e-12)
            np.testing.assert_allclose(language_logits(x[i:i + 1], qt, layer0).data[0], full_l[i],
                                       rtol=0, atol=1e-12)


class TestGates:

    def test_zero_output_weights_close_the_gates(self, tiny_model, tiny, rng):
        for name in ("vision_router", "language_router"):
            for w in ("w2", "b2"):
                p = tiny_model.store[f"ord.lfc.0.{name}.{w}"]
                p.value = Tensor(np.zeros(p.shape))
        g_v, g_l = fusion_gates(rng.standard_normal((tiny.M_h, tiny.d)), rng.standard_normal(tiny.d),
                                tiny_model.lfc("ord").scope("0"))
        assert g_v.item() == 0.0 and g_l.item() == 0.0

    def test_gate_range(self, tiny_model, tiny, rng):
        lo, hi = GELU_TANH_RANGE
        p = tiny_model.lfc("ord").scope("0")
        for _ in range(200):
            g_v, g_l = fusion_gates(rng.standard_normal((tiny.M_h, tiny.d)) * 10,
                                    rng.standard_normal(tiny.d) * 10, p)
            assert lo <= g_v.item() <= hi
            assert lo <= g_l.item() <= hi

    def test_sigmoid_gates_lie_between_bounds(self, tiny, rng):
        cfg = tiny.with_overrides({"gate_activation": "sigmoid"})
        p = TwinNet(cfg, seed=0).lfc("ord").scope("0")
        g_v, g_l = fusion_gates(rng.standard_normal((cfg.M_h, cfg.d)), rng.standard_normal(cfg.d), p, "sigmoid")
        for g in (g_v.item(), g_l.item()):
            assert 1 / (1 + np.e) <= g <= 1 / (1 + np.exp(-1))

    def test_language_gate_ignores_frames(self, layer0, tiny, rng):
        q = rng.standard_normal(tiny.d)
        _, a = fusion_gates(rng.standard_normal((tiny.M_h, tiny.d)), q, layer0)
        _, b = fusion_gates(rng.standard_normal((tiny.M_h, tiny.d)), q, layer0)
        assert a.item() == b.item()


class TestCompress:

    def test_output_shape(self, desk, rng):
        model = TwinNet(desk, seed=0)
        out, gates = compress(rng.standard_normal((32, 64)), rng.standard_normal(64), model.lfc("ord"), desk)
        assert out.shape == (8, 64)
        assert len(gates) == desk.K

    def test_batched(self, tiny_model, tiny, rng):
        V = rng.standard_normal((3, tiny.M_h, tiny.d))
        q = rng.standard_normal((3, tiny.d))
        out, _ = compress(V, q, tiny_model.lfc("ord"), tiny)
        for b in range(3):
            single, _ = compress(V[b], q[b], tiny_model.lfc("ord"), tiny)
            np.testing.assert_allclose(out.data[b], single.data, rtol=0, atol=1e-12)

    def test_constant_input_scales_by_gate_sums(self, tiny_model, tiny, rng):
        r = rng.standard_normal(tiny.d)
        out, gates = compress(np.tile(r, (tiny.M_h, 1)), rng.standard_normal(tiny.d), tiny_model.lfc("ord"), tiny)
        factor = np.prod([g.g_V[0] + g.g_L[0] for g in gates])
        np.testing.assert_allclose(out.data, np.tile(factor * r, (tiny.n, 1)), atol=1e-10)

    def test_cached_first_layer_matches(self, tiny_model, tiny, rng):
        p = tiny_model.lfc("ord")
        V = rng.standard_normal((tiny.M_h, tiny.d))
        q = rng.standard_normal(tiny.d)
        qt = query_term(q, p.scope("0"))
        first = FirstLayerLogits(vision_logits(V, p.scope("0")), language_logits(V, qt, p.scope("0")))
        a, _ = compress(V, q, p, tiny)
        b, _ = compress(V, q, p, tiny, first=first, qterm0=qt)
        np.testing.assert_array_equal(a.data, b.data)

    def test_pooling_fallback(self, rng):
        cfg = preset("desk", disable_lfc=True)
        model = TwinNet(cfg, seed=0)
        assert not model.store.under("ord.lfc")
        V = rng.standard_normal((32, cfg.d))
        out, gates = compress(V, rng.standard_normal(cfg.d), model.lfc("ord"), cfg)
        assert gates == []
        for j in range(8):
            np.testing.assert_allclose(out.data[j], V[4 * j:4 * j + 4].mean(axis=0), rtol=0, atol=1e-12)

    def test_pool_matrix_rows_average(self):
        P = segment_pool_matrix(10, 3)
        np.testing.assert_allclose(P.sum(axis=1), 1.0)
        assert (P > 0).sum() == 10

    def test_vision_only_ignores_query(self, tiny, rng):
        cfg = tiny.with_overrides({"disable_lfc_language": True})
        model = TwinNet(cfg, seed=0)
        V = rng.standard_normal((cfg.M_h, cfg.d))
        a, gates = compress(V, rng.standard_normal(cfg.d), model.lfc("ord"), cfg)
        b, _ = compress(V, rng.standard_normal(cfg.d), model.lfc("ord"), cfg)
        np.testing.assert_array_equal(a.data, b.data)
        assert all(g.g_V is None and g.g_L is None for g in gates)
        assert not any("router" in n or "language" in n for n in model.store.names())

    def test_language_only_has_no_vision_weights(self, tiny):
        model = TwinNet(tiny.with_overrides({"disable_lfc_vision": True}), seed=0)
        assert not any("vision" in n for n in model.store.names())

    def test_gradient_wrt_input(self, tiny, grad_case):
        model, rng = grad_case
        q = rng.standard_normal(tiny.d)
        w = rng.standard_normal((tiny.n, tiny.d))
        f = lambda x: total(mul(compress(x, q, model.lfc("ord"), tiny)[0], w))
        assert grad_check(f, rng.standard_normal((tiny.M_h, tiny.d))) < 1e-4

    @pytest.mark.parametrize("name", ["ord.lfc.0.vision.w1", "ord.lfc.1.language.w1",
                                      "ord.lfc.0.vision_router.w1", "ord.lfc.1.language_router.w2"])
    def test_gradient_wrt_weights(self, tiny, grad_case, name):
        model, rng = grad_case
        V = rng.standard_normal((tiny.M_h, tiny.d))
        q = rng.standard_normal(tiny.d)
        w = rng.standard_normal((tiny.n, tiny.d))
        param = model.store[name]
        original = param.value

        def f(x):
            param.value = x
            return total(mul(compress(V, q, model.lfc("ord"), tiny)[0], w))

        try:
            assert grad_check(f, original.data) < 1e-4
        finally:
            param.value = original
