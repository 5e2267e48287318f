import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inhibmoe import autograd as ag
from inhibmoe.autograd import Tensor
from inhibmoe.moe import ConfigurationError, MoELayer, expert_utilization, moe_forward, topk_gate

from .oracles import dense_moe_oracle


@pytest.fixture(autouse=True)
def fresh_tape():
    ag.reset_tape()


class TestTopKGate:
    def test_worked_example(self):
        import mpmath

        mpmath.mp.dps = 40
        idx, w = topk_gate(Tensor([[1.0, 2.0, 3.0, 4.0, 5.0]], dtype=np.float64), 3)
        assert idx[0].tolist() == [4, 3, 2]
        es = [mpmath.e ** v for v in (5, 4, 3)]
        expected = [float(e / sum(es)) for e in es]
        np.testing.assert_allclose(w.data[0], expected, rtol=1e-14)
        np.testing.assert_allclose(w.data[0], [0.6652, 0.2447, 0.0900], atol=1e-4)

    def test_equal_logits_all_selected(self):
        idx, w = topk_gate(Tensor(np.zeros((2, 4))), 4)
        np.testing.assert_allclose(w.data, 0.25, rtol=1e-7)
        assert idx.tolist() == [[0, 1, 2, 3]] * 2

    def test_ties_prefer_lower_index(self):
        idx, _ = topk_gate(Tensor([[1.0, 3.0, 3.0, 0.0, 3.0]]), 2)
        assert idx.tolist() == [[1, 2]]

    def test_k1_is_argmax_with_unit_weight(self):
        idx, w = topk_gate(Tensor([[0.3, -1.0, 2.5, 2.0]]), 1)
        assert idx.tolist() == [[2]] and w.data.tolist() == [[1.0]]

    def test_k_greater_than_n(self):
        with pytest.raises(ConfigurationError):
            topk_gate(Tensor(np.zeros((1, 3))), 4)
        with pytest.raises(ConfigurationError):
            MoELayer(3, 4, np.random.default_rng(0))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.data())
    def test_weight_properties(self, n, data):
        k = data.draw(st.integers(1, n))
        b = data.draw(st.integers(1, 6))
        logits = np.array(data.draw(st.lists(st.floats(-30, 30), min_size=b * n, max_size=b * n))).reshape(b, n)
        idx, w = topk_gate(Tensor(logits), k)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)
        for row in range(b):
            assert len(set(idx[row])) == k
            chosen = logits[row, idx[row]]
            others = np.delete(logits[row], idx[row])
            assert others.size == 0 or chosen.min() >= others.max()


class TestMoEForward:
    def test_single_expert_is_the_expert(self):
        rng = np.random.default_rng(0)
        layer = MoELayer(1, 1, rng)
        x = Tensor(rng.standard_normal((4, 128)).astype(np.float32))
        np.testing.assert_array_equal(moe_forward(x, layer).data, layer.experts[0](x).data)

    def test_identical_experts_give_expert_output(self):
        rng = np.random.default_rng(1)
        layer = MoELayer(5, 3, rng, dtype=np.float64)
        for e in layer.experts[1:]:
            e.load_state_dict(layer.experts[0].state_dict())
        x = Tensor(rng.standard_normal((6, 128)), dtype=np.float64)
        np.testing.assert_allclose(layer(x).data, layer.experts[0](x).data, rtol=1e-12, atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        layer = MoELayer(5, 3, rng)
        x = rng.standard_normal((4, 128)).astype(np.float32)
        np.testing.assert_allclose(layer(Tensor(x)).data, dense_moe_oracle(layer, x), atol=1e-6)

    def test_only_selected_experts_execute(self):
        rng = np.random.default_rng(3)
        layer = MoELayer(5, 2, rng)
        calls = []

        class Spy:
            def __init__(self, e, inner):
                self.e, self.inner = e, inner

            def __call__(self, x):
                calls.append((self.e, x.shape[0]))
                return self.inner(x)

        layer.experts = [Spy(e, ex) for e, ex in enumerate(layer.experts)]
        x = Tensor(rng.standard_normal((3, 128)).astype(np.float32))
        layer(x)
        idx = layer.last_routing.indices
        expected = {e: int(np.sum(idx == e)) for e in range(5) if np.any(idx == e)}
        assert dict(calls) == expected

    def test_unselected_experts_get_zero_gradient(self):
        rng = np.random.default_rng(4)
        layer = MoELayer(5, 2, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 128)), requires_grad=True, dtype=np.float64)
        out = layer(x)
        ag.backward(out.sum())
        chosen = set(layer.last_routing.indices[0].tolist())
        for e, expert in enumerate(layer.experts):
            for p in expert.parameters():
                if e in chosen:
                    assert p.grad is not None and np.any(p.grad != 0)
                else:
                    assert p.grad is None or np.all(p.grad == 0)
        assert any(np.any(p.grad != 0) for p in layer.router.parameters())


class TestUtilization:
    def test_k_equals_n(self):
        idx, _ = topk_gate(Tensor(np.random.default_rng(0).standard_normal((7, 4))), 4)
        np.testing.assert_array_equal(expert_utilization([idx], 4), [7, 7, 7, 7])

    def test_single_sample_k3(self):
        idx, _ = topk_gate(Tensor(np.random.default_rng(1).standard_normal((1, 5))), 3)
        counts = expert_utilization([idx], 5)
        assert sorted(counts.tolist()) == [0, 0, 1, 1, 1]

    def test_total_is_b_times_k(self):
        rng = np.random.default_rng(2)
        batches = [topk_gate(Tensor(rng.standard_normal((b, 5))), 3)[0] for b in (3, 8, 1)]
        assert expert_utilization(batches, 5).sum() == 12 * 3
