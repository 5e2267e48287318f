import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inhibmoe import autograd as ag
from inhibmoe.autograd import DimensionError, Tensor
from inhibmoe.gradcheck import max_rel_error, random_projection_loss
from inhibmoe.inhibition import (
    ActivationCache,
    CacheStateError,
    InhibitionConfigError,
    InhibitionUnit,
    NoGateError,
    cache_store,
    canonical_mode,
    dropout_inhibit,
    global_inhibit,
    one_layer_inhibit,
    posttext_inhibit,
    posttext_term,
    pretext_inhibit,
)
from inhibmoe.layers import Linear
from inhibmoe.model import MixedNumbersNet, ModelConfig, record_inhibition_activations

from .oracles import linear_ld, sigmoid_ld

F64 = np.float64


@pytest.fixture(autouse=True)
def fresh_tape():
    ag.reset_tape()


def rand(rng, *shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=F64)


def perturbed_linear(rng, d_in, d_out, scale=0.3):
    layer = Linear(d_in, d_out, rng, dtype=F64)
    layer.bias.data = scale * rng.standard_normal(d_out)
    return layer


def zero_linear(d_in, d_out):
    layer = Linear(d_in, d_out, np.random.default_rng(0), dtype=F64)
    layer.weight.data[:] = 0
    return layer


class TestDropout:
    def test_p_zero_identity(self):
        z = Tensor(np.arange(6.0))
        assert dropout_inhibit(z, 0.0, True, np.random.default_rng(0)) is z

    def test_eval_identity(self):
        z = Tensor(np.arange(6.0))
        assert dropout_inhibit(z, 0.75, False) is z

    def test_statistics(self):
        out = dropout_inhibit(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert abs(np.mean(out == 0) - 0.5) < 0.01
        assert set(np.unique(out)) == {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_invalid_probability(self, p):
        with pytest.raises(InhibitionConfigError):
            dropout_inhibit(Tensor(np.ones(3)), p, True, np.random.default_rng(0))


class TestOneLayer:
    def test_zero_gate_halves(self):
        rng = np.random.default_rng(0)
        z, gate = rand(rng, 4, 8), zero_linear(8, 8)
        out = one_layer_inhibit(z, z, gate)
        assert out.data.tobytes() == (0.5 * z.data).tobytes()

    def test_full_inhibition(self):
        rng = np.random.default_rng(1)
        z, gate = rand(rng, 3, 8), zero_linear(8, 8)
        gate.bias.data[:] = -50.0
        assert np.max(np.abs(one_layer_inhibit(z, z, gate).data)) < 1e-20

    def test_gradient_through_gate_and_carrier(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            z = rand(rng, 3, 6, requires_grad=True)
            gate = perturbed_linear(rng, 6, 6)
            w = rng.standard_normal((3, 6))
            fn = lambda: random_projection_loss(one_layer_inhibit(z, z, gate), w)
            assert max_rel_error(fn, [z, gate.weight, gate.bias]) < 1e-4


class TestPretext:
    def setup_method(self):
        self.rng = np.random.default_rng(10)
        self.gate = perturbed_linear(self.rng, 8, 8)
        self.z = rand(self.rng, 4, 8)

    def test_empty_taps_reduce_to_one_layer(self):
        a = pretext_inhibit(self.z, self.z, self.gate, {}, {})
        b = one_layer_inhibit(self.z, self.z, self.gate)
        assert a.data.tobytes() == b.data.tobytes()

    def test_zero_networks_bitwise_one_layer(self):
        nets = {"a": zero_linear(5, 8), "b": zero_linear(3, 8)}
        taps = {"a": rand(self.rng, 4, 5), "b": rand(self.rng, 4, 3)}
        a = pretext_inhibit(self.z, self.z, self.gate, nets, taps)
        b = one_layer_inhibit(self.z, self.z, self.gate)
        assert a.data.tobytes() == b.data.tobytes()

    def test_two_taps_against_straight_line(self):
        nets = {"pool1": perturbed_linear(self.rng, 12, 8), "pool2": perturbed_linear(self.rng, 5, 8)}
        taps = {"pool1": rand(self.rng, 4, 12), "pool2": rand(self.rng, 4, 5)}
        out = pretext_inhibit(self.z, self.z, self.gate, nets, taps).data
        arg = linear_ld(self.gate, self.z.data) + linear_ld(nets["pool1"], taps["pool1"].data) \
            + linear_ld(nets["pool2"], taps["pool2"].data)
        expected = self.z.data.astype(np.longdouble) * sigmoid_ld(arg)
        np.testing.assert_allclose(out, expected.astype(F64), atol=1e-6, rtol=0)

    def test_gradient_on_pretext_params(self):
        nets = {"pool1": perturbed_linear(self.rng, 6, 8), "pool2": perturbed_linear(self.rng, 4, 8)}
        x1 = rand(self.rng, 4, 6, requires_grad=True)
        taps = {"pool1": x1, "pool2": rand(self.rng, 4, 4)}
        w = self.rng.standard_normal((4, 8))
        params = [x1] + [p for n in nets.values() for p in n.parameters()] + self.gate.parameters()
        fn = lambda: random_projection_loss(pretext_inhibit(self.z, self.z, self.gate, nets, taps), w)
        assert max_rel_error(fn, params) < 1e-4

    def test_tap_shape_mismatch(self):
        nets = {"a": zero_linear(5, 8)}
        with pytest.raises(DimensionError):
            pretext_inhibit(self.z, self.z, self.gate, nets, {"a": rand(self.rng, 4, 6)})


class TestCache:
    def test_store_then_read(self):
        cache = ActivationCache()
        src = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        cache_store(cache, "t", src)
        got = cache.read("t")
        assert got.data.tolist() == src.data.tolist()
        assert not got.requires_grad and got.is_leaf

    def test_second_store_wins(self):
        cache = ActivationCache()
        cache.store("t", Tensor([1.0]))
        cache.store("t", Tensor([2.0]))
        assert cache.read("t").data.tolist() == [2.0]

    def test_store_copies(self):
        cache = ActivationCache()
        src = Tensor(np.ones(3))
        cache.store("t", src)
        src.data[:] = 7
        assert cache.read("t").data.tolist() == [1.0, 1.0, 1.0]

    def test_empty_iff_k_zero_in_unit_lifecycle(self):
        rng = np.random.default_rng(0)
        unit = InhibitionUnit("posttext", rng, dim=4, post_tap_dims={"logits": 3})
        assert unit.cache.k == 0 and unit.cache.is_empty
        unit.record({"logits": Tensor(np.ones((2, 3)))})
        assert unit.cache.k == 1 and not unit.cache.is_empty

    def test_backward_leaves_cache_without_grad(self):
        rng = np.random.default_rng(1)
        unit = InhibitionUnit("posttext", rng, dim=4, post_tap_dims={"logits": 3}, dtype=F64)
        unit.record({"logits": rand(rng, 2, 3, requires_grad=True)})
        z = rand(rng, 5, 4, requires_grad=True)
        ag.backward(unit(z, z).sum())
        assert unit.cache.read("logits").grad is None
        assert unit.posttext_nets["logits"].weight.grad is not None


class TestPosttext:
    def setup_method(self):
        self.rng = np.random.default_rng(20)
        self.gate = perturbed_linear(self.rng, 3, 3)
        self.z = rand(self.rng, 2, 3)

    def identity_net(self):
        net = Linear(3, 3, self.rng, dtype=F64)
        net.weight.data = np.eye(3)
        net.bias.data[:] = 0
        return net

    def test_cold_start_equals_one_layer(self):
        nets = {"logits": perturbed_linear(self.rng, 3, 3)}
        a = posttext_inhibit(self.z, self.z, self.gate, nets, ActivationCache())
        b = one_layer_inhibit(self.z, self.z, self.gate)
        assert a.data.tobytes() == b.data.tobytes()

    def test_single_previous_row_is_identity(self):
        cache = ActivationCache()
        cache.store("logits", Tensor(np.array([[1.0, -2.0, 0.5]])))
        cache.advance()
        term = posttext_term({"logits": self.identity_net()}, cache)
        np.testing.assert_array_equal(term.data, [[1.0, -2.0, 0.5]])

    def test_batch_max_pool(self):
        cache = ActivationCache()
        cache.store("logits", Tensor(np.array([[1.0, 5, 2], [4, 0, 0], [2, 2, 9]])))
        cache.advance()
        term = posttext_term({"logits": self.identity_net()}, cache)
        np.testing.assert_array_equal(term.data, [[4.0, 5.0, 9.0]])

    def test_broadcast_to_different_batch_size(self):
        cache = ActivationCache()
        cache.store("logits", rand(self.rng, 7, 3))
        cache.advance()
        nets = {"logits": perturbed_linear(self.rng, 3, 3)}
        z = rand(self.rng, 2, 3)
        out = posttext_inhibit(z, z, self.gate, nets, cache)
        term = posttext_term(nets, cache).data
        expected = z.data * sigmoid_ld(linear_ld(self.gate, z.data) + term)
        np.testing.assert_allclose(out.data, expected.astype(F64), atol=1e-12)

    def test_missing_tap_after_first_iteration(self):
        cache = ActivationCache()
        cache.advance()
        with pytest.raises(CacheStateError):
            posttext_term({"logits": perturbed_linear(self.rng, 3, 3)}, cache)


class TestGlobal:
    def setup_method(self):
        self.rng = np.random.default_rng(30)
        self.gate = perturbed_linear(self.rng, 8, 8)
        self.z = rand(self.rng, 4, 8)
        self.pre = {"p1": perturbed_linear(self.rng, 6, 8), "p2": perturbed_linear(self.rng, 5, 8)}
        self.pre_taps = {"p1": rand(self.rng, 4, 6), "p2": rand(self.rng, 4, 5)}
        self.post = {"logits": perturbed_linear(self.rng, 10, 8), "router": perturbed_linear(self.rng, 5, 8)}
        self.cache = ActivationCache()
        self.cache.store("logits", rand(self.rng, 6, 10))
        self.cache.store("router", rand(self.rng, 6, 5))
        self.cache.advance()

    def test_no_taps_is_one_layer(self):
        a = global_inhibit(self.z, self.z, self.gate, {}, {}, {}, self.cache)
        assert a.data.tobytes() == one_layer_inhibit(self.z, self.z, self.gate).data.tobytes()

    def test_no_post_taps_is_pretext(self):
        a = global_inhibit(self.z, self.z, self.gate, self.pre, self.pre_taps, {}, self.cache)
        b = pretext_inhibit(self.z, self.z, self.gate, self.pre, self.pre_taps)
        assert a.data.tobytes() == b.data.tobytes()

    def test_against_straight_line(self):
        out = global_inhibit(self.z, self.z, self.gate, self.pre, self.pre_taps, self.post, self.cache).data
        arg = linear_ld(self.gate, self.z.data)
        for name, net in self.pre.items():
            arg = arg + linear_ld(net, self.pre_taps[name].data)
        for name, net in self.post.items():
            arg = arg + linear_ld(net, self.cache.read(name).data).max(axis=0, keepdims=True)
        expected = self.z.data.astype(np.longdouble) * sigmoid_ld(arg)
        np.testing.assert_allclose(out, expected.astype(F64), atol=1e-6, rtol=0)

    def test_gradient_all_parameters(self):
        w = self.rng.standard_normal((4, 8))
        z = rand(self.rng, 4, 8, requires_grad=True)
        params = [z] + self.gate.parameters()
        for nets in (self.pre, self.post):
            params += [p for n in nets.values() for p in n.parameters()]
        fn = lambda: random_projection_loss(
            global_inhibit(z, z, self.gate, self.pre, self.pre_taps, self.post, self.cache), w)
        assert max_rel_error(fn, params) < 1e-4


class TestInvariants:
    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["glu", "pretext", "posttext", "global"]), st.integers(0, 10_000))
    def test_contraction(self, mode, seed):
        rng = np.random.default_rng(seed)
        unit = InhibitionUnit(mode, rng, dim=6, pre_tap_dims={"a": 4}, post_tap_dims={"b": 3}, dtype=F64)
        unit.record({"b": rand(rng, 3, 3)})
        z = rand(rng, 5, 6)
        out = unit(z, z, {"a": rand(rng, 5, 4)}).data
        nz = z.data != 0
        assert np.all(np.abs(out[nz]) < np.abs(z.data[nz]))
        assert np.all((unit.last_gate > 0) & (unit.last_gate < 1))

    def test_cache_lag_and_broadcast(self):
        rng = np.random.default_rng(5)
        unit = InhibitionUnit("posttext", rng, dim=6, post_tap_dims={"b": 3}, dtype=F64)
        unit.record({"b": rand(rng, 4, 3)})
        term_before = posttext_term(unit.posttext_nets, unit.cache).data.copy()
        z1, z2 = rand(rng, 5, 6), rand(rng, 2, 6)
        unit(z1, z1)
        unit(z2, z2)
        term_after = posttext_term(unit.posttext_nets, unit.cache).data
        assert term_before.tobytes() == term_after.tobytes()
        assert term_after.shape == (1, 6)

    def test_detachment_of_previous_loss(self):
        rng = np.random.default_rng(6)
        unit = InhibitionUnit("posttext", rng, dim=4, post_tap_dims={"b": 3}, dtype=F64)
        producer = Linear(4, 3, rng, dtype=F64)
        x0 = rand(rng, 5, 4)
        later = producer(x0)
        unit.record({"b": later})
        ag.backward(later.sum())  # iteration k-1 loss
        for p in unit.posttext_nets["b"].parameters():
            assert p.grad is None

    def test_reduction_chain_through_unit(self):
        rng = np.random.default_rng(7)
        dims = {"pre_tap_dims": {"a": 4}, "post_tap_dims": {"b": 3}}
        g = InhibitionUnit("global", np.random.default_rng(1), dim=6, dtype=F64, **dims)
        p = InhibitionUnit("pretext", np.random.default_rng(1), dim=6, dtype=F64, **dims)
        o = InhibitionUnit("glu", np.random.default_rng(1), dim=6, dtype=F64, **dims)
        p.gate.load_state_dict(g.gate.state_dict())
        p.pretext_nets["a"].load_state_dict(g.pretext_nets["a"].state_dict())
        o.gate.load_state_dict(g.gate.state_dict())
        for net in g.posttext_nets.values():
            net.weight.data[:] = 0
            net.bias.data[:] = 0
        g.record({"b": rand(rng, 3, 3)})
        z, taps = rand(rng, 5, 6), {"a": rand(rng, 5, 4)}
        assert g(z, z, taps).data.tobytes() == p(z, z, taps).data.tobytes()
        p.pretext_nets["a"].weight.data[:] = 0
        p.pretext_nets["a"].bias.data[:] = 0
        assert p(z, z, taps).data.tobytes() == o(z, z, taps).data.tobytes()


class TestUnitConfig:
    def test_aliases(self):
        assert canonical_mode("random") == "dropout"
        assert canonical_mode("one_layer") == "glu"
        with pytest.raises(InhibitionConfigError):
            canonical_mode("bogus")

    def test_record_activations(self):
        model = MixedNumbersNet(ModelConfig(inhibition="glu"), np.random.default_rng(0))
        model.inhibition.gate.weight.data[:] = 0
        images = Tensor(np.random.default_rng(1).random((3, 1, 28, 28)).astype(np.float32))
        np.testing.assert_array_equal(record_inhibition_activations(model, images), 0.5)

    @pytest.mark.parametrize("mode", ["none", "dropout"])
    def test_record_requires_gate(self, mode):
        model = MixedNumbersNet(ModelConfig(inhibition=mode), np.random.default_rng(0))
        with pytest.raises(NoGateError):
            record_inhibition_activations(model, Tensor(np.zeros((1, 1, 28, 28))))
