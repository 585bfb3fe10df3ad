"""Normalization family tests against direct-formula oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsnorm.autodiff import Parameter, Tensor, grad_check
from dsnorm.errors import (
    ConfigurationError,
    ContractViolationError,
    RoutingError,
)
from dsnorm.norms import (
    BatchNorm,
    DomainSpecificNorm,
    InstanceBatchNorm,
    InstanceNorm,
    NormState,
    batch_norm,
    compute_instance_stats,
    instance_norm,
    make_norm_layer,
    update_running_stats,
)


def bn_oracle(x, gamma, beta, eps):
    """Training-mode batch norm by the direct per-channel formula."""
    mu = x.mean(axis=(0, 2), keepdims=True)
    var = x.var(axis=(0, 2), keepdims=True)
    return gamma[None, :, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None]


def in_oracle(x, gamma, beta, eps):
    mu = x.mean(axis=2, keepdims=True)
    var = x.var(axis=2, keepdims=True)
    return gamma[None, :, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None]


def fresh_state(channels, eps=1e-5, momentum=0.1):
    return NormState(channels, eps=eps, momentum=momentum)


class TestBatchNorm:
    def test_four_point_example(self):
        # mean 4, biased var 5 -> (x - 4) / sqrt(5)
        x = Tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 4))
        out = batch_norm(x, fresh_state(1, eps=0.0), training=True)
        expected = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5.0)
        np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-12)
        np.testing.assert_allclose(
            out.data[0, 0], [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865],
            atol=1e-9,
        )

    def test_constant_input_gives_beta(self):
        state = fresh_state(2)
        state.beta.data[...] = [3.0, -1.0]
        x = Tensor(np.full((2, 2, 5), 7.7))
        out = batch_norm(x, state, training=True)
        np.testing.assert_allclose(out.data[:, 0], 3.0, atol=1e-9)
        np.testing.assert_allclose(out.data[:, 1], -1.0, atol=1e-9)

    def test_eval_unit_running_stats_identity(self):
        state = fresh_state(3, eps=0.0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        out = batch_norm(x, state, training=False)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(100)
        for _ in range(100):
            b, c, t = rng.integers(1, 5), rng.integers(1, 6), rng.integers(2, 12)
            x = rng.normal(size=(b, c, t)) * rng.uniform(0.5, 3.0)
            state = fresh_state(c)
            state.gamma.data[...] = rng.normal(size=c)
            state.beta.data[...] = rng.normal(size=c)
            out = batch_norm(Tensor(x), state, training=True)
            expected = bn_oracle(x, state.gamma.data, state.beta.data, state.eps)
            np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_normalized_moments(self):
        x = Tensor(np.random.default_rng(5).normal(2.0, 3.0, size=(4, 3, 16)))
        out = batch_norm(x, fresh_state(3, eps=0.0), training=True).data
        assert np.abs(out.mean(axis=(0, 2))).max() <= 1e-10
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-9)

    def test_degenerate_batch(self):
        with pytest.raises(ContractViolationError):
            batch_norm(Tensor(np.zeros((1, 2, 1))), fresh_state(2), training=True)

    def test_updates_running_stats(self):
        state = fresh_state(1, momentum=0.1)
        x = Tensor(np.array([10.0, 10.0]).reshape(1, 1, 2))
        batch_norm(x, state, training=True)
        np.testing.assert_allclose(state.running_mean, [1.0])
        assert float(state.batches_seen) == 1.0

    def test_eval_does_not_touch_running_stats(self):
        state = fresh_state(2)
        before = (state.running_mean.copy(), state.running_var.copy())
        batch_norm(Tensor(np.random.default_rng(1).normal(size=(2, 2, 6))),
                   state, training=False)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])


class TestInstanceNorm:
    def test_two_point_example(self):
        g, b = Parameter(np.ones(1)), Parameter(np.zeros(1))
        out = instance_norm(Tensor(np.array([[[2.0, 4.0]]])), g, b, eps=0.0)
        np.testing.assert_allclose(out.data, [[[-1.0, 1.0]]], atol=1e-12)

    def test_affine_shift_invariance(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=(1, 3, 10))
        shifted = 2.5 * base + 7.0
        g, b = Parameter(np.ones(3)), Parameter(np.zeros(3))
        x = Tensor(np.concatenate([base, shifted]))
        out = instance_norm(x, g, b, eps=0.0).data
        np.testing.assert_allclose(out[0], out[1], atol=1e-9)

    def test_output_moments(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(1.0, 4.0, size=(3, 4, 32)))
        g, b = Parameter(np.ones(4)), Parameter(np.zeros(4))
        out = instance_norm(x, g, b, eps=0.0).data
        assert np.abs(out.mean(axis=2)).max() <= 1e-12
        np.testing.assert_allclose(out.var(axis=2), 1.0, atol=1e-9)

    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(200)
        for _ in range(100):
            b, c, t = rng.integers(1, 5), rng.integers(1, 6), rng.integers(2, 12)
            x = rng.normal(size=(b, c, t))
            g = Parameter(rng.normal(size=c))
            be = Parameter(rng.normal(size=c))
            out = instance_norm(Tensor(x), g, be, eps=1e-5)
            np.testing.assert_allclose(out.data, in_oracle(x, g.data, be.data, 1e-5),
                                       atol=1e-10)

    def test_single_timestep_rejected(self):
        g, b = Parameter(np.ones(1)), Parameter(np.zeros(1))
        with pytest.raises(ContractViolationError):
            instance_norm(Tensor(np.zeros((1, 1, 1))), g, b, eps=1e-5)

    @given(st.floats(0.1, 10.0), st.floats(-20.0, 20.0))
    @settings(max_examples=60)
    def test_affine_invariance_property(self, a, b):
        base = np.random.default_rng(4).normal(size=(1, 2, 8))
        g, be = Parameter(np.ones(2)), Parameter(np.zeros(2))
        ref = instance_norm(Tensor(base), g, be, eps=0.0).data
        out = instance_norm(Tensor(a * base + b), g, be, eps=0.0).data
        np.testing.assert_allclose(out, ref, atol=1e-9)


class TestInstanceBatchNorm:
    def test_two_channel_split(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 2, 8))
        layer = InstanceBatchNorm(2)
        out = layer(Tensor(x)).data
        in_part = in_oracle(x[:, :1], np.ones(1), np.zeros(1), layer.instance.eps)
        bn_part = bn_oracle(x[:, 1:], np.ones(1), np.zeros(1), layer.batch.state.eps)
        np.testing.assert_allclose(out[:, :1], in_part, atol=1e-12)
        np.testing.assert_allclose(out[:, 1:], bn_part, atol=1e-12)

    def test_four_channel_split(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 10))
        layer = InstanceBatchNorm(4)
        out = layer(Tensor(x)).data
        np.testing.assert_allclose(
            out[:, :2], in_oracle(x[:, :2], np.ones(2), np.zeros(2), 1e-5), atol=1e-12
        )
        np.testing.assert_allclose(
            out[:, 2:], bn_oracle(x[:, 2:], np.ones(2), np.zeros(2), 1e-5), atol=1e-12
        )

    def test_constant_input_gives_betas(self):
        layer = InstanceBatchNorm(4)
        layer.instance.beta.data[...] = [1.0, 2.0]
        layer.batch.state.beta.data[...] = [3.0, 4.0]
        out = layer(Tensor(np.full((2, 4, 6), 5.0))).data
        for c, expected in enumerate([1.0, 2.0, 3.0, 4.0]):
            np.testing.assert_allclose(out[:, c], expected, atol=1e-9)

    def test_single_channel_rejected(self):
        with pytest.raises(ConfigurationError):
            InstanceBatchNorm(1)


def make_bank(kind, channels=2, domains=("d0", "d1")):
    return DomainSpecificNorm(kind, channels, tuple(domains))


class TestDomainSpecificBatchNorm:
    def test_single_domain_collapses_to_bn(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 2, 6))
        bank = make_bank("dsbn", domains=("only",))
        plain = BatchNorm(2)
        from dsnorm.nn import ForwardContext

        out_bank = bank(Tensor(x), ForwardContext(domain="only")).data
        out_plain = plain(Tensor(x)).data
        np.testing.assert_array_equal(out_bank, out_plain)
        np.testing.assert_array_equal(bank.branches[0].running_mean,
                                      plain.state.running_mean)

    def test_running_means_track_domain_means(self):
        from dsnorm.nn import ForwardContext

        rng = np.random.default_rng(9)
        bank = make_bank("dsbn", channels=1)
        for _ in range(200):
            a = rng.normal(2.0, 0.1, size=(8, 1, 4))
            b = rng.normal(-1.0, 0.1, size=(8, 1, 4))
            bank(Tensor(a), ForwardContext(domain="d0"))
            bank(Tensor(b), ForwardContext(domain="d1"))
        assert abs(float(bank.branches[0].running_mean[0]) - 2.0) / 2.0 < 0.05
        assert abs(float(bank.branches[1].running_mean[0]) + 1.0) / 1.0 < 0.05

    def test_branch_isolation(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsbn")
        other = bank.branches[1]
        before = (other.running_mean.copy(), other.running_var.copy(),
                  other.gamma.data.copy())
        x = Tensor(np.random.default_rng(10).normal(size=(4, 2, 6)))
        bank(x, ForwardContext(domain="d0"))
        np.testing.assert_array_equal(other.running_mean, before[0])
        np.testing.assert_array_equal(other.running_var, before[1])
        np.testing.assert_array_equal(other.gamma.data, before[2])

    def test_gradient_isolation(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsbn")
        x = Tensor(np.random.default_rng(11).normal(size=(2, 2, 5)))
        out = bank(x, ForwardContext(domain="d0"))
        out.sum().backward()
        assert np.any(bank.branches[0].gamma.grad != 0)
        np.testing.assert_array_equal(bank.branches[1].gamma.grad, np.zeros(2))
        np.testing.assert_array_equal(bank.branches[1].beta.grad, np.zeros(2))

    def test_unknown_domain_rejected(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsbn")
        with pytest.raises(RoutingError):
            bank(Tensor(np.zeros((1, 2, 4))), ForwardContext(domain="mystery"))

    def test_missing_domain_rejected(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsbn")
        with pytest.raises(RoutingError):
            bank(Tensor(np.zeros((1, 2, 4))), ForwardContext())


class TestDomainSpecificInstanceNorm:
    def test_single_domain_collapses_to_in(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 7))
        bank = DomainSpecificNorm("dsin", 3, ("only",))
        from dsnorm.nn import ForwardContext

        out = bank(Tensor(x), ForwardContext(domain="only")).data
        g, b = Parameter(np.ones(3)), Parameter(np.zeros(3))
        np.testing.assert_array_equal(out, instance_norm(Tensor(x), g, b, 1e-5).data)

    def test_fresh_branches_agree(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsin", channels=3)
        x = Tensor(np.random.default_rng(13).normal(size=(1, 3, 9)))
        out0 = bank(x, ForwardContext(domain="d0")).data
        out1 = bank(x, ForwardContext(domain="d1")).data
        np.testing.assert_array_equal(out0, out1)

    def test_branches_differ_by_affine_map_only(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dsin", channels=2)
        bank.branches[0].gamma.data[...] = [2.0, 0.5]
        bank.branches[0].beta.data[...] = [1.0, -1.0]
        bank.branches[1].gamma.data[...] = [-1.0, 3.0]
        bank.branches[1].beta.data[...] = [0.5, 2.0]
        x = Tensor(np.random.default_rng(14).normal(size=(2, 2, 8)))
        out0 = bank(x, ForwardContext(domain="d0")).data
        out1 = bank(x, ForwardContext(domain="d1")).data
        # both are per-channel affine images of the same normalized features
        xhat = (out0 - np.array([1.0, -1.0])[None, :, None]) / \
            np.array([2.0, 0.5])[None, :, None]
        expected = np.array([-1.0, 3.0])[None, :, None] * xhat + \
            np.array([0.5, 2.0])[None, :, None]
        np.testing.assert_allclose(out1, expected, atol=1e-12)


class TestDomainSpecificOptimizedNorm:
    def setup_method(self):
        from dsnorm.nn import ForwardContext

        self.ctx = ForwardContext(domain="d0")
        self.rng = np.random.default_rng(15)

    def _banks(self):
        dson = make_bank("dson", channels=2)
        dsbn = make_bank("dsbn", channels=2)
        dsin = make_bank("dsin", channels=2)
        return dson, dsbn, dsin

    def test_pure_bn_endpoint(self):
        dson, dsbn, _ = self._banks()
        dson.branches[0].set_mix_weight(1.0)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        out = dson(x, self.ctx).data
        expected = dsbn(x, self.ctx).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_pure_in_endpoint(self):
        dson, _, dsin = self._banks()
        dson.branches[0].set_mix_weight(0.0)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        out = dson(x, self.ctx).data
        expected = dsin(x, self.ctx).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_midpoint(self):
        dson, dsbn, dsin = self._banks()
        dson.branches[0].set_mix_weight(0.5)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        out = dson(x, self.ctx).data
        bn_out = dsbn(x, self.ctx).data
        in_out = dsin(x, self.ctx).data
        np.testing.assert_allclose(out, 0.5 * bn_out + 0.5 * in_out, atol=1e-12)

    def test_convex_combination_bounds(self):
        dson, dsbn, dsin = self._banks()
        dson.branches[0].mix_raw.data[...] = 0.37
        x = Tensor(self.rng.normal(size=(3, 2, 8)))
        out = dson(x, self.ctx).data
        bn_out = dsbn(x, self.ctx).data
        in_out = dsin(x, self.ctx).data
        lo = np.minimum(bn_out, in_out) - 1e-12
        hi = np.maximum(bn_out, in_out) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_mix_weight_stays_in_unit_interval_under_training(self):
        from dsnorm.autodiff import Adam

        dson = make_bank("dson", channels=2)
        opt = Adam(dson.parameters(), lr=0.5)
        for step in range(20):
            x = Tensor(self.rng.normal(size=(2, 2, 6)))
            out = dson(x, self.ctx)
            opt.zero_grad()
            (out * out).sum().backward()
            opt.step()
            for branch in dson.branches:
                assert 0.0 <= branch.mix_weight() <= 1.0


class TestRunningStats:
    def test_direct_formula(self):
        state = fresh_state(1, momentum=0.1)
        update_running_stats(state, np.array([10.0]), np.array([1.0]))
        np.testing.assert_allclose(state.running_mean, [1.0])

    def test_full_replacement(self):
        state = fresh_state(2, momentum=1.0)
        update_running_stats(state, np.array([5.0, -3.0]), np.array([2.0, 4.0]))
        np.testing.assert_array_equal(state.running_mean, [5.0, -3.0])
        np.testing.assert_array_equal(state.running_var, [2.0, 4.0])

    def test_geometric_convergence(self):
        state = fresh_state(1, momentum=0.25)
        target = 8.0
        for k in range(1, 30):
            update_running_stats(state, np.array([target]), np.array([1.0]))
            expected_err = (1.0 - 0.25) ** k * target
            assert abs(float(state.running_mean[0]) - target) == pytest.approx(
                expected_err, rel=1e-9
            )

    def test_initial_state_invariants(self):
        state = fresh_state(3)
        np.testing.assert_array_equal(state.gamma.data, np.ones(3))
        np.testing.assert_array_equal(state.beta.data, np.zeros(3))
        np.testing.assert_array_equal(state.running_mean, np.zeros(3))
        np.testing.assert_array_equal(state.running_var, np.ones(3))
        assert float(state.batches_seen) == 0.0
        assert np.all(state.running_var >= 0)


class TestInstanceStats:
    def test_two_point(self):
        stats = compute_instance_stats(np.array([[[2.0, 4.0]]]))
        assert float(stats.mean[0]) == 3.0
        assert float(stats.std[0]) == 1.0

    def test_constant_channel(self):
        stats = compute_instance_stats(np.full((1, 2, 6), 3.3))
        np.testing.assert_allclose(stats.std, 0.0, atol=1e-12)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(1, 4, 20))
        stats = compute_instance_stats(x)
        for c in range(4):
            mean = sum(x[0, c]) / 20.0
            var = sum((v - mean) ** 2 for v in x[0, c]) / 20.0
            assert float(stats.mean[c]) == pytest.approx(mean, abs=1e-12)
            assert float(stats.std[c]) == pytest.approx(math.sqrt(var), abs=1e-12)

    def test_requires_single_instance(self):
        with pytest.raises(ContractViolationError):
            compute_instance_stats(np.zeros((2, 3, 4)))


class TestNormGradients:
    """Reverse-mode vs central differences for every normalization forward."""

    def setup_method(self):
        self.rng = np.random.default_rng(17)
        self.proj = self.rng.normal(size=(2, 2, 6))

    def test_bn_training_grads(self):
        state = fresh_state(2)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        fn = lambda t: (batch_norm(t, state, True) * self.proj).sum()
        assert grad_check(fn, x, h=1e-5) < 1e-4
        fn_g = lambda t: (batch_norm(x, state, True) * self.proj).sum()
        assert grad_check(fn_g, state.gamma, h=1e-5) < 1e-4
        assert grad_check(fn_g, state.beta, h=1e-5) < 1e-4

    def test_bn_eval_grads(self):
        state = fresh_state(2)
        state.running_mean[...] = self.rng.normal(size=2)
        state.running_var[...] = self.rng.uniform(0.5, 2.0, size=2)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        fn = lambda t: (batch_norm(t, state, False) * self.proj).sum()
        assert grad_check(fn, x, h=1e-5) < 1e-4

    def test_in_grads(self):
        g = Parameter(self.rng.normal(size=2))
        b = Parameter(self.rng.normal(size=2))
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        fn = lambda t: (instance_norm(t, g, b, 1e-5) * self.proj).sum()
        assert grad_check(fn, x, h=1e-5) < 1e-4
        fn_g = lambda t: (instance_norm(x, g, b, 1e-5) * self.proj).sum()
        assert grad_check(fn_g, g, h=1e-5) < 1e-4
        assert grad_check(fn_g, b, h=1e-5) < 1e-4

    def test_ibn_grads(self):
        layer = InstanceBatchNorm(2)
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        fn = lambda t: (layer(t) * self.proj).sum()
        assert grad_check(fn, x, h=1e-5) < 1e-4

    def test_dson_grads_including_mix(self):
        from dsnorm.nn import ForwardContext

        bank = make_bank("dson", channels=2)
        ctx = ForwardContext(domain="d1")
        x = Tensor(self.rng.normal(size=(2, 2, 6)))
        fn = lambda t: (bank(t, ctx) * self.proj).sum()
        assert grad_check(fn, x, h=1e-5) < 1e-4
        fn_m = lambda t: (bank(x, ctx) * self.proj).sum()
        assert grad_check(fn_m, bank.branches[1].mix_raw, h=1e-5) < 1e-4


class TestFactory:
    @pytest.mark.parametrize("kind,cls", [
        ("bn", BatchNorm), ("in", InstanceNorm), ("ibn", InstanceBatchNorm),
    ])
    def test_invariant_kinds(self, kind, cls):
        assert isinstance(make_norm_layer(kind, 4, None), cls)

    @pytest.mark.parametrize("kind", ["dsbn", "dsin", "dson"])
    def test_domain_specific_kinds(self, kind):
        layer = make_norm_layer(kind, 4, ("a", "b", "c"))
        assert isinstance(layer, DomainSpecificNorm)
        assert layer.num_domains == 3
        assert layer.domain_index == {"a": 0, "b": 1, "c": 2}

    def test_domain_specific_needs_domains(self):
        with pytest.raises(ConfigurationError):
            make_norm_layer("dsbn", 4, None)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            make_norm_layer("layernorm", 4, None)
