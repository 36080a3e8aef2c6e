import statistics
import time

import numpy as np
import pytest

from iahvae import tensor as T
from iahvae.inference import (InferenceConfig, InferenceError, complete_scale, context_before, infer,
                              refine_layer, refinement_objective, subset_grad, vanilla_grad)
from iahvae.model import GaussianParams, build_model
from iahvae.rng import Rng
from iahvae.spectral import scale_dofs
from iahvae.tensor import Tensor

from conftest import assert_grad_close, central_diff


def _setup(model, batch=2, seed=0):
    r = Rng(seed)
    x = r.normal((batch, model.config.resolution, model.config.resolution))
    lat = [r.normal((batch,) + l.latent_shape) for l in model.layers]
    return x, lat


def _subset_state(model, lat, l):
    ctx, _ = context_before(model, lat, l)
    k = model.layers[l].scale
    rest = [(m, lat[m]) for m in model.scale_layers[k] if m > l]
    return ctx, rest, k


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(mode="amortized", n_iter=3), dict(n_iter=-1), dict(step_size=0.0),
                                    dict(beta=-1.0), dict(loss="huber"), dict(mode="greedy")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            InferenceConfig(**kw)

    def test_defaults(self):
        assert InferenceConfig(mode="amortized").n_iter == 0
        c = InferenceConfig()
        assert (c.n_iter, c.step_size, c.beta, c.loss) == (25, 1e-3, 1.0, "l1")

    def test_per_layer_overrides(self):
        c = InferenceConfig(layer_beta={2: 0.5}, layer_n_iter={1: 3})
        assert c.beta_for(2) == 0.5 and c.beta_for(0) == 1.0
        assert c.steps_for(1) == 3 and c.steps_for(0) == 25


class TestObjective:
    def test_at_prior_mode(self):
        mu = Tensor(np.array([[[0.3], [-1.0]]]))
        ls = Tensor(np.array([[[0.2], [-0.5]]]))
        z = Tensor(mu.data.copy(), requires_grad=True)
        target = np.array([[1.0, 2.0]])
        J, nll, rec = refinement_objective(z, GaussianParams(mu, ls), target, target, 1.0)
        assert rec.data[0] == 0.0
        assert J.data[0] == pytest.approx(float(np.sum(ls.data + 0.5 * np.log(2 * np.pi))))
        T.backward(nll.sum())
        np.testing.assert_allclose(z.grad, 0.0, atol=1e-15)

    def test_beta_zero_is_prior_nll(self):
        p = GaussianParams.standard((1, 3, 1))
        z = Tensor(Rng(1).normal((1, 3, 1)))
        J, nll, _ = refinement_objective(z, p, np.ones((1, 4)), np.zeros((1, 4)), 0.0)
        assert J.data[0] == nll.data[0]

    @pytest.mark.parametrize("loss", ["l1", "l2"])
    def test_gradient_matches_finite_difference(self, random_model_8, loss):
        m = random_model_8
        x, lat = _setup(m, batch=1, seed=2)
        targets = scale_dofs(x, m.partition)
        with m.frozen():
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                with T.no_grad():
                    prior = m.prior_params(l, ctx)

                def f(v):
                    with T.no_grad():
                        pred = complete_scale(m, l, ctx, v, rest)
                        return refinement_objective(Tensor(v), prior, targets[k], pred, 1.0, loss)[0].data.sum()

                z = Tensor(lat[l], requires_grad=True)
                J = refinement_objective(z, prior, targets[k], complete_scale(m, l, ctx, z, rest), 1.0, loss)[0]
                T.backward(J.sum())
                assert_grad_close(z.grad, central_diff(f, lat[l]))


class TestRefineLayer:
    def test_standard_prior_no_guidance_shrinks(self, random_model_8):
        m = random_model_8
        x, lat = _setup(m, 1)
        cfg = InferenceConfig(beta=0.0, step_size=0.01)
        ctx, rest, k = _subset_state(m, lat, 2)
        prior = GaussianParams.standard(lat[2].shape)
        with m.frozen():
            z = refine_layer(m, 2, lat[2], ctx, prior, scale_dofs(x, m.partition)[k], rest, cfg)[0]
        np.testing.assert_allclose(z, lat[2] * (1 - 0.01), rtol=1e-13)

    def test_zero_step_is_no_op(self, random_model_8):
        m = random_model_8
        x, lat = _setup(m, 1)
        ctx, rest, k = _subset_state(m, lat, 3)
        with T.no_grad():
            prior = m.prior_params(3, ctx)
        with m.frozen():
            z = refine_layer(m, 3, lat[3], ctx, prior, scale_dofs(x, m.partition)[k], rest, InferenceConfig(),
                             step_size=0.0)[0]
        np.testing.assert_array_equal(z, lat[3])

    def test_prior_only_contracts_to_mean(self, random_model_8):
        m = random_model_8
        x = Rng(4).normal((2, 8, 8))
        res = infer(m, x, InferenceConfig(mode="iterative", n_iter=0), seed=1)
        lat = res.latents
        cfg = InferenceConfig(mode="iterative", beta=0.0, step_size=0.05)
        with m.frozen():
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                with T.no_grad():
                    prior = m.prior_params(l, ctx)
                z = lat[l]
                dist = np.abs(z - prior.mu.data).sum()
                for _ in range(5):
                    z = refine_layer(m, l, z, ctx, prior, scale_dofs(x, m.partition)[k], rest, cfg)[0]
                    new = np.abs(z - prior.mu.data).sum()
                    assert new < dist
                    dist = new


class TestCompleteScale:
    def test_last_layer_applies_one_contribution_and_head(self, random_model_8):
        m = random_model_8
        _, lat = _setup(m, 1)
        l = m.scale_layers[2][-1]
        ctx, rest, _ = _subset_state(m, lat, l)
        assert rest == []
        before = dict(m.counters)
        with T.no_grad():
            complete_scale(m, l, ctx, lat[l], rest)
        assert m.counters["contribute"] - before.get("contribute", 0) == 1
        assert m.counters["head"] - before.get("head", 0) == 1

    def test_matches_full_decoder(self, random_model_8):
        m = random_model_8
        _, lat = _setup(m, 2)
        with T.no_grad():
            dofs, _ = m.decode(lat)
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                np.testing.assert_allclose(complete_scale(m, l, ctx, lat[l], rest).data, dofs[k].data, rtol=1e-12)


class TestGradients:
    def test_subset_matches_finite_difference_every_layer(self, random_model_16):
        m = random_model_16
        x, lat = _setup(m, 1, seed=5)
        targets = scale_dofs(x, m.partition)
        with m.frozen():
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                g = subset_grad(m, l, ctx, lat[l], rest, targets[k], loss="l2")

                def f(v):
                    with T.no_grad():
                        pred = complete_scale(m, l, ctx, v, rest)
                    return float(((pred.data - targets[k]) ** 2).sum())

                idx = np.arange(min(6, lat[l].size))
                num = np.array([central_diff(lambda s, i=i: f(_bump(lat[l], i, s)), np.zeros(1))[0] for i in idx])
                assert_grad_close(g.reshape(-1)[idx], num)

    def test_restricted_vanilla_equals_subset(self, random_model_16):
        m = random_model_16
        x, lat = _setup(m, 2, seed=6)
        targets = scale_dofs(x, m.partition)
        with m.frozen():
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                gs = subset_grad(m, l, ctx, lat[l], rest, targets[k])
                gv = vanilla_grad(m, l, lat, x, restrict=True)
                assert np.abs(gs - gv).max() <= 1e-8 * max(1.0, np.abs(gs).max())

    def test_vanilla_evaluation_count(self, random_model_16):
        m = random_model_16
        x, lat = _setup(m, 1)
        L = m.n_layers
        with m.frozen():
            for l in range(L):
                state = context_before(m, lat, l)
                before = m.counters["contribute"]
                vanilla_grad(m, l, lat, x, restrict=False, state=state)
                assert m.counters["contribute"] - before == L - l  # layers l..L-1

    def test_subset_evaluation_count(self, random_model_16):
        m = random_model_16
        x, lat = _setup(m, 1)
        targets = scale_dofs(x, m.partition)
        with m.frozen():
            for l in range(m.n_layers):
                ctx, rest, k = _subset_state(m, lat, l)
                before = m.counters["contribute"]
                subset_grad(m, l, ctx, lat[l], rest, targets[k])
                assert m.counters["contribute"] - before == len(rest) + 1


def _bump(z, i, s):
    out = z.copy()
    out.reshape(-1)[i] += s[0]
    return out


class TestInfer:
    def test_hybrid_zero_steps_is_amortized(self, random_model_16):
        x = Rng(7).normal((3, 16, 16))
        a = infer(random_model_16, x, InferenceConfig(mode="amortized"), seed=11)
        h = infer(random_model_16, x, InferenceConfig(mode="hybrid", n_iter=0), seed=11)
        assert a.x_hat.tobytes() == h.x_hat.tobytes()
        for za, zh in zip(a.latents, h.latents):
            assert za.tobytes() == zh.tobytes()

    def test_trace_length(self, random_model_8):
        x = Rng(8).normal((2, 8, 8))
        res = infer(random_model_8, x, InferenceConfig(mode="hybrid", n_iter=3), seed=0)
        assert len(res.trace.entries) == 3 * random_model_8.n_layers
        for l in range(random_model_8.n_layers):
            assert [e.iteration for e in res.trace.for_layer(l)] == [0, 1, 2]
            assert res.trace.objectives(l).shape == (3, 2)

    def test_trace_csv(self, random_model_8, tmp_path):
        res = infer(random_model_8, Rng(8).normal((1, 8, 8)), InferenceConfig(n_iter=2), seed=0)
        p = tmp_path / "trace.csv"
        res.trace.write_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0] == "layer,scale,iteration,objective,prior_nll,recon_loss,time_s"
        assert len(lines) == 1 + 2 * random_model_8.n_layers

    def test_deterministic(self, random_model_8):
        x = Rng(9).normal((2, 8, 8))
        for mode in ("hybrid", "iterative"):
            a = infer(random_model_8, x, InferenceConfig(mode=mode, n_iter=2), seed=4)
            b = infer(random_model_8, x, InferenceConfig(mode=mode, n_iter=2), seed=4)
            assert a.x_hat.tobytes() == b.x_hat.tobytes()

    def test_batch_layout_does_not_change_results(self, random_model_8):
        x = Rng(9).normal((4, 8, 8))
        full = infer(random_model_8, x, InferenceConfig(n_iter=2), seed=4)
        part = infer(random_model_8, x[2:], InferenceConfig(n_iter=2), seed=4, streams=[2, 3])
        np.testing.assert_allclose(full.x_hat[2:], part.x_hat, rtol=1e-12, atol=1e-12)

    def test_iterative_zero_steps_is_prior_sample(self, random_model_8):
        x = Rng(10).normal((1, 8, 8))
        a = infer(random_model_8, x, InferenceConfig(mode="iterative", n_iter=0), seed=1)
        b = infer(random_model_8, x, InferenceConfig(mode="iterative", n_iter=0), seed=2)
        c = infer(random_model_8, 5.0 * x, InferenceConfig(mode="iterative", n_iter=0), seed=1)
        assert not np.array_equal(a.x_hat, b.x_hat)
        np.testing.assert_array_equal(a.x_hat, c.x_hat)

    def test_resolution_mismatch(self, random_model_8):
        with pytest.raises(InferenceError):
            infer(random_model_8, np.zeros((1, 16, 16)), InferenceConfig())

    def test_bad_cutoff(self, random_model_8):
        with pytest.raises(InferenceError):
            infer(random_model_8, np.zeros((1, 8, 8)), InferenceConfig(cutoff_scale=9))

    def test_cutoff_skips_refinement_above(self, random_model_8):
        res = infer(random_model_8, Rng(1).normal((1, 8, 8)), InferenceConfig(n_iter=2, cutoff_scale=1), seed=0)
        assert {e.scale for e in res.trace.entries} == {0, 1}

    def test_parameters_untouched(self, random_model_8):
        before = {k: v.copy() for k, v in random_model_8.state().items()}
        infer(random_model_8, Rng(2).normal((1, 8, 8)), InferenceConfig(n_iter=2))
        for k, v in random_model_8.state().items():
            np.testing.assert_array_equal(v, before[k])
        assert all(p.grad is None for p in random_model_8.parameters())


def test_step_cost_independent_of_depth_above_scale():
    """Per-step time at scale 2 barely changes when scales are added above it."""
    small = build_model(resolution=4, layers_per_scale=2, zero_init=False, seed=1)
    big = build_model(resolution=32, layers_per_scale=2, zero_init=False, seed=1)
    assert big.n_layers == 2 * small.n_layers

    def stepper(m):
        x, lat = _setup(m, 4, seed=3)
        l = m.scale_layers[2][0]
        ctx, rest, k = _subset_state(m, lat, l)
        target = scale_dofs(x, m.partition)[k]
        with T.no_grad():
            prior = m.prior_params(l, ctx)
        cfg = InferenceConfig()

        def run():
            with m.frozen():
                t0 = time.perf_counter()
                refine_layer(m, l, lat[l], ctx, prior, target, rest, cfg)
                return time.perf_counter() - t0
        return run

    run_small, run_big = stepper(small), stepper(big)
    times_small, times_big = [], []
    for _ in range(60):  # interleaved so background load hits both alike
        times_small.append(run_small())
        times_big.append(run_big())
    ts, tb = statistics.median(times_small[5:]), statistics.median(times_big[5:])
    assert abs(tb - ts) / ts < 0.2
