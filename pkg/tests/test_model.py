import numpy as np
import pytest

from layeredit.errors import VelocityRequestError
from layeredit.model import (
    BI_STREAM,
    TARGET_ONLY,
    AnalyticModel,
    ToyTransformer,
    VelocityRequest,
    cfg_velocity,
    embed_prompt,
)


def request(rng, model, n=6, grid=(2, 3), mode=BI_STREAM, text="a cat", tau=None):
    d = model.in_dim if hasattr(model, "in_dim") else model.dim
    ctx = rng.standard_normal((n, d)) if mode == BI_STREAM else None
    return VelocityRequest(
        rng.standard_normal((n, d)),
        model.embed(text),
        float(rng.uniform()) if tau is None else tau,
        ctx,
        mode,
        grid,
    )


class TestEmbedding:
    def test_deterministic(self):
        a, b = embed_prompt("a cat", 0), embed_prompt("a cat", 0)
        assert np.array_equal(a.tokens, b.tokens)

    def test_distinct_prompts(self):
        assert np.abs(embed_prompt("a cat", 0).tokens - embed_prompt("a dog", 0).tokens).max() > 1e-3

    def test_seed_matters(self):
        assert not np.array_equal(embed_prompt("a cat", 0).tokens, embed_prompt("a cat", 1).tokens)

    def test_unconditional(self):
        e = embed_prompt("", 0)
        assert e.is_unconditional
        assert np.array_equal(e.tokens, embed_prompt(None, 0).tokens)

    def test_unit_rows(self):
        e = embed_prompt("x", 3, width=16, n_tokens=8)
        assert e.tokens.shape == (8, 16)
        assert np.allclose(np.linalg.norm(e.tokens, axis=1), 1.0)


class TestRequest:
    def test_bi_stream_needs_context(self):
        with pytest.raises(VelocityRequestError):
            VelocityRequest(np.zeros((2, 4)), embed_prompt("a"), 0.5, None, BI_STREAM)

    def test_target_only_forbids_context(self):
        with pytest.raises(VelocityRequestError):
            VelocityRequest(np.zeros((2, 4)), embed_prompt("a"), 0.5, np.zeros((2, 4)), TARGET_ONLY)

    def test_tau_range(self):
        with pytest.raises(VelocityRequestError):
            VelocityRequest(np.zeros((2, 4)), embed_prompt("a"), 1.5)


class TestToyTransformer:
    def test_constant_network(self, rng):
        model = ToyTransformer(8, seed=1).zero_weights(out_bias=np.arange(8.0))
        for mode in (BI_STREAM, TARGET_ONLY):
            v = model.forward(request(rng, model, mode=mode))
            assert np.array_equal(v, np.broadcast_to(np.arange(8.0), v.shape))

    def test_output_shape(self, rng):
        model = ToyTransformer(8, seed=1)
        assert model.forward(request(rng, model)).shape == (12, 8)
        assert model.forward(request(rng, model, mode=TARGET_ONLY)).shape == (6, 8)

    def test_attention_rows_sum_to_one(self, rng):
        model = ToyTransformer(8, seed=2)
        _, blocks = model.forward(request(rng, model), capture=True)
        assert len(blocks) == model.n_blocks * model.heads
        for b in blocks:
            assert np.abs(b.weights.sum(axis=1) - 1.0).max() < 1e-6
            assert b.A_tt.shape == (6, 6) and b.A_tc.shape == (6, 6)
            assert b.A_ct.shape == (6, 6) and b.A_cc.shape == (6, 6)

    def test_masked_attention_has_no_context_weight(self, rng):
        model = ToyTransformer(8, seed=2)
        _, blocks = model.forward(request(rng, model), mask_context=True, capture=True)
        for b in blocks:
            assert np.all(b.A_tc == 0.0) and np.all(b.A_cc == 0.0)

    def test_masked_equals_target_only(self, rng):
        model = ToyTransformer(8, seed=3)
        for _ in range(20):
            req = request(rng, model)
            masked = model.forward(req, mask_context=True)[:6]
            alone = model.forward(VelocityRequest(req.target_tokens, req.prompt, req.tau, grid_dims=(2, 3)))
            assert np.abs(masked - alone).max() < 1e-6

    def test_context_is_read(self, rng):
        model = ToyTransformer(8, seed=4)
        req = request(rng, model)
        perm = VelocityRequest(
            req.target_tokens, req.prompt, req.tau, req.context_tokens[::-1].copy(), BI_STREAM, (2, 3)
        )
        diff = np.abs(model.forward(req)[:6] - model.forward(perm)[:6]).max()
        assert diff > 1e-6

    def test_context_not_mutated(self, rng):
        model = ToyTransformer(8, seed=4)
        req = request(rng, model)
        before = req.context_tokens.copy()
        model.forward(req)
        model.forward(req, mask_context=True)
        assert np.array_equal(before, req.context_tokens)

    def test_deterministic(self, rng):
        req = request(rng, ToyTransformer(8, seed=5))
        a = ToyTransformer(8, seed=5).forward(req)
        b = ToyTransformer(8, seed=5).forward(req)
        assert np.array_equal(a, b)

    def test_timestep_matters(self, rng):
        model = ToyTransformer(8, seed=6)
        req = request(rng, model, tau=0.2)
        from dataclasses import replace

        assert np.abs(model.forward(req) - model.forward(replace(req, tau=0.8))).max() > 1e-6

    def test_width_check(self, rng):
        model = ToyTransformer(8)
        with pytest.raises(VelocityRequestError):
            model.forward(VelocityRequest(np.zeros((6, 5)), model.embed("a"), 0.5, grid_dims=(2, 3)))


class TestAnalytic:
    def test_zero(self, rng):
        model = AnalyticModel(4, overrides={"z": (0.0, 0.0)})
        v = model.forward(request(rng, model, text="z"))
        assert np.array_equal(v, np.zeros((6, 4)))

    def test_constant(self, rng):
        delta = np.array([0.1, -0.2, 0.3, 0.0])
        model = AnalyticModel(4, overrides={"d": (0.0, delta)})
        v = model.forward(request(rng, model, text="d"))
        assert np.array_equal(v, np.broadcast_to(delta, (6, 4)))

    def test_same_prompt_same_coefficients(self):
        model = AnalyticModel(4, seed=2)
        A1, b1 = model.coefficients(model.embed("a cat"))
        A2, b2 = model.coefficients(model.embed("a cat"))
        A3, _ = model.coefficients(model.embed("a dog"))
        assert np.array_equal(A1, A2) and np.array_equal(b1, b2)
        assert not np.array_equal(A1, A3)

    def test_ignores_context(self, rng):
        model = AnalyticModel(4)
        req = request(rng, model)
        v = model.forward(req)
        alone = model.forward(VelocityRequest(req.target_tokens, req.prompt, req.tau))
        assert np.array_equal(v, alone)


class TestCfg:
    @pytest.fixture
    def setup(self, rng):
        model = AnalyticModel(4, seed=1)
        return model, request(rng, model, mode=TARGET_ONLY)

    def test_scale_one(self, setup):
        model, req = setup
        assert np.array_equal(cfg_velocity(model, req, 1.0), model.forward(req))

    def test_scale_zero(self, setup):
        from dataclasses import replace

        model, req = setup
        uncond = model.forward(replace(req, prompt=model.unconditional()))
        assert np.array_equal(cfg_velocity(model, req, 0.0), uncond)

    def test_scale_two_linear(self, setup):
        model, req = setup
        A_c, b_c = model.coefficients(req.prompt)
        A_u, b_u = model.coefficients(model.unconditional())
        z = req.target_tokens
        expected = 2 * (z @ A_c.T + b_c) - (z @ A_u.T + b_u)
        assert np.abs(cfg_velocity(model, req, 2.0) - expected).max() < 1e-12

    def test_negative_scale(self, setup):
        model, req = setup
        with pytest.raises(ValueError):
            cfg_velocity(model, req, -0.5)
