import numpy as np
import pytest
import torch
import torch.nn as nn

from mvc.diffusion import GuidanceConfig, add_noise, build_schedule
from mvc.distill import (
    ANNEAL_END,
    ANNEAL_START,
    AnnealRange,
    GuidanceContext,
    HybridWeights,
    anneal_range,
    hybrid_combine,
    hybrid_step,
    nfsd_gradient,
    param_gradients,
    sample_timestep,
    sds_gradient,
    surrogate_loss,
    x0_recon_gradient,
)
from mvc.tokens import PromptTokens, negative_prompt

SCHED = build_schedule(1000, 1e-4, 0.02)
PROMPT = PromptTokens.from_text("small red sphere")


class OracleDenoiser:
    """Returns the exact noise that was mixed in (records it per call)."""

    def __init__(self):
        self.eps = None

    def __call__(self, z_t, t, prompt):
        return self.eps


class StubDenoiser:
    """Deterministic prompt-dependent prediction for identity checks."""

    def __call__(self, z_t, t, prompt):
        k = 1.0 + 0.1 * len(prompt.ids) + (0.05 if prompt.is_empty else 0.0)
        return torch.tanh(k * z_t)


def make_ctx(denoiser, scale=1.0, rescale=0.0, weight_fn=None):
    return GuidanceContext(
        denoise_fn=denoiser,
        prompt=PROMPT,
        schedule=SCHED,
        guidance=GuidanceConfig(scale=scale, rescale_factor=rescale),
        negative_prompt=negative_prompt(),
        weight_fn=weight_fn,
    )


class TestSdsGradient:
    def test_oracle_denoiser_gives_zero(self):
        oracle = OracleDenoiser()
        ctx = make_ctx(oracle, scale=1.0)
        x = torch.randn(3, 8, 8, dtype=torch.float64)
        eps = torch.randn(3, 8, 8, dtype=torch.float64)
        oracle.eps = eps
        g = sds_gradient(ctx, x, 500, eps)
        assert float(g.abs().max()) == 0.0

    def test_weight_doubles_gradient(self):
        x = torch.randn(3, 4, 4, dtype=torch.float64)
        eps = torch.randn(3, 4, 4, dtype=torch.float64)
        g1 = sds_gradient(make_ctx(StubDenoiser(), scale=2.0), x, 300, eps)
        g2 = sds_gradient(make_ctx(StubDenoiser(), scale=2.0, weight_fn=lambda t: 2.0), x, 300, eps)
        assert torch.allclose(g2, 2.0 * g1, rtol=1e-12)

    def test_out_of_range_timestep_rejected(self):
        ctx = make_ctx(StubDenoiser())
        x = torch.randn(1, 2, 2)
        with pytest.raises(ValueError, match="outside schedule"):
            sds_gradient(ctx, x, 0, torch.randn(1, 2, 2))
        with pytest.raises(ValueError, match="outside schedule"):
            sds_gradient(ctx, x, 1001, torch.randn(1, 2, 2))

    def test_surrogate_parameter_gradient_matches_finite_differences(self):
        # toy differentiable "renderer": theta (<= 50 params) -> 2 pixels
        torch.manual_seed(0)
        w1 = nn.Parameter(torch.randn(5, 6, dtype=torch.float64) * 0.4)
        w2 = nn.Parameter(torch.randn(2, 5, dtype=torch.float64) * 0.4)
        theta0 = torch.randn(6, dtype=torch.float64)

        def render(w1_, w2_):
            return (w2_ @ torch.tanh(w1_ @ theta0)).reshape(1, 2)

        ctx = make_ctx(StubDenoiser(), scale=3.0)
        eps = torch.randn(1, 2, dtype=torch.float64)
        t = 420

        x = render(w1, w2)
        g = sds_gradient(ctx, x, t, eps)
        target = (x - g).detach()  # frozen stop-gradient target
        loss = 0.5 * ((x - target) ** 2).sum()
        grads = torch.autograd.grad(loss, [w1, w2])

        h = 1e-6
        for p, ag in zip([w1, w2], grads):
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float((0.5 * ((render(w1, w2) - target) ** 2).sum()))
                flat[i] = orig - h
                down = float((0.5 * ((render(w1, w2) - target) ** 2).sum()))
                flat[i] = orig
                fd = (up - down) / (2 * h)
                assert float(ag.view(-1)[i]) == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_surrogate_loss_gradient_is_g(self):
        x = torch.randn(4, 4, requires_grad=True, dtype=torch.float64)
        g = torch.randn(4, 4, dtype=torch.float64)
        loss = surrogate_loss(x, g)
        (grad,) = torch.autograd.grad(loss, x)
        assert torch.allclose(grad, g, rtol=1e-12)


class TestX0ReconGradient:
    def test_oracle_denoiser_gives_zero(self):
        oracle = OracleDenoiser()
        ctx = make_ctx(oracle, scale=1.0, rescale=0.0)
        x = torch.randn(4, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn(4, 3, 8, 8, dtype=torch.float64)
        oracle.eps = eps
        g = x0_recon_gradient(ctx, x, 640, eps)
        assert float(g.abs().max()) < 1e-10

    def test_algebraic_identity_with_sds(self):
        # x0-reconstruction gradient (rescale 0) = SDS gradient (w=1) times
        # 2 sqrt(1 - alpha_bar) / sqrt(alpha_bar), for any shared denoiser
        rng = np.random.default_rng(1)
        for _ in range(20):
            t = int(rng.integers(1, 1001))
            x = torch.from_numpy(rng.standard_normal((4, 3, 6, 6)))
            eps = torch.from_numpy(rng.standard_normal((4, 3, 6, 6)))
            ctx = make_ctx(StubDenoiser(), scale=7.5, rescale=0.0)
            g_sds = sds_gradient(ctx, x, t, eps)
            g_rec = x0_recon_gradient(ctx, x, t, eps)
            ab = SCHED.alpha_bar_at(t)
            factor = 2.0 * np.sqrt(1.0 - ab) / np.sqrt(ab)
            assert torch.allclose(g_rec, factor * g_sds, rtol=1e-5)

    def test_four_view_shape_preserved(self):
        ctx = make_ctx(StubDenoiser(), scale=50.0, rescale=0.5)
        x = torch.randn(4, 3, 8, 8)
        g = x0_recon_gradient(ctx, x, 300, torch.randn(4, 3, 8, 8))
        assert g.shape == x.shape


class TestNfsdGradient:
    def test_prompt_equals_negative_leaves_domain_term(self):
        ctx = make_ctx(StubDenoiser(), scale=7.5)
        ctx.negative_prompt = ctx.prompt  # delta_C vanishes
        x = torch.randn(2, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 4, 4, dtype=torch.float64)
        t = 500
        g = nfsd_gradient(ctx, x, t, eps)
        z_t = add_noise(x, eps, t, SCHED)
        stub = StubDenoiser()
        null = PromptTokens.empty()
        expect = stub(z_t, t, null) - stub(z_t, t, ctx.prompt)
        assert torch.allclose(g, expect, rtol=1e-10)

    def test_scale_zero_ignores_conditional_branch(self):
        x = torch.randn(2, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 4, 4, dtype=torch.float64)
        ctx_a = make_ctx(StubDenoiser(), scale=0.0)
        ctx_b = make_ctx(StubDenoiser(), scale=0.0)
        ctx_b.prompt = PromptTokens.from_text("large blue torus and small green box")
        assert torch.allclose(nfsd_gradient(ctx_a, x, 500, eps), nfsd_gradient(ctx_b, x, 500, eps))

    def test_exactly_three_denoiser_calls(self):
        for t in (100, 199, 200, 900):
            ctx = make_ctx(StubDenoiser(), scale=7.5)
            nfsd_gradient(ctx, torch.randn(1, 4, 4), t, torch.randn(1, 4, 4))
            assert ctx.calls == 3

    def test_branch_switch_at_t_switch(self):
        x = torch.randn(1, 4, 4, dtype=torch.float64)
        eps = torch.randn(1, 4, 4, dtype=torch.float64)
        ctx = make_ctx(StubDenoiser(), scale=0.0)
        g_low = nfsd_gradient(ctx, x, 199, eps, t_switch=200)
        z_low = add_noise(x, eps, 199, SCHED)
        stub = StubDenoiser()
        assert torch.allclose(g_low, stub(z_low, 199, PromptTokens.empty()), rtol=1e-10)
        g_high = nfsd_gradient(ctx, x, 200, eps, t_switch=200)
        z_high = add_noise(x, eps, 200, SCHED)
        expect = stub(z_high, 200, PromptTokens.empty()) - stub(z_high, 200, negative_prompt())
        assert torch.allclose(g_high, expect, rtol=1e-10)

    def test_missing_negative_prompt_rejected(self):
        ctx = make_ctx(StubDenoiser())
        ctx.negative_prompt = None
        with pytest.raises(ValueError, match="negative prompt"):
            nfsd_gradient(ctx, torch.randn(1, 2, 2), 500, torch.randn(1, 2, 2))

    def test_oracle_denoiser_gives_zero_past_switch(self):
        # in the late-timestep branch every delta cancels for a perfect model
        oracle = OracleDenoiser()
        ctx = make_ctx(oracle, scale=1.0)
        x = torch.randn(2, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 4, 4, dtype=torch.float64)
        oracle.eps = eps
        g = nfsd_gradient(ctx, x, 500, eps, t_switch=200)
        assert float(g.abs().max()) == 0.0


class TestHybrid:
    def test_lambda3d_zero_is_pure_2d(self):
        g2d = {"a": torch.randn(3), "b": torch.randn(2)}
        g3d = {"a": torch.randn(3), "b": torch.randn(2)}
        out = hybrid_combine(HybridWeights(lambda_2d=1.0, lambda_3d=0.0), g2d, g3d)
        for k in g2d:
            assert torch.allclose(out[k], g2d[k])

    def test_paper_defaults(self):
        w = HybridWeights()
        assert w.lambda_2d == 1.0
        assert w.lambda_3d == pytest.approx(0.1)

    def test_linear_in_weights(self):
        g2d = {"a": torch.randn(4, dtype=torch.float64)}
        g3d = {"a": torch.randn(4, dtype=torch.float64)}
        base = hybrid_combine(HybridWeights(1.0, 0.1), g2d, g3d)
        scaled = hybrid_combine(HybridWeights(3.0, 0.3), g2d, g3d)
        assert torch.allclose(scaled["a"], 3.0 * base["a"], rtol=1e-12)

    def test_accumulates_into_param_grad(self):
        p = nn.Parameter(torch.zeros(3, dtype=torch.float64))
        params = {"p": p}
        g2d = {"p": torch.ones(3, dtype=torch.float64)}
        g3d = {"p": torch.full((3,), 2.0, dtype=torch.float64)}
        hybrid_step(HybridWeights(1.0, 0.1), g2d, g3d, params)
        assert torch.allclose(p.grad, torch.full((3,), 1.2, dtype=torch.float64))
        hybrid_step(HybridWeights(1.0, 0.1), g2d, g3d, params)  # accumulate
        assert torch.allclose(p.grad, torch.full((3,), 2.4, dtype=torch.float64))

    def test_validation(self):
        with pytest.raises(ValueError):
            HybridWeights(-1.0, 0.1)
        with pytest.raises(ValueError):
            HybridWeights(0.0, 0.0)

    def test_param_gradients_helper(self):
        p = nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
        loss = (p**2).sum()
        grads = param_gradients(loss, {"p": p})
        assert torch.allclose(grads["p"], 2.0 * p.detach())


class TestAnnealRange:
    def test_endpoints(self):
        start = anneal_range(0, 1000)
        end = anneal_range(1000, 1000)
        assert (start.t_max_frac, start.t_min_frac) == ANNEAL_START == (0.98, 0.98)
        assert (end.t_max_frac, end.t_min_frac) == ANNEAL_END == (0.50, 0.02)

    def test_midpoint(self):
        mid = anneal_range(500, 1000)
        assert mid.t_max_frac == pytest.approx(0.74)
        assert mid.t_min_frac == pytest.approx(0.50)

    def test_bounds_non_increasing(self):
        ranges = [anneal_range(s, 100) for s in range(101)]
        for a, b in zip(ranges, ranges[1:]):
            assert b.t_max_frac <= a.t_max_frac + 1e-12
            assert b.t_min_frac <= a.t_min_frac + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            AnnealRange(t_max_frac=0.5, t_min_frac=0.9)
        with pytest.raises(ValueError):
            anneal_range(5, 0)

    def test_sample_timestep_in_window(self):
        rng = np.random.default_rng(2)
        window = AnnealRange(t_max_frac=0.6, t_min_frac=0.2)
        for _ in range(200):
            t = sample_timestep(rng, window, 1000)
            assert 200 <= t <= 600
