import math

import numpy as np
import pytest
import torch

from objerase.denoiser import (
    ConditionSequence,
    DiTConfig,
    FramewiseCrossAttention,
    ModelConfig,
    build_condition,
    build_model,
    latent_to_pixels,
    load_checkpoint,
    noise_latent,
    pixels_to_latent,
    sample,
    save_checkpoint,
    velocity_target,
)
from objerase.errors import ValidationError
from objerase.relation import FrozenPatchEncoder
from objerase.video import MaskTensor, VideoTensor

from conftest import random_mask, random_video


class TestLatentAlgebra:
    def test_patchify_roundtrip_exact(self, rng):
        x = torch.from_numpy(rng.random((2, 3, 3, 16, 16), dtype=np.float32))
        assert torch.equal(latent_to_pixels(pixels_to_latent(x, 4), 4), x)

    def test_patchify_shape(self):
        x = torch.rand(1, 3, 8, 32, 32)
        z = pixels_to_latent(x, 4)
        assert tuple(z.shape) == (1, 48, 8, 8, 8)

    def test_patchify_range(self):
        z = pixels_to_latent(torch.rand(1, 3, 2, 8, 8), 4)
        assert z.min() >= -1.0 and z.max() <= 1.0

    def test_indivisible_rejected(self):
        with pytest.raises(ValidationError):
            pixels_to_latent(torch.rand(1, 3, 2, 10, 10), 4)

    def test_noise_endpoints(self, rng):
        z0 = torch.from_numpy(rng.standard_normal((1, 4, 2, 2, 2)).astype(np.float32))
        eps = torch.from_numpy(rng.standard_normal((1, 4, 2, 2, 2)).astype(np.float32))
        assert torch.equal(noise_latent(z0, eps, 0.0), z0)
        assert torch.equal(noise_latent(z0, eps, 1.0), eps)

    def test_noise_midpoint(self):
        z0 = torch.zeros(2, 3)
        eps = torch.ones(2, 3)
        assert torch.equal(noise_latent(z0, eps, 0.5), torch.full((2, 3), 0.5))

    def test_noise_rejects_bad_t(self):
        z = torch.zeros(2, 2)
        with pytest.raises(ValidationError):
            noise_latent(z, z, 1.5)
        with pytest.raises(ValidationError):
            noise_latent(z, z, -0.1)

    def test_velocity_identities(self, rng):
        z0 = torch.from_numpy(rng.standard_normal((3, 4)).astype(np.float32))
        assert torch.equal(velocity_target(z0, z0), torch.zeros_like(z0))
        eps = torch.from_numpy(rng.standard_normal((3, 4)).astype(np.float32))
        assert torch.equal(velocity_target(torch.zeros_like(eps), eps), eps)

    def test_reconstruction_identity_float64(self, rng):
        z0 = torch.from_numpy(rng.standard_normal((2, 8)))
        eps = torch.from_numpy(rng.standard_normal((2, 8)))
        for t in rng.random(10):
            z_t = noise_latent(z0, eps, float(t))
            back = z_t - float(t) * velocity_target(z0, eps)
            assert torch.allclose(back, z0, atol=1e-14)


class TestBuildCondition:
    def _setup(self, rng):
        enc = FrozenPatchEncoder(patch=4, dim=8, seed=2)
        proj = torch.nn.Linear(8, 12)
        prompt = torch.randn(4, 12)
        video = random_video(rng, frames=2, size=(8, 8))
        return enc, proj, prompt, video

    def test_full_mask_encodes_black(self, rng):
        enc, proj, prompt, video = self._setup(rng)
        ones = MaskTensor(torch.ones(1, 2, 8, 8))
        cond = build_condition(prompt, video, ones, enc, proj)
        black = VideoTensor(torch.zeros_like(video.data))
        expect = proj(enc.encode(black).data)
        assert torch.allclose(cond.background_tokens, expect)

    def test_empty_mask_encodes_input(self, rng):
        enc, proj, prompt, video = self._setup(rng)
        zeros = MaskTensor(torch.zeros(1, 2, 8, 8))
        cond = build_condition(prompt, video, zeros, enc, proj)
        expect = proj(enc.encode(video).data)
        assert torch.allclose(cond.background_tokens, expect)

    def test_videos_equal_outside_mask_give_equal_conditions(self, rng):
        enc, proj, prompt, video = self._setup(rng)
        mask = random_mask(rng, frames=2, size=(8, 8), p=0.4)
        altered = video.data.clone()
        altered[:, mask.data[0] > 0] = 0.9  # change only masked pixels
        video2 = VideoTensor(altered)
        c1 = build_condition(prompt, video, mask, enc, proj)
        c2 = build_condition(prompt, video2, mask, enc, proj)
        assert torch.allclose(c1.background_tokens, c2.background_tokens)
        assert torch.equal(c1.prompt_tokens, c2.prompt_tokens)

    def test_context_layout(self, rng):
        enc, proj, prompt, video = self._setup(rng)
        cond = build_condition(prompt, video, MaskTensor(torch.zeros(1, 2, 8, 8)), enc, proj)
        ctx = cond.per_frame_context()
        assert ctx.shape == (2, 4 + 4, 12)  # 4 prompt + 4 vision tokens per frame
        assert torch.allclose(ctx[0, :4], prompt)
        assert torch.allclose(ctx[1, :4], prompt)


def manual_cross_attention(attn, x_frame, ctx_frame):
    """Plain single-frame cross-attention, re-derived with explicit softmax."""
    q = attn.q(x_frame)  # [N, D]
    k, v = attn.kv(ctx_frame).chunk(2, dim=-1)
    heads, d = attn.heads, q.shape[-1] // attn.heads
    outs = []
    for h in range(heads):
        qh = q[:, h * d : (h + 1) * d]
        kh = k[:, h * d : (h + 1) * d]
        vh = v[:, h * d : (h + 1) * d]
        w = torch.softmax(qh @ kh.T / math.sqrt(d), dim=-1)
        outs.append(w @ vh)
    return attn.out(torch.cat(outs, dim=-1))


class TestFramewiseCrossAttention:
    def test_single_frame_equals_plain(self, rng):
        torch.manual_seed(0)
        attn = FramewiseCrossAttention(16, 4)
        x = torch.randn(1, 1, 6, 16)
        ctx = torch.randn(1, 1, 5, 16)
        got = attn(x, ctx)[0, 0]
        expect = manual_cross_attention(attn, x[0, 0], ctx[0, 0])
        assert torch.allclose(got, expect, atol=1e-5)

    def test_equals_per_frame_loop(self, rng):
        torch.manual_seed(1)
        attn = FramewiseCrossAttention(16, 2)
        for _ in range(5):
            B, Fr, N, T = 2, 4, 7, 5
            x = torch.randn(B, Fr, N, 16)
            ctx = torch.randn(B, Fr, T, 16)
            got = attn(x, ctx)
            for b in range(B):
                for f in range(Fr):
                    expect = manual_cross_attention(attn, x[b, f], ctx[b, f])
                    assert torch.allclose(got[b, f], expect, atol=1e-5)

    def test_frame_permutation_equivariance(self):
        torch.manual_seed(2)
        attn = FramewiseCrossAttention(8, 2)
        x = torch.randn(1, 5, 4, 8)
        ctx = torch.randn(1, 5, 3, 8)
        perm = torch.tensor([3, 0, 4, 1, 2])
        direct = attn(x[:, perm], ctx[:, perm])
        permuted = attn(x, ctx)[:, perm]
        assert torch.allclose(direct, permuted, atol=1e-6)

    def test_frame_mismatch_rejected(self):
        attn = FramewiseCrossAttention(8, 2)
        with pytest.raises(ValidationError):
            attn(torch.randn(1, 4, 3, 8), torch.randn(1, 5, 3, 8))


class TestDenoiserForward:
    def _inputs(self, model, rng, B=1, frames=2, size=(16, 16)):
        p = model.patch
        h, w = size[0] // p, size[1] // p
        C = model.cfg.dit.latent_channels
        z = torch.from_numpy(rng.standard_normal((B, C, frames, h, w)).astype(np.float32))
        v_in = torch.from_numpy(rng.standard_normal((B, C, frames, h, w)).astype(np.float32))
        m = (torch.rand(B, frames, h * w) > 0.7).float()
        ctx = torch.randn(B, frames, 6, model.cfg.dit.hidden)
        t = torch.rand(B)
        return z, t, ctx, m, v_in

    def test_shape_contract(self, rng):
        cfg = ModelConfig(dit=DiTConfig(depth=2, hidden=32, heads=2, patch=4))
        model = build_model(cfg, seed=0)
        # pixel clip [3, 8, 32, 32] with p=4 -> 8 frames x 64 tokens
        video = random_video(rng, frames=8, size=(32, 32))
        z = pixels_to_latent(video.data.unsqueeze(0), 4)
        m = torch.zeros(1, 8, 64)
        ctx = torch.randn(1, 8, 5, 32)
        v_hat, hidden = model.denoiser(z, torch.tensor([0.3]), ctx, m, z)
        assert v_hat.shape == z.shape
        assert hidden.shape == (1, 8, 64, 32)

    def test_zero_initialized_head_outputs_zero(self, rng):
        model = build_model(ModelConfig(dit=DiTConfig(depth=2, hidden=32, heads=2, patch=4)))
        z, t, ctx, m, v_in = self._inputs(model, rng)
        v_hat, _ = model.denoiser(z, t, ctx, m, v_in)
        assert v_hat.abs().max() == 0.0

    def test_hidden_sensitive_to_mask(self, rng):
        torch.manual_seed(3)
        model = build_model(ModelConfig(dit=DiTConfig(depth=2, hidden=32, heads=2, patch=4)))
        with torch.no_grad():  # break zero-init so the mask channel can propagate
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        z, t, ctx, m, v_in = self._inputs(model, rng)
        _, h1 = model.denoiser(z, t, ctx, m, v_in)
        m2 = m.clone()
        m2[0, 0, 0] = 1.0 - m2[0, 0, 0]
        _, h2 = model.denoiser(z, t, ctx, m2, v_in)
        assert not torch.allclose(h1, h2)

    def test_batch_permutation_equivariance(self, rng):
        torch.manual_seed(4)
        model = build_model(ModelConfig(dit=DiTConfig(depth=2, hidden=32, heads=2, patch=4)))
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        z, t, ctx, m, v_in = self._inputs(model, rng, B=3)
        out, _ = model.denoiser(z, t, ctx, m, v_in)
        perm = torch.tensor([2, 0, 1])
        out_p, _ = model.denoiser(z[perm], t[perm], ctx[perm], m[perm], v_in[perm])
        assert torch.allclose(out[perm], out_p, atol=1e-5)

    def test_grid_mismatch_rejected(self, rng):
        model = build_model(ModelConfig(dit=DiTConfig(depth=2, hidden=32, heads=2, patch=4)))
        z, t, ctx, m, v_in = self._inputs(model, rng)
        with pytest.raises(ValidationError):
            model.denoiser(z, t, ctx, m[:, :, :-1], v_in)
        with pytest.raises(ValidationError):
            model.denoiser(z, t, ctx[:, :-1], m, v_in)


class TestSample:
    @pytest.fixture
    def small_model(self):
        return build_model(ModelConfig(
            dit=DiTConfig(depth=1, hidden=16, heads=2, patch=4),
            cond_dim=8, cond_patch=4, teacher_dim=8, teacher_patch=4,
        ), seed=0)

    def test_one_step_zero_head_decodes_noise(self, small_model, rng):
        video = random_video(rng, frames=2, size=(8, 8))
        mask = MaskTensor(torch.zeros(1, 2, 8, 8))
        out = sample(small_model, video, mask, steps=1, seed=11)
        gen = torch.Generator().manual_seed(11)
        eps = torch.randn((1, 48, 2, 2, 2), generator=gen)
        expect = latent_to_pixels(eps, 4)[0].clamp(0, 1)
        assert torch.allclose(out.data, expect)

    def test_same_seed_identical(self, small_model, rng):
        video = random_video(rng, frames=2, size=(8, 8))
        mask = random_mask(rng, frames=2, size=(8, 8))
        a = sample(small_model, video, mask, steps=4, seed=3)
        b = sample(small_model, video, mask, steps=4, seed=3)
        assert torch.equal(a.data, b.data)

    def test_bad_steps_rejected(self, small_model, rng):
        video = random_video(rng, frames=2, size=(8, 8))
        mask = random_mask(rng, frames=2, size=(8, 8))
        with pytest.raises(ValidationError):
            sample(small_model, video, mask, steps=0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        cfg = ModelConfig(
            dit=DiTConfig(depth=1, hidden=16, heads=2, patch=4),
            cond_dim=8, cond_patch=4, teacher_dim=8, teacher_patch=4,
        )
        model = build_model(cfg, seed=1)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        save_checkpoint(model, tmp_path / "ck.pt", run_config={"train.lr": 1e-3})
        loaded = load_checkpoint(tmp_path / "ck.pt")
        assert loaded.cfg == model.cfg
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(a, b)

    def test_ema_preferred_when_present(self, tmp_path):
        cfg = ModelConfig(
            dit=DiTConfig(depth=1, hidden=16, heads=2, patch=4),
            cond_dim=8, cond_patch=4, teacher_dim=8, teacher_patch=4,
        )
        model = build_model(cfg, seed=1)
        ema = {k: torch.zeros_like(v) for k, v in model.state_dict().items()}
        save_checkpoint(model, tmp_path / "ck.pt", ema_state=ema)
        smoothed = load_checkpoint(tmp_path / "ck.pt", prefer_ema=True)
        assert smoothed.prompt_tokens.abs().max() == 0.0
        raw = load_checkpoint(tmp_path / "ck.pt", prefer_ema=False)
        assert torch.equal(raw.prompt_tokens, model.prompt_tokens)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.pt")
