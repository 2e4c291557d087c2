"""Toy video diffusion transformer with a flow-matching parameterization.

There is no learned VAE: latents are pixel patches. A clip [3, F, H, W] maps
losslessly to a latent [3*p*p, F, H/p, W/p] (identity temporal mapping), so
frame indices line up exactly between pixels, tokens, and masks. Each block
applies spatial self-attention within frames, temporal self-attention across
frames, framewise cross-attention over prompt + background context, and an
MLP, all modulated by the timestep through adaptive layer norm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .masks import TokenMask, to_token_mask
from .relation import FeatureAdapter, make_teacher
from .video import MaskTensor, VideoTensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 4
    hidden: int = 96
    heads: int = 4
    patch: int = 8
    align_block: int = 0  # 1-indexed; 0 means "mid-depth", resolved below

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValidationError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.align_block == 0:
            object.__setattr__(self, "align_block", math.ceil(self.depth / 2))
        if not (1 <= self.align_block <= self.depth):
            raise ValidationError(
                f"align_block {self.align_block} outside [1, {self.depth}]"
            )

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch


@dataclass(frozen=True)
class ModelConfig:
    dit: DiTConfig = field(default_factory=DiTConfig)
    cond_dim: int = 64
    cond_patch: int = 8
    cond_seed: int = 101
    teacher_kind: str = "frozen_random"
    teacher_dim: int = 64
    teacher_patch: int = 8
    teacher_seed: int = 7
    teacher_dump_dir: Optional[str] = None
    prompt_len: int = 4


# ---------------------------------------------------------------------------
# latent <-> pixel algebra
# ---------------------------------------------------------------------------


def pixels_to_latent(video: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, 3, F, H, W] in [0,1] -> [B, 3*p*p, F, H/p, W/p] in [-1,1].

    Pixel patches rescaled to a zero-centered range; exact inverse of
    latent_to_pixels up to float rounding.
    """
    B, C, Fr, H, W = video.shape
    if H % patch or W % patch:
        raise ValidationError(f"frame size {(H, W)} not divisible by patch {patch}")
    h, w = H // patch, W // patch
    x = video.reshape(B, C, Fr, h, patch, w, patch)
    x = x.permute(0, 1, 4, 6, 2, 3, 5)  # [B, C, p, p, F, h, w]
    return 2.0 * x.reshape(B, C * patch * patch, Fr, h, w) - 1.0


def latent_to_pixels(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, 3*p*p, F, h, w] -> [B, 3, F, h*p, w*p], mapped back to [0,1]."""
    B, C_lat, Fr, h, w = latent.shape
    C = C_lat // (patch * patch)
    x = (latent + 1.0) / 2.0
    x = x.reshape(B, C, patch, patch, Fr, h, w)
    x = x.permute(0, 1, 4, 5, 2, 6, 3)  # [B, C, F, h, p, w, p]
    return x.reshape(B, C, Fr, h * patch, w * patch)


def noise_latent(z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Linear interpolant t*eps + (1-t)*z0 at continuous time t in [0, 1]."""
    if z0.shape != eps.shape:
        raise ValidationError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=z0.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    while t.ndim < z0.ndim:
        t = t.unsqueeze(-1)
    return t * eps + (1.0 - t) * z0


def velocity_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Flow-matching target velocity: d z_t / d t = eps - z0."""
    if z0.shape != eps.shape:
        raise ValidationError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    return eps - z0


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionSequence:
    """Cross-attention context: shared prompt tokens + per-frame background tokens."""

    prompt_tokens: torch.Tensor  # [T_p, D]
    background_tokens: torch.Tensor  # [F, T_v, D]

    def __post_init__(self):
        if self.prompt_tokens.ndim != 2 or self.prompt_tokens.shape[0] < 1:
            raise ValidationError("prompt_tokens must be [T_p >= 1, D]")
        if self.background_tokens.ndim != 3:
            raise ValidationError("background_tokens must be [F, T_v, D]")
        if self.prompt_tokens.shape[-1] != self.background_tokens.shape[-1]:
            raise ValidationError("prompt and background token dims differ")

    @property
    def frames(self) -> int:
        return self.background_tokens.shape[0]

    def per_frame_context(self) -> torch.Tensor:
        """[F, T_p + T_v, D]: prompt tokens broadcast ahead of each frame's tokens."""
        Fr = self.frames
        prompt = self.prompt_tokens.unsqueeze(0).expand(Fr, -1, -1)
        return torch.cat([prompt, self.background_tokens], dim=1)


def build_condition(
    prompt_embed: torch.Tensor,
    v_ori: VideoTensor,
    m_obj: MaskTensor,
    vision_enc,
    proj: nn.Module,
) -> ConditionSequence:
    """Assemble the guidance sequence from prompt + encoded unmasked background.

    The object region is zeroed before encoding, so only background pixels
    shape the visual tokens; the projection is the trainable part.
    """
    if not m_obj.matches(v_ori):
        raise ValidationError("mask does not match video dimensions")
    masked = VideoTensor(v_ori.data * (1.0 - m_obj.data), frame_rate=v_ori.frame_rate)
    feats = vision_enc.encode(masked).data  # [F, T_v, D_enc], frozen
    return ConditionSequence(prompt_embed, proj(feats))


# ---------------------------------------------------------------------------
# attention blocks
# ---------------------------------------------------------------------------


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    B, T, D = x.shape
    return x.view(B, T, heads, D // heads).transpose(1, 2)  # [B, H, T, d]


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, H, T, d = x.shape
    return x.transpose(1, 2).reshape(B, T, H * d)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # [B*, T, D]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        y = F.scaled_dot_product_attention(
            _split_heads(q, self.heads), _split_heads(k, self.heads), _split_heads(v, self.heads)
        )
        return self.out(_merge_heads(y))


class FramewiseCrossAttention(nn.Module):
    """Cross-attention applied per frame by merging batch and frame dimensions.

    [B, F, N, D] latents and [B, F, T, D] contexts are reshaped to
    [(B*F), N, D] / [(B*F), T, D], so each frame attends only to its own
    context; the result is reshaped back.
    """

    def __init__(self, dim: int, heads: int, ctx_dim: Optional[int] = None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(ctx_dim or dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or context.ndim != 4:
            raise ValidationError("expected [B, F, N, D] latents and [B, F, T, Dc] context")
        B, Fr, N, D = x.shape
        if context.shape[0] != B or context.shape[1] != Fr:
            raise ValidationError(
                f"context batch/frames {tuple(context.shape[:2])} do not match latents {(B, Fr)}"
            )
        q = self.q(x.reshape(B * Fr, N, D))
        k, v = self.kv(context.reshape(B * Fr, context.shape[2], -1)).chunk(2, dim=-1)
        y = F.scaled_dot_product_attention(
            _split_heads(q, self.heads), _split_heads(k, self.heads), _split_heads(v, self.heads)
        )
        return self.out(_merge_heads(y)).reshape(B, Fr, N, D)


def sincos_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer/real positions, [..., dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def spatial_positions(grid: tuple[int, int], dim: int) -> torch.Tensor:
    """2D sin-cos table for an (h, w) token grid, [h*w, dim]."""
    h, w = grid
    rows = torch.arange(h).repeat_interleave(w)
    cols = torch.arange(w).repeat(h)
    return torch.cat(
        [sincos_embedding(rows, dim // 2), sincos_embedding(cols, dim - dim // 2)], dim=-1
    )


class DenoiserBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norms = nn.ModuleList(
            [nn.LayerNorm(dim, elementwise_affine=False) for _ in range(4)]
        )
        self.spatial = SelfAttention(dim, heads)
        self.temporal = SelfAttention(dim, heads)
        self.cross = FramewiseCrossAttention(dim, heads)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        # shift, scale, gate per sublayer; zero-init so blocks start as identity
        self.modulation = nn.Linear(dim, 12 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, context: torch.Tensor):
        B, Fr, N, D = x.shape
        mods = self.modulation(F.silu(t_emb)).chunk(12, dim=-1)  # 12 x [B, D]

        def mod(h, i):
            shift, scale = mods[3 * i], mods[3 * i + 1]
            return h * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]

        def gate(i):
            return mods[3 * i + 2][:, None, None, :]

        h = mod(self.norms[0](x), 0).reshape(B * Fr, N, D)
        x = x + gate(0) * self.spatial(h).reshape(B, Fr, N, D)

        h = mod(self.norms[1](x), 1).permute(0, 2, 1, 3).reshape(B * N, Fr, D)
        h = self.temporal(h).reshape(B, N, Fr, D).permute(0, 2, 1, 3)
        x = x + gate(1) * h

        h = mod(self.norms[2](x), 2)
        x = x + gate(2) * self.cross(h, context)

        h = mod(self.norms[3](x), 3)
        x = x + gate(3) * self.mlp(h)
        return x


class Denoiser(nn.Module):
    """Predicts the flow velocity and exposes one block's hidden state."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden
        C = cfg.latent_channels
        self.in_proj = nn.Linear(2 * C + 1, D)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList(DenoiserBlock(D, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False)
        self.final_mod = nn.Linear(D, 2 * D)
        # long skip: the raw input token rides along into the head so copy-like
        # solutions do not have to squeeze through the hidden width
        self.head = nn.Linear(D + 2 * C + 1, C)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        z_t: torch.Tensor,  # [B, C_lat, F, h, w]
        t: torch.Tensor,  # [B]
        context: torch.Tensor,  # [B, F, T, D]
        mask_tokens: torch.Tensor,  # [B, F, N]
        v_in: torch.Tensor,  # [B, C_lat, F, h, w]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if z_t.shape != v_in.shape:
            raise ValidationError("z_t and input-video latent shapes differ")
        B, C, Fr, h, w = z_t.shape
        N = h * w
        if mask_tokens.shape != (B, Fr, N):
            raise ValidationError(
                f"mask tokens {tuple(mask_tokens.shape)} do not match grid {(B, Fr, N)}"
            )
        if context.shape[1] != Fr:
            raise ValidationError("condition frame count does not match latents")

        def to_tokens(z):  # [B, C, F, h, w] -> [B, F, N, C]
            return z.permute(0, 2, 3, 4, 1).reshape(B, Fr, N, C)

        raw = torch.cat([to_tokens(z_t), to_tokens(v_in), mask_tokens.unsqueeze(-1)], dim=-1)
        x = self.in_proj(raw)
        D = self.cfg.hidden
        x = x + spatial_positions((h, w), D).to(x.dtype)[None, None]
        x = x + sincos_embedding(torch.arange(Fr), D).to(x.dtype)[None, :, None]

        t_emb = self.time_mlp(sincos_embedding(t.reshape(B) * 1000.0, D).to(x.dtype))

        hidden = x
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, t_emb, context)
            if i == self.cfg.align_block:
                hidden = x

        shift, scale = self.final_mod(F.silu(t_emb)).chunk(2, dim=-1)
        out = self.final_norm(x) * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]
        v = self.head(torch.cat([out, raw], dim=-1))  # [B, F, N, C]
        v = v.permute(0, 3, 1, 2).reshape(B, C, Fr, h, w)
        return v, hidden


class RemovalModel(nn.Module):
    """All trainable parts plus the frozen encoders, as one checkpointable unit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dit.hidden
        self.denoiser = Denoiser(cfg.dit)
        self.cond_encoder = make_teacher(
            "frozen_random", patch=cfg.cond_patch, dim=cfg.cond_dim, seed=cfg.cond_seed
        )
        self.cond_proj = nn.Sequential(
            nn.Linear(cfg.cond_dim, D), nn.GELU(), nn.Linear(D, D)
        )
        self.prompt_tokens = nn.Parameter(torch.randn(cfg.prompt_len, D) * 0.02)
        self.teacher = make_teacher(
            cfg.teacher_kind,
            patch=cfg.teacher_patch,
            dim=cfg.teacher_dim,
            seed=cfg.teacher_seed,
            dump_dir=cfg.teacher_dump_dir,
        )
        self.adapter = FeatureAdapter(cfg.teacher_dim, D)

    @property
    def patch(self) -> int:
        return self.cfg.dit.patch

    def token_grid(self, video: VideoTensor) -> tuple[int, int]:
        if video.height % self.patch or video.width % self.patch:
            raise ValidationError(
                f"frame size {(video.height, video.width)} not divisible by patch {self.patch}"
            )
        return (video.height // self.patch, video.width // self.patch)

    def condition(self, v_ori: VideoTensor, m_obj: MaskTensor) -> ConditionSequence:
        return build_condition(self.prompt_tokens, v_ori, m_obj, self.cond_encoder, self.cond_proj)

    def mask_tokens(self, m_obj: MaskTensor, grid: tuple[int, int]) -> TokenMask:
        return to_token_mask(m_obj, grid)


def build_model(cfg: ModelConfig, seed: int = 0) -> RemovalModel:
    """Deterministically initialized model; frozen encoders use their own seeds."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return RemovalModel(cfg)


@torch.no_grad()
def sample(
    model: RemovalModel,
    v_ori: VideoTensor,
    m_obj: MaskTensor,
    cond: Optional[ConditionSequence] = None,
    steps: int = 20,
    seed: int = 0,
) -> VideoTensor:
    """Euler-integrate the flow from pure noise at t=1 down to t=0.

    The full generated clip is returned; unmasked pixels are NOT composited
    back, since induced side effects live outside the object mask and must be
    erased by generation.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not m_obj.matches(v_ori):
        raise ValidationError("mask does not match video dimensions")
    if cond is None:
        cond = model.condition(v_ori, m_obj)
    grid = model.token_grid(v_ori)
    v_in = pixels_to_latent(v_ori.data.unsqueeze(0), model.patch)
    m_tok = model.mask_tokens(m_obj, grid).data.unsqueeze(0)
    ctx = cond.per_frame_context().unsqueeze(0)

    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(v_in.shape, generator=gen)
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.tensor([1.0 - i * dt])
        v_hat, _ = model.denoiser(z, t, ctx, m_tok, v_in)
        z = z - dt * v_hat
    pixels = latent_to_pixels(z, model.patch)[0].clamp(0.0, 1.0)
    return VideoTensor(pixels, frame_rate=v_ori.frame_rate)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: RemovalModel,
    path: Path | str,
    run_config: Optional[dict] = None,
    ema_state: Optional[dict] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "run_config": dict(run_config or {}),
        "state": model.state_dict(),
        "ema_state": ema_state,
    }
    torch.save(payload, path)


def load_checkpoint(path: Path | str, prefer_ema: bool = True) -> RemovalModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format_version: {payload.get('format_version')!r}"
        )
    raw = dict(payload["model_config"])
    cfg = ModelConfig(dit=DiTConfig(**raw.pop("dit")), **raw)
    model = RemovalModel(cfg)
    model.load_state_dict(payload["state"])
    if prefer_ema and payload.get("ema_state"):
        model.load_state_dict(payload["ema_state"])
    return model
