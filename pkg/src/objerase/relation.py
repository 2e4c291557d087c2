"""Frozen teacher features, their trainable adaptation, and relation distillation.

A frozen per-frame encoder supplies semantic token features for the input
video. A trainable residual MLP maps them into the denoiser's hidden width.
Per-frame cosine-similarity matrices over spatial tokens are then compared --
restricted to object-token x side-effect-token pairs -- between the denoiser's
hidden state and the adapted teacher, yielding the relation distillation loss.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateInputError, ValidationError
from .video import VideoTensor

# Affine-free normalization keeps encoder outputs invariant (to ~1e-12) under
# per-token positive rescaling of the raw projected features, so cosine
# relations downstream inherit that invariance even through the MLP adapter.
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class TokenFeatures:
    """Per-frame token embeddings [F, N, D] on a spatial grid (h_tok, w_tok)."""

    data: torch.Tensor
    grid: tuple[int, int]
    source: str = "unknown"  # "student_hidden" | "teacher_adapted" | ...

    def __post_init__(self):
        h, w = self.grid
        if self.data.ndim != 3 or self.data.shape[1] != h * w:
            raise ValidationError(
                f"features must be [F, {h * w}, D] for grid {self.grid}, got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise ValidationError("token features contain non-finite values")


def normalize_tokens(x: torch.Tensor) -> torch.Tensor:
    """Affine-free layer normalization over the last dim."""
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + _NORM_EPS)


class FrozenPatchEncoder(nn.Module):
    """Frozen seeded patch projection: patchify p x p, fixed linear map, normalization.

    Stands in for a pretrained foundation encoder behind the same interface;
    deterministic given (seed, patch, dim) and never receives gradients.
    """

    def __init__(self, patch: int = 8, dim: int = 64, seed: int = 0):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(3 * patch * patch, dim, generator=gen) / (3 * patch * patch) ** 0.5
        self.register_buffer("weight", w)

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        if height % self.patch or width % self.patch:
            raise ValidationError(
                f"frame size {(height, width)} not divisible by encoder patch {self.patch}"
            )
        return (height // self.patch, width // self.patch)

    @torch.no_grad()
    def encode(self, video: VideoTensor) -> TokenFeatures:
        grid = self.grid_for(video.height, video.width)
        frames = video.data.permute(1, 0, 2, 3)  # [F, 3, H, W]
        patches = F.unfold(frames, kernel_size=self.patch, stride=self.patch)  # [F, 3p^2, N]
        feats = normalize_tokens(patches.transpose(1, 2) @ self.weight)  # [F, N, D]
        return TokenFeatures(feats, grid, source="teacher_raw")


def video_content_key(video: VideoTensor) -> str:
    """Content hash used to key precomputed feature dumps."""
    payload = video.data.contiguous().numpy().astype(np.float32).tobytes()
    return hashlib.sha256(payload).hexdigest()[:16]


class ExternalFeatureEncoder(nn.Module):
    """Teacher interface backed by precomputed per-clip feature dumps.

    A dump is ``<dump_dir>/<content_key>.npz`` holding ``features`` [F, N, D]
    and ``grid`` [2]; see :func:`dump_features` for the writer.
    """

    def __init__(self, dump_dir: Path | str):
        super().__init__()
        self.dump_dir = Path(dump_dir)

    @torch.no_grad()
    def encode(self, video: VideoTensor) -> TokenFeatures:
        key = video_content_key(video)
        path = self.dump_dir / f"{key}.npz"
        if not path.is_file():
            raise FileNotFoundError(f"no feature dump for clip (key {key}) in {self.dump_dir}")
        payload = np.load(path)
        grid = tuple(int(v) for v in payload["grid"])
        feats = torch.from_numpy(payload["features"].astype(np.float32))
        return TokenFeatures(feats, grid, source="teacher_raw")


def dump_features(video: VideoTensor, feats: TokenFeatures, dump_dir: Path | str) -> Path:
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"{video_content_key(video)}.npz"
    np.savez(path, features=feats.data.numpy(), grid=np.array(feats.grid, dtype=np.int64))
    return path


def make_teacher(kind: str, patch: int = 8, dim: int = 64, seed: int = 0, dump_dir=None):
    if kind == "frozen_random":
        return FrozenPatchEncoder(patch=patch, dim=dim, seed=seed)
    if kind == "external":
        if dump_dir is None:
            raise ValidationError("teacher.kind=external requires a feature dump directory")
        return ExternalFeatureEncoder(dump_dir)
    raise ValidationError(f"unknown teacher kind: {kind!r}")


def resample_features(feat: TokenFeatures, grid: tuple[int, int]) -> TokenFeatures:
    """Bilinearly resample the per-frame feature map onto another token grid."""
    if feat.grid == tuple(grid):
        return feat
    h, w = feat.grid
    fmap = feat.data.transpose(1, 2).reshape(feat.data.shape[0], -1, h, w)  # [F, D, h, w]
    fmap = F.interpolate(fmap, size=tuple(grid), mode="bilinear", align_corners=False)
    data = fmap.flatten(2).transpose(1, 2)  # [F, h2*w2, D]
    return TokenFeatures(data, tuple(grid), source=feat.source)


class FeatureAdapter(nn.Module):
    """Trainable residual MLP mapping teacher features into the student width.

    y = skip(x) + branch(x) with a 2-hidden-layer GELU branch; the branch
    output layer is zero-initialized so the adapter starts as a pure linear
    map and can represent the identity exactly when square.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.skip = nn.Linear(in_dim, out_dim, bias=False)
        self.branch = nn.Sequential(
            nn.Linear(in_dim, out_dim),
            nn.GELU(),
            nn.Linear(out_dim, out_dim),
            nn.GELU(),
            nn.Linear(out_dim, out_dim),
        )
        nn.init.zeros_(self.branch[-1].weight)
        nn.init.zeros_(self.branch[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.branch(x)

    def adapt(self, feat: TokenFeatures) -> TokenFeatures:
        if feat.data.shape[-1] != self.skip.in_features:
            raise ValidationError(
                f"adapter expects dim {self.skip.in_features}, got {feat.data.shape[-1]}"
            )
        return TokenFeatures(self(feat.data), feat.grid, source="teacher_adapted")


def relation_matrix(feat: TokenFeatures | torch.Tensor) -> torch.Tensor:
    """Per-frame pairwise cosine similarities, [F, N, N].

    Differentiable; raises on zero-norm tokens, which have no direction.
    """
    x = feat.data if isinstance(feat, TokenFeatures) else feat
    if x.ndim != 3:
        raise ValidationError(f"expected [F, N, D] features, got {tuple(x.shape)}")
    norms = torch.linalg.vector_norm(x, dim=-1)
    bad = norms < 1e-8
    if bad.any():
        f, i = [int(v) for v in torch.nonzero(bad, as_tuple=False)[0]]
        raise DegenerateInputError(f"zero-norm token at frame {f}, index {i}")
    unit = x / norms.unsqueeze(-1)
    return unit @ unit.transpose(1, 2)


def relation_distillation_loss(
    r_student: torch.Tensor,
    r_teacher: torch.Tensor,
    sets: list[tuple[torch.Tensor, torch.Tensor]],
) -> tuple[torch.Tensor, int]:
    """Mean absolute relation gap over object x side-effect token pairs.

    Frames where either index set is empty are skipped and the frame-mean
    denominator shrinks accordingly; returns (loss, frames_used) with loss 0
    when no frame contributes.
    """
    if r_student.shape != r_teacher.shape:
        raise ValidationError(
            f"relation shape mismatch: {tuple(r_student.shape)} vs {tuple(r_teacher.shape)}"
        )
    if len(sets) != r_student.shape[0]:
        raise ValidationError(f"{len(sets)} index sets for {r_student.shape[0]} frames")
    total = r_student.new_zeros(())
    used = 0
    for f, (obj, se) in enumerate(sets):
        if obj.numel() == 0 or se.numel() == 0:
            continue
        gap = r_student[f][obj][:, se] - r_teacher[f][obj][:, se]
        total = total + gap.abs().mean()
        used += 1
    if used == 0:
        return total, 0
    return total / used, used
