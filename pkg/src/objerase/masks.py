"""Difference / side-effect mask derivation and projection to the token grid.

The difference mask marks pixels where input and ground truth diverge beyond a
threshold on the per-pixel channel-wise l2 distance; the side-effect mask is
the difference mask with the object region logically removed. Token masks
downsample pixel masks to the denoiser's spatial token grid with any-pixel
(max-pool) semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError
from .video import MaskTensor, VideoTensor


@dataclass(frozen=True)
class TokenMask:
    """Binary mask over spatial tokens, shaped [F, N] with N = h_tok * w_tok."""

    data: torch.Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.data.ndim != 2 or self.data.shape[1] != h * w:
            raise ValidationError(
                f"token mask must be [F, {h * w}] for grid {self.grid}, got {tuple(self.data.shape)}"
            )
        if not ((self.data == 0) | (self.data == 1)).all():
            raise ValidationError("token mask values must be exactly 0 or 1")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def diff_mask(v_ori: VideoTensor, v_gt: VideoTensor, delta: float = 0.1) -> MaskTensor:
    """Mark pixels where ||v_ori(:,f,i,j) - v_gt(:,f,i,j)||_2 > delta (strict)."""
    if v_ori.data.shape != v_gt.data.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(v_ori.data.shape)} vs {tuple(v_gt.data.shape)}"
        )
    if delta <= 0:
        raise ValidationError(f"delta must be > 0, got {delta}")
    dist = torch.linalg.vector_norm(v_ori.data - v_gt.data, dim=0, keepdim=True)  # [1,F,H,W]
    return MaskTensor((dist > delta).float())


def side_effect_mask(m_diff: MaskTensor, m_obj: MaskTensor) -> MaskTensor:
    """m_diff AND NOT m_obj: the induced changes outside the object region."""
    if m_diff.data.shape != m_obj.data.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(m_diff.data.shape)} vs {tuple(m_obj.data.shape)}"
        )
    return MaskTensor(m_diff.data * (1.0 - m_obj.data))


def to_token_mask(m: MaskTensor, grid: tuple[int, int]) -> TokenMask:
    """Downsample a pixel mask to the token grid; a token is 1 iff any covered pixel is 1.

    Pixel (r, c) belongs to token (r * h_tok // H, c * w_tok // W), which
    partitions the frame into contiguous near-equal bins and supports
    non-divisible sizes.
    """
    h_tok, w_tok = grid
    _, F, H, W = m.data.shape
    if h_tok < 1 or w_tok < 1:
        raise ValidationError(f"token grid must be positive, got {grid}")
    if h_tok > H or w_tok > W:
        raise ValidationError(f"token grid {grid} larger than pixel grid {(H, W)}")

    row_bin = torch.div(torch.arange(H) * h_tok, H, rounding_mode="floor")  # [H]
    col_bin = torch.div(torch.arange(W) * w_tok, W, rounding_mode="floor")  # [W]
    token_of_pixel = (row_bin[:, None] * w_tok + col_bin[None, :]).reshape(-1)  # [H*W]

    flat = m.data[0].reshape(F, H * W)
    out = torch.zeros(F, h_tok * w_tok)
    out.index_add_(1, token_of_pixel, flat)
    return TokenMask((out > 0).float(), grid)


def token_index_sets(
    tm_obj: TokenMask, tm_se: TokenMask
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-frame (object, side-effect) token index sets, disjointified.

    Any token present in both masks is dropped from the side-effect set:
    coarse pooling can merge adjacent regions even when the pixel masks are
    disjoint, and the distillation sum assumes distinct regions.
    """
    if tm_obj.grid != tm_se.grid or tm_obj.frames != tm_se.frames:
        raise ValidationError("token masks must share grid and frame count")
    sets = []
    for f in range(tm_obj.frames):
        obj = torch.nonzero(tm_obj.data[f], as_tuple=False).flatten()
        se_raw = torch.nonzero(tm_se.data[f] * (1.0 - tm_obj.data[f]), as_tuple=False).flatten()
        sets.append((obj, se_raw))
    return sets
