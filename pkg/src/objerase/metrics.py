"""Paired-benchmark metrics (PSNR, SSIM) and report generation.

Full-frame metrics follow the standard definitions on [0, 1] video; identical
inputs report the 99.0 dB cap instead of infinity. Region-restricted PSNR
variants (over the difference-mask / side-effect-mask support) are provided
because removal quality near the object is invisible in full-frame averages
at small scales.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ValidationError
from .masks import diff_mask, side_effect_mask
from .video import ClipManifest, MaskTensor, VideoTensor, load_clip, load_mask_dir

PSNR_CAP_DB = 99.0
REPORT_VERSION = 1

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_LUMA = (0.299, 0.587, 0.114)  # BT.601


def psnr(a: VideoTensor, b: VideoTensor) -> float:
    """10*log10(1/MSE) over all pixels/frames/channels; capped at 99.0 dB."""
    if a.data.shape != b.data.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    mse = float(((a.data - b.data) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def masked_psnr(a: VideoTensor, b: VideoTensor, region: MaskTensor) -> float:
    """PSNR restricted to pixels where the region mask is 1 (all channels)."""
    if a.data.shape != b.data.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    if region.data.shape[1:] != a.data.shape[1:]:
        raise ValidationError("region mask does not match video dimensions")
    weight = region.data.expand_as(a.data)
    count = float(weight.sum())
    if count == 0:
        raise ValidationError("region mask selects no pixels")
    mse = float((((a.data - b.data) ** 2) * weight).sum() / count)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, size, size)


def ssim(a: VideoTensor, b: VideoTensor) -> float:
    """Mean structural similarity over frames (grayscale, 11x11 Gaussian window)."""
    if a.data.shape != b.data.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    if a.height < _SSIM_WINDOW or a.width < _SSIM_WINDOW:
        raise ValidationError(
            f"frames {a.height}x{a.width} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    luma = torch.tensor(_LUMA, dtype=torch.float64).view(3, 1, 1, 1)
    x = (a.data.double() * luma).sum(dim=0).unsqueeze(1)  # [F, 1, H, W]
    y = (b.data.double() * luma).sum(dim=0).unsqueeze(1)

    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1**2  # L = 1
    c2 = _SSIM_K2**2

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sig_x = F.conv2d(x * x, win) - mu_x * mu_x
    sig_y = F.conv2d(y * y, win) - mu_y * mu_y
    sig_xy = F.conv2d(x * y, win) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
    )
    return float(ssim_map.mean())


_GENERIC_LEAVES = {"ori", "gt", "mask", "input", "frames", "pred"}


def clip_id(path_str: str) -> str:
    """Clip identity from a manifest path: last non-generic path component."""
    parts = Path(path_str).parts
    for part in reversed(parts):
        if part not in _GENERIC_LEAVES:
            return part
    return parts[-1] if parts else path_str


def run_benchmark(
    pred_manifest: Path | str,
    gt_manifest: Path | str,
    delta: float = 0.1,
) -> dict:
    """Per-clip and aggregate metrics for predictions against ground truth.

    Manifests align by clip id; unmatched ids on either side are an error.
    The lpips field is reserved (always null).
    """
    pred_manifest, gt_manifest = Path(pred_manifest), Path(gt_manifest)
    pred = ClipManifest.load(pred_manifest)
    gt = ClipManifest.load(gt_manifest)
    pred_by_id = {clip_id(e.input): e for e in pred.entries}
    gt_by_id = {clip_id(e.input): e for e in gt.entries}
    orphans = sorted(set(pred_by_id) ^ set(gt_by_id))
    if orphans:
        raise ValidationError(f"manifest ids do not align; orphans: {orphans}")

    per_clip = []
    for cid in sorted(pred_by_id):
        p_entry, g_entry = pred_by_id[cid], gt_by_id[cid]
        p_video, _ = load_clip(pred_manifest.parent / p_entry.input)
        g_input, g_mask = load_clip(gt_manifest.parent / g_entry.input)
        if g_entry.gt is None:
            raise ValidationError(f"gt manifest entry {cid} lacks a ground-truth path")
        g_video, _ = load_clip(gt_manifest.parent / g_entry.gt)
        if g_mask is None and g_entry.mask:
            g_mask = load_mask_dir(gt_manifest.parent / g_entry.mask)

        row = {
            "id": cid,
            "psnr": psnr(p_video, g_video),
            "ssim": ssim(p_video, g_video),
            "psnr_diff_region": None,
            "psnr_se_region": None,
            "lpips": None,
        }
        m_diff = diff_mask(g_input, g_video, delta)
        if m_diff.data.sum() > 0:
            row["psnr_diff_region"] = masked_psnr(p_video, g_video, m_diff)
            if g_mask is not None:
                m_se = side_effect_mask(m_diff, g_mask)
                if m_se.data.sum() > 0:
                    row["psnr_se_region"] = masked_psnr(p_video, g_video, m_se)
        per_clip.append(row)

    def mean_of(key) -> Optional[float]:
        vals = [r[key] for r in per_clip if r[key] is not None]
        return sum(vals) / len(vals) if vals else None

    return {
        "format_version": REPORT_VERSION,
        "config": {"pred": str(pred_manifest), "gt": str(gt_manifest), "delta": delta},
        "per_clip": per_clip,
        "aggregate": {
            "psnr": mean_of("psnr"),
            "ssim": mean_of("ssim"),
            "psnr_diff_region": mean_of("psnr_diff_region"),
            "psnr_se_region": mean_of("psnr_se_region"),
            "lpips": None,
        },
    }


def write_report(report: dict, path: Path | str) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
