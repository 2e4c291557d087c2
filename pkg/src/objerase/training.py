"""Composite training objective, keyframe augmentation, loop, and gradient checks.

The objective is the flow-matching velocity regression plus a weighted
relation-distillation term computed from the denoiser's aligned hidden state,
with the timestep drawn uniformly per sample. Keyframe augmentation randomly
replaces every n-th input frame with its ground truth (mask zeroed) so the
model learns to propagate from known frames.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .denoiser import (
    RemovalModel,
    noise_latent,
    pixels_to_latent,
    save_checkpoint,
    velocity_target,
)
from .errors import GradientCheckError, TrainingDivergedError, ValidationError
from .masks import diff_mask, side_effect_mask, to_token_mask, token_index_sets
from .relation import TokenFeatures, relation_distillation_loss, relation_matrix, resample_features
from .video import ClipManifest, MaskTensor, VideoTensor, load_clip, load_mask_dir

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 0.1  # relation-distillation weight
    delta: float = 0.1  # difference-mask threshold
    steps: int = 500
    batch: int = 2
    lr: float = 2e-3
    warmup: int = 50
    ema: float = 0.999  # 0 disables
    kgp_augment: bool = True
    kgp_prob: float = 0.5
    stride_range: tuple[int, int] = (2, 10)
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 200

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValidationError("lambda must be >= 0")
        lo, hi = self.stride_range
        if lo < 2 or hi < lo:
            raise ValidationError(f"stride_range must satisfy 2 <= lo <= hi, got {self.stride_range}")


Triple = tuple[VideoTensor, VideoTensor, MaskTensor]  # (v_ori, v_gt, m_obj)


def kgp_augment(triple: Triple, rng: np.random.Generator, stride_range=(2, 10)) -> Triple:
    """Replace every n-th input frame by ground truth and zero its mask.

    n is sampled from stride_range; frames f with f % n == 0 become keyframes.
    Ground truth is never altered.
    """
    v_ori, v_gt, m_obj = triple
    if v_ori.frames < 2:
        raise ValidationError("keyframe augmentation needs >= 2 frames")
    n = int(rng.integers(stride_range[0], stride_range[1] + 1))
    keyframes = torch.arange(0, v_ori.frames, n)
    ori = v_ori.data.clone()
    mask = m_obj.data.clone()
    ori[:, keyframes] = v_gt.data[:, keyframes]
    mask[:, keyframes] = 0.0
    return VideoTensor(ori, frame_rate=v_ori.frame_rate), v_gt, MaskTensor(mask)


def _clip_relation_loss(
    model: RemovalModel, hidden_b: torch.Tensor, triple: Triple, grid, delta: float
):
    v_ori, v_gt, m_obj = triple
    teacher = model.teacher.encode(v_ori)
    teacher = resample_features(teacher, grid)
    adapted = model.adapter.adapt(teacher)
    r_teacher = relation_matrix(adapted)
    r_student = relation_matrix(TokenFeatures(hidden_b, grid, source="student_hidden"))
    m_diff = diff_mask(v_ori, v_gt, delta)
    m_se = side_effect_mask(m_diff, m_obj)
    sets = token_index_sets(to_token_mask(m_obj, grid), to_token_mask(m_se, grid))
    return relation_distillation_loss(r_student, r_teacher, sets)


def total_loss(
    model: RemovalModel,
    batch: list[Triple],
    cfg: TrainConfig,
    generator: Optional[torch.Generator] = None,
    draws: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
) -> tuple[torch.Tensor, dict]:
    """Flow-matching MSE plus lambda-weighted relation distillation.

    t and the noise are drawn from `generator` unless fixed `draws`
    (t [B], eps [B, C, F, h, w]) are supplied (used by gradient checks).
    """
    if not batch:
        raise ValidationError("empty batch")
    shape0 = batch[0][0].data.shape
    if any(t[0].data.shape != shape0 for t in batch):
        raise ValidationError("all clips in a batch must share [C, F, H, W]")
    p = model.patch
    dtype = next(model.parameters()).dtype
    z0 = torch.stack([pixels_to_latent(t[1].data.unsqueeze(0), p)[0] for t in batch]).to(dtype)
    v_in = torch.stack([pixels_to_latent(t[0].data.unsqueeze(0), p)[0] for t in batch]).to(dtype)
    grid = model.token_grid(batch[0][0])
    m_tok = torch.stack([to_token_mask(t[2], grid).data for t in batch]).to(dtype)
    ctx = torch.stack([model.condition(t[0], t[2]).per_frame_context() for t in batch])

    if draws is not None:
        t, eps = draws
    else:
        t = torch.rand(len(batch), generator=generator)
        eps = torch.randn(z0.shape, generator=generator)
    t, eps = t.to(dtype), eps.to(dtype)

    z_t = noise_latent(z0, eps, t)
    v_tgt = velocity_target(z0, eps)
    v_hat, hidden = model.denoiser(z_t, t, ctx, m_tok, v_in)
    flow = ((v_hat - v_tgt) ** 2).mean()

    if cfg.lambda_ == 0:
        total = flow
        components = {"flow": float(flow.detach()), "oird": 0.0}
    else:
        oird = flow.new_zeros(())
        for b, triple in enumerate(batch):
            clip_loss, _ = _clip_relation_loss(model, hidden[b], triple, grid, cfg.delta)
            oird = oird + clip_loss
        oird = oird / len(batch)
        total = flow + cfg.lambda_ * oird
        components = {"flow": float(flow.detach()), "oird": float(oird.detach())}
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss: components={components}")
    return total, components


class ClipStore:
    """Manifest-backed clip triples, decoded once and cached as uint8."""

    def __init__(self, manifest_path: Path | str):
        manifest_path = Path(manifest_path)
        self.manifest = ClipManifest.load(manifest_path)
        if not self.manifest.entries:
            raise ValidationError(f"manifest has no entries: {manifest_path}")
        self.root = manifest_path.parent
        self._cache: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def get(self, i: int) -> Triple:
        if i not in self._cache:
            entry = self.manifest.entries[i]
            v_ori, mask = load_clip(self.root / entry.input)
            if entry.gt is None:
                raise ValidationError(f"entry {i} has no ground truth; cannot train on it")
            v_gt, _ = load_clip(self.root / entry.gt)
            if mask is None:
                if entry.mask is None:
                    raise ValidationError(f"entry {i} has no object mask")
                mask = load_mask_dir(self.root / entry.mask)
            self._cache[i] = (
                (v_ori.data * 255).round().to(torch.uint8),
                (v_gt.data * 255).round().to(torch.uint8),
                mask.data.to(torch.uint8),
            )
        ori8, gt8, m8 = self._cache[i]
        return (
            VideoTensor(ori8.float() / 255.0),
            VideoTensor(gt8.float() / 255.0),
            MaskTensor(m8.float()),
        )


def train(
    manifest_path: Path | str,
    model: RemovalModel,
    cfg: TrainConfig,
    out_ckpt: Path | str,
    log_path: Optional[Path | str] = None,
    run_config: Optional[dict] = None,
) -> list[dict]:
    """Optimize the model on a clip manifest; deterministic given cfg.seed.

    Adam with linear warmup and an EMA of the trainables; metrics are written
    as line-delimited JSON {step, flow, oird, total}. A non-finite loss aborts
    after saving the last good parameters.
    """
    store = ClipStore(manifest_path)
    out_ckpt = Path(out_ckpt)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    order_rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()} if cfg.ema > 0 else None

    metrics: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    prev_state = None
    try:
        for step in range(1, cfg.steps + 1):
            idx = order_rng.choice(len(store), size=min(cfg.batch, len(store)), replace=False)
            batch = []
            for i in idx:
                triple = store.get(int(i))
                if cfg.kgp_augment and triple[0].frames >= 2 and order_rng.random() < cfg.kgp_prob:
                    triple = kgp_augment(triple, order_rng, cfg.stride_range)
                batch.append(triple)

            prev_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            try:
                loss, parts = total_loss(model, batch, cfg, generator=gen)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
            except TrainingDivergedError as exc:
                model.load_state_dict(prev_state)
                save_checkpoint(model, out_ckpt, run_config=run_config, ema_state=ema)
                raise TrainingDivergedError(
                    f"diverged at step {step}; last good checkpoint saved to {out_ckpt}"
                ) from exc

            # linear warmup, then cosine decay to 10% of the peak rate
            if step <= cfg.warmup:
                lr_now = cfg.lr * step / max(1, cfg.warmup)
            else:
                frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
                lr_now = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
            for group in opt.param_groups:
                group["lr"] = lr_now
            opt.zero_grad()
            loss.backward()
            opt.step()

            if ema is not None:
                # warmup ramp keeps the average close to the raw weights early on
                decay = min(cfg.ema, (1.0 + step) / (10.0 + step))
                with torch.no_grad():
                    state = model.state_dict()
                    for k, v in ema.items():
                        if v.dtype.is_floating_point:
                            v.mul_(decay).add_(state[k], alpha=1.0 - decay)

            record = {"step": step, "flow": parts["flow"], "oird": parts["oird"],
                      "total": float(loss.detach())}
            metrics.append(record)
            if log_file and step % cfg.log_every == 0:
                log_file.write(json.dumps(record) + "\n")
            if step % cfg.ckpt_every == 0:
                save_checkpoint(model, out_ckpt, run_config=run_config, ema_state=ema)
    finally:
        if log_file:
            log_file.close()

    save_checkpoint(model, out_ckpt, run_config=run_config, ema_state=ema)
    return metrics


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: list[tuple[str, torch.nn.Parameter]],
    n_probes: int = 50,
    step: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    seed: int = 0,
    raise_on_fail: bool = True,
) -> dict:
    """Compare analytic gradients against central finite differences.

    loss_fn must be deterministic and built on float64 parameters. A probe
    passes when |analytic - fd| <= atol + rtol * max(|analytic|, |fd|); the
    reported relative error uses max(|analytic|, |fd|, atol/rtol) as the
    scale so structurally tiny gradients do not produce spurious blowups.
    """
    if not named_params:
        raise ValidationError("no parameters to probe")
    for name, p in named_params:
        if p.dtype != torch.float64:
            raise ValidationError(f"gradient check requires float64 params ({name} is {p.dtype})")

    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in named_params])
    probes = []
    worst = (0.0, "<none>")
    for _ in range(n_probes):
        pi = int(rng.choice(len(named_params), p=sizes / sizes.sum()))
        fi = int(rng.integers(0, sizes[pi]))
        name, p = named_params[pi]
        analytic = 0.0 if grads[pi] is None else float(grads[pi].flatten()[fi])

        with torch.no_grad():
            flat = p.data.view(-1)
            orig = float(flat[fi])
            h = step * max(1.0, abs(orig))
            flat[fi] = orig + h
            lo_hi = float(loss_fn())
            flat[fi] = orig - h
            lo_lo = float(loss_fn())
            flat[fi] = orig
        fd = (lo_hi - lo_lo) / (2.0 * h)

        scale = max(abs(analytic), abs(fd), atol / rtol)
        rel = abs(analytic - fd) / scale
        probes.append({"param": f"{name}[{fi}]", "analytic": analytic, "fd": fd, "rel_err": rel})
        if rel > worst[0]:
            worst = (rel, f"{name}[{fi}]")

    report = {
        "probes": len(probes),
        "max_rel_err": worst[0],
        "worst_param": worst[1],
        "passed": worst[0] <= rtol,
        "details": probes,
    }
    if raise_on_fail and not report["passed"]:
        raise GradientCheckError(
            f"gradient mismatch: rel err {worst[0]:.3e} at {worst[1]} exceeds {rtol:.0e}"
        )
    return report


def model_gradient_check(
    model: RemovalModel,
    batch: list[Triple],
    cfg: TrainConfig,
    n_probes: int = 50,
    seed: int = 0,
    raise_on_fail: bool = True,
) -> dict:
    """Gradient check of the full objective on a fixed probe batch (float64)."""
    model = model.double()
    gen = torch.Generator().manual_seed(seed)
    p = model.patch
    shape = (len(batch), model.cfg.dit.latent_channels, batch[0][0].frames,
             batch[0][0].height // p, batch[0][0].width // p)
    draws = (
        torch.rand(len(batch), generator=gen, dtype=torch.float64),
        torch.randn(shape, generator=gen, dtype=torch.float64),
    )

    def loss_fn():
        return total_loss(model, batch, cfg, draws=draws)[0]

    named = [(k, v) for k, v in model.named_parameters()]
    return gradient_check(loss_fn, named, n_probes=n_probes, seed=seed,
                          raise_on_fail=raise_on_fail)
