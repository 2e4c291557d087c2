"""Procedural generator of paired clips: with-object / without-object / object mask.

Each scene is a static procedural background plus a single moving object that
casts a deterministic side effect (shadow or reflection). The ground-truth clip
is the background alone; the input clip composites the side effect and then the
object on top. The object mask covers exactly the object silhouette, never the
side-effect pixels, so the pixel difference between the pair decomposes into
object region plus side-effect region by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .video import ClipManifest, ManifestEntry, MaskTensor, VideoTensor, save_clip, save_mask

OBJECT_KINDS = ("square", "disc")
SIDE_EFFECTS = ("shadow", "reflection", "none")
BACKGROUNDS = ("flat", "gradient", "checker")


@dataclass(frozen=True)
class SceneSpec:
    """Full description of one synthetic scene; rendering is a pure function of it."""

    resolution: tuple[int, int]  # (H, W)
    frames: int
    object_kind: str = "square"
    start: tuple[float, float] = (16.0, 16.0)  # (row, col) center at frame 0
    velocity: tuple[float, float] = (0.5, 0.5)  # (drow, dcol) per frame
    object_size: int = 6  # half-size for squares, radius for discs
    side_effect: str = "shadow"
    shadow_offset: tuple[int, int] = (8, 8)  # (drow, dcol) of the effect region
    shadow_opacity: float = 0.5
    background: str = "flat"
    seed: int = 0

    def __post_init__(self):
        if self.object_kind not in OBJECT_KINDS:
            raise ValidationError(f"object_kind must be one of {OBJECT_KINDS}")
        if self.side_effect not in SIDE_EFFECTS:
            raise ValidationError(f"side_effect must be one of {SIDE_EFFECTS}")
        if self.background not in BACKGROUNDS:
            raise ValidationError(f"background must be one of {BACKGROUNDS}")
        if not (0.0 < self.shadow_opacity <= 1.0):
            raise ValidationError(f"shadow_opacity must be in (0, 1], got {self.shadow_opacity}")
        if self.frames < 1:
            raise ValidationError("frames must be >= 1")


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Static background, [H, W, 3] float32. Colors kept off-black so darkening
    and object contrast always register in the pixel difference."""
    H, W = spec.resolution
    c0 = rng.uniform(0.25, 0.95, size=3).astype(np.float32)
    c1 = rng.uniform(0.25, 0.95, size=3).astype(np.float32)
    if spec.background == "flat":
        bg = np.broadcast_to(c0, (H, W, 3)).copy()
    elif spec.background == "gradient":
        ramp = np.linspace(0.0, 1.0, W, dtype=np.float32)[None, :, None]  # horizontal
        bg = c0 * (1.0 - ramp) + c1 * ramp
        bg = np.broadcast_to(bg, (H, W, 3)).astype(np.float32).copy()
    else:  # checker
        cell = int(rng.integers(4, 9))
        rows = (np.arange(H) // cell)[:, None]
        cols = (np.arange(W) // cell)[None, :]
        board = ((rows + cols) % 2).astype(np.float32)[:, :, None]
        bg = c0 * (1.0 - board) + c1 * board
    return np.ascontiguousarray(bg, dtype=np.float32)


def _object_color(bg: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean = bg.mean(axis=(0, 1))
    for _ in range(64):
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        if np.linalg.norm(color - mean) >= 0.45:
            return color
    # antipodal fallback; always far from the mean
    return np.where(mean > 0.5, 0.0, 1.0).astype(np.float32)


def _silhouette(spec: SceneSpec, frame: int) -> np.ndarray:
    """Object silhouette at a frame, [H, W] bool; raises if it exits the frame."""
    H, W = spec.resolution
    s = spec.object_size
    cr = spec.start[0] + spec.velocity[0] * frame
    cc = spec.start[1] + spec.velocity[1] * frame
    if cr - s < 0 or cr + s > H - 1 or cc - s < 0 or cc + s > W - 1:
        raise ValidationError(
            f"object exits frame at t={frame}: center=({cr:.1f},{cc:.1f}) size={s}"
        )
    rr = np.arange(H, dtype=np.float32)[:, None]
    cc_grid = np.arange(W, dtype=np.float32)[None, :]
    if spec.object_kind == "square":
        return (np.abs(rr - cr) <= s) & (np.abs(cc_grid - cc) <= s)
    return (rr - cr) ** 2 + (cc_grid - cc) ** 2 <= s * s


def _shift(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Translate a boolean mask by (dr, dc), dropping pixels pushed off-frame."""
    H, W = mask.shape
    out = np.zeros_like(mask)
    src_r = slice(max(0, -dr), min(H, H - dr))
    src_c = slice(max(0, -dc), min(W, W - dc))
    dst_r = slice(max(0, dr), min(H, H + dr))
    dst_c = slice(max(0, dc), min(W, W + dc))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def generate_pair(spec: SceneSpec) -> tuple[VideoTensor, VideoTensor, MaskTensor]:
    """Render (V_ori, V_gt, M_obj) for a scene; bit-deterministic given the spec."""
    H, W = spec.resolution
    rng = np.random.default_rng(spec.seed)
    bg = _render_background(spec, rng)
    obj_color = _object_color(bg, rng)

    ori = np.empty((spec.frames, H, W, 3), dtype=np.float32)
    gt = np.empty_like(ori)
    obj_mask = np.empty((spec.frames, H, W), dtype=np.float32)

    for f in range(spec.frames):
        sil = _silhouette(spec, f)
        frame = bg.copy()
        if spec.side_effect == "shadow":
            region = _shift(sil, *spec.shadow_offset)
            frame[region] *= 1.0 - spec.shadow_opacity
        elif spec.side_effect == "reflection":
            # mirrored copy hung below the object, blended onto the background
            bottom = int(round(2.0 * (spec.start[0] + spec.velocity[0] * f + spec.object_size)))
            region = _shift(sil[::-1], bottom - (H - 1), 0)
            frame[region] = (1.0 - spec.shadow_opacity) * frame[region] + (
                spec.shadow_opacity * obj_color
            )
        frame[sil] = obj_color
        if spec.side_effect != "none":
            changed = (frame != bg).any(axis=-1) & ~sil
            if not changed.any():
                raise ValidationError(
                    f"side effect fully occluded or off-frame at t={f}; adjust offsets"
                )
        ori[f] = frame
        gt[f] = bg
        obj_mask[f] = sil.astype(np.float32)

    v_ori = VideoTensor(torch.from_numpy(ori).permute(3, 0, 1, 2).contiguous())
    v_gt = VideoTensor(torch.from_numpy(gt).permute(3, 0, 1, 2).contiguous())
    m_obj = MaskTensor(torch.from_numpy(obj_mask).unsqueeze(0).contiguous())
    return v_ori, v_gt, m_obj


@dataclass
class SpecSampler:
    """Distribution over SceneSpecs; sample() is deterministic given the rng."""

    resolution: tuple[int, int] = (64, 64)
    frames: int = 16
    object_kinds: tuple[str, ...] = OBJECT_KINDS
    side_effects: tuple[str, ...] = ("shadow", "reflection")
    backgrounds: tuple[str, ...] = BACKGROUNDS
    size_range: tuple[int, int] = (5, 9)
    speed_range: tuple[float, float] = (-1.0, 1.0)
    opacity_range: tuple[float, float] = (0.35, 0.7)

    def sample(self, rng: np.random.Generator, seed: int) -> SceneSpec:
        H, W = self.resolution
        size = int(rng.integers(self.size_range[0], self.size_range[1] + 1))
        kind = str(rng.choice(self.object_kinds))
        effect = str(rng.choice(self.side_effects))
        background = str(rng.choice(self.backgrounds))
        vel = rng.uniform(*self.speed_range, size=2)
        # start range that keeps the whole linear path inside the frame
        travel = vel * (self.frames - 1)
        lo = np.maximum(size + 1.0, size + 1.0 - np.minimum(travel, 0.0))
        hi = np.array([H - 2.0 - size, W - 2.0 - size]) - np.maximum(travel, 0.0)
        if (hi <= lo).any():  # too fast for this frame count; park it
            vel = np.zeros(2)
            lo = np.array([size + 1.0, size + 1.0])
            hi = np.array([H - 2.0 - size, W - 2.0 - size])
        start = rng.uniform(lo, hi)
        offset_mag = size + int(rng.integers(2, 5))
        offset = (
            offset_mag * int(rng.choice([-1, 1])),
            offset_mag * int(rng.choice([-1, 1])),
        )
        return SceneSpec(
            resolution=self.resolution,
            frames=self.frames,
            object_kind=kind,
            start=(float(start[0]), float(start[1])),
            velocity=(float(vel[0]), float(vel[1])),
            object_size=size,
            side_effect=effect,
            shadow_offset=offset,
            shadow_opacity=float(rng.uniform(*self.opacity_range)),
            background=background,
            seed=seed,
        )


def make_dataset(
    out_dir: Path | str,
    n_clips: int,
    sampler: SpecSampler | None = None,
    seed: int = 0,
) -> ClipManifest:
    """Write n_clips paired clip directories plus manifest.json under out_dir.

    Layout per clip: clip_XXXXX/{ori,gt,mask}; manifest paths are relative to
    out_dir. Clip seeds derive deterministically from the master seed.
    """
    if n_clips < 1:
        raise ValidationError("n_clips must be >= 1")
    sampler = sampler or SpecSampler()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    manifest = ClipManifest()
    for i in range(n_clips):
        clip_seed = int(master.integers(0, 2**31 - 1))
        spec = sampler.sample(np.random.default_rng(clip_seed), clip_seed)
        v_ori, v_gt, m_obj = generate_pair(spec)
        clip_dir = out_dir / f"clip_{i:05d}"
        save_clip(v_ori, clip_dir / "ori")
        save_clip(v_gt, clip_dir / "gt")
        save_mask(m_obj, clip_dir / "mask")
        manifest.entries.append(
            ManifestEntry(
                input=f"clip_{i:05d}/ori",
                gt=f"clip_{i:05d}/gt",
                mask=f"clip_{i:05d}/mask",
                frames=spec.frames,
            )
        )
    manifest.save(out_dir / "manifest.json")
    return manifest
