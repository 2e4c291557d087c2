"""Core clip data model and frame-directory I/O.

Clips are stored as directories of zero-padded 8-bit PNGs (``frame_00001.png``,
...), optionally accompanied by ``mask_00001.png``, ... in the same directory.
Datasets are described by a JSON manifest:

    {"format_version": 1,
     "entries": [{"input": ..., "gt": ..., "mask": ..., "frames": N}, ...]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError

MANIFEST_VERSION = 1

_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")
_MASK_RE = re.compile(r"^mask_(\d+)\.png$")


@dataclass(frozen=True)
class VideoTensor:
    """A clip as float values in [0, 1], shaped [3, F, H, W]."""

    data: torch.Tensor
    frame_rate: float = 24.0

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[0] != 3:
            raise ValidationError(f"video data must be [3, F, H, W], got {tuple(d.shape)}")
        if d.shape[1] < 1:
            raise ValidationError("video needs at least one frame")
        if not torch.isfinite(d).all():
            raise ValidationError("video contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValidationError(
                f"video values outside [0, 1]: min={d.min():.6g} max={d.max():.6g}"
            )

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class MaskTensor:
    """A binary per-pixel per-frame mask, shaped [1, F, H, W], values in {0, 1}."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[0] != 1:
            raise ValidationError(f"mask data must be [1, F, H, W], got {tuple(d.shape)}")
        if not ((d == 0) | (d == 1)).all():
            raise ValidationError("mask values must be exactly 0 or 1")

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def matches(self, video: VideoTensor) -> bool:
        return self.data.shape[1:] == video.data.shape[1:]


@dataclass
class ManifestEntry:
    input: str
    gt: Optional[str]
    mask: Optional[str]
    frames: int


@dataclass
class ClipManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def save(self, path: Path | str) -> None:
        payload = {
            "format_version": self.format_version,
            "entries": [
                {"input": e.input, "gt": e.gt, "mask": e.mask, "frames": e.frames}
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "ClipManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        payload = json.loads(path.read_text())
        if payload.get("format_version") != MANIFEST_VERSION:
            raise ValidationError(
                f"unsupported manifest format_version: {payload.get('format_version')!r}"
            )
        entries = [
            ManifestEntry(
                input=e["input"], gt=e.get("gt"), mask=e.get("mask"), frames=int(e["frames"])
            )
            for e in payload["entries"]
        ]
        return cls(entries=entries, format_version=MANIFEST_VERSION)


def _numbered_files(dir_path: Path, pattern: re.Pattern) -> list[Path]:
    found = []
    for p in dir_path.iterdir():
        m = pattern.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    return [p for _, p in found]


def load_clip(dir_path: Path | str) -> tuple[VideoTensor, Optional[MaskTensor]]:
    """Load a frame directory into a VideoTensor plus its co-located mask, if any.

    Pixel values are scaled to [0, 1]; masks are binarized at 0.5.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FileNotFoundError(f"clip directory not found: {dir_path}")
    frame_files = _numbered_files(dir_path, _FRAME_RE)
    if not frame_files:
        raise ValidationError(f"no frame_*.png files in {dir_path}")
    mask_files = _numbered_files(dir_path, _MASK_RE)
    if mask_files and len(mask_files) != len(frame_files):
        raise ValidationError(
            f"{dir_path}: {len(frame_files)} frames but {len(mask_files)} masks"
        )

    frames = [_read_frame(p) for p in frame_files]
    video = VideoTensor(torch.stack(frames, dim=1))  # [3, F, H, W]
    mask = None
    if mask_files:
        mask = MaskTensor(torch.stack([_read_mask(p) for p in mask_files], dim=1))
        if not mask.matches(video):
            raise ValidationError(f"{dir_path}: mask frames do not match video frames")
    return video, mask


def load_mask_dir(dir_path: Path | str) -> MaskTensor:
    """Load a directory containing only mask_*.png files."""
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FileNotFoundError(f"mask directory not found: {dir_path}")
    mask_files = _numbered_files(dir_path, _MASK_RE)
    if not mask_files:
        raise ValidationError(f"no mask_*.png files in {dir_path}")
    return MaskTensor(torch.stack([_read_mask(p) for p in mask_files], dim=1))


def _read_frame(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0  # [H, W, 3]
    return torch.from_numpy(arr).permute(2, 0, 1)  # [3, H, W]


def _read_mask(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0  # [H, W]
    return (torch.from_numpy(arr) > 0.5).float().unsqueeze(0)  # [1, H, W]


def save_clip(video: VideoTensor, dir_path: Path | str) -> None:
    """Write a clip as 8-bit PNG frames; round-trips within 1/255 per channel."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    arr = video.data.permute(1, 2, 3, 0).numpy()  # [F, H, W, 3]
    quant = np.rint(arr * 255.0).astype(np.uint8)
    for f in range(arr.shape[0]):
        Image.fromarray(quant[f], mode="RGB").save(dir_path / f"frame_{f + 1:05d}.png")


def save_mask(mask: MaskTensor, dir_path: Path | str) -> None:
    """Write a mask as 8-bit PNG frames (0 or 255)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    arr = (mask.data[0].numpy() * 255.0).astype(np.uint8)  # [F, H, W]
    for f in range(arr.shape[0]):
        Image.fromarray(arr[f], mode="L").save(dir_path / f"mask_{f + 1:05d}.png")
