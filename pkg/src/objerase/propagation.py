"""Keyframe-guided scheduling for long clips.

Clips longer than the processing window are handled in three phases: a pass
over a stride-subsampled keyframe sequence, injection of those results back
into the long clip as known frames (mask zeroed), and overlapping windowed
passes whose boundaries are aligned so each window after the first starts at
the previous window's last keyframe. Overlapping frames keep the former
window's prediction, and keyframes are hard-copied into the final output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .denoiser import RemovalModel, sample
from .errors import ValidationError
from .video import MaskTensor, VideoTensor

DEFAULT_WINDOW = 81

# model callable contract: (clip, mask, seed) -> removed clip of equal length
RemovalFn = Callable[[VideoTensor, MaskTensor, int], VideoTensor]


def keyframe_stride(total_frames: int, window: int) -> int:
    """Stride k = ceil(F / W); every k-th frame becomes a keyframe."""
    if total_frames < 1 or window < 1:
        raise ValidationError("frame count and window must be >= 1")
    return math.ceil(total_frames / window)


@dataclass(frozen=True)
class KeyframeSchedule:
    total_frames: int
    window: int
    stride: int
    keyframe_indices: tuple[int, ...]

    def __post_init__(self):
        if self.stride != keyframe_stride(self.total_frames, self.window):
            raise ValidationError("stride inconsistent with frame count and window")
        expected = tuple(range(0, self.total_frames, self.stride))
        if self.keyframe_indices != expected:
            raise ValidationError("keyframe indices must be {0, k, 2k, ...}")
        if len(self.keyframe_indices) > self.window:
            raise ValidationError("more keyframes than fit in one window")


@dataclass(frozen=True)
class OverlapDirective:
    """For one adjacent window pair: the shared keyframe starting the latter
    window, whose overlapping frames are dropped in favor of the former."""

    shared_keyframe: int
    drop: str = "latter"


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[tuple[int, int], ...]  # [start, end) intervals
    overlap_directives: tuple[OverlapDirective, ...]

    def kept_range(self, i: int) -> tuple[int, int]:
        """Frames window i contributes to the merged output (former wins)."""
        start, end = self.windows[i]
        if i == 0:
            return (start, end)
        return (self.windows[i - 1][1], end)


def plan(total_frames: int, window: int = DEFAULT_WINDOW) -> tuple[KeyframeSchedule, WindowPlan]:
    """Deterministic decomposition of a long clip into keyframes and windows."""
    k = keyframe_stride(total_frames, window)
    schedule = KeyframeSchedule(
        total_frames, window, k, tuple(range(0, total_frames, k))
    )
    if k == 1:
        return schedule, WindowPlan(((0, total_frames),), ())
    if k >= window:
        raise ValidationError(
            f"stride {k} >= window {window}: clip too long for a single keyframe level"
        )
    windows = [(0, min(window, total_frames))]
    directives = []
    while windows[-1][1] < total_frames:
        prev_end = windows[-1][1]
        start = ((prev_end - 1) // k) * k  # last keyframe inside the previous window
        windows.append((start, min(start + window, total_frames)))
        directives.append(OverlapDirective(shared_keyframe=start))
    return schedule, WindowPlan(tuple(windows), tuple(directives))


def run_keyframe_pass(
    model: RemovalFn,
    v_ori: VideoTensor,
    m_obj: MaskTensor,
    schedule: KeyframeSchedule,
    seed: int = 0,
) -> dict[int, torch.Tensor]:
    """Process the subsampled keyframe sequence as one clip.

    Returns {frame_index: [3, H, W] output frame}; empty when stride is 1
    (the single window already covers everything).
    """
    if schedule.stride == 1:
        return {}
    idx = torch.tensor(schedule.keyframe_indices)
    if idx.numel() > schedule.window:
        raise ValidationError("keyframe sequence longer than the window")
    key_clip = VideoTensor(v_ori.data[:, idx], frame_rate=v_ori.frame_rate)
    key_mask = MaskTensor(m_obj.data[:, idx])
    out = model(key_clip, key_mask, seed)
    return {int(f): out.data[:, j] for j, f in enumerate(schedule.keyframe_indices)}


def remove_long(
    model: RemovalFn,
    v_ori: VideoTensor,
    m_obj: MaskTensor,
    window: int = DEFAULT_WINDOW,
    seed: int = 0,
) -> VideoTensor:
    """Full long-clip removal: keyframe pass, injection, windowed passes, merge."""
    if not m_obj.matches(v_ori):
        raise ValidationError("mask does not match video dimensions")
    total = v_ori.frames
    schedule, wplan = plan(total, window)
    if schedule.stride == 1:
        return model(v_ori, m_obj, seed)

    key_out = run_keyframe_pass(model, v_ori, m_obj, schedule, seed)

    # inject keyframe results as known content
    work_v = v_ori.data.clone()
    work_m = m_obj.data.clone()
    for f, frame in key_out.items():
        work_v[:, f] = frame
        work_m[:, f] = 0.0

    out = torch.empty_like(v_ori.data)
    for i, (start, end) in enumerate(wplan.windows):
        clip = VideoTensor(work_v[:, start:end], frame_rate=v_ori.frame_rate)
        mask = MaskTensor(work_m[:, start:end])
        pred = model(clip, mask, seed + 1 + i)
        keep_s, keep_e = wplan.kept_range(i)
        out[:, keep_s:keep_e] = pred.data[:, keep_s - start : keep_e - start]

    for f, frame in key_out.items():  # keyframes stay verbatim
        out[:, f] = frame
    return VideoTensor(out, frame_rate=v_ori.frame_rate)


@dataclass
class ClipRemover:
    """Adapts a trained model to the (clip, mask, seed) callable the scheduler uses."""

    model: RemovalModel
    steps: int = 20

    def __call__(self, v: VideoTensor, m: MaskTensor, seed: int) -> VideoTensor:
        return sample(self.model, v, m, steps=self.steps, seed=seed)


def plan_as_dict(schedule: KeyframeSchedule, wplan: WindowPlan) -> dict:
    """JSON-friendly view of a schedule/plan pair."""
    return {
        "frames": schedule.total_frames,
        "window": schedule.window,
        "stride": schedule.stride,
        "keyframes": list(schedule.keyframe_indices),
        "windows": [
            {"start": s, "end": e, "keep": list(wplan.kept_range(i))}
            for i, (s, e) in enumerate(wplan.windows)
        ],
        "overlaps": [
            {"shared_keyframe": d.shared_keyframe, "drop": d.drop}
            for d in wplan.overlap_directives
        ],
    }
