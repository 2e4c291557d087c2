import numpy as np
import pytest
import torch

from objerase.errors import ValidationError
from objerase.video import (
    ClipManifest,
    ManifestEntry,
    MaskTensor,
    VideoTensor,
    load_clip,
    load_mask_dir,
    save_clip,
    save_mask,
)


def _make_video(frames=4, size=(16, 16), value=None, seed=0):
    if value is None:
        rng = np.random.default_rng(seed)
        data = rng.random((3, frames, *size), dtype=np.float32)
    else:
        data = np.full((3, frames, *size), value, dtype=np.float32)
    return VideoTensor(torch.from_numpy(data))


class TestVideoTensor:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            VideoTensor(torch.full((3, 2, 4, 4), 1.5))

    def test_rejects_non_finite(self):
        data = torch.zeros(3, 2, 4, 4)
        data[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValidationError):
            VideoTensor(data)

    def test_rejects_wrong_channels(self):
        with pytest.raises(ValidationError):
            VideoTensor(torch.zeros(1, 2, 4, 4))

    def test_rejects_zero_frames(self):
        with pytest.raises(ValidationError):
            VideoTensor(torch.zeros(3, 0, 4, 4))


class TestMaskTensor:
    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            MaskTensor(torch.full((1, 2, 4, 4), 0.5))

    def test_accepts_binary(self):
        m = MaskTensor((torch.rand(1, 2, 4, 4) > 0.5).float())
        assert set(m.data.unique().tolist()) <= {0.0, 1.0}


class TestClipIO:
    def test_load_16_frames(self, tmp_path):
        save_clip(_make_video(frames=16, size=(64, 64)), tmp_path / "clip")
        video, mask = load_clip(tmp_path / "clip")
        assert tuple(video.data.shape) == (3, 16, 64, 64)
        assert mask is None

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValidationError):
            load_clip(tmp_path / "empty")

    def test_missing_directory_is_io_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_clip(tmp_path / "nope")

    def test_frame_mask_count_mismatch(self, tmp_path):
        d = tmp_path / "clip"
        save_clip(_make_video(frames=16), d)
        mask = MaskTensor((torch.rand(1, 15, 16, 16) > 0.5).float())
        save_mask(mask, d)
        with pytest.raises(ValidationError):
            load_clip(d)

    def test_mask_roundtrip_binary(self, tmp_path):
        d = tmp_path / "clip"
        save_clip(_make_video(frames=3), d)
        mask = MaskTensor((torch.rand(1, 3, 16, 16) > 0.7).float())
        save_mask(mask, d)
        _, loaded = load_clip(d)
        assert torch.equal(loaded.data, mask.data)

    def test_all_zero_clip_writes_black_frames(self, tmp_path):
        save_clip(_make_video(frames=4, value=0.0), tmp_path / "black")
        files = sorted(p.name for p in (tmp_path / "black").iterdir())
        assert files == [f"frame_{i:05d}.png" for i in range(1, 5)]
        video, _ = load_clip(tmp_path / "black")
        assert video.data.abs().max() == 0.0

    def test_half_value_roundtrips_within_one_level(self, tmp_path):
        # quantize/dequantize oracle: round(0.5*255)/255 = 128/255
        save_clip(_make_video(frames=1, value=0.5), tmp_path / "gray")
        video, _ = load_clip(tmp_path / "gray")
        expected = round(0.5 * 255) / 255.0
        assert torch.allclose(video.data, torch.full_like(video.data, expected))
        assert (video.data - 0.5).abs().max() < 1 / 255

    def test_roundtrip_error_bound(self, tmp_path):
        v = _make_video(frames=3, seed=7)
        save_clip(v, tmp_path / "c")
        loaded, _ = load_clip(tmp_path / "c")
        assert (loaded.data - v.data).abs().max() <= 0.5 / 255 + 1e-6

    def test_save_load_save_is_byte_identical(self, tmp_path):
        save_clip(_make_video(frames=3, seed=3), tmp_path / "a")
        loaded, _ = load_clip(tmp_path / "a")
        save_clip(loaded, tmp_path / "b")
        for fa, fb in zip(
            sorted((tmp_path / "a").iterdir()), sorted((tmp_path / "b").iterdir())
        ):
            assert fa.read_bytes() == fb.read_bytes()

    def test_load_save_load_fixpoint(self, tmp_path):
        save_clip(_make_video(frames=2, seed=9), tmp_path / "a")
        first, _ = load_clip(tmp_path / "a")
        save_clip(first, tmp_path / "b")
        second, _ = load_clip(tmp_path / "b")
        assert torch.equal(first.data, second.data)

    def test_load_mask_dir(self, tmp_path):
        mask = MaskTensor((torch.rand(1, 3, 8, 8) > 0.5).float())
        save_mask(mask, tmp_path / "m")
        assert torch.equal(load_mask_dir(tmp_path / "m").data, mask.data)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = ClipManifest(
            entries=[ManifestEntry(input="c/ori", gt="c/gt", mask="c/mask", frames=4)]
        )
        m.save(tmp_path / "manifest.json")
        loaded = ClipManifest.load(tmp_path / "manifest.json")
        assert loaded.format_version == 1
        assert loaded.entries == m.entries

    def test_schema_fields(self, tmp_path):
        import json

        m = ClipManifest(entries=[ManifestEntry(input="x", gt=None, mask=None, frames=2)])
        m.save(tmp_path / "m.json")
        payload = json.loads((tmp_path / "m.json").read_text())
        assert payload["format_version"] == 1
        assert payload["entries"][0] == {"input": "x", "gt": None, "mask": None, "frames": 2}

    def test_unknown_version_rejected(self, tmp_path):
        (tmp_path / "m.json").write_text('{"format_version": 99, "entries": []}')
        with pytest.raises(ValidationError):
            ClipManifest.load(tmp_path / "m.json")
