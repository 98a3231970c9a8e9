import numpy as np
import pandas as pd
import pytest

from data_io import (HEADER_BYTES, FeatureCache, SyntheticSpec, generate_synthetic_dataset,
                     iter_annotations, load_manifest, read_feature_file, read_header,
                     write_feature_file)
from utils import FormatError, ValidationError


def _manifest(path, rows):
    path.write_text(pd.DataFrame(rows).to_json(orient="records", lines=True) + "\n", encoding="utf-8")
    return path


class TestFeatureFiles:

    def test_round_trip_is_byte_identical(self, tmp_path):
        m = np.array([[1.0, -2.5], [0.125, 3.0], [7.0, 0.0]], dtype=np.float32)
        write_feature_file(tmp_path / "a.tgf", m)
        back = read_feature_file(tmp_path / "a.tgf")
        np.testing.assert_array_equal(back, m)
        write_feature_file(tmp_path / "b.tgf", back)
        assert (tmp_path / "a.tgf").read_bytes() == (tmp_path / "b.tgf").read_bytes()
        assert len((tmp_path / "a.tgf").read_bytes()) == HEADER_BYTES + 4 * 6

    def test_header(self, tmp_path):
        write_feature_file(tmp_path / "a.tgf", np.zeros((5, 3)))
        assert read_header(tmp_path / "a.tgf") == (5, 3)

    def test_empty_matrix(self, tmp_path):
        write_feature_file(tmp_path / "e.tgf", np.zeros((0, 4)))
        assert len((tmp_path / "e.tgf").read_bytes()) == HEADER_BYTES
        assert read_feature_file(tmp_path / "e.tgf").shape == (0, 4)

    def test_bad_magic_at_offset_zero(self, tmp_path):
        write_feature_file(tmp_path / "a.tgf", np.ones((2, 2)))
        raw = bytearray((tmp_path / "a.tgf").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "a.tgf").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            read_feature_file(tmp_path / "a.tgf")
        assert info.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        write_feature_file(tmp_path / "a.tgf", np.ones((3, 2)))
        raw = (tmp_path / "a.tgf").read_bytes()[:-5]
        (tmp_path / "a.tgf").write_bytes(raw)
        with pytest.raises(FormatError) as info:
            read_feature_file(tmp_path / "a.tgf")
        assert info.value.offset == len(raw)

    def test_truncated_header(self, tmp_path):
        (tmp_path / "a.tgf").write_bytes(b"TGF1\x02\x00")
        with pytest.raises(FormatError) as info:
            read_feature_file(tmp_path / "a.tgf")
        assert info.value.offset == 6

    def test_trailing_bytes(self, tmp_path):
        write_feature_file(tmp_path / "a.tgf", np.ones((1, 2)))
        with open(tmp_path / "a.tgf", "ab") as fh:
            fh.write(b"\x00\x00")
        with pytest.raises(FormatError) as info:
            read_feature_file(tmp_path / "a.tgf")
        assert info.value.offset == HEADER_BYTES + 8

    def test_non_finite_on_write(self, tmp_path):
        m = np.ones((2, 3))
        m[1, 1] = np.nan
        with pytest.raises(FormatError) as info:
            write_feature_file(tmp_path / "a.tgf", m)
        assert info.value.offset == HEADER_BYTES + 4 * 4
        assert not (tmp_path / "a.tgf").exists()

    def test_non_finite_on_read(self, tmp_path):
        write_feature_file(tmp_path / "a.tgf", np.ones((2, 2)))
        raw = bytearray((tmp_path / "a.tgf").read_bytes())
        raw[HEADER_BYTES + 4:HEADER_BYTES + 8] = np.array([np.inf], dtype="<f4").tobytes()
        (tmp_path / "a.tgf").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            read_feature_file(tmp_path / "a.tgf")
        assert info.value.offset == HEADER_BYTES + 4

    def test_rank_must_be_two(self, tmp_path):
        with pytest.raises(FormatError):
            write_feature_file(tmp_path / "a.tgf", np.ones(3))


class TestManifest:

    @pytest.fixture
    def files(self, tmp_path):
        write_feature_file(tmp_path / "v.tgf", np.zeros((20, 4)))
        write_feature_file(tmp_path / "q.tgf", np.ones((3, 4)))
        return tmp_path

    def _row(self, t_s, t_e, **extra):
        return {"video_id": "v1", "frame_feature_path": "v.tgf", "duration_frames": 20,
                "annotations": [{"query_feature_path": "q.tgf", "t_s": t_s, "t_e": t_e, **extra}]}

    def test_valid_entry_resolves_relative_paths(self, files):
        entries = load_manifest(_manifest(files / "m.jsonl", [self._row(4, 10, query_id="walk")]))
        assert len(entries) == 1
        e = entries[0]
        assert e.frame_feature_path == str(files / "v.tgf")
        ann = e.annotations[0]
        assert (ann.t_s, ann.t_e, ann.query_id) == (4, 10, "walk")
        assert ann.query_feature_path == str(files / "q.tgf")

    def test_default_query_id(self, files):
        entries = load_manifest(_manifest(files / "m.jsonl", [self._row(0, 0)]))
        assert entries[0].annotations[0].query_id == "v1#0"

    def test_end_past_duration_names_video(self, files):
        with pytest.raises(ValidationError, match="v1"):
            load_manifest(_manifest(files / "m.jsonl", [self._row(4, 25)]))

    def test_start_after_end(self, files):
        with pytest.raises(ValidationError):
            load_manifest(_manifest(files / "m.jsonl", [self._row(9, 3)]))

    def test_frame_count_mismatch(self, files):
        row = self._row(1, 2)
        row["duration_frames"] = 30
        with pytest.raises(ValidationError, match="frames on disk"):
            load_manifest(_manifest(files / "m.jsonl", [row]))

    def test_missing_feature_file(self, files):
        row = self._row(1, 2)
        row["frame_feature_path"] = "nowhere.tgf"
        with pytest.raises(ValidationError, match="missing"):
            load_manifest(_manifest(files / "m.jsonl", [row]))
        assert load_manifest(files / "m.jsonl", check_files=False)[0].video_id == "v1"

    def test_missing_field(self, files):
        with pytest.raises(ValidationError, match="duration_frames"):
            load_manifest(_manifest(files / "m.jsonl", [{"video_id": "v1", "frame_feature_path": "v.tgf",
                                                          "annotations": []}]))

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert load_manifest(tmp_path / "m.jsonl") == []


class TestSynthetic:

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(num_videos=3, seed=7)
        a = generate_synthetic_dataset(spec, tmp_path / "a").parent
        b = generate_synthetic_dataset(spec, tmp_path / "b").parent
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_counts(self, tmp_path):
        entries = load_manifest(generate_synthetic_dataset(SyntheticSpec(), tmp_path))
        assert len(entries) == 10
        assert len(list(iter_annotations(entries))) == 20

    def test_noiseless_events_match_annotations(self, tmp_path):
        spec = SyntheticSpec(num_videos=4, noise_scale=0.0, seed=3)
        entries = load_manifest(generate_synthetic_dataset(spec, tmp_path))
        cache = FeatureCache().warm(entries)
        for entry in entries:
            frames = cache.get(entry.frame_feature_path)
            inside = np.zeros(len(frames), dtype=bool)
            for ann in entry.annotations:
                code = cache.get(ann.query_feature_path)[0]
                np.testing.assert_array_equal(frames[ann.t_s:ann.t_e + 1],
                                              np.broadcast_to(code, (ann.t_e - ann.t_s + 1, len(code))))
                inside[ann.t_s:ann.t_e + 1] = True
            assert not frames[~inside].any()

    def test_nearest_centroid_recovers_intervals(self, tmp_path):
        spec = SyntheticSpec(num_videos=5, noise_scale=0.0, seed=11)
        entries = load_manifest(generate_synthetic_dataset(spec, tmp_path))
        cache = FeatureCache()
        for entry in entries:
            frames = cache.get(entry.frame_feature_path).astype(np.float64)
            centroids = np.stack([np.zeros(frames.shape[1])] +
                                 [cache.get(a.query_feature_path).mean(axis=0) for a in entry.annotations])
            label = np.argmin(((frames[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
            for k, ann in enumerate(entry.annotations, 1):
                hits = np.flatnonzero(label == k)
                assert (hits.min(), hits.max(), len(hits)) == (ann.t_s, ann.t_e, ann.t_e - ann.t_s + 1)

    def test_events_must_fit(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_synthetic_dataset(SyntheticSpec(frames_per_video=20, event_length_range=(6, 16)), tmp_path)

    def test_zero_videos_writes_empty_manifest(self, tmp_path):
        manifest = generate_synthetic_dataset(SyntheticSpec(num_videos=0), tmp_path)
        assert load_manifest(manifest) == []
