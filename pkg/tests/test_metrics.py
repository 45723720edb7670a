"""Warped-consistency metrics and the run-directory report."""

import json

import numpy as np
import pytest

from stylefield import flowwarp, metrics_eval, scene_io
from stylefield.errors import ValidationError
from stylefield.losses import FeatureExtractor
from stylefield.metrics_eval import (check_flow_sources, consistency_scores,
                                     eval_report)


def _full_masks(n, h, w):
    return [scene_io.VisibilityMask(mask=np.ones((h, w), dtype=bool))
            for _ in range(n)]


def _zero_flows(n, h, w):
    return [scene_io.FlowField(flow=np.zeros((h, w, 2), dtype=np.float32))
            for _ in range(n)]


class TestConsistencyScores:
    def test_constant_video_zero(self, rng):
        frame = rng.uniform(size=(8, 8, 3))
        frames = [frame] * 4
        rmse, perc = consistency_scores(frames, _zero_flows(3, 8, 8),
                                        _full_masks(3, 8, 8), offset=1)
        assert rmse == 0.0
        assert perc is None

    def test_perceptual_enabled(self, rng):
        frames = [rng.uniform(size=(16, 16, 3)) for _ in range(3)]
        rmse, perc = consistency_scores(frames, _zero_flows(2, 16, 16),
                                        _full_masks(2, 16, 16), offset=1,
                                        phi=FeatureExtractor(seed=0))
        assert rmse > 0.0 and perc is not None and perc > 0.0

    def test_length_mismatch(self, rng):
        frames = [rng.uniform(size=(8, 8, 3)) for _ in range(4)]
        with pytest.raises(ValidationError):
            consistency_scores(frames, _zero_flows(2, 8, 8),
                               _full_masks(3, 8, 8), offset=1)

    def test_offset_too_large(self, rng):
        frames = [rng.uniform(size=(8, 8, 3)) for _ in range(3)]
        with pytest.raises(ValidationError):
            consistency_scores(frames, [], [], offset=3)

    def test_all_masked_pairs_rejected(self, rng):
        frames = [rng.uniform(size=(8, 8, 3)) for _ in range(3)]
        empty = [scene_io.VisibilityMask(mask=np.zeros((8, 8), dtype=bool))
                 for _ in range(2)]
        with pytest.raises(ValidationError):
            consistency_scores(frames, _zero_flows(2, 8, 8), empty, offset=1)

    def test_exact_warp_sequence_near_zero(self, plane_scene):
        # ground-truth frames with ground-truth flow: warping frame t onto
        # frame t+1 reproduces it almost exactly
        bundle, flows, masks = plane_scene
        frames = bundle.images
        fl = [flows[(t, t + 1)] for t in range(7)]
        mk = [masks[(t, t + 1)] for t in range(7)]
        rmse, _ = consistency_scores(frames, fl, mk, offset=1)
        assert rmse < 2 / 255

    def test_long_range_exceeds_short_range(self, plane_scene):
        # identical stylization-free frames warped with the NAIVE estimator:
        # accumulated parallax makes offset-7 worse than offset-1
        bundle, _, _ = plane_scene
        frames = bundle.images
        def naive(offset):
            fl, mk = [], []
            for t in range(8 - offset):
                f = flowwarp.estimate_flow_naive(frames[t], frames[t + offset],
                                                 block=8, radius=6)
                fl.append(f)
                mk.append(scene_io.VisibilityMask(
                    mask=np.ones(f.shape, dtype=bool)))
            return consistency_scores(frames, fl, mk, offset=offset)[0]
        assert naive(7) >= naive(1)


class TestFlowSourceCheck:
    def test_distinct_ok(self):
        check_flow_sources("exact", "naive")

    def test_identical_rejected(self):
        with pytest.raises(ValidationError):
            check_flow_sources("naive", "naive")


class TestEvalReport:
    def _write_run(self, run, rng, n_seq=2, n_frames=9):
        for s in range(n_seq):
            seq = run / "renders" / f"seq{s}"
            seq.mkdir(parents=True)
            frame = rng.uniform(size=(16, 16, 3))
            for t in range(n_frames):
                scene_io.save_png(frame, seq / f"{t:03d}.png")
            fdir = run / "flows" / f"seq{s}"
            fdir.mkdir(parents=True)
            for offset in (1, 7):
                for t in range(n_frames - offset):
                    scene_io.write_flo(
                        scene_io.FlowField(
                            flow=np.zeros((16, 16, 2), dtype=np.float32)),
                        fdir / f"o{offset}_t{t:03d}.flo")

    def test_report_shape(self, tmp_path, rng):
        self._write_run(tmp_path, rng)
        rows = eval_report(tmp_path)
        assert len(rows) == 4  # 2 sequences x 2 offsets
        assert (tmp_path / "reports" / "report.jsonl").exists()
        assert (tmp_path / "reports" / "summary.txt").exists()
        recorded = [json.loads(line) for line in
                    (tmp_path / "reports" / "report.jsonl").read_text().splitlines()]
        assert recorded == rows

    def test_rerun_identical(self, tmp_path, rng):
        self._write_run(tmp_path, rng)
        a = eval_report(tmp_path)
        b = eval_report(tmp_path)
        assert a == b

    def test_constant_sequences_score_zero(self, tmp_path, rng):
        self._write_run(tmp_path, rng)
        for row in eval_report(tmp_path):
            assert row["rmse"] == 0.0

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValidationError):
            eval_report(tmp_path)
