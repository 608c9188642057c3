import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpc_imitation.track import (
    LANE_PRESETS,
    TrackFormatError,
    TrackSpec,
    curvature_at,
    curvature_preview,
    default_track,
    load_track,
    preset_track,
    save_track,
)


def two_segment_track():
    return TrackSpec(segments=((100.0, 0.0), (50.0, 0.02)), lane_width=4.5)


def brute_force_lookup(track, arc):
    """Independent oracle: walk the segment list with explicit modulo."""
    pos = arc % track.total_length
    acc = 0.0
    for length, kappa in track.segments:
        if acc <= pos < acc + length:
            return kappa
        acc += length
    return track.segments[0][1]


class TestCurvatureAt:
    def test_straight_track(self):
        track = TrackSpec(segments=((500.0, 0.0),), lane_width=4.5)
        assert curvature_at(track, 100.0) == 0.0

    def test_segment_lookup(self):
        assert curvature_at(two_segment_track(), 120.0) == 0.02

    def test_wraparound(self):
        # 151 wraps to 1, landing in the first (straight) segment
        track = two_segment_track()
        assert curvature_at(track, 151.0) == brute_force_lookup(track, 151.0) == 0.0

    def test_boundary_returns_downstream(self):
        track = two_segment_track()
        assert curvature_at(track, 100.0) == 0.02
        assert curvature_at(track, 150.0) == 0.0  # lap wrap: downstream = segment 0

    def test_vectorized(self):
        track = two_segment_track()
        arcs = np.array([0.0, 99.0, 100.0, 120.0, 151.0])
        np.testing.assert_array_equal(
            curvature_at(track, arcs), [brute_force_lookup(track, a) for a in arcs]
        )

    @given(st.floats(-5000, 5000, allow_nan=False), st.integers(-3, 3))
    @settings(max_examples=50, deadline=None)
    def test_lap_periodicity(self, arc, k):
        track = two_segment_track()
        assert curvature_at(track, arc) == pytest.approx(
            curvature_at(track, arc + k * track.total_length), abs=0.0
        )

    @given(st.floats(0, 149.0, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_piecewise_constant(self, arc):
        track = two_segment_track()
        bounds = [0.0, 100.0, 150.0]
        dist = min(abs(arc - b) for b in bounds)
        eps = dist / 2
        if eps > 1e-9:
            assert curvature_at(track, arc - eps) == curvature_at(track, arc + eps)


class TestCurvaturePreview:
    def test_straight(self):
        track = TrackSpec(segments=((500.0, 0.0),), lane_width=4.5)
        np.testing.assert_array_equal(curvature_preview(track, 123.0), np.zeros(7))

    def test_constant_loop(self):
        track = TrackSpec(segments=((400.0, 0.01),), lane_width=4.5)
        np.testing.assert_allclose(curvature_preview(track, 50.0), np.full(7, 0.01))

    def test_entering_curve(self):
        track = TrackSpec(segments=((20.0, 0.0), (200.0, 0.015)), lane_width=4.5)
        np.testing.assert_allclose(
            curvature_preview(track, 0.0), [0, 0, 0, 0, 0.015, 0.015, 0.015]
        )

    @given(st.floats(-100, 1500, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_matches_pointwise_lookup(self, arc):
        track = default_track()
        preview = curvature_preview(track, arc)
        assert preview[0] == curvature_at(track, arc)
        for i in range(7):
            assert preview[i] == curvature_at(track, arc + 5.0 * i)


class TestDefaultTrack:
    def test_total_length(self):
        assert default_track().total_length == pytest.approx(1200.0, abs=1e-9)

    def test_seven_curves(self):
        curved = [s for s in default_track().segments if s[1] != 0.0]
        assert len(curved) == 7

    def test_distinct_lengths_and_curvatures(self):
        curved = [s for s in default_track().segments if s[1] != 0.0]
        assert len({s[0] for s in curved}) == 7
        assert len({s[1] for s in curved}) == 7
        signs = {np.sign(s[1]) for s in curved}
        assert signs == {-1.0, 1.0}

    def test_singularity_margin_widest_lane(self):
        track = default_track(lane_width=LANE_PRESETS["d2"])
        max_kappa = max(abs(s[1]) for s in track.segments)
        assert max_kappa * track.lane_width / 2 < 1.0

    def test_presets(self):
        assert preset_track("d1").lane_width == 4.5
        assert preset_track("d2").lane_width == 8.0
        with pytest.raises(ValueError):
            preset_track("d3")


class TestValidation:
    def test_rejects_nonpositive_segment(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((0.0, 0.0),), lane_width=4.5)

    def test_rejects_singular_curvature(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((100.0, 0.5),), lane_width=4.5)

    def test_rejects_bad_lane_width(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((100.0, 0.0),), lane_width=0.0)

    def test_total_length_consistency(self):
        track = default_track()
        assert track.total_length == pytest.approx(sum(s[0] for s in track.segments), abs=1e-9)


class TestTrackFiles:
    def test_round_trip(self, tmp_path):
        track = preset_track("d2")
        path = tmp_path / "track.txt"
        save_track(track, path)
        loaded = load_track(path)
        assert loaded.segments == track.segments
        assert loaded.lane_width == track.lane_width
        assert loaded.name == track.name

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("name: x\nlane_width: 4.5\n")
        with pytest.raises(TrackFormatError, match="header"):
            load_track(path)

    def test_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("lane_width: 4.5\nlength_m,curvature_1pm\n100,0\nnot-a-number,0\n")
        with pytest.raises(TrackFormatError, match=":4"):
            load_track(path)
