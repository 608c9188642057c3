"""Piecewise-constant-curvature track description and curvature queries.

A track is an ordered list of (length, curvature) segments forming a closed
lap; arc-length lookups wrap modulo the total length.  Curvature previews
(seven samples, 5 m apart, 30 m lookahead) are the latent context fed to the
reference controller and are never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PREVIEW_COUNT = 7
PREVIEW_SPACING_M = 5.0

# Lane-width presets for the two demonstration setups.
LANE_WIDTH_D1 = 4.5
LANE_WIDTH_D2 = 8.0
LANE_PRESETS = {"d1": LANE_WIDTH_D1, "d2": LANE_WIDTH_D2}

TRACK_HEADER = "length_m,curvature_1pm"


class TrackFormatError(ValueError):
    """Raised when a track file cannot be parsed."""


@dataclass(frozen=True)
class TrackSpec:
    """Closed track made of constant-curvature segments.

    ``segments`` is a tuple of (length_m, curvature_1pm) pairs.  Immutable
    after construction, so instances are safe to share across workers.
    """

    segments: tuple[tuple[float, float], ...]
    lane_width: float
    name: str = "track"
    # cumulative segment end points, filled in __post_init__
    _ends: np.ndarray = field(init=False, repr=False, compare=False)
    _kappas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if not self.segments:
            raise ValueError("track needs at least one segment")
        lengths = np.array([s[0] for s in self.segments], dtype=float)
        kappas = np.array([s[1] for s in self.segments], dtype=float)
        if np.any(lengths <= 0):
            raise ValueError("every segment length must be positive")
        # keep the Frenet singularity 1 - kappa*d = 0 outside the lane
        if np.any(np.abs(kappas) * self.lane_width / 2 >= 1.0):
            raise ValueError("segment curvature too large for the lane width")
        object.__setattr__(self, "_ends", np.cumsum(lengths))
        object.__setattr__(self, "_kappas", kappas)

    @property
    def total_length(self) -> float:
        return float(self._ends[-1])


def curvature_at(track: TrackSpec, arc):
    """Curvature at arc position(s), wrapping modulo the lap length.

    At a segment boundary the downstream segment's value is returned.
    Accepts scalars or arrays; complex inputs are looked up by real part
    (supports complex-step checks elsewhere).
    """
    arr = np.asarray(arc)
    pos = np.mod(arr.real if np.iscomplexobj(arr) else arr, track.total_length)
    # tiny negative arcs can round the modulo up to exactly total_length
    pos = np.where(pos >= track.total_length, 0.0, pos)
    idx = np.searchsorted(track._ends, pos, side="right")
    out = track._kappas[idx]
    return float(out) if np.isscalar(arc) or arr.ndim == 0 else out


def curvature_preview(track: TrackSpec, arc: float) -> np.ndarray:
    """Seven curvature samples from ``arc`` to 30 m ahead, 5 m apart."""
    offsets = np.arange(PREVIEW_COUNT) * PREVIEW_SPACING_M
    return np.asarray(curvature_at(track, float(arc) + offsets), dtype=float)


# Default 1200 m lap: 7 constant-curvature arcs (radii 60..250 m, alternating
# direction) separated by straights of 40..80 m.  Signed curvature, 1/R.
_DEFAULT_SEGMENTS = (
    (80.0, 0.0),
    (120.0, 1.0 / 150.0),
    (60.0, 0.0),
    (100.0, -1.0 / 90.0),
    (50.0, 0.0),
    (90.0, 1.0 / 70.0),
    (70.0, 0.0),
    (110.0, -1.0 / 200.0),
    (40.0, 0.0),
    (130.0, 1.0 / 250.0),
    (55.0, 0.0),
    (95.0, -1.0 / 60.0),
    (65.0, 0.0),
    (85.0, 1.0 / 120.0),
    (50.0, 0.0),
)


def default_track(lane_width: float = LANE_WIDTH_D1, name: str = "default") -> TrackSpec:
    """The bundled 1200 m lap with seven curves of distinct length/curvature."""
    return TrackSpec(segments=_DEFAULT_SEGMENTS, lane_width=lane_width, name=name)


def preset_track(preset: str) -> TrackSpec:
    if preset not in LANE_PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {sorted(LANE_PRESETS)}")
    return default_track(lane_width=LANE_PRESETS[preset], name=f"default-{preset}")


def save_track(track: TrackSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"name: {track.name}\n")
        fh.write(f"lane_width: {track.lane_width!r}\n")
        fh.write(TRACK_HEADER + "\n")
        for length, kappa in track.segments:
            fh.write(f"{length!r},{kappa!r}\n")


def load_track(path) -> TrackSpec:
    name = "track"
    lane_width = None
    segments = []
    header_seen = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if not header_seen:
                if line == TRACK_HEADER:
                    header_seen = True
                    continue
                if ":" not in line:
                    raise TrackFormatError(f"{path}:{lineno}: expected 'key: value' preamble or header")
                key, _, value = line.partition(":")
                key, value = key.strip(), value.strip()
                if key == "name":
                    name = value
                elif key == "lane_width":
                    lane_width = float(value)
                else:
                    raise TrackFormatError(f"{path}:{lineno}: unknown preamble key {key!r}")
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TrackFormatError(f"{path}:{lineno}: expected two comma-separated columns")
            try:
                segments.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise TrackFormatError(f"{path}:{lineno}: {exc}") from None
    if not header_seen:
        raise TrackFormatError(f"{path}: missing header line {TRACK_HEADER!r}")
    if lane_width is None:
        raise TrackFormatError(f"{path}: preamble is missing lane_width")
    return TrackSpec(segments=tuple(segments), lane_width=lane_width, name=name)
