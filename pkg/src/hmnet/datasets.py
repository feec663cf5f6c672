"""Track ingestion, scene windowing, splitting and synthetic corridors.

CSV schema (UTF-8, comma separated, header required)::

    vehicle_id,frame,x_meters,y_meters,lane_id

``x_meters`` is the longitudinal coordinate and ``y_meters`` the lateral one.
Raw NGSIM files store feet and use ``Local_Y`` for the longitudinal axis, so a
converter must map ``Local_Y * 0.3048 -> x_meters`` and
``Local_X * 0.3048 -> y_meters`` before loading.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import Track
from .social import FieldConfig, neighbor_indicator

COLUMNS = ("vehicle_id", "frame", "x_meters", "y_meters", "lane_id")
SYNTH_KINDS = ("constant_velocity", "constant_acceleration", "lane_change", "braking")


class TrackParseError(ValueError):
    pass


@dataclass
class Neighbor:
    agent_id: int
    history: np.ndarray  # (l, 2) in the ego frame, last row at the ego's last observed frame


@dataclass
class Scene:
    scene_id: str
    ego_id: int
    frame: int  # last observed frame
    history: np.ndarray  # (obs_len, 2), ego frame
    future: np.ndarray  # (pred_len, 2), ego frame
    neighbors: list[Neighbor]
    frequency: float
    origin: np.ndarray  # absolute ego position at the last observed step
    lane_width: float = 3.7
    ego_lane: int | None = None


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"split ratios must be three positive numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")


# ---------------------------------------------------------------- csv io


def load_tracks(path, frequency: float = 10.0) -> list[Track]:
    """Read one :class:`Track` per ``vehicle_id`` from a CSV file."""
    rows: dict[int, list[tuple[int, float, float, int, int]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise TrackParseError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                vid = int(row["vehicle_id"])
                frame = int(row["frame"])
                x = float(row["x_meters"])
                y = float(row["y_meters"])
                lane = int(row["lane_id"]) if row["lane_id"] not in ("", None) else -1
            except (TypeError, ValueError) as exc:
                raise TrackParseError(f"{path}: row {lineno}: {exc}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise TrackParseError(f"{path}: row {lineno}: non-finite coordinate")
            rows[vid].append((frame, x, y, lane, lineno))

    tracks = []
    for vid in sorted(rows):
        recs = sorted(rows[vid])
        frames = [r[0] for r in recs]
        for prev, cur in zip(recs, recs[1:]):
            if cur[0] != prev[0] + 1:
                raise TrackParseError(
                    f"{path}: row {cur[4]}: vehicle {vid} frames not contiguous "
                    f"({prev[0]} -> {cur[0]})")
        pos = np.array([[r[1], r[2]] for r in recs])
        lanes = np.array([r[3] for r in recs], dtype=np.int64)
        tracks.append(Track(vid, pos, frequency, frames[0], lanes))
    return tracks


def write_tracks(tracks, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for tr in tracks:
            lanes = tr.lane_ids if tr.lane_ids is not None else np.full(len(tr), -1)
            for k, (x, y) in enumerate(tr.positions):
                w.writerow([tr.agent_id, tr.start_frame + k, repr(float(x)), repr(float(y)),
                            int(lanes[k])])


# ---------------------------------------------------------------- scenes


def build_scenes(tracks, obs_len: int = 15, pred_len: int = 25,
                 field_cfg: FieldConfig = FieldConfig(), stride: int = 1,
                 min_neighbor_steps: int = 3) -> list[Scene]:
    """Slide an ``obs_len + pred_len`` window over every track.

    Neighbors are agents present at the ego's last observed frame, inside the
    field there, with at least ``min_neighbor_steps`` co-observed history steps.
    """
    if obs_len < 3 or pred_len < 1:
        raise ValueError("need obs_len >= 3 and pred_len >= 1")
    tracks = list(tracks)
    freqs = {tr.frequency for tr in tracks}
    if len(freqs) > 1:
        raise ValueError(f"tracks mix sampling frequencies {sorted(freqs)}")
    by_frame: dict[int, list[int]] = defaultdict(list)
    for i, tr in enumerate(tracks):
        for fr in range(tr.start_frame, tr.end_frame + 1):
            by_frame[fr].append(i)

    scenes = []
    window = obs_len + pred_len
    for i, tr in enumerate(tracks):
        for k0 in range(0, len(tr) - window + 1, stride):
            last = k0 + obs_len - 1
            frame = tr.start_frame + last
            origin = tr.positions[last].copy()
            history = tr.positions[k0 : last + 1] - origin
            future = tr.positions[last + 1 : k0 + window] - origin
            neighbors = []
            first_frame = frame - obs_len + 1
            for j in by_frame[frame]:
                if j == i:
                    continue
                other = tracks[j]
                start = max(first_frame, other.start_frame)
                hist = other.positions[other.index_of(start) : other.index_of(frame) + 1] - origin
                if len(hist) < min_neighbor_steps:
                    continue
                if neighbor_indicator((0.0, 0.0), hist[-1], field_cfg) is None:
                    continue
                neighbors.append(Neighbor(other.agent_id, hist))
            neighbors.sort(key=lambda n: n.agent_id)
            lane = None
            if tr.lane_ids is not None and tr.lane_ids[last] >= 0:
                lane = int(tr.lane_ids[last])
            scenes.append(Scene(
                scene_id=f"{tr.agent_id}@{frame}", ego_id=tr.agent_id, frame=frame,
                history=history, future=future, neighbors=neighbors,
                frequency=tr.frequency, origin=origin,
                lane_width=field_cfg.lane_width, ego_lane=lane,
            ))
    return scenes


def split(scenes, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle then partition; floors for val/test, remainder to train."""
    scenes = list(scenes)
    n = len(scenes)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = int(np.floor(spec.ratios[1] * n))
    n_test = int(np.floor(spec.ratios[2] * n))
    n_train = n - n_val - n_test
    pick = [scenes[k] for k in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


# ---------------------------------------------------------------- synthetic data


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * u))


def _base_track(kind, t, rng, lane_width, lane, n_lanes, speed_range, onset, change_prob,
                direction):
    v0 = rng.uniform(*speed_range)
    y = np.full_like(t, lane * lane_width)
    if kind == "constant_velocity":
        x = v0 * t
    elif kind == "constant_acceleration":
        # keep the vehicle moving forward for the whole track
        a_min = max(-2.0, -0.8 * v0 / t[-1])
        acc = rng.uniform(a_min, 2.0)
        x = v0 * t + 0.5 * acc * t * t
    elif kind == "lane_change":
        x = v0 * t
        if rng.uniform() < change_prob:
            t_on = rng.uniform(*onset) if onset is not None else rng.uniform(0.1, 0.6) * t[-1]
            duration = rng.uniform(3.0, 4.0)
            if direction is None:
                options = [d for d in (-1, 1) if 0 <= lane + d < n_lanes]
                d = options[rng.integers(len(options))]
            else:
                d = direction
            y = y + d * lane_width * _smoothstep((t - t_on) / duration)
    elif kind == "braking":
        t_on = rng.uniform(*onset) if onset is not None else rng.uniform(0.1, 0.6) * t[-1]
        decel = rng.uniform(1.0, 4.0)
        tb = np.clip(t - t_on, 0.0, None)
        t_stop = v0 / decel
        tb_eff = np.minimum(tb, t_stop)
        x = v0 * np.minimum(t, t_on) + v0 * tb_eff - 0.5 * decel * tb_eff**2
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    return np.stack([x, y], axis=1)


def synth_generate(kind: str, n: int, noise_sigma: float = 0.0, seed: int = 0, *,
                   n_steps: int = 80, frequency: float = 10.0, lane_width: float = 3.7,
                   n_lanes: int = 3, multi_agent: bool = False,
                   speed_range: tuple[float, float] = (8.0, 16.0),
                   onset: tuple[float, float] | None = None, change_prob: float = 1.0,
                   direction: int | None = None, lanes: tuple[int, ...] | None = None,
                   mix: tuple[str, ...] | None = None) -> list[Track]:
    """Kinematically exact trajectories plus isotropic Gaussian position noise.

    With ``multi_agent`` each corridor holds 2 to 5 vehicles in nearby lanes
    and gaps; corridors occupy disjoint frame ranges so they never interact.
    ``onset`` (seconds) fixes when lane changes or braking begin; ``mix``
    draws each vehicle's kind from the given tuple instead of ``kind``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if kind not in SYNTH_KINDS and mix is None:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps) / frequency
    allowed_lanes = tuple(range(n_lanes)) if lanes is None else tuple(lanes)
    tracks: list[Track] = []
    corridor = 0
    while len(tracks) < n:
        size = int(rng.integers(2, 6)) if multi_agent else 1
        size = min(size, n - len(tracks))
        start = corridor * (n_steps + 50)
        start += start % 2  # even start frames survive 2x downsampling identically
        lead_x = 0.0
        for m in range(size):
            this_kind = mix[rng.integers(len(mix))] if mix is not None else kind
            lane = allowed_lanes[rng.integers(len(allowed_lanes))]
            pos = _base_track(this_kind, t, rng, lane_width, lane, n_lanes, speed_range,
                              onset, change_prob, direction)
            pos[:, 0] += lead_x
            if multi_agent:
                lead_x += rng.uniform(8.0, 20.0)
            if noise_sigma > 0:
                pos = pos + rng.normal(0.0, noise_sigma, size=pos.shape)
            lane_ids = np.round(pos[:, 1] / lane_width).astype(np.int64) + 1
            tracks.append(Track(len(tracks) + 1, pos, frequency, start, lane_ids))
        corridor += 1
    return tracks
