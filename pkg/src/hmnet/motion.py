"""Location / velocity / acceleration decomposition by forward differences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InsufficientLengthError(ValueError):
    """A sequence is too short for the requested operation."""


@dataclass
class Track:
    """One agent's uniformly sampled 2-D positions.

    ``positions`` is ``(n, 2)`` in meters, column 0 longitudinal and column 1
    lateral.  ``frequency`` is in Hz; sample ``k`` belongs to frame
    ``start_frame + k``.
    """

    agent_id: int
    positions: np.ndarray
    frequency: float = 10.0
    start_frame: int = 0
    lane_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(self.positions) == 0:
            raise InsufficientLengthError(f"track {self.agent_id} has no positions")
        if not self.frequency > 0:
            raise ValueError(f"track {self.agent_id}: frequency must be positive")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.positions) - 1

    def index_of(self, frame: int) -> int:
        return frame - self.start_frame

    def downsample(self, factor: int) -> "Track | None":
        """Keep samples whose absolute frame is a multiple of ``factor``.

        Aligning on absolute frames keeps co-observed agents aligned after
        resampling.  Returns ``None`` when nothing survives.
        """
        if factor == 1:
            return self
        frames = np.arange(self.start_frame, self.end_frame + 1)
        keep = frames % factor == 0
        if not keep.any():
            return None
        first = int(frames[keep][0])
        lanes = None if self.lane_ids is None else self.lane_ids[keep]
        return Track(self.agent_id, self.positions[keep], self.frequency / factor,
                     first // factor, lanes)


@dataclass
class MotionDecomposition:
    s: np.ndarray  # (L, 2) m
    v: np.ndarray  # (L-1, 2) m/s
    a: np.ndarray  # (L-2, 2) m/s^2


def difference(seq, f: float) -> np.ndarray:
    """Forward difference scaled by the sampling frequency."""
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) < 2:
        raise InsufficientLengthError(f"difference needs at least 2 samples, got {len(seq)}")
    if not f > 0:
        raise ValueError("frequency must be positive")
    return (seq[1:] - seq[:-1]) * f


def integrate(initial, deltas, f: float) -> np.ndarray:
    """Inverse of :func:`difference`: cumulative Euler steps from ``initial``."""
    initial = np.asarray(initial, dtype=np.float64).reshape(1, 2)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    if not f > 0:
        raise ValueError("frequency must be positive")
    out = np.empty((len(deltas) + 1, 2))
    out[0] = initial
    # sequential accumulation keeps the round trip exact to rounding of each step
    for t, d in enumerate(deltas):
        out[t + 1] = out[t] + d / f
    return out


def motion_decompose(track: Track, window: range | slice | None = None) -> MotionDecomposition:
    if window is None:
        s = track.positions
    else:
        if isinstance(window, range):
            if window.start < 0 or window.stop > len(track) or window.step != 1:
                raise IndexError(f"window {window} outside track of length {len(track)}")
            window = slice(window.start, window.stop)
        s = track.positions[window]
    return decompose_positions(s, track.frequency)


def decompose_positions(s, f: float) -> MotionDecomposition:
    s = np.asarray(s, dtype=np.float64)
    if len(s) < 3:
        raise InsufficientLengthError(f"motion decomposition needs >= 3 steps, got {len(s)}")
    v = difference(s, f)
    return MotionDecomposition(s=s.copy(), v=v, a=difference(v, f))
