"""Motional social pooling: neighbor motion encodings on an occupancy grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .nn_core import Conv2d, DimensionError, ParamStore, Tensor


@dataclass(frozen=True)
class FieldConfig:
    """Rectangular neighborhood centred on the ego.

    ``length`` spans the longitudinal axis (half ahead, half behind) and the
    lateral span is ``lanes * lane_width`` centred on the ego.
    """

    length: float = 60.0
    lane_width: float = 3.7
    lanes: int = 3
    grid_rows: int = 13
    grid_cols: int = 3

    def __post_init__(self):
        if not self.length > 0 or not self.lane_width > 0:
            raise ValueError("field length and lane width must be positive")
        if self.lanes < 1 or self.grid_rows < 1:
            raise ValueError("field needs at least one lane and one row")
        if self.grid_cols != self.lanes:
            raise ValueError(f"grid_cols ({self.grid_cols}) must equal lanes ({self.lanes})")


@dataclass(frozen=True)
class PoolConfig:
    conv1_channels: int = 64
    conv1_kernel: tuple[int, int] = (3, 3)
    conv2_channels: int = 16
    conv2_kernel: tuple[int, int] = (3, 1)
    pool_window: tuple[int, int] = (2, 1)


def neighbor_indicator(ego_pos, other_pos, field: FieldConfig) -> tuple[int, int] | None:
    """Grid cell of ``other_pos`` relative to ``ego_pos``, or ``None`` if outside.

    Row 0 is the rearmost band, column 0 the rightmost (most negative lateral)
    lane.  A point exactly on the front edge belongs to the last row.
    """
    dx = float(other_pos[0]) - float(ego_pos[0])
    dy = float(other_pos[1]) - float(ego_pos[1])
    half = field.length / 2.0
    if not abs(dx) <= half:
        return None
    col = math.floor(dy / field.lane_width + field.lanes / 2.0)
    if col < 0 or col >= field.lanes:
        return None
    row = min(math.floor((dx + half) / (field.length / field.grid_rows)), field.grid_rows - 1)
    return row, col


@dataclass
class SocialGrid:
    tensor: Tensor  # (B, C, rows, cols)
    mask: np.ndarray  # (B, rows, cols) bool
    owner: np.ndarray  # (B, rows, cols) neighbor row index or -1


def assign_cells(positions: np.ndarray, scene_index: np.ndarray, agent_ids: np.ndarray,
                 n_scenes: int, field: FieldConfig) -> np.ndarray:
    """Owner table ``(B, rows, cols)``: which neighbor occupies each cell.

    Collisions keep the neighbor nearest the ego, then the lower agent id.
    """
    owner = np.full((n_scenes, field.grid_rows, field.grid_cols), -1, dtype=np.int64)
    best: dict[tuple[int, int, int], tuple[float, int]] = {}
    for j, (pos, b, aid) in enumerate(zip(positions, scene_index, agent_ids)):
        cell = neighbor_indicator((0.0, 0.0), pos, field)
        if cell is None:
            continue
        key = (int(b), *cell)
        rank = (float(np.hypot(pos[0], pos[1])), int(aid))
        if key not in best or rank < best[key]:
            best[key] = rank
            owner[key] = j
    return owner


def scatter_to_grid(encodings, field: FieldConfig, orders=("s", "v", "a")) -> SocialGrid:
    """Write each in-field neighbor's concatenated motion encoding into its cell."""
    feats = nn.concat([encodings.neighbors[o] for o in orders], axis=-1) if encodings.n_neighbors \
        else None
    channels = sum(encodings.ego[o].shape[-1] for o in orders)
    n_scenes = encodings.n_scenes
    owner = assign_cells(encodings.nb_positions, encodings.nb_scene, encodings.nb_ids,
                         n_scenes, field)
    mask = owner >= 0
    if feats is None or not mask.any():
        grid = Tensor(np.zeros((n_scenes, channels, field.grid_rows, field.grid_cols)))
        return SocialGrid(grid, mask, owner)
    source = nn.concat([Tensor(np.zeros((1, channels))), feats], axis=0)
    gathered = nn.take_rows(source, (owner + 1).reshape(-1))  # (B*R*C, ch)
    gathered = gathered.reshape(n_scenes, field.grid_rows, field.grid_cols, channels)
    return SocialGrid(nn.transpose(gathered, (0, 3, 1, 2)), mask, owner)


def _pad_to_multiple(x: Tensor, window: tuple[int, int]) -> Tensor:
    # replicate leading rows/cols so the extents divide the window; a repeated
    # value never changes a max, so this equals -inf padding
    ph, pw = window
    rows = (-x.shape[2]) % ph
    if rows:
        x = nn.concat([x[:, :, :1]] * rows + [x], axis=2)
    cols = (-x.shape[3]) % pw
    if cols:
        x = nn.concat([x[:, :, :, :1]] * cols + [x], axis=3)
    return x


class SocialPool:
    """conv -> leaky ReLU -> conv -> leaky ReLU -> max pool -> flatten."""

    def __init__(self, store: ParamStore, channels: int, field: FieldConfig,
                 cfg: PoolConfig = PoolConfig(), name: str = "social"):
        self.channels = channels
        self.field = field
        self.cfg = cfg
        self.conv1 = Conv2d(store, f"{name}.conv1", channels, cfg.conv1_channels, cfg.conv1_kernel)
        self.conv2 = Conv2d(store, f"{name}.conv2", cfg.conv1_channels, cfg.conv2_channels,
                            cfg.conv2_kernel)
        h = field.grid_rows - cfg.conv1_kernel[0] - cfg.conv2_kernel[0] + 2
        w = field.grid_cols - cfg.conv1_kernel[1] - cfg.conv2_kernel[1] + 2
        if h < 1 or w < 1:
            raise DimensionError(f"grid {field.grid_rows}x{field.grid_cols} too small for conv stack")
        ph, pw = cfg.pool_window
        self.out_dim = cfg.conv2_channels * (-(-h // ph)) * (-(-w // pw))

    def __call__(self, grid: SocialGrid) -> Tensor:
        x = grid.tensor
        expected = (self.channels, self.field.grid_rows, self.field.grid_cols)
        if tuple(x.shape[1:]) != expected:
            raise DimensionError(f"social grid shape {x.shape[1:]} != configured {expected}")
        x = nn.leaky_relu(self.conv1(x))
        x = nn.leaky_relu(self.conv2(x))
        x = _pad_to_multiple(x, self.cfg.pool_window)
        x = nn.maxpool2d_apply(x, self.cfg.pool_window)
        return x.reshape(x.shape[0], -1)


def social_pool(grid: SocialGrid, pool: SocialPool) -> Tensor:
    return pool(grid)
