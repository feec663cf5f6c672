"""Hierarchical motion decoder: acceleration -> velocity -> location."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .nn_core import DimensionError, Linear, LSTMCell, ParamStore, RecurrentState, Tensor


RHO_SHRINK = 1.0 - 1e-6


class HorizonError(ValueError):
    pass


@dataclass
class GaussianTrack:
    """Per-step bivariate Gaussians; ``mu``/``sigma`` are ``(B, T, 2)``, ``rho`` is ``(B, T)``."""

    mu: Tensor
    sigma: Tensor
    rho: Tensor

    def __len__(self) -> int:
        return self.mu.shape[1]

    def means(self) -> np.ndarray:
        return self.mu.data

    def scaled(self, scale: float) -> "GaussianTrack":
        return GaussianTrack(self.mu * scale, self.sigma * scale, self.rho)


@dataclass
class DecoderContext:
    enc: dict[str, Tensor]  # order -> cat(ego hidden, social), (B, D)
    goal: Tensor | None = None  # (B, 2), normalized ego frame


class SubDecoder:
    """One recurrent sub-decoder with a 5-way Gaussian output head.

    Step ``i`` consumes ``cat(enc, proj(h_{i-1}), cond_{i-1}, goal_emb)``;
    at the first step the self and conditioning slots are zero.
    """

    def __init__(self, store: ParamStore, order: str, enc_dim: int, hidden: int,
                 proj_dim: int = 16, cond_dim: int = 0, goal_dim: int = 0):
        name = f"dec.{order}"
        self.order = order
        self.enc_dim = enc_dim
        self.hidden = hidden
        self.proj_dim = proj_dim
        self.cond_dim = cond_dim
        self.goal_dim = goal_dim
        self.init = Linear(store, f"{name}.init", enc_dim, hidden)
        self.proj = Linear(store, f"{name}.proj", hidden, proj_dim)
        self.cell = LSTMCell(store, f"{name}.lstm", enc_dim + proj_dim + cond_dim + goal_dim, hidden)
        self.head = Linear(store, f"{name}.head", hidden, 5)
        self.goal_embed = Linear(store, f"{name}.goal", 2, goal_dim) if goal_dim else None

    def embed_goal(self, goal: Tensor | None, batch: int) -> Tensor | None:
        if not self.goal_dim:
            return None
        if goal is None:
            return Tensor(np.zeros((batch, self.goal_dim)))
        return self.goal_embed(goal)

    def __call__(self, enc: Tensor, steps: int, cond: list[Tensor] | None = None,
                 goal: Tensor | None = None) -> tuple[list[Tensor], GaussianTrack]:
        if steps < 1:
            raise HorizonError(f"prediction horizon must be >= 1, got {steps}")
        batch = enc.shape[0]
        if enc.shape[-1] != self.enc_dim:
            raise DimensionError(f"dec.{self.order}: context width {enc.shape[-1]} != {self.enc_dim}")
        if self.cond_dim:
            if cond is None or len(cond) != steps:
                got = None if cond is None else len(cond)
                raise DimensionError(f"dec.{self.order}: conditioning length {got} != horizon {steps}")
        goal_emb = self.embed_goal(goal, batch)
        state = RecurrentState(self.init(enc), Tensor(np.zeros((batch, self.hidden))))
        hidden, outs = [], []
        zero_proj = Tensor(np.zeros((batch, self.proj_dim)))
        zero_cond = Tensor(np.zeros((batch, self.cond_dim)))
        for i in range(steps):
            parts = [enc, zero_proj if i == 0 else self.proj(hidden[-1])]
            if self.cond_dim:
                parts.append(zero_cond if i == 0 else cond[i - 1])
            if goal_emb is not None:
                parts.append(goal_emb)
            state = self.cell(nn.concat(parts, axis=-1), state)
            hidden.append(state.hidden)
            outs.append(self.head(state.hidden))
        o = nn.stack(outs, axis=1)  # (B, T, 5)
        # tanh rounds to exactly +-1 for large inputs; the shrink keeps |rho| < 1
        track = GaussianTrack(mu=o[:, :, 0:2], sigma=nn.exp(o[:, :, 2:4]),
                              rho=nn.tanh(o[:, :, 4]) * RHO_SHRINK)
        return hidden, track


@dataclass
class DecoderOutput:
    Y: GaussianTrack
    V: GaussianTrack | None
    A: GaussianTrack | None
    hidden: dict[str, list[Tensor]]


class HierarchicalDecoder:
    def __init__(self, store: ParamStore, orders, enc_dims: dict[str, int],
                 hidden: dict[str, int], proj_dim: int = 16, goal_dim: int = 16):
        self.orders = tuple(orders)
        self.subs: dict[str, SubDecoder] = {}
        if "a" in self.orders:
            self.subs["a"] = SubDecoder(store, "a", enc_dims["a"], hidden["a"], proj_dim)
        if "v" in self.orders:
            cond = hidden["a"] if "a" in self.orders else 0
            self.subs["v"] = SubDecoder(store, "v", enc_dims["v"], hidden["v"], proj_dim, cond)
        cond = hidden["v"] if "v" in self.orders else 0
        self.subs["s"] = SubDecoder(store, "s", enc_dims["s"], hidden["s"], proj_dim, cond, goal_dim)

    def decode_acceleration(self, ctx: DecoderContext, steps: int):
        return self.subs["a"](ctx.enc["a"], steps)

    def decode_velocity(self, ctx: DecoderContext, accel_hidden, steps: int):
        return self.subs["v"](ctx.enc["v"], steps, accel_hidden)

    def decode_location(self, ctx: DecoderContext, vel_hidden, goal, steps: int):
        return self.subs["s"](ctx.enc["s"], steps, vel_hidden, goal)

    def upper(self, ctx: DecoderContext, steps: int):
        """Acceleration and velocity layers; independent of the goal."""
        hidden: dict[str, list[Tensor]] = {}
        A = V = None
        if "a" in self.subs:
            hidden["a"], A = self.decode_acceleration(ctx, steps)
        if "v" in self.subs:
            hidden["v"], V = self.decode_velocity(ctx, hidden.get("a"), steps)
        return hidden, V, A

    def forward(self, ctx: DecoderContext, steps: int) -> DecoderOutput:
        hidden, V, A = self.upper(ctx, steps)
        hidden["s"], Y = self.decode_location(ctx, hidden.get("v"), ctx.goal, steps)
        return DecoderOutput(Y, V, A, hidden)
