"""HMNet: encoders, motional social pooling, hierarchical decoder and goal CVAE."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core as nn
from .cvae import EndpointCVAE, GoalSample, LatentDist
from .decoder import DecoderContext, GaussianTrack, HierarchicalDecoder
from .encoder import EncoderStack, SceneEncodings
from .nn_core import ParamStore, Tensor
from .objectives import ConfigurationError, LossReport, total_loss
from .social import FieldConfig, PoolConfig, SocialPool, scatter_to_grid

VARIANT_ORDERS = {"S": ("s",), "V": ("s", "v"), "V+A": ("s", "v", "a")}


@dataclass
class ModelConfig:
    variant: str = "V+A"
    use_social: bool = True
    embed: int = 16
    enc_hidden: dict = field(default_factory=lambda: {"s": 64, "v": 32, "a": 32})
    dec_hidden: dict = field(default_factory=lambda: {"s": 64, "v": 32, "a": 32})
    proj_dim: int = 16
    goal_dim: int = 16
    latent: int = 16
    cvae_hidden: int = 64
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    # internal units: positions / pos_scale etc.
    scales: dict = field(default_factory=lambda: {"s": 30.0, "v": 10.0, "a": 2.0})
    # endpoint units (longitudinal, lateral) for the CVAE and the goal embedding
    goal_scale: tuple = (30.0, 3.7)

    def __post_init__(self):
        if self.variant not in VARIANT_ORDERS:
            raise ConfigurationError(f"variant must be one of {list(VARIANT_ORDERS)}, got {self.variant!r}")

    @property
    def orders(self) -> tuple[str, ...]:
        return VARIANT_ORDERS[self.variant]


@dataclass
class SceneBatch:
    scenes: list
    frequency: float
    history: np.ndarray  # (B, L, 2)
    future: np.ndarray  # (B, T, 2)

    @classmethod
    def collate(cls, scenes) -> "SceneBatch":
        scenes = list(scenes)
        return cls(scenes, scenes[0].frequency,
                   np.stack([sc.history for sc in scenes]),
                   np.stack([sc.future for sc in scenes]))

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def horizon(self) -> int:
        return self.future.shape[1]

    def targets(self) -> dict[str, np.ndarray]:
        """Ground-truth location, velocity and acceleration tracks (physical units)."""
        f = self.frequency
        seq = np.concatenate([self.history[:, -2:], self.future], axis=1)
        v = np.diff(seq, axis=1) * f  # T + 1 velocities, first is the last observed one
        a = np.diff(v, axis=1) * f
        return {"s": self.future, "v": v[:, 1:], "a": a}


@dataclass
class ForwardResult:
    Y: GaussianTrack
    V: GaussianTrack | None
    A: GaussianTrack | None
    latent: LatentDist | None = None
    goal: Tensor | None = None
    encodings: SceneEncodings | None = None
    social: Tensor | None = None


class HMNet:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(seed)
        orders = cfg.orders
        self.encoders = EncoderStack(self.store, orders, cfg.embed, cfg.enc_hidden, cfg.scales)
        channels = sum(cfg.enc_hidden[o] for o in orders)
        self.pool = SocialPool(self.store, channels, cfg.field_cfg, cfg.pool) if cfg.use_social else None
        social_dim = self.pool.out_dim if self.pool else 0
        enc_dims = {o: cfg.enc_hidden[o] + social_dim for o in orders}
        self.decoder = HierarchicalDecoder(self.store, orders, enc_dims, cfg.dec_hidden,
                                           cfg.proj_dim, cfg.goal_dim)
        self.cvae = EndpointCVAE(self.store, enc_dims["s"], cfg.latent, cfg.cvae_hidden)

    @property
    def orders(self) -> tuple[str, ...]:
        return self.cfg.orders

    @property
    def goal_scale(self) -> np.ndarray:
        return np.asarray(self.cfg.goal_scale, dtype=np.float64)

    # ------------------------------------------------------------ pieces

    def social_encoding(self, enc: SceneEncodings) -> Tensor | None:
        if self.pool is None:
            return None
        grid = scatter_to_grid(enc, self.cfg.field_cfg, self.orders)
        return self.pool(grid)

    def context(self, batch: SceneBatch):
        enc = self.encoders.encode_batch(batch.scenes, self.cfg.field_cfg, neighbors=self.cfg.use_social)
        social = self.social_encoding(enc)
        ctx = {}
        for o in self.orders:
            ctx[o] = enc.ego[o] if social is None else nn.concat([enc.ego[o], social], axis=-1)
        return enc, social, DecoderContext(ctx)

    # ------------------------------------------------------------ forward

    def forward(self, batch: SceneBatch, mode: str = "unimodal", *, training: bool = True,
                rng=None, goal=None, samples: int = 1) -> ForwardResult:
        """Full pass.  In multimodal training the goal comes from the posterior.

        ``goal`` (ego frame in ``goal_scale`` units, ``(B, 2)``) overrides the CVAE.  With
        ``samples > 1`` the location decoder runs once per posterior draw and
        ``Y``/``goal`` rows are sample-major.
        """
        steps = batch.horizon
        enc, social, ctx = self.context(batch)
        latent = None
        if mode == "multimodal" and goal is None:
            if not training:
                raise ConfigurationError("multimodal inference uses predict(); forward needs training=True or a goal")
            end = batch.future[:, -1] / self.goal_scale
            latent = self.cvae.posterior_encode(ctx.enc["s"], end, training=True)
            gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            draws = [self.cvae.sample_latent(latent, gen)[0] for _ in range(samples)]
            z = draws[0] if samples == 1 else nn.concat(draws, axis=0)
            enc_s = ctx.enc["s"] if samples == 1 else _tile(ctx.enc["s"], samples)
            goal = self.cvae.decode_goal(z, enc_s)
        elif mode not in ("unimodal", "multimodal"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        if goal is not None:
            goal = nn.as_tensor(goal)
        hidden, V, A = self.decoder.upper(ctx, steps)
        reps = 1 if goal is None else goal.shape[0] // len(batch)
        if reps > 1:
            ctx_s = DecoderContext({"s": _tile(ctx.enc["s"], reps)})
            vel = [_tile(h, reps) for h in hidden["v"]] if "v" in hidden else None
        else:
            ctx_s, vel = ctx, hidden.get("v")
        _, Y = self.decoder.decode_location(ctx_s, vel, goal, steps)
        return ForwardResult(Y, V, A, latent, goal, enc, social)

    def loss(self, batch: SceneBatch, mode: str = "unimodal", loss_kind: str = "mse", rng=None,
             lambdas=(1.0, 0.5), samples: int = 1, kl_weight: float = 1.0) -> LossReport:
        res = self.forward(batch, mode, training=True, rng=rng, samples=samples)
        sc = self.cfg.scales
        tg = batch.targets()
        gts = {o: tg[o] / sc[o] for o in ("s", "v", "a")}
        reps = res.Y.mu.shape[0] // len(batch)
        if reps > 1:
            gts["s"] = np.concatenate([gts["s"]] * reps, axis=0)
        cvae = None
        if mode == "multimodal":
            # goal error in meters: in normalized units a lane offset costs
            # less than the KL needed to encode it and the posterior collapses
            end = np.concatenate([tg["s"][:, -1]] * reps, axis=0)
            cvae = (res.latent, res.goal * self.goal_scale, end)
        return total_loss(res.Y, res.V, res.A, gts, cvae, mode, loss_kind, lambdas, kl_weight)

    # ------------------------------------------------------------ inference

    def predict(self, batch: SceneBatch, mode: str = "unimodal", k: int = 1, rng=None) -> np.ndarray:
        """Predicted mean tracks in meters, ego frame, shape ``(B, K, T, 2)``."""
        with nn.no_grad():
            if mode == "unimodal":
                res = self.forward(batch, "unimodal", training=False)
                return res.Y.means()[:, None] * self.cfg.scales["s"]
            if mode != "multimodal":
                raise ConfigurationError(f"unknown mode {mode!r}")
            steps = batch.horizon
            enc, social, ctx = self.context(batch)
            goals, _ = self.cvae.sample_goals(ctx.enc["s"], k, rng)
            hidden, _, _ = self.decoder.upper(ctx, steps)
            ctx_s = DecoderContext({"s": _tile(ctx.enc["s"], k)})
            vel = [_tile(h, k) for h in hidden["v"]] if "v" in hidden else None
            _, Y = self.decoder.decode_location(ctx_s, vel, goals, steps)
            b = len(batch)
            means = Y.means().reshape(k, b, steps, 2).transpose(1, 0, 2, 3)
            return means * self.cfg.scales["s"]

    def sample_goals(self, scene, k: int, rng=None) -> list[GoalSample]:
        with nn.no_grad():
            _, _, ctx = self.context(SceneBatch.collate([scene]))
            goals, eps = self.cvae.sample_goals(ctx.enc["s"], k, rng)
        return [GoalSample(g * self.goal_scale, z) for g, z in zip(goals.data, eps)]


def _tile(x: Tensor, reps: int) -> Tensor:
    return nn.take_rows(x, np.tile(np.arange(x.shape[0]), reps))


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
