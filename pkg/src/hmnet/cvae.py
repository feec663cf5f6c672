"""Endpoint CVAE: latent Gaussian -> candidate goals for the location decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .nn_core import Linear, ParamStore, Tensor


class ModeError(RuntimeError):
    pass


@dataclass
class LatentDist:
    mu: Tensor  # (B, Z)
    sigma: Tensor  # (B, Z), > 0


@dataclass
class GoalSample:
    endpoint: np.ndarray  # (2,) meters, ego frame
    z: np.ndarray


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class EndpointCVAE:
    def __init__(self, store: ParamStore, enc_dim: int, latent: int = 16, hidden: int = 64,
                 embed: int = 16):
        self.latent = latent
        self.enc_dim = enc_dim
        self.post_embed = Linear(store, "cvae.post.embed", 2, embed)
        self.post_fc = Linear(store, "cvae.post.fc", enc_dim + embed, hidden)
        self.post_out = Linear(store, "cvae.post.out", hidden, 2 * latent)
        self.goal_fc = Linear(store, "cvae.goal.fc", latent + enc_dim, hidden)
        self.goal_out = Linear(store, "cvae.goal.out", hidden, 2)

    def posterior_encode(self, enc_s: Tensor, gt_endpoint, training: bool = True) -> LatentDist:
        """Recognition network over ``cat(enc_s, embed(endpoint))``; training only."""
        if not training:
            raise ModeError("posterior_encode needs the ground-truth endpoint and runs only in training")
        e = nn.leaky_relu(self.post_embed(nn.as_tensor(gt_endpoint)))
        hdn = nn.leaky_relu(self.post_fc(nn.concat([enc_s, e], axis=-1)))
        out = self.post_out(hdn)
        z = self.latent
        return LatentDist(mu=out[..., :z], sigma=nn.exp(out[..., z:]))

    def sample_latent(self, dist: LatentDist | None, rng=None, batch: int = 1):
        """Reparameterized draw ``mu + sigma * eps``, or a prior draw when ``dist`` is None.

        Returns ``(z, eps)`` so callers can freeze the noise.
        """
        gen = _rng(rng)
        if dist is None:
            eps = gen.standard_normal((batch, self.latent))
            return Tensor(eps), eps
        eps = gen.standard_normal(dist.mu.shape)
        return dist.mu + dist.sigma * eps, eps

    def decode_goal(self, z, enc_s: Tensor) -> Tensor:
        hdn = nn.leaky_relu(self.goal_fc(nn.concat([nn.as_tensor(z), enc_s], axis=-1)))
        return self.goal_out(hdn)

    def sample_goals(self, enc_s: Tensor, k: int, rng=None) -> tuple[Tensor, np.ndarray]:
        """``k`` prior draws per scene, decoded to goals of shape ``(k * B, 2)``.

        Rows are ordered sample-major: row ``j * B + b`` is sample ``j`` of scene ``b``.
        """
        if k < 1:
            raise ValueError(f"need at least one goal sample, got K={k}")
        batch = enc_s.shape[0]
        gen = _rng(rng)
        eps = gen.standard_normal((k, batch, self.latent)).reshape(k * batch, self.latent)
        tiled = nn.take_rows(enc_s, np.tile(np.arange(batch), k))
        return self.decode_goal(Tensor(eps), tiled), eps


def sample_latent(dist: LatentDist | None, rng_seed=None, latent: int | None = None):
    """Functional form: reparameterized draw or standard-normal prior draw."""
    gen = _rng(rng_seed)
    if dist is None:
        return gen.standard_normal(latent)
    eps = gen.standard_normal(dist.mu.shape)
    return dist.mu + dist.sigma * eps
