"""Training losses and displacement metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .nn_core import DimensionError, Tensor

LAMBDA_UNI = 1.0
LAMBDA_MULTI = 0.5
LOG_2PI = float(np.log(2.0 * np.pi))


class DistributionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _check_same(pred_shape, gt_shape, what: str) -> None:
    if tuple(pred_shape) != tuple(gt_shape):
        raise DimensionError(f"{what}: prediction shape {tuple(pred_shape)} != ground truth {tuple(gt_shape)}")


def gaussian2d_nll(dist, gt) -> Tensor:
    """Mean negative log-density of ``gt`` under per-step bivariate Gaussians."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    mu, sigma, rho = dist.mu, dist.sigma, dist.rho
    _check_same(mu.shape, gt.shape, "gaussian2d_nll")
    if np.any(sigma.data <= 0):
        raise DistributionError("scales must be strictly positive")
    if np.any(np.abs(rho.data) >= 1):
        raise DistributionError("correlation must lie strictly inside (-1, 1)")
    d = nn.sub(gt, mu)
    zx = d[..., 0] / sigma[..., 0]
    zy = d[..., 1] / sigma[..., 1]
    one_m = nn.sub(1.0, nn.square(rho))
    quad = nn.square(zx) + nn.square(zy) - 2.0 * rho * zx * zy
    nll = (LOG_2PI + nn.log(sigma[..., 0]) + nn.log(sigma[..., 1]) + 0.5 * nn.log(one_m)
           + 0.5 * quad / one_m)
    return nn.tmean(nll)


def mse_loss(pred, gt) -> Tensor:
    """Mean over steps of the squared Euclidean error."""
    pred = nn.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    _check_same(pred.shape, gt.shape, "mse_loss")
    return nn.tmean(nn.tsum(nn.square(nn.sub(pred, gt)), axis=-1))


def kl_gaussian_standard(dist) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over latent dims, averaged over rows."""
    if np.any(dist.sigma.data <= 0):
        raise DistributionError("latent scales must be strictly positive")
    mu, sigma = nn.as_tensor(dist.mu), nn.as_tensor(dist.sigma)
    terms = nn.square(mu) + nn.square(sigma) - 1.0 - 2.0 * nn.log(sigma)
    per_row = 0.5 * nn.tsum(terms, axis=-1)
    return nn.tmean(per_row)


@dataclass
class LossReport:
    total: Tensor
    l_s: float
    l_v: float
    l_a: float
    kl: float
    l_goal: float
    mode: str
    loss_kind: str

    @property
    def value(self) -> float:
        return float(self.total.data)


def _order_loss(track, gt, loss_kind: str) -> Tensor:
    if loss_kind == "mse":
        return mse_loss(track.mu, gt)
    if loss_kind == "nll":
        return gaussian2d_nll(track, gt)
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def total_loss(Y, V, A, gts: dict, cvae=None, mode: str = "unimodal", loss_kind: str = "mse",
               lambdas: tuple[float, float] = (LAMBDA_UNI, LAMBDA_MULTI),
               kl_weight: float = 1.0) -> LossReport:
    """Assemble the unimodal or combined objective.

    ``gts`` maps ``"s"``, ``"v"``, ``"a"`` to ground-truth arrays; ``V`` and
    ``A`` may be ``None`` for ablated variants.  ``cvae`` is
    ``(LatentDist, goal, gt_endpoint)``.  ``kl_weight`` scales the KL term
    during warm-up only; the reported ``kl`` is always unweighted.
    """
    terms = {"s": _order_loss(Y, gts["s"], loss_kind)}
    if V is not None:
        terms["v"] = _order_loss(V, gts["v"], loss_kind)
    if A is not None:
        terms["a"] = _order_loss(A, gts["a"], loss_kind)
    uni = terms["s"]
    for k in ("v", "a"):
        if k in terms:
            uni = uni + terms[k]
    kl = l_goal = None
    if mode == "unimodal":
        total = uni
    elif mode == "multimodal":
        if cvae is None:
            raise ConfigurationError("multimodal loss needs (latent, goal, gt_endpoint)")
        latent, goal, gt_end = cvae
        kl = kl_gaussian_standard(latent)
        l_goal = mse_loss(goal, gt_end)
        kl_term = kl if kl_weight == 1.0 else kl * kl_weight
        total = lambdas[0] * uni + lambdas[1] * (kl_term + l_goal)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")

    def f(t):
        return 0.0 if t is None else float(t.data)

    return LossReport(total, f(terms["s"]), f(terms.get("v")), f(terms.get("a")), f(kl),
                      f(l_goal), mode, loss_kind)


# ---------------------------------------------------------------- metrics


def _pair(pred, gt, what):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(pred.shape, gt.shape, what)
    if pred.shape[-2] < 1:
        raise DimensionError(f"{what}: empty trajectory")
    return pred, gt


def displacement(pred, gt) -> np.ndarray:
    d = np.asarray(pred) - np.asarray(gt)
    return np.hypot(d[..., 0], d[..., 1])  # no underflow for tiny offsets


def ade(pred, gt) -> float | np.ndarray:
    """Mean Euclidean distance over steps (vectorised over leading axes)."""
    pred, gt = _pair(pred, gt, "ade")
    return displacement(pred, gt).mean(axis=-1)


def fde(pred, gt) -> float | np.ndarray:
    pred, gt = _pair(pred, gt, "fde")
    return displacement(pred[..., -1, :], gt[..., -1, :])


def rmse_at(preds, gts, t: int) -> float:
    """Root of the scene-averaged squared error at 1-based step ``t``."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    if len(preds) == 0:
        raise ValueError("rmse_at needs at least one scene")
    _check_same(preds.shape, gts.shape, "rmse_at")
    if not 1 <= t <= preds.shape[1]:
        raise DimensionError(f"checkpoint step {t} outside horizon {preds.shape[1]}")
    err = preds[:, t - 1] - gts[:, t - 1]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=-1))))


def min_over_k(samples, gt, metric: str = "ade") -> float:
    """Best-of-K: smallest ADE or FDE across ``samples`` of shape ``(K, T, 2)``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) < 1:
        raise ValueError("min_over_k needs at least one sample of shape (T, 2)")
    gt = np.broadcast_to(np.asarray(gt, dtype=np.float64), samples.shape)
    fn = {"ade": ade, "fde": fde}[metric]
    return float(np.min(fn(samples, gt)))
