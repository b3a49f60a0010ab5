"""Training objectives.

Pixel sums are reported as per-pixel means (and means over the batch axis when
present) so that the weights do not depend on image resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nets import AdaptationField, GaussianDiag
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.01
    q: float = 0.7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def ce_loss(probs, onehot) -> Tensor:
    probs, onehot = T.as_tensor(probs), T.as_tensor(onehot)
    _same_shape("ce_loss", probs, onehot)
    per_pixel = T.sum(onehot * T.log(probs + LOG_FLOOR), axis=-3)
    return -T.mean(per_pixel)


def tr_loss(field: AdaptationField) -> Tensor:
    """Mean over pixels of the trace of each adaptation matrix."""
    w = field.w
    c = w.shape[-4]
    eye = np.eye(c)[:, :, None, None]
    return T.mean(T.sum(w * eye, axis=(-4, -3)))


def nr_loss(probs, onehot, q: float) -> Tensor:
    """Noise-robust loss ``y * (1 - p**q) / q`` averaged over pixels."""
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    probs, onehot = T.as_tensor(probs), T.as_tensor(onehot)
    _same_shape("nr_loss", probs, onehot)
    per_pixel = T.sum(onehot * (1.0 - T.pow(probs, q)), axis=-3)
    return T.mean(per_pixel) * (1.0 / q)


def kl_diag_gauss(q_dist: GaussianDiag, p_dist: GaussianDiag) -> Tensor:
    """Closed-form ``KL[q || p]`` summed over latent dims, averaged over any batch axis."""
    if q_dist.mu.shape != p_dist.mu.shape or q_dist.log_sigma.shape != p_dist.log_sigma.shape \
            or q_dist.mu.shape != q_dist.log_sigma.shape:
        raise ShapeError("kl_diag_gauss", q_dist.mu.shape, p_dist.mu.shape)
    var_q = T.exp(2.0 * q_dist.log_sigma)
    var_p = T.exp(2.0 * p_dist.log_sigma)
    diff = q_dist.mu - p_dist.mu
    per_dim = (p_dist.log_sigma - q_dist.log_sigma) + (var_q + diff * diff) / (2.0 * var_p) - 0.5
    per_sample = T.sum(per_dim, axis=-1)
    return T.mean(per_sample)


def warmup_loss(seg_probs, onehot, field: AdaptationField, q_dist: GaussianDiag,
                p_dist: GaussianDiag, weights: LossWeights, terms: dict | None = None) -> Tensor:
    """``CE(f, y) + beta * KL - TR(W)``.

    The KL enters with a plus sign: the ELBO's ``-KL`` is what gets subtracted.
    Pass a dict as ``terms`` to receive the individual component values.
    """
    ce = ce_loss(seg_probs, onehot)
    kl = kl_diag_gauss(q_dist, p_dist)
    tr = tr_loss(field)
    if terms is not None:
        terms.update(ce=ce.item(), kl=kl.item(), tr=tr.item())
    return ce + weights.beta * kl - tr


def total_loss(seg_probs, local_probs, onehot, field: AdaptationField, q_dist: GaussianDiag,
               p_dist: GaussianDiag, weights: LossWeights, terms: dict | None = None) -> Tensor:
    """``CE(W f, y) + NR(f, y) + alpha * TR(W) + beta * KL``."""
    ce = ce_loss(local_probs, onehot)
    nr = nr_loss(seg_probs, onehot, weights.q)
    tr = tr_loss(field)
    kl = kl_diag_gauss(q_dist, p_dist)
    if terms is not None:
        terms.update(ce=ce.item(), nr=nr.item(), tr=tr.item(), kl=kl.item())
    return ce + nr + weights.alpha * tr + weights.beta * kl
