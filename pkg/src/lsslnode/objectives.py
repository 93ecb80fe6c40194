"""Pretraining losses: reconstruction plus cosine alignment of latent trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cosine_similarity, mse, tmean
from .models import LossWeights, ModelBundle, encode_pair, encode_predict_next
from .odesolve import SolverConfig

__all__ = ["LossBreakdown", "lssl_loss", "lssl_node_loss"]


@dataclass
class LossBreakdown:
    total: Tensor
    recon: float
    direction: float
    n: int

    def row(self) -> dict[str, float]:
        return {"total": self.total.item(), "recon": self.recon, "direction": self.direction, "n": self.n}


def _combine(bundle: ModelBundle, weights: LossWeights, x_i: Tensor, x_j: Tensor, z_i: Tensor,
             z_j: Tensor, dz: Tensor) -> LossBreakdown:
    terms = []
    recon_val = 0.0
    if weights.recon > 0:
        if bundle.decoder is None:
            raise ValueError(f"mode {bundle.mode} has no decoder but lambda_recon={weights.recon}")
        recon = mse(x_i, bundle.decoder(z_i)) + mse(x_j, bundle.decoder(z_j))
        recon_val = recon.item()
        terms.append(recon * weights.recon)
    dir_val = 0.0
    if bundle.direction is not None:
        cos = tmean(cosine_similarity(dz, bundle.direction()))
        dir_val = cos.item()
        if weights.direction > 0:
            terms.append(cos * (-weights.direction))
    elif weights.direction > 0:
        raise ValueError(f"mode {bundle.mode} has no direction net but lambda_dir={weights.direction}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(total=total, recon=recon_val, direction=dir_val, n=x_i.shape[0] if x_i.ndim == 2 else 1)


def lssl_loss(bundle: ModelBundle, x_i: Tensor, x_j: Tensor, weights: LossWeights | None = None) -> LossBreakdown:
    """Batch mean of ``recon * (|x_i - g(z_i)|^2 + |x_j - g(z_j)|^2) - dir * cos(dz, tau)``."""
    if bundle.node:
        raise ValueError(f"lssl_loss got NODE bundle {bundle.mode}; use lssl_node_loss")
    weights = weights or bundle.weights
    z_i, z_j, dz = encode_pair(bundle, x_i, x_j)
    return _combine(bundle, weights, x_i, x_j, z_i, z_j, dz)


def lssl_node_loss(bundle: ModelBundle, x_i: Tensor, t_i, x_j: Tensor, t_j, weights: LossWeights | None = None,
                   cfg: SolverConfig | None = None, grad_mode: str = "adjoint",
                   stats: dict | None = None) -> LossBreakdown:
    """As :func:`lssl_loss` but the second latent is integrated from the first."""
    if not bundle.node:
        raise ValueError(f"lssl_node_loss got non-NODE bundle {bundle.mode}; use lssl_loss")
    weights = weights or bundle.weights
    if x_i.shape != x_j.shape:
        raise ValueError(f"pair shapes differ: {x_i.shape} vs {x_j.shape}")
    t_i = np.asarray(t_i, dtype=np.float64)
    t_j = np.asarray(t_j, dtype=np.float64)
    z_i, z_node, dz = encode_predict_next(bundle, x_i, t_i, t_j, cfg, grad_mode=grad_mode, stats=stats)
    return _combine(bundle, weights, x_i, x_j, z_i, z_node, dz)
