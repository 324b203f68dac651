"""Gaussian feature statistics and the closed-form 2-Wasserstein distance.

Two evaluation paths are kept deliberately separate:

* :func:`w2_squared` is differentiable torch code built on a coupled
  Newton-Schulz square root (matmuls only, stable gradients even when
  eigenvalues nearly repeat);
* :func:`w2_oracle_eig` is a float64 numpy reference using symmetric
  eigendecomposition. It is never used on a gradient path.

Statistics are accumulated in float64 regardless of the feature dtype.
Leading batch dimensions are supported throughout the torch path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffmath import ContractError

EPS_REG = 1e-5
NS_ITERS = 30


@dataclass
class FeatureStats:
    """Mean ``(..., C)`` and regularized covariance ``(..., C, C)``."""

    mean: torch.Tensor
    cov: torch.Tensor
    eps_reg: float = EPS_REG

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, i) -> "FeatureStats":
        return FeatureStats(self.mean[i], self.cov[i], self.eps_reg)


def feature_stats(fmap: torch.Tensor, eps_reg: float = EPS_REG) -> FeatureStats:
    """Spatial Gaussian summary of a ``C x H x W`` (or ``B x C x H x W``) map.

    Every spatial position is one C-dimensional sample; the covariance uses the
    biased ``1/(H*W)`` normalizer and gets ``eps_reg * I`` on its diagonal.
    """
    if fmap.dim() < 3:
        raise ContractError(f"feature_stats: need C x H x W, got {tuple(fmap.shape)}")
    if eps_reg <= 0:
        raise ContractError(f"feature_stats: eps_reg must be > 0, got {eps_reg}")
    if not torch.isfinite(fmap).all():
        raise ContractError("feature_stats: non-finite features")
    c = fmap.shape[-3]
    f = fmap.to(torch.float64).flatten(-2)  # (..., C, P)
    n = f.shape[-1]
    mu = f.mean(-1)
    d = f - mu.unsqueeze(-1)
    cov = d @ d.transpose(-1, -2) / n
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    cov = cov + eps_reg * torch.eye(c, dtype=torch.float64)
    return FeatureStats(mu, cov, eps_reg)


def _check_spd(a: torch.Tensor):
    if a.shape[-1] != a.shape[-2]:
        raise ContractError(f"sqrtm_ns: need square matrices, got {tuple(a.shape)}")
    if not torch.isfinite(a).all():
        raise ContractError("sqrtm_ns: non-finite input")
    with torch.no_grad():
        n = a.shape[-1]
        probes = torch.stack([
            torch.ones(n, dtype=a.dtype),
            torch.tensor([(-1.0) ** i for i in range(n)], dtype=a.dtype),
        ])
        rq = torch.einsum("kn,...nm,km->...k", probes, a, probes)
        diag = torch.diagonal(a, dim1=-2, dim2=-1)
        if (rq <= 0).any() or (diag <= 0).any():
            raise ContractError("sqrtm_ns: input is not positive definite (Rayleigh probe <= 0)")


def sqrtm_ns(a: torch.Tensor, iterations: int = NS_ITERS, check: bool = True) -> torch.Tensor:
    """Square root of an SPD matrix by the coupled Newton-Schulz iteration.

    The input is scaled by its Frobenius norm so every eigenvalue lies in
    (0, 1], iterated, then rescaled by the root of that norm.
    """
    if iterations < 1:
        raise ContractError(f"sqrtm_ns: iterations must be >= 1, got {iterations}")
    if check:
        _check_spd(a)
    n = a.shape[-1]
    norm = torch.linalg.matrix_norm(a, keepdim=True)
    y = a / norm
    eye = torch.eye(n, dtype=a.dtype).expand_as(a)
    z = eye
    for _ in range(iterations):
        t = 0.5 * (3.0 * eye - z @ y)
        y = y @ t
        z = t @ z
    return y * norm.sqrt()


def _trace(a: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(a, dim1=-2, dim2=-1).sum(-1)


def _same_stats(p: FeatureStats, q: FeatureStats) -> bool:
    return torch.equal(p.mean, q.mean) and torch.equal(p.cov, q.cov)


def w2_squared(p: FeatureStats, q: FeatureStats, iterations: int = NS_ITERS) -> torch.Tensor:
    """Squared 2-Wasserstein distance between two Gaussians (differentiable).

    ``|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_q^1/2 S_p S_q^1/2)^1/2)``, clamped
    at zero. Returns a float64 tensor with the batch shape of the operands.
    Only ``q``'s covariance is square-rooted twice over, so pass a constant
    (detached) operand as ``q`` when one side carries no gradient.
    """
    if p.mean.shape != q.mean.shape:
        raise ContractError(f"w2_squared: dimension mismatch {tuple(p.mean.shape)} vs {tuple(q.mean.shape)}")
    if _same_stats(p, q):
        return (p.mean * 0.0).sum(-1)
    dm = ((p.mean - q.mean) ** 2).sum(-1)
    if q.cov.requires_grad:
        rq = sqrtm_ns(q.cov, iterations)
    else:  # constant operand: no graph through its square root
        with torch.no_grad():
            rq = sqrtm_ns(q.cov, iterations)
    mid = rq @ p.cov @ rq
    mid = 0.5 * (mid + mid.transpose(-1, -2))
    cross = _trace(sqrtm_ns(mid, iterations, check=False))
    val = dm + _trace(p.cov) + _trace(q.cov) - 2.0 * cross
    return val.clamp_min(0.0)


def w2_distance(p: FeatureStats, q: FeatureStats, iterations: int = NS_ITERS, guard: float = 1e-12) -> torch.Tensor:
    """``sqrt(w2_squared)`` with a linear slope guard below ``guard``.

    Exactly zero for identical operands, finite gradient everywhere.
    """
    sq = w2_squared(p, q, iterations)
    safe = torch.sqrt(sq.clamp_min(guard))
    return torch.where(sq > guard, safe, sq / np.sqrt(guard))


def _np(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def w2_oracle_eig(p: FeatureStats, q: FeatureStats) -> float:
    """Reference squared 2-Wasserstein value via eigendecomposition (unbatched)."""
    mp, mq = _np(p.mean), _np(q.mean)
    sp, sq_ = _np(p.cov), _np(q.cov)
    if mp.shape != mq.shape or mp.ndim != 1:
        raise ContractError(f"w2_oracle_eig: dimension mismatch {mp.shape} vs {mq.shape}")
    rq = _psd_sqrt(sq_)
    mid = rq @ sp @ rq
    ev = np.clip(np.linalg.eigvalsh(0.5 * (mid + mid.T)), 0.0, None)
    val = float(((mp - mq) ** 2).sum() + np.trace(sp) + np.trace(sq_) - 2.0 * np.sqrt(ev).sum())
    return max(val, 0.0)


def stats_from_numpy(mean, cov, eps_reg: float = EPS_REG) -> FeatureStats:
    """Wrap explicit mean/covariance arrays (no regularizer is added)."""
    return FeatureStats(torch.as_tensor(np.atleast_1d(mean), dtype=torch.float64),
                        torch.as_tensor(np.atleast_2d(cov), dtype=torch.float64), eps_reg)
