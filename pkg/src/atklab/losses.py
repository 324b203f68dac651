"""Attack, fidelity and semantic losses.

Every loss accepts a batch and returns a :class:`LossValue` whose ``value`` is
the batch sum (so one backward pass yields independent per-image gradients)
and whose ``per_image`` holds the individual terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .diffmath import ContractError
from .diffusion import NoiseSchedule, forward_diffuse, to_model
from .linalg_w2 import EPS_REG, FeatureStats, feature_stats, w2_distance, w2_squared


@dataclass
class LossValue:
    value: torch.Tensor
    per_image: torch.Tensor
    components: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def _batched(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def _w2(p: FeatureStats, q: FeatureStats, squared: bool) -> torch.Tensor:
    return w2_squared(p, q) if squared else w2_distance(p, q)


def attack_loss(x_t: torch.Tensor, x_t_adv: torch.Tensor, victim, t, squared: bool = False,
                eps_reg: float = EPS_REG) -> LossValue:
    """Negative 2-Wasserstein distance between the victim's mid features.

    ``x_t`` is the clean noisy sample and never receives gradient; ``t`` is
    an int or a per-sample array. ``squared=True`` uses ``-W2^2`` instead.
    """
    if x_t.shape != x_t_adv.shape:
        raise ContractError(f"attack_loss: shape mismatch {tuple(x_t.shape)} vs {tuple(x_t_adv.shape)}")
    x_t, x_t_adv = _batched(x_t), _batched(x_t_adv)
    with torch.no_grad():
        f_clean = victim.mid(x_t.detach(), t)
    f_adv = victim.mid(x_t_adv, t)
    d = _w2(feature_stats(f_adv, eps_reg), feature_stats(f_clean, eps_reg), squared)
    per = -d
    return LossValue(per.sum(), per)


def fidelity_loss(x: torch.Tensor, x_adv: torch.Tensor, featnet, squared: bool = False,
                  eps_reg: float = EPS_REG) -> LossValue:
    """Sum over feature-extractor taps of the W2 distance between clean and adversarial images."""
    if x.shape != x_adv.shape:
        raise ContractError(f"fidelity_loss: shape mismatch {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    x, x_adv = _batched(x), _batched(x_adv)
    with torch.no_grad():
        clean = featnet.taps(x.detach())
    adv = featnet.taps(x_adv)
    layers = [_w2(feature_stats(b, eps_reg), feature_stats(a, eps_reg), squared) for a, b in zip(clean, adv)]
    per = torch.stack(layers).sum(0)
    return LossValue(per.sum(), per, {f"phi{i + 1}": l for i, l in enumerate(layers)})


def semantic_loss(x_adv: torch.Tensor, t, eps: torch.Tensor, victim,
                  sched: NoiseSchedule | None = None) -> LossValue:
    """Diffusion training loss ``mean |eps - eps_theta(F(x_adv, t, eps), t)|^2`` per image."""
    sched = sched or NoiseSchedule()
    x_adv, eps = _batched(x_adv), _batched(eps)
    x_t = forward_diffuse(to_model(x_adv), t, eps, sched)
    per = ((eps - victim.eps(x_t, t)) ** 2).flatten(1).mean(1)
    return LossValue(per.sum(), per)
