"""Noise schedule, forward diffusion, the generalized DDIM/DDPM step, SDEdit.

Images live in [0, 1]; the denoiser works on ``2x - 1``. :func:`to_model`
and :func:`to_image` convert between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffmath import ContractError, Rng, randn


@dataclass
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.0
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1 or not (0 < self.beta_start <= self.beta_end < 1):
            raise ContractError(f"NoiseSchedule: invalid T/betas ({self.T}, {self.beta_start}, {self.beta_end})")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"NoiseSchedule: eta must lie in [0, 1], got {self.eta}")
        # index 0 is the clean image; betas[t] for t = 1..T
        self.betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.T)])
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def abar(self, t) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bar[np.asarray(t)], dtype=torch.float64)

    def sigma(self, t: int, s: int, eta: float | None = None) -> float:
        """Noise scale for a jump ``t -> s``; ``eta=1`` is the DDPM posterior std."""
        eta = self.eta if eta is None else eta
        a_t, a_s = self.alpha_bar[t], self.alpha_bar[s]
        return float(eta * np.sqrt((1 - a_s) / (1 - a_t)) * np.sqrt(1 - a_t / a_s))


def to_model(x: torch.Tensor) -> torch.Tensor:
    return 2.0 * x - 1.0


def to_image(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (x.dim() - v.dim()))


def _check_t(t, sched: NoiseSchedule, op: str):
    ts = np.asarray(t)
    if (ts < 0).any() or (ts > sched.T).any():
        raise ContractError(f"{op}: timestep outside [0, {sched.T}]: {t}")


def forward_diffuse(x: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x + sqrt(1 - abar_t) eps``; ``t`` may be an int or per-sample array."""
    if eps.shape != x.shape:
        raise ContractError(f"forward_diffuse: shape mismatch {tuple(x.shape)} vs {tuple(eps.shape)}")
    _check_t(t, sched, "forward_diffuse")
    ab = sched.abar(t)  # float64; coefficients are cast only after the square roots
    c_x, c_e = ab.sqrt().to(x.dtype), (1.0 - ab).sqrt().to(x.dtype)
    if ab.dim():
        c_x, c_e = _bcast(c_x, x), _bcast(c_e, x)
    return c_x * x + c_e * eps


def sampler_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule,
                 rng: Rng | None = None, prev_t: int | None = None, eta: float | None = None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """One generalized DDIM step from ``t`` to ``prev_t`` (default ``t - 1``).

    ``sigma = eta * sigma_DDPM``. With ``sigma == 0`` no noise is drawn and
    ``rng`` may be omitted.
    """
    if t < 1:
        raise ContractError(f"sampler_step: t must be >= 1, got {t}")
    if eps_hat.shape != x_t.shape:
        raise ContractError(f"sampler_step: shape mismatch {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    s = t - 1 if prev_t is None else prev_t
    if not 0 <= s < t:
        raise ContractError(f"sampler_step: prev_t must lie in [0, {t}), got {s}")
    a_t, a_s = float(sched.alpha_bar[t]), float(sched.alpha_bar[s])
    sig = sched.sigma(t, s, eta)
    # sqrt(a_s) * x0_hat + dir * eps_hat with x0_hat = (x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t),
    # folded into two float64 coefficients so small a_t does not amplify rounding
    c_x = np.sqrt(a_s / a_t)
    c_e = np.sqrt(max(1.0 - a_s - sig * sig, 0.0)) - np.sqrt(a_s * (1.0 - a_t) / a_t)
    out = c_x * x_t + c_e * eps_hat
    if sig > 0:
        if noise is None:
            if rng is None:
                raise ContractError("sampler_step: stochastic step needs an rng")
            noise = randn(rng, x_t.shape).to(x_t.dtype)
        out = out + sig * noise
    return out


def timesteps(t_star: int, stride: int) -> list[int]:
    """``[t*, t* - stride, ..., 0]``; the last jump is truncated at 0."""
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    ts = list(range(t_star, 0, -stride))
    return ts + [0]


@dataclass
class EditRequest:
    image: torch.Tensor  # (3, H, W) or (B, 3, H, W), values in [0, 1]
    t_star: int = 500
    stride: int = 10
    seed: int = 0
    eta: float = 0.0


def _noise_for(rng: Rng, x: torch.Tensor) -> torch.Tensor:
    # one child stream per batch element keeps pairs aligned across batches
    return torch.stack([randn(rng.child(i), x.shape[1:]) for i in range(x.shape[0])]).to(x.dtype)


@torch.no_grad()
def sdedit(req: EditRequest, victim, sched: NoiseSchedule | None = None, trace=None) -> torch.Tensor:
    """Noise the image to ``t*`` with seeded noise, then denoise back to 0.

    ``victim`` is anything with ``eps(x_t, t)``; if it carries a ``codec``
    the whole procedure runs on latents. ``trace``, when given, is called as
    ``trace(t, x_t)`` at every visited timestep (including ``t*`` and 0).
    """
    sched = sched or NoiseSchedule(eta=req.eta)
    if not 0 <= req.t_star <= sched.T:
        raise ContractError(f"sdedit: t* outside [0, {sched.T}]: {req.t_star}")
    x = req.image
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if req.t_star == 0:
        return req.image.clone()
    codec = getattr(victim, "codec", None)
    h = codec.encode(x) if codec is not None else to_model(x)
    root = Rng(req.seed)
    eps = _noise_for(root.child(0), h)
    h = forward_diffuse(h, req.t_star, eps, sched)
    ts = timesteps(req.t_star, req.stride)
    step_rng = root.child(1)
    for k, (t, s) in enumerate(zip(ts[:-1], ts[1:])):
        if trace is not None:
            trace(t, h)
        tt = torch.full((h.shape[0],), t, dtype=torch.long)
        eps_hat = victim.eps(h, tt)
        noise = None
        if sched.sigma(t, s, req.eta) > 0:
            noise = _noise_for(step_rng.child(k), h)
        h = sampler_step(h, t, eps_hat, sched, prev_t=s, eta=req.eta, noise=noise)
    if trace is not None:
        trace(0, h)
    out = codec.decode(h) if codec is not None else to_image(h)
    out = out.clamp(0.0, 1.0)
    return out[0] if single else out
