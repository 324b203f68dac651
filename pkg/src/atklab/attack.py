"""Protective perturbation loops: AtkPDM, AtkPDM+ and semantic-loss baselines.

Both feature attacks are alternating optimizations. Each outer iteration takes
one signed-gradient step on the attack loss (the F1 half-step), then repeats
plain gradient steps on the fidelity loss while it exceeds the budget (the
gated F2 half-step). AtkPDM updates pixels; AtkPDM+ updates a VAE latent and
differentiates through the decoder.

Attacks run on a batch. Image ``i`` draws its timesteps and noise from
``Rng(cfg.seed).child(i)``, so its trajectory does not depend on what else is
in the batch.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .diffmath import ContractError, Rng, rand_uniform, randn
from .diffusion import NoiseSchedule, forward_diffuse, to_model
from .losses import attack_loss, fidelity_loss, semantic_loss

log = logging.getLogger(__name__)

MODES = ("atkpdm", "atkpdm_plus", "pgascent_semantic", "diffprotect_minus", "noise_control")
CONVERGED, MAX_OUTER, INNER_EXHAUSTED, DIVERGED = "converged", "max_outer", "inner_budget_exhausted", "diverged"


class AttackDiverged(RuntimeError):
    """A loss became non-finite during an attack run."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class AttackConfig:
    delta: float = 1.0
    gamma1: float = 100 / 255
    gamma2: float = 40 / 255
    n_iter: int = 300
    inner_max: int = 50
    t_lo: int = 0
    t_hi: int = 500
    t_fixed: int | None = None
    seed: int = 0
    mode: str = "atkpdm"
    victim_id: str = "victim"
    conv_window: int = 30
    conv_tol: float = 1e-3
    squared_w2: bool = False
    linf_radius: float = 16 / 255
    noise_target: float | None = None
    T: int = 1000

    def validate(self):
        if self.mode not in MODES:
            raise ContractError(f"AttackConfig: unknown mode {self.mode!r}")
        if self.delta <= 0 or self.gamma1 < 0 or self.gamma2 <= 0:
            raise ContractError("AttackConfig: delta and gamma2 must be > 0, gamma1 >= 0")
        if self.n_iter < 0 or self.inner_max < 0 or self.conv_window < 1:
            raise ContractError("AttackConfig: iteration budgets must be non-negative")
        if self.t_fixed is not None and not 0 <= self.t_fixed <= self.T:
            raise ContractError(f"AttackConfig: t_fixed outside [0, {self.T}]")
        if not 0 <= self.t_lo <= self.t_hi <= self.T:
            raise ContractError(f"AttackConfig: need 0 <= t_lo <= t_hi <= {self.T}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    adv: torch.Tensor
    attack_trace: np.ndarray  # (iterations, B)
    fidelity_trace: np.ndarray  # (iterations, B), after the inner loop
    final_fidelity: np.ndarray  # (B,)
    status: list
    inner_steps: np.ndarray  # (iterations, B)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def loss_rows(self):
        """``(iteration, image, l_attack, l_fidelity, inner_steps)`` tuples for CSV output."""
        for k in range(len(self.attack_trace)):
            for i in range(self.attack_trace.shape[1]):
                yield k, i, float(self.attack_trace[k, i]), float(self.fidelity_trace[k, i]), int(self.inner_steps[k, i])


# --------------------------------------------------------------------------
# alternating optimization pieces


def fgsm_half_step(y: torch.Tensor, grad: torch.Tensor, gamma1: float, active=None) -> torch.Tensor:
    """``y - gamma1 * sign(grad)`` on active images (F1 half-step)."""
    step = gamma1 * torch.sign(grad)
    if active is not None:
        step = step * _rows(active, y)
    return y - step


def fidelity_half_step(y: torch.Tensor, grad: torch.Tensor, gamma2: float, violated) -> torch.Tensor:
    """``y - gamma2 * 1[L_fid > delta] * grad`` (F2 half-step; lambda folded into gamma2)."""
    return y - gamma2 * _rows(violated, y) * grad


def _rows(mask, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(mask, dtype=like.dtype)
    return m.reshape((-1,) + (1,) * (like.dim() - 1))


@dataclass
class AltState:
    """Loop-carried state of one alternating optimization over a batch."""

    x: torch.Tensor  # clean images (B, 3, H, W)
    y: torch.Tensor  # optimized variable: pixels or latents
    rngs: list
    active: np.ndarray  # images still being optimized
    iteration: int = 0


class _Problem:
    """Binds models and the parameterization (pixel or latent) for one run."""

    def __init__(self, cfg: AttackConfig, victim, featnet, sched: NoiseSchedule, decoder=None):
        self.cfg, self.victim, self.featnet, self.sched = cfg, victim, featnet, sched
        self.decoder = decoder

    def image(self, y):
        if self.decoder is None:
            return y
        return self.decoder(y).clamp(0.0, 1.0)

    def project(self, y):
        return y.clamp(0.0, 1.0) if self.decoder is None else y

    def sample(self, state: AltState):
        cfg = self.cfg
        ts, e1, e2 = [], [], []
        for r in state.rngs:
            t = cfg.t_fixed if cfg.t_fixed is not None else r.randint(cfg.t_lo, cfg.t_hi + 1)
            ts.append(t)
            shape = state.x.shape[1:]
            e1.append(randn(r, shape))
            e2.append(randn(r, shape))
        return np.asarray(ts), torch.stack(e1), torch.stack(e2)

    def attack_grad(self, state: AltState, ts, e1, e2):
        y = state.y.detach().requires_grad_(True)
        x_t = forward_diffuse(to_model(state.x), ts, e1, self.sched)
        x_t_adv = forward_diffuse(to_model(self.image(y)), ts, e2, self.sched)
        lv = attack_loss(x_t, x_t_adv, self.victim, torch.as_tensor(ts), squared=self.cfg.squared_w2)
        g, = torch.autograd.grad(lv.value, y)
        return lv.per_image.detach(), g

    def fidelity(self, x, y, need_grad: bool):
        if not need_grad:
            with torch.no_grad():
                return fidelity_loss(x, self.image(y), self.featnet, squared=self.cfg.squared_w2).per_image, None
        y = y.detach().requires_grad_(True)
        lv = fidelity_loss(x, self.image(y), self.featnet, squared=self.cfg.squared_w2)
        g, = torch.autograd.grad(lv.value, y)
        return lv.per_image.detach(), g


def _finite(v: torch.Tensor, what: str, state: AltState):
    if not torch.isfinite(v).all():
        raise AttackDiverged(f"{what} became non-finite at iteration {state.iteration}",
                             {"iteration": state.iteration, "values": v.tolist()})


def alt_opt_step(state: AltState, cfg: AttackConfig, problem: _Problem):
    """One outer iteration: FGSM on the attack loss, then the gated fidelity loop.

    Returns ``(new_state, l_attack, l_fidelity, inner_steps)`` with per-image arrays.
    """
    try:
        return _alt_opt_step(state, cfg, problem)
    except ContractError as e:
        if "non-finite" not in str(e):
            raise
        raise AttackDiverged(f"non-finite values at iteration {state.iteration}: {e}",
                             {"iteration": state.iteration}) from e


def _alt_opt_step(state: AltState, cfg: AttackConfig, problem: _Problem):
    ts, e1, e2 = problem.sample(state)
    l_att, g = problem.attack_grad(state, ts, e1, e2)
    _finite(l_att, "L_attack", state)
    y = problem.project(fgsm_half_step(state.y, g, cfg.gamma1, state.active))
    inner = np.zeros(len(y), dtype=int)
    while True:
        open_gate = state.active & (inner < cfg.inner_max)
        l_fid, gf = problem.fidelity(state.x, y, need_grad=bool(open_gate.any()))
        _finite(l_fid, "L_fidelity", state)
        violated = (l_fid.numpy() > cfg.delta) & open_gate
        if not violated.any():
            break
        y = problem.project(fidelity_half_step(y, gf, cfg.gamma2, violated))
        inner += violated
    new = AltState(state.x, y.detach(), state.rngs, state.active, state.iteration + 1)
    return new, l_att.numpy(), l_fid.numpy(), inner


def _converged(trace: list, window: int, tol: float) -> np.ndarray:
    if len(trace) < 2 * window:
        return np.zeros(len(trace[0]) if trace else 0, dtype=bool)
    a = np.asarray(trace[-2 * window:])
    prev, cur = a[:window].mean(0), a[window:].mean(0)
    return np.abs(cur - prev) <= tol * np.maximum(np.abs(prev), 1e-12)


def _run(x: torch.Tensor, y0: torch.Tensor, cfg: AttackConfig, problem: _Problem) -> AttackResult:
    start = time.perf_counter()
    single = x.dim() == 3
    if single:
        x, y0 = x.unsqueeze(0), y0.unsqueeze(0)
    if (x < 0).any() or (x > 1).any():
        raise ContractError("attack: clean image must lie in [0, 1]")
    root = Rng(cfg.seed)
    state = AltState(x, y0.detach().clone(), [root.child(i) for i in range(len(x))], np.ones(len(x), dtype=bool))
    att, fid, inn = [], [], []
    conv = np.zeros(len(x), dtype=bool)
    for _ in range(cfg.n_iter):
        state, la, lf, ni = alt_opt_step(state, cfg, problem)
        att.append(la)
        fid.append(lf)
        inn.append(ni)
        conv |= _converged(att, cfg.conv_window, cfg.conv_tol)
        state.active = ~conv
        if conv.all():
            break
    with torch.no_grad():
        adv = problem.image(state.y).clamp(0.0, 1.0)
        final = fidelity_loss(x, adv, problem.featnet, squared=cfg.squared_w2).per_image.numpy()
    status = [INNER_EXHAUSTED if final[i] > cfg.delta else (CONVERGED if conv[i] else MAX_OUTER)
              for i in range(len(x))]
    b = len(x)
    res = AttackResult(
        adv=adv[0] if single else adv,
        attack_trace=np.asarray(att).reshape(-1, b),
        fidelity_trace=np.asarray(fid).reshape(-1, b),
        final_fidelity=final,
        status=status,
        inner_steps=np.asarray(inn, dtype=int).reshape(-1, b),
        wall_time=time.perf_counter() - start,
    )
    res.extra["latent"] = state.y if problem.decoder is not None else None
    return res


def atk_pdm(x: torch.Tensor, cfg: AttackConfig, victim, featnet, sched: NoiseSchedule | None = None) -> AttackResult:
    """Pixel-space feature attack (AtkPDM)."""
    cfg.validate()
    if cfg.mode != "atkpdm":
        raise ContractError(f"atk_pdm: mode must be 'atkpdm', got {cfg.mode!r}")
    problem = _Problem(cfg, victim, featnet, sched or NoiseSchedule(T=cfg.T))
    return _run(x, x, cfg, problem)


def atk_pdm_plus(x: torch.Tensor, cfg: AttackConfig, victim, vae, featnet,
                 sched: NoiseSchedule | None = None) -> AttackResult:
    """Latent-space feature attack (AtkPDM+): optimize ``z`` with ``x_adv = D(z)``."""
    cfg.validate()
    if cfg.mode != "atkpdm_plus":
        raise ContractError(f"atk_pdm_plus: mode must be 'atkpdm_plus', got {cfg.mode!r}")
    problem = _Problem(cfg, victim, featnet, sched or NoiseSchedule(T=cfg.T), decoder=vae.decode)
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    with torch.no_grad():
        z0 = vae.encode(xb)
    return _run(x, z0[0] if x.dim() == 3 else z0, cfg, problem)


# --------------------------------------------------------------------------
# baselines


def _result(x, adv, featnet, cfg, att=None, start=None, extra=None):
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    ab = adv.unsqueeze(0) if adv.dim() == 3 else adv
    with torch.no_grad():
        final = fidelity_loss(xb, ab, featnet).per_image.numpy() if featnet is not None else np.full(len(xb), np.nan)
    b = len(xb)
    att = np.asarray(att if att else np.zeros((0, b))).reshape(-1, b)
    return AttackResult(adv=ab[0] if single else ab, attack_trace=att, fidelity_trace=np.zeros((len(att), b)),
                        final_fidelity=final, status=[MAX_OUTER] * b, inner_steps=np.zeros((len(att), b), dtype=int),
                        wall_time=time.perf_counter() - (start or time.perf_counter()), extra=extra or {})


def baseline_attack(x: torch.Tensor, cfg: AttackConfig, victim, featnet=None,
                    sched: NoiseSchedule | None = None) -> AttackResult:
    """Semantic-loss PGD baselines and the calibrated uniform-noise control.

    ``pgascent_semantic`` ascends the diffusion training loss with signed steps
    projected onto an L-inf ball of radius ``cfg.linf_radius``;
    ``diffprotect_minus`` descends it. ``noise_control`` adds uniform noise whose
    amplitude is bisected until the fidelity loss matches ``cfg.noise_target``.
    """
    cfg.validate()
    start = time.perf_counter()
    sched = sched or NoiseSchedule(T=cfg.T)
    if cfg.mode == "noise_control":
        if featnet is None or cfg.noise_target is None:
            raise ContractError("noise_control needs a featnet and cfg.noise_target")
        adv, amps = noise_control(x, cfg.noise_target, featnet, Rng(cfg.seed))
        return _result(x, adv, featnet, cfg, start=start, extra={"amplitude": amps})
    if cfg.mode not in ("pgascent_semantic", "diffprotect_minus"):
        raise ContractError(f"baseline_attack: unsupported mode {cfg.mode!r}")
    direction = 1.0 if cfg.mode == "pgascent_semantic" else -1.0
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    root = Rng(cfg.seed)
    rngs = [root.child(i) for i in range(len(xb))]
    y = xb.clone()
    trace = []
    for _ in range(cfg.n_iter):
        ts = np.asarray([cfg.t_fixed if cfg.t_fixed is not None else r.randint(cfg.t_lo, cfg.t_hi + 1) for r in rngs])
        eps = torch.stack([randn(r, xb.shape[1:]) for r in rngs])
        y = y.detach().requires_grad_(True)
        lv = semantic_loss(y, ts, eps, victim, sched)
        g, = torch.autograd.grad(lv.value, y)
        if not torch.isfinite(lv.per_image).all():
            raise AttackDiverged("L_semantic became non-finite", {"iteration": len(trace)})
        trace.append(lv.per_image.detach().numpy())
        y = y.detach() + direction * cfg.gamma1 * torch.sign(g)
        y = torch.max(torch.min(y, xb + cfg.linf_radius), xb - cfg.linf_radius).clamp(0.0, 1.0)
    adv = y.detach()
    return _result(x, adv[0] if x.dim() == 3 else adv, featnet, cfg, att=trace, start=start)


def noise_control(x: torch.Tensor, target, featnet, rng: Rng, rounds: int = 40, max_amp: float = 1.0):
    """Uniform noise ``x + a * U(-1, 1)`` with ``a`` bisected per image to hit ``target`` fidelity.

    ``target`` may be a scalar or one value per image.
    """
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    b = len(xb)
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), (b,))
    noise = torch.stack([rand_uniform(rng.child(i), xb.shape[1:], -1.0, 1.0) for i in range(b)])
    lo, hi = np.zeros(b), np.full(b, max_amp)

    def fid(a):
        adv = (xb + _rows(a, xb) * noise).clamp(0.0, 1.0)
        with torch.no_grad():
            return fidelity_loss(xb, adv, featnet).per_image.numpy(), adv

    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        f, _ = fid(mid)
        below = f < tgt
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    amps = 0.5 * (lo + hi)
    _, adv = fid(amps)
    return (adv[0] if x.dim() == 3 else adv), amps


def run_attack(x, cfg: AttackConfig, victim, featnet=None, vae=None, sched=None) -> AttackResult:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "atkpdm":
        return atk_pdm(x, cfg, victim, featnet, sched)
    if cfg.mode == "atkpdm_plus":
        if vae is None:
            raise ContractError("atkpdm_plus needs a VAE codec")
        return atk_pdm_plus(x, cfg, victim, vae, featnet, sched)
    return baseline_attack(x, cfg, victim, featnet, sched)


def calibrate_delta(x_cal: torch.Tensor, cfg: AttackConfig, victim, featnet, target_ssim: float = 0.8,
                    vae=None, rounds: int = 6, lo: float = 0.0, hi: float | None = None,
                    ssim_fn: Callable | None = None) -> tuple[float, list]:
    """Bisect the fidelity budget so short pre-runs land near ``target_ssim``.

    Larger budgets allow larger perturbations, so mean SSIM(x, x_adv) falls
    as delta grows. Returns ``(delta, [(delta, mean_ssim), ...])``.
    """
    if ssim_fn is None:
        from .evalkit import ssim as ssim_fn
    history = []
    if hi is None:
        hi = max(cfg.delta, 1e-3)
        while True:
            s = _mean_ssim(x_cal, cfg, hi, victim, featnet, vae, ssim_fn)
            history.append((hi, s))
            if s < target_ssim or hi > 1e4:
                break
            lo, hi = hi, hi * 4.0
    for _ in range(rounds):
        mid = 0.5 * (lo + hi) if lo > 0 else hi / 2.0
        s = _mean_ssim(x_cal, cfg, mid, victim, featnet, vae, ssim_fn)
        history.append((mid, s))
        if s >= target_ssim:
            lo = mid
        else:
            hi = mid
    best = min(history, key=lambda h: abs(h[1] - target_ssim))
    return float(best[0]), history


def _mean_ssim(x, cfg, delta, victim, featnet, vae, ssim_fn):
    c = AttackConfig(**{**cfg.to_dict(), "delta": float(delta)})
    res = run_attack(x, c, victim, featnet, vae)
    adv = res.adv.unsqueeze(0) if res.adv.dim() == 3 else res.adv
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    return float(np.mean([ssim_fn(a, b) for a, b in zip(xb, adv)]))
