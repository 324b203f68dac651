"""Victim denoising UNet, VAE codec and classifier feature extractor.

All three are small enough to train on one CPU core in minutes on
32x32 toy images. Training loops use Adam (lr 2e-4, batch 32) and draw all
randomness from :class:`~atklab.diffmath.Rng` streams so runs are repeatable.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffmath import ContractError, Rng, randn
from .diffusion import NoiseSchedule, forward_diffuse, to_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (loss non-finite or above the divergence bound)."""


def timestep_embedding(t: torch.Tensor, dim: int = 64) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Two-level UNet; the bottleneck block output is the ``mid`` tap.

    Widths are ``base`` at 32x32 and 16x16, ``2 * base`` at 8x8. Decoder taps:
    ``up2`` (8x8), ``up1`` (16x16, second-last decoder block), ``up0`` (32x32).
    """

    TAPS = ("mid", "up2", "up1", "up0")

    def __init__(self, base: int = 32, emb_dim: int = 64, in_ch: int = 3):
        super().__init__()
        c1, c2 = base, 2 * base
        self.emb_dim = emb_dim
        self.temb = nn.Sequential(nn.Linear(emb_dim, 4 * base), nn.SiLU(), nn.Linear(4 * base, 4 * base))
        te = 4 * base
        self.conv_in = nn.Conv2d(in_ch, c1, 3, padding=1)
        self.down0 = ResBlock(c1, c1, te)
        self.ds0 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down1 = ResBlock(c1, c1, te)
        self.ds1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, te)
        self.mid = ResBlock(c2, c2, te)
        self.up2 = ResBlock(c2 + c2, c2, te)
        self.us1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.up1 = ResBlock(c1 + c1, c1, te)
        self.us0 = nn.Conv2d(c1, c1, 3, padding=1)
        self.up0 = ResBlock(c1 + c1, c1, te)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, in_ch, 3, padding=1)

    def encode(self, x, t):
        emb = self.temb(timestep_embedding(t, self.emb_dim).to(x.dtype))
        h0 = self.down0(self.conv_in(x), emb)
        h1 = self.down1(self.ds0(h0), emb)
        h2 = self.down2(self.ds1(h1), emb)
        return self.mid(h2, emb), (h0, h1, h2), emb

    def forward(self, x, t, taps: tuple[str, ...] = ()):
        mid, (h0, h1, h2), emb = self.encode(x, t)
        feats = {"mid": mid}
        h = self.up2(torch.cat([mid, h2], 1), emb)
        feats["up2"] = h
        h = self.us1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, h1], 1), emb)
        feats["up1"] = h
        h = self.us0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, h0], 1), emb)
        feats["up0"] = h
        eps = self.conv_out(F.silu(self.norm_out(h)))
        return eps, {k: feats[k] for k in taps}


def _as_t(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch) if t.dim() == 0 else t


@dataclass
class VictimModel:
    """Frozen denoiser plus its mid-feature tap (and optional latent codec)."""

    unet: UNet
    arch: dict = field(default_factory=lambda: {"base": 32, "emb_dim": 64, "in_ch": 3})
    mid_tap: str = "mid"
    codec: "VaeCodec | None" = None
    T: int = 1000

    def __post_init__(self):
        self.unet.eval()
        for p in self.unet.parameters():
            p.requires_grad_(False)

    def _check(self, x):
        c = self.arch["in_ch"]
        if x.dim() != 4 or x.shape[1] != c or x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ContractError(f"unet_forward: expected (B, {c}, H, W) with H, W divisible by 4, got {tuple(x.shape)}")

    def eps(self, x_t, t):
        self._check(x_t)
        return self.unet(x_t, _as_t(t, x_t.shape[0]))[0]

    def mid(self, x_t, t):
        """Only the encoder half is evaluated when the tap is the bottleneck."""
        self._check(x_t)
        t = _as_t(t, x_t.shape[0])
        if self.mid_tap == "mid":
            return self.unet.encode(x_t, t)[0]
        return self.unet(x_t, t, taps=(self.mid_tap,))[1][self.mid_tap]

    def __call__(self, x_t, t):
        return unet_forward(x_t, t, self)

    def state_dict(self):
        return self.unet.state_dict()


def unet_forward(x_t, t, victim: VictimModel, taps: tuple[str, ...] | None = None):
    """``(eps_hat, mid_features)``, or ``(eps_hat, {tap: features})`` when ``taps`` is given."""
    victim._check(x_t)
    tt = _as_t(t, x_t.shape[0])
    if taps is not None:
        return victim.unet(x_t, tt, taps=taps)
    eps, f = victim.unet(x_t, tt, taps=(victim.mid_tap,))
    return eps, f[victim.mid_tap]


# --------------------------------------------------------------------------
# VAE


class VaeNet(nn.Module):
    def __init__(self, base: int = 64, zc: int = 4):
        super().__init__()
        b, h = base, base // 2
        self.enc = nn.Sequential(
            nn.Conv2d(3, h, 3, padding=1), nn.SiLU(),
            nn.Conv2d(h, b, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(b, b, 3, padding=1), nn.SiLU(),
            nn.Conv2d(b, b, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(b, b, 3, padding=1), nn.SiLU(),
            nn.Conv2d(b, 2 * zc, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(zc, b, 3, padding=1), nn.SiLU(),
            nn.Conv2d(b, b, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(b, b, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(b, h, 3, padding=1), nn.SiLU(),
            nn.Conv2d(h, 3, 3, padding=1),
        )
        self.zc = zc

    def moments(self, x):
        m, logvar = self.enc(to_model(x)).chunk(2, dim=1)
        return m, logvar.clamp(-20.0, 10.0)

    def decode(self, z):
        return (self.dec(z) + 1.0) / 2.0


@dataclass
class VaeCodec:
    """Encoder E (posterior mean) and decoder D over images in [0, 1]."""

    net: VaeNet
    latent_shape: tuple = (4, 8, 8)
    arch: dict = field(default_factory=lambda: {"base": 64, "zc": 4})

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def encode(self, x):
        return self.net.moments(x)[0]

    def decode(self, z):
        return self.net.decode(z)

    def roundtrip(self, x):
        return self.decode(self.encode(x)).clamp(0.0, 1.0)

    def state_dict(self):
        return self.net.state_dict()


# --------------------------------------------------------------------------
# feature extractor


class FeatureCNN(nn.Module):
    """Conv blocks (conv-GN-ReLU x2) with 2x max-pooling in between; global-max head."""

    def __init__(self, widths=(16, 32, 64), n_classes: int = 3):
        super().__init__()
        blocks = []
        cin = 3
        for w in widths:
            g = math.gcd(4, w)
            blocks.append(nn.Sequential(nn.Conv2d(cin, w, 3, padding=1), nn.GroupNorm(g, w), nn.ReLU(),
                                        nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(g, w), nn.ReLU()))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(cin, n_classes)

    def taps(self, x):
        out = []
        h = x - 0.5
        for i, b in enumerate(self.blocks):
            if i:
                h = F.max_pool2d(h, 2)
            h = b(h)
            out.append(h)
        return out

    def forward(self, x):
        return self.head(self.taps(x)[-1].amax((2, 3)))


@dataclass
class FeatureNet:
    """Classifier whose block outputs are the fidelity taps phi_1..phi_L."""

    net: FeatureCNN
    arch: dict = field(default_factory=lambda: {"widths": (16, 32, 64)})

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def n_taps(self) -> int:
        return len(self.net.blocks)

    def taps(self, x) -> list[torch.Tensor]:
        return self.net.taps(x)

    def logits(self, x):
        return self.net(x)

    def pooled(self, x) -> torch.Tensor:
        """Global-average-pooled deepest tap, used as an image embedding."""
        return self.taps(x)[-1].mean((2, 3))

    def state_dict(self):
        return self.net.state_dict()


# --------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final(self) -> float:
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


def _batches(n: int, bs: int, rng: Rng):
    perm = np.argsort(rng.uniform(n), kind="stable")
    for i in range(0, n - bs + 1 if n >= bs else 1, bs):
        yield torch.as_tensor(perm[i:i + bs])


def _guard(loss: float, step: int, what: str, bound: float = 10.0):
    if not math.isfinite(loss) or loss > bound:
        raise TrainingError(f"{what}: diverged at step {step} (loss={loss})")


def train_ddpm(images: torch.Tensor, epochs: int, rng: Rng, sched: NoiseSchedule | None = None,
               base: int = 32, lr: float = 2e-4, batch: int = 32, lr_warmup: int = 100,
               log_every: int = 0) -> tuple[VictimModel, TrainLog]:
    """Fit ``eps_theta`` by minimizing ``E |eps - eps_theta(x_t, t)|^2`` (t uniform in 1..T)."""
    if len(images) == 0:
        raise ContractError("train_ddpm: empty dataset")
    sched = sched or NoiseSchedule()
    torch.manual_seed(rng.child(99).randint(0, 2**31 - 1))
    unet = UNet(base=base)
    opt = torch.optim.Adam(unet.parameters(), lr=lr)
    tl = TrainLog()
    start = time.perf_counter()
    step = 0
    for ep in range(epochs):
        erng = rng.child(ep)
        for b, idx in enumerate(_batches(len(images), batch, erng.child(0))):
            brng = erng.child(1 + b)
            x0 = to_model(images[idx])
            t = torch.as_tensor(brng.uniform(len(idx)) * sched.T, dtype=torch.float64).floor().long() + 1
            eps = randn(brng, x0.shape)
            xt = forward_diffuse(x0, t.numpy(), eps, sched)
            loss = ((unet(xt, t)[0] - eps) ** 2).mean()
            for g in opt.param_groups:
                g["lr"] = lr * min(1.0, (step + 1) / lr_warmup)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tl.losses.append(loss.item())
            _guard(tl.losses[-1], step, "train_ddpm")
            step += 1
        if log_every and (ep + 1) % log_every == 0:
            log.info("ddpm epoch %d loss %.4f", ep + 1, tl.final)
    tl.seconds = time.perf_counter() - start
    return VictimModel(unet, arch={"base": base, "emb_dim": 64, "in_ch": 3}, T=sched.T), tl


def train_vae(images: torch.Tensor, epochs: int, rng: Rng, kl_weight: float = 1e-4, base: int = 64,
              lr: float = 2e-4, batch: int = 32) -> tuple[VaeCodec, TrainLog]:
    """Reconstruction MSE plus ``kl_weight`` times the per-latent KL term."""
    torch.manual_seed(rng.child(99).randint(0, 2**31 - 1))
    net = VaeNet(base=base)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    tl = TrainLog()
    start = time.perf_counter()
    step = 0
    for ep in range(epochs):
        erng = rng.child(ep)
        for b, idx in enumerate(_batches(len(images), batch, erng.child(0))):
            x = images[idx]
            m, logvar = net.moments(x)
            z = m + torch.exp(0.5 * logvar) * randn(erng.child(1 + b), m.shape)
            rec = ((net.decode(z) - x) ** 2).mean()
            kl = 0.5 * (m ** 2 + logvar.exp() - 1.0 - logvar).mean()
            loss = rec + kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            tl.losses.append(rec.item())
            _guard(loss.item(), step, "train_vae")
            step += 1
    tl.seconds = time.perf_counter() - start
    shape = (net.zc, images.shape[-2] // 4, images.shape[-1] // 4)
    return VaeCodec(net, latent_shape=shape, arch={"base": base, "zc": net.zc}), tl


def train_featurenet(images: torch.Tensor, labels: torch.Tensor, epochs: int, rng: Rng,
                     widths=(16, 32, 64), lr: float = 2e-4, batch: int = 32) -> tuple[FeatureNet, TrainLog]:
    """Cross-entropy on the shape class."""
    if len(images) != len(labels):
        raise ContractError("train_featurenet: images and labels differ in length")
    torch.manual_seed(rng.child(99).randint(0, 2**31 - 1))
    net = FeatureCNN(widths=tuple(widths), n_classes=int(labels.max()) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    tl = TrainLog()
    start = time.perf_counter()
    step = 0
    for ep in range(epochs):
        erng = rng.child(ep)
        for idx in _batches(len(images), batch, erng.child(0)):
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tl.losses.append(loss.item())
            _guard(tl.losses[-1], step, "train_featurenet")
            step += 1
    tl.seconds = time.perf_counter() - start
    return FeatureNet(net, arch={"widths": tuple(widths)}), tl


@torch.no_grad()
def accuracy(featnet: FeatureNet, images: torch.Tensor, labels: torch.Tensor) -> float:
    return float((featnet.logits(images).argmax(1) == labels).float().mean())


@torch.no_grad()
def ddpm_eval_loss(victim: VictimModel, images: torch.Tensor, rng: Rng, sched: NoiseSchedule | None = None) -> float:
    """Held-out noise-prediction MSE with uniformly drawn timesteps."""
    sched = sched or NoiseSchedule()
    x0 = to_model(images)
    t = torch.as_tensor(rng.uniform(len(x0)) * sched.T, dtype=torch.float64).floor().long() + 1
    eps = randn(rng, x0.shape)
    xt = forward_diffuse(x0, t.numpy(), eps, sched)
    return float(((victim.eps(xt, t) - eps) ** 2).mean())
