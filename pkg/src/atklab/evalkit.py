"""Image metrics, paired-seed SDEdit evaluation, defenses and diagnostics.

Perceptual metrics use the trained feature extractor rather than pretrained
ImageNet networks: ``featdist`` (normalized per-tap feature L2, the LPIPS
stand-in) and ``cosine`` (pooled deepest-tap cosine, the IA-Score stand-in).
Every report names these substitutions in its protocol descriptor.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn

from .diffmath import ContractError
from .diffusion import EditRequest, NoiseSchedule, sdedit

METRICS = ("SSIM_adv_quality", "PSNR_adv_quality", "featdist_adv_quality",
           "SSIM_effect", "PSNR_effect", "featdist_effect", "cosine_effect")
SUBSTITUTIONS = {
    "featdist": "LPIPS replaced by mean normalized feature L2 over FeatureNet taps",
    "cosine": "IA-Score replaced by cosine of pooled deepest FeatureNet features",
}


# --------------------------------------------------------------------------
# metrics


def _gauss_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    g = torch.exp(-((torch.arange(size, dtype=torch.float64) - size // 2) ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


_WINDOW = _gauss_window()


def _pair(a, b, op):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def ssim_map(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0):
    """Per-channel SSIM maps (valid convolution with an 11x11, sigma 1.5 Gaussian)."""
    a, b = _pair(a, b, "ssim")
    if a.dim() == 2:
        a, b = a[None], b[None]
    c = a.shape[-3]
    w = _WINDOW.expand(c, 1, *_WINDOW.shape)
    if a.shape[-1] < w.shape[-1] or a.shape[-2] < w.shape[-2]:
        raise ContractError(f"ssim: image {tuple(a.shape)} smaller than the 11x11 window")
    a4, b4 = a.reshape(-1, c, *a.shape[-2:]), b.reshape(-1, c, *b.shape[-2:])
    filt = lambda z: F.conv2d(z, w, groups=c)
    mu_a, mu_b = filt(a4), filt(b4)
    saa = filt(a4 * a4) - mu_a ** 2
    sbb = filt(b4 * b4) - mu_b ** 2
    sab = filt(a4 * b4) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a, b) -> float:
    """Mean SSIM of two ``C x H x W`` images in [0, 1], averaged over channels."""
    return float(ssim_map(a, b).mean())


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; ``inf`` for identical images."""
    a, b = _pair(a, b, "psnr")
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / (f.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)


@torch.no_grad()
def featdist(a, b, featnet) -> torch.Tensor:
    """Per-image mean over taps of the squared distance of channel-normalized features."""
    a = a.unsqueeze(0) if a.dim() == 3 else a
    b = b.unsqueeze(0) if b.dim() == 3 else b
    terms = [(_unit(fa) - _unit(fb)).pow(2).sum(1).mean((1, 2)) for fa, fb in zip(featnet.taps(a), featnet.taps(b))]
    return torch.stack(terms).mean(0)


@torch.no_grad()
def cosine(a, b, featnet) -> torch.Tensor:
    a = a.unsqueeze(0) if a.dim() == 3 else a
    b = b.unsqueeze(0) if b.dim() == 3 else b
    return F.cosine_similarity(featnet.pooled(a), featnet.pooled(b), dim=1)


# --------------------------------------------------------------------------
# defenses


def defend_crop_resize(x: torch.Tensor, keep: float = 0.8) -> torch.Tensor:
    """Central crop keeping ``keep`` of each side, bilinear resize back."""
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    h, w = xb.shape[-2:]
    ch, cw = max(1, round(keep * h)), max(1, round(keep * w))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = xb[..., top:top + ch, left:left + cw]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False).clamp(0.0, 1.0)
    return out[0] if x.dim() == 3 else out


_LUMA = np.array([
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)
_CHROMA = np.array([
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.float64).reshape(8, 8)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base quantization table."""
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * s + 50.0) / 100.0), 1, 255)


def _rgb_to_ycc(rgb):
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr])


def _ycc_to_rgb(ycc):
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def _blockwise(ch: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = ch.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(ch, ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = p.reshape(p.shape[0] // 8, 8, p.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 2, 1, 3).reshape(p.shape) + 128.0
    return rec[:h, :w]


def defend_jpeg(x: torch.Tensor, quality: int = 25) -> torch.Tensor:
    """Block-DCT JPEG-like round trip (YCbCr, no chroma subsampling)."""
    if not 1 <= quality <= 100:
        raise ContractError(f"defend_jpeg: quality must lie in [1, 100], got {quality}")
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    tl, tc = quant_table(_LUMA, quality), quant_table(_CHROMA, quality)
    out = []
    for img in xb.detach().cpu().numpy().astype(np.float64):
        ycc = _rgb_to_ycc(np.round(np.clip(img, 0, 1) * 255.0))
        rec = np.stack([_blockwise(ycc[0], tl), _blockwise(ycc[1], tc), _blockwise(ycc[2], tc)])
        rgb = np.clip(np.round(_ycc_to_rgb(rec)), 0, 255) / 255.0
        out.append(torch.from_numpy(rgb.astype(np.float32)))
    res = torch.stack(out)
    return res[0] if x.dim() == 3 else res


DEFENSES = {
    "none": lambda x: x,
    "crop_resize": defend_crop_resize,
    "jpeg25": lambda x: defend_jpeg(x, 25),
}


def get_defense(name: str):
    if name in DEFENSES:
        return DEFENSES[name]
    if name.startswith("jpeg"):
        q = int(name[4:])
        return lambda x: defend_jpeg(x, q)
    raise ContractError(f"unknown defense {name!r}")


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    records: list = field(default_factory=list)  # dicts: image_id, seed, metric columns
    protocol: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        for m in METRICS:
            vals = np.asarray([r[m] for r in self.records if m in r], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if len(vals):
                out[m] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}
        return out

    def mean(self, metric: str) -> float:
        return self.aggregate()[metric]["mean"]

    def to_json(self) -> str:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v
        recs = [{k: enc(v) for k, v in r.items()} for r in self.records]
        return json.dumps({"protocol": self.protocol, "records": recs, "aggregate": self.aggregate()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        dec = lambda v: math.inf if v == "inf" else v
        return cls([{k: dec(v) for k, v in r.items()} for r in d["records"]], d["protocol"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "seed", "metric", "value"])
        for r in self.records:
            for m in METRICS:
                if m in r:
                    v = r[m]
                    w.writerow([r["image_id"], r["seed"], m, "inf" if math.isinf(v) else repr(float(v))])
        return buf.getvalue()


def paired_eval(clean: torch.Tensor, adv: torch.Tensor, victim, t_star: int = 500, seeds=(0,),
                featnet=None, stride: int = 10, eta: float = 0.0, defense: str = "none",
                paired: bool = True, sched: NoiseSchedule | None = None, victim_id: str = "victim") -> EvalReport:
    """Edit clean and protected images with identical seeds and compare the edits.

    ``defense`` is applied to the protected images only, before editing.
    ``paired=False`` edits the protected images with shifted seeds (protocol
    self-test only).
    """
    if clean.shape != adv.shape:
        raise ContractError(f"paired_eval: set length/shape mismatch {tuple(clean.shape)} vs {tuple(adv.shape)}")
    sched = sched or NoiseSchedule(eta=eta)
    adv_in = get_defense(defense)(adv.clone())
    records = []
    q_ssim = [ssim(a, b) for a, b in zip(clean, adv)]
    q_psnr = [psnr(a, b) for a, b in zip(clean, adv)]
    q_feat = featdist(clean, adv, featnet).tolist() if featnet is not None else [math.nan] * len(clean)
    for s in seeds:
        e_clean = sdedit(EditRequest(clean, t_star, stride, int(s), eta), victim, sched)
        e_adv = sdedit(EditRequest(adv_in, t_star, stride, int(s) if paired else int(s) + 7919, eta), victim, sched)
        e_feat = featdist(e_clean, e_adv, featnet).tolist() if featnet is not None else [math.nan] * len(clean)
        e_cos = cosine(e_clean, e_adv, featnet).tolist() if featnet is not None else [math.nan] * len(clean)
        for i in range(len(clean)):
            records.append({
                "image_id": i, "seed": int(s),
                "SSIM_adv_quality": q_ssim[i], "PSNR_adv_quality": q_psnr[i], "featdist_adv_quality": q_feat[i],
                "SSIM_effect": ssim(e_clean[i], e_adv[i]), "PSNR_effect": psnr(e_clean[i], e_adv[i]),
                "featdist_effect": e_feat[i], "cosine_effect": e_cos[i],
            })
    protocol = {"seeds": [int(s) for s in seeds], "t_star": t_star, "stride": stride, "eta": eta,
                "defense": defense, "defense_applied_to": "adversarial", "crop_keep_per_side": 0.8,
                "paired": paired, "victim": victim_id, "substitutions": SUBSTITUTIONS}
    return EvalReport(records, protocol)


def transfer_eval(clean, adv, victim_b, t_star: int = 500, seeds=(0,), featnet=None,
                  victim_id: str = "victim_b", **kw) -> EvalReport:
    """Evaluate protected images crafted on another victim against ``victim_b``."""
    rep = paired_eval(clean, adv, victim_b, t_star, seeds, featnet, victim_id=victim_id, **kw)
    rep.protocol["setting"] = "black_box"
    return rep


def delta_row(white: EvalReport, black: EvalReport) -> dict:
    """Per-metric ``black - white`` difference of aggregate means."""
    wa, ba = white.aggregate(), black.aggregate()
    return {m: ba[m]["mean"] - wa[m]["mean"] for m in METRICS if m in wa and m in ba}


@torch.no_grad()
def feature_trajectory(x, x_adv, victim, t_star: int = 500, seed: int = 0, stride: int = 10,
                       tap: str = "up1", eta: float = 0.0) -> dict:
    """Cosine similarity of decoder-tap features along paired denoising runs.

    One entry per visited timestep, from ``t*`` down to 0.
    """
    sched = NoiseSchedule(eta=eta)
    feats = {"clean": [], "adv": []}

    def hook(key):
        def record(t, h):
            tt = torch.full((h.shape[0],), t, dtype=torch.long)
            feats[key].append((t, victim.unet(h, tt, taps=(tap,))[1][tap]))
        return record

    sdedit(EditRequest(x, t_star, stride, seed, eta), victim, sched, trace=hook("clean"))
    sdedit(EditRequest(x_adv, t_star, stride, seed, eta), victim, sched, trace=hook("adv"))
    ts, sims = [], []
    for (t, fa), (_, fb) in zip(feats["clean"], feats["adv"]):
        ts.append(int(t))
        sims.append(F.cosine_similarity(fa.flatten(1), fb.flatten(1), dim=1).mean().item())
    return {"timesteps": ts, "similarity": sims, "tap": tap, "t_star": t_star, "seed": seed}
