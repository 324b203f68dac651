"""Protect a few images with AtkPDM and AtkPDM+, then edit them with the victim.

    python demos/02_protect_and_edit.py [cache_dir] [out_dir]

Writes PNG strips (original / protected / edit of original / edit of protected)
and prints the usual quality and effect metrics next to the noise and
semantic-loss baselines at matched SSIM.
"""
import sys
from pathlib import Path

import torch

from atklab.attack import run_attack
from atklab.datagen import generate_set, stack
from atklab.diffusion import EditRequest, sdedit
from atklab.evalkit import paired_eval
from atklab.persistence import write_png
from atklab.workbench import EVAL_SEED, desk_config, load_or_train, matched_baseline, mean_ssim

cache = sys.argv[1] if len(sys.argv) > 1 else ".model_cache"
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)
m = load_or_train(cache)
x = stack(generate_set(4, EVAL_SEED, 32))[0]

adv = {}
for mode in ("atkpdm", "atkpdm_plus"):
    res = run_attack(x, desk_config(mode), m.victim_a, m.featnet, m.vae)
    adv[mode] = res.adv
    print(f"{mode}: {res.wall_time:.0f}s, status {res.status}")
target = mean_ssim(x, adv["atkpdm"])
for mode in ("pgascent_semantic", "noise_control"):
    adv[mode] = matched_baseline(x, mode, target, m.victim_a, m.featnet)[0].adv

print(f"{'method':18s} SSIM(x,adv)  featdist  SSIM_effect  PSNR_effect")
for mode, a in adv.items():
    rep = paired_eval(x, a, m.victim_a, t_star=500, seeds=(0, 1), featnet=m.featnet)
    print(f"{mode:18s} {mean_ssim(x, a):11.3f} {rep.mean('featdist_adv_quality'):9.3f} "
          f"{rep.mean('SSIM_effect'):12.3f} {rep.mean('PSNR_effect'):12.2f}")

req = lambda imgs: EditRequest(imgs, 500, 10, 0, 0.0)
edit_clean = sdedit(req(x), m.victim_a)
for mode in ("atkpdm", "atkpdm_plus"):
    edit_adv = sdedit(req(adv[mode]), m.victim_a)
    strip = torch.cat([torch.cat(list(r), dim=2) for r in (x, adv[mode], edit_clean, edit_adv)], dim=1)
    write_png(out / f"{mode}.png", strip)
print(f"strips written to {out}/")
