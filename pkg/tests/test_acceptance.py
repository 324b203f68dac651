"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed in the terminal summary (see conftest). Trained
models come from the session-scoped ``desk`` fixture, which trains them once
and caches checkpoints under ``.model_cache/`` (override with ATKLAB_CACHE).
"""
import math
import time

import numpy as np
import pytest
import torch

from atklab.attack import INNER_EXHAUSTED, atk_pdm, atk_pdm_plus
from atklab.datagen import generate_set, stack
from atklab.diffmath import Rng, finite_difference, grad, randn
from atklab.diffusion import NoiseSchedule, forward_diffuse, sampler_step, to_model
from atklab.evalkit import paired_eval, transfer_eval
from atklab.linalg_w2 import stats_from_numpy, w2_oracle_eig, w2_squared
from atklab.losses import attack_loss, fidelity_loss, semantic_loss
from conftest import VERDICTS, double

pytestmark = pytest.mark.acceptance


def verdict(key: str, ok: bool, detail: str):
    VERDICTS[key] = (bool(ok), detail)
    print(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _spd(rng, n, cond):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0.0, np.log(cond), n))
    w[0], w[-1] = 1.0, cond
    return (q * w) @ q.T


# --------------------------------------------------------------------------
# 1


def test_c1_wasserstein_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        cond = 10.0 ** rng.uniform(0.0, 4.0)
        p = stats_from_numpy(rng.standard_normal(n), _spd(rng, n, cond))
        q = stats_from_numpy(rng.standard_normal(n), _spd(rng, n, 10.0 ** rng.uniform(0.0, 4.0)))
        ref = w2_oracle_eig(p, q)
        worst = max(worst, abs(w2_squared(p, q).item() - ref) / max(abs(ref), 1e-12))
    scalar = w2_squared(stats_from_numpy([3.0], [[1.0]]), stats_from_numpy([0.0], [[4.0]])).item()
    took = time.perf_counter() - start
    ok = worst < 1e-4 and abs(scalar - 10.0) <= 1e-6 and took < 5.0
    verdict("C1 wasserstein", ok, f"max rel err {worst:.2e} (<1e-4), 1-D case {scalar:.9f}, {took:.2f}s (<5s)")


# --------------------------------------------------------------------------
# 2


def _fd_fraction(fn, x, n, seed):
    xg = x.clone().requires_grad_(True)
    analytic = grad(fn(xg), xg).flatten()
    idx = torch.randperm(x.numel(), generator=torch.Generator().manual_seed(seed))[:n]
    numeric = finite_difference(fn, x, step=1e-4, coords=idx).flatten()[idx]
    a = analytic[idx]
    rel = (a - numeric).abs() / torch.maximum(a.abs(), numeric.abs()).clamp_min(1e-6)
    return (rel < 1e-2).float().mean().item()


def test_c2_gradient_suite(desk):
    start = time.perf_counter()
    v, f = double(desk.victim_a), double(desk.featnet)
    sched = NoiseSchedule()
    x = stack(generate_set(1, seed=99, size=32))[0][:, :, 8:16, 8:16].double().contiguous()
    noise = randn(Rng(5), x.shape).double()
    x_adv = (x + 0.03 * noise).clamp(0.02, 0.98)
    e1, e2 = randn(Rng(6), x.shape).double(), randn(Rng(7), x.shape).double()
    t = 200
    x_t = forward_diffuse(to_model(x), t, e1, sched)
    x_t_adv = forward_diffuse(to_model(x_adv), t, e2, sched)
    fr = {
        "attack": _fd_fraction(lambda z: attack_loss(x_t, z, v, t).value, x_t_adv, 64, 0),
        "fidelity": _fd_fraction(lambda z: fidelity_loss(x, z, f).value, x_adv, 64, 1),
        "semantic": _fd_fraction(lambda z: semantic_loss(z, t, e2, v, sched).value, x_adv, 64, 2),
    }
    took = time.perf_counter() - start
    ok = all(v >= 0.95 for v in fr.values()) and took < 120
    verdict("C2 gradients", ok, ", ".join(f"{k} {v:.0%}" for k, v in fr.items()) + f" within 1e-2 (>=95%), {took:.0f}s (<120s)")


# --------------------------------------------------------------------------
# 3


def test_c3_sampler_identities():
    sched = NoiseSchedule()
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    worst = 0.0
    for t in (1, 50, 250, 500, 999):
        x_t = forward_diffuse(x, t, eps, sched)
        a = sampler_step(x_t, t, eps, sched, eta=0.0)
        b = sampler_step(x_t, t, eps, sched, eta=0.0)
        if not torch.equal(a, b):
            verdict("C3 sampler", False, f"eta=0 step not bit-deterministic at t={t}")
        ab = sched.alpha_bar[t - 1]
        expect = math.sqrt(ab) * x + math.sqrt(1 - ab) * eps
        worst = max(worst, (a - expect).abs().max().item())
    n, t = 10_000, 300
    x_t = torch.full((n,), 0.2, dtype=torch.float64)
    e_hat = torch.full((n,), 0.5, dtype=torch.float64)
    draws = sampler_step(x_t, t, e_hat, sched, rng=Rng(11), eta=1.0)
    a_t, a_s, beta = sched.alpha_bar[t], sched.alpha_bar[t - 1], sched.betas[t]
    x0 = (0.2 - math.sqrt(1 - a_t) * 0.5) / math.sqrt(a_t)
    mean = math.sqrt(a_s) * beta / (1 - a_t) * x0 + math.sqrt(1 - beta) * (1 - a_s) / (1 - a_t) * 0.2
    var = (1 - a_s) / (1 - a_t) * beta
    z_mean = abs(draws.mean().item() - mean) / math.sqrt(var / n)
    z_var = abs(draws.var().item() - var) / (var * math.sqrt(2 / (n - 1)))
    ok = worst <= 1e-6 and z_mean < 3 and z_var < 3
    verdict("C3 sampler", ok, f"eta=0 deterministic; true-eps identity max err {worst:.1e} (<=1e-6); "
                              f"eta=1 mean z={z_mean:.2f}, var z={z_var:.2f} (<3)")


# --------------------------------------------------------------------------
# 4


def test_c4_training_sanity(desk):
    from atklab.evalkit import psnr
    from atklab.models import accuracy, ddpm_eval_loss
    from atklab.workbench import HELDOUT_SEED

    rec = desk.record
    hx, hy = stack(generate_set(512, HELDOUT_SEED, 32))
    mse = {k: ddpm_eval_loss(getattr(desk, k), hx, Rng(5)) for k in ("victim_a", "victim_b")}
    with torch.no_grad():
        rt = desk.vae.roundtrip(hx)
    vae_psnr = float(np.mean([psnr(a, b) for a, b in zip(hx, rt)]))
    acc = accuracy(desk.featnet, hx, hy)
    cpu_min = sum(r["cpu_seconds"] for r in rec.values()) / 60
    ok = (all(rec[k]["final_loss"] < 0.10 and mse[k] < 0.10 for k in mse)
          and vae_psnr >= 25 and acc >= 0.90 and cpu_min <= 60)
    verdict("C4 training", ok,
            "DDPM running loss A %.4f B %.4f, held-out A %.4f B %.4f (<0.10); VAE PSNR %.2f dB (>=25); "
            "FeatureNet acc %.3f (>=0.90); CPU %.1f min (<=60)"
            % (rec["victim_a"]["final_loss"], rec["victim_b"]["final_loss"], mse["victim_a"], mse["victim_b"],
               vae_psnr, acc, cpu_min))


# --------------------------------------------------------------------------
# 5-8 share one set of attack runs on 16 held-out images


@pytest.fixture(scope="module")
def runs(desk):
    from atklab.workbench import EVAL_SEED, desk_config, matched_baseline, mean_ssim

    cpu0 = time.process_time()
    x = stack(generate_set(16, EVAL_SEED, 32))[0]
    out = {"x": x, "cfg": {m: desk_config(m) for m in ("atkpdm", "atkpdm_plus")}}
    out["atkpdm"] = atk_pdm(x, out["cfg"]["atkpdm"], desk.victim_a, desk.featnet)
    out["atkpdm_plus"] = atk_pdm_plus(x, out["cfg"]["atkpdm_plus"], desk.victim_a, desk.vae, desk.featnet)
    out["target_ssim"] = mean_ssim(x, out["atkpdm"].adv)
    for mode in ("pgascent_semantic", "noise_control"):
        out[mode], _ = matched_baseline(x, mode, out["target_ssim"], desk.victim_a, desk.featnet)
    out["quality"] = {m: mean_ssim(x, out[m].adv) for m in ("atkpdm", "atkpdm_plus", "pgascent_semantic",
                                                            "noise_control")}
    out["eval"] = {m: paired_eval(x, out[m].adv, desk.victim_a, 500, (0, 1), desk.featnet)
                   for m in out["quality"]}
    out["cpu_c5"] = time.process_time() - cpu0
    return out


def test_c5_effectiveness_ordering(runs):
    q, ev = runs["quality"], runs["eval"]
    eff = {m: r.mean("SSIM_effect") for m, r in ev.items()}
    fd = {m: ev[m].mean("featdist_adv_quality") for m in ("atkpdm", "atkpdm_plus")}
    matched = all(abs(q[m] - q["atkpdm"]) <= 0.05 for m in ("pgascent_semantic", "noise_control"))
    cpu_min = runs["cpu_c5"] / 60
    ok = (matched and eff["atkpdm"] < eff["pgascent_semantic"] - 0.03 and eff["atkpdm"] < eff["noise_control"] - 0.03
          and fd["atkpdm_plus"] < fd["atkpdm"] and cpu_min <= 90)
    verdict("C5 ordering", ok,
            "SSIM(x,x_adv) " + ", ".join(f"{m} {v:.3f}" for m, v in q.items()) + " (within 0.05 of atkpdm); "
            "SSIM_effect " + ", ".join(f"{m} {v:.3f}" for m, v in eff.items()) + " (atkpdm lower by >0.03); "
            f"featdist atkpdm_plus {fd['atkpdm_plus']:.3f} < atkpdm {fd['atkpdm']:.3f} at N={runs['cfg']['atkpdm'].n_iter}; "
            f"CPU {cpu_min:.1f} min (<=90)")


def _smoothed_rise(trace: np.ndarray, window: int = 20) -> tuple[float, float]:
    """Largest uptick of the moving-average batch-mean curve, and the curve's standard error.

    Timesteps and noise are redrawn every iteration, so single values scatter;
    the standard error of a ``window``-sample mean (noise sigma estimated from
    first differences) is the resolution below which an uptick is noise.
    """
    curve = trace.mean(1)
    sm = np.convolve(curve, np.ones(window) / window, mode="valid")
    se = np.std(np.diff(curve)) / math.sqrt(2 * window)
    return float(np.max(np.diff(sm), initial=0.0)), float(se)


def test_c6_constraint_contract(runs):
    bad, rises = [], {}
    for m in ("atkpdm", "atkpdm_plus"):
        res, delta = runs[m], runs["cfg"][m].delta
        bad += [(m, i) for i, s in enumerate(res.status) if not (res.final_fidelity[i] <= delta or s == INNER_EXHAUSTED)]
        rises[m] = _smoothed_rise(res.attack_trace)
    n = sum(len(runs[m].status) for m in ("atkpdm", "atkpdm_plus"))
    ok = not bad and all(r <= se for r, se in rises.values())
    verdict("C6 constraint", ok, f"{n - len(bad)}/{n} runs end with L_fid<=delta or inner_budget_exhausted; "
                                 "largest rise of 20-step smoothed L_attack " +
            ", ".join(f"{m} {r:.4f} (standard error {se:.4f})" for m, (r, se) in rises.items()) +
            " (rise <= 1 standard error)")


def test_c7_defense_robustness(runs, desk):
    x, adv = runs["x"], runs["atkpdm_plus"].adv
    base = runs["eval"]["atkpdm_plus"].mean("SSIM_effect")
    after = {d: paired_eval(x, adv, desk.victim_a, 500, (0, 1), desk.featnet, defense=d).mean("SSIM_effect")
             for d in ("crop_resize", "jpeg25")}
    ok = all(v - base <= 0.05 for v in after.values())
    verdict("C7 defenses", ok, f"atkpdm_plus SSIM_effect none {base:.3f}, " +
            ", ".join(f"{d} {v:.3f} ({v - base:+.3f})" for d, v in after.items()) + " (rise <=0.05)")


def test_c8_transfer(runs, desk):
    x, gaps = runs["x"], {}
    for m in ("atkpdm", "atkpdm_plus"):
        white = runs["eval"][m].mean("SSIM_effect")
        black = transfer_eval(x, runs[m].adv, desk.victim_b, 500, (0, 1), desk.featnet).mean("SSIM_effect")
        gaps[m] = (white, black)
    ok = all(b - w <= 0.10 for w, b in gaps.values())
    verdict("C8 transfer", ok, ", ".join(f"{m} white {w:.3f} black {b:.3f} (loss {b - w:+.3f})"
                                         for m, (w, b) in gaps.items()) + " (loss <=0.10)")


# --------------------------------------------------------------------------
# 9


def test_c9_persistence(desk, tmp_path):
    from atklab import cli
    from atklab.persistence import (CrcError, RunManifest, decode_checkpoint, load_model, load_tensor,
                                    save_model, save_tensor)

    save_model(tmp_path / "victim.atkd", desk.victim_a)
    back = load_model(tmp_path / "victim.atkd")
    weights_ok = all(torch.equal(w, back.state_dict()[k]) for k, w in desk.victim_a.state_dict().items())
    t = torch.randn(4, 3, 32, 32)
    save_tensor(tmp_path / "t.atkd", t)
    tensor_ok = torch.equal(load_tensor(tmp_path / "t.atkd"), t)
    data = bytearray((tmp_path / "victim.atkd").read_bytes())
    rng = np.random.default_rng(0)
    crc_hits = 0
    for pos in rng.integers(12, len(data) - 4, 20):
        bad = bytearray(data)
        bad[pos] ^= 0x10
        try:
            decode_checkpoint(bytes(bad))
        except CrcError:
            crc_hits += 1
    for name in ("featnet", "vae"):
        save_model(tmp_path / f"{name}.atkd", getattr(desk, name))
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"victim_ckpt = {tmp_path / 'victim.atkd'}\nfeatnet_ckpt = {tmp_path / 'featnet.atkd'}\n"
                   f"vae_ckpt = {tmp_path / 'vae.atkd'}\nn_eval = 2\nn_iter = 3\ninner_max = 3\n"
                   "mode = atkpdm_plus\ndelta = 2.0\ngamma1 = 0.01\ngamma2 = 0.02\n")
    codes = [cli.main(["attack", "--config", str(cfg), "--out", str(tmp_path / "run1")])]
    man = RunManifest.read(tmp_path / "run1" / "manifest.json")
    (tmp_path / "replay.txt").write_text(man.config)
    codes.append(cli.main(["attack", "--config", str(tmp_path / "replay.txt"), "--out", str(tmp_path / "run2")]))
    man2 = RunManifest.read(tmp_path / "run2" / "manifest.json")
    same = man2.outputs == man.outputs and man2.config_hash == man.config_hash
    ok = weights_ok and tensor_ok and crc_hits == 20 and codes == [0, 0] and same
    verdict("C9 persistence", ok, f"victim round-trip bit-identical={weights_ok}, tensor={tensor_ok}, "
                                  f"CRC caught {crc_hits}/20 corruptions, manifest replay bit-identical={same}")
