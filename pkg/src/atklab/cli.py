"""Command-line entry point: ``atklab <subcommand> --config PATH --set k=v --out DIR``.

Exit codes: 0 success, 1 contract/usage error, 2 training or attack divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackDiverged, calibrate_delta, run_attack
from .datagen import generate_set, stack
from .diffmath import ContractError, Rng, set_threads_from_env
from .diffusion import EditRequest, sdedit
from .evalkit import EvalReport, delta_row, paired_eval
from .models import TrainingError, accuracy, train_ddpm, train_featurenet, train_vae
from .persistence import (RunConfig, RunManifest, config_hash, file_hash, load_checkpoint, load_config,
                          load_model, save_checkpoint, save_model, serialize_config, write_png)

log = logging.getLogger("atklab")

COMMANDS = ("gen-data", "train-victim", "train-vae", "train-featnet", "attack", "edit", "eval",
            "defend-eval", "transfer-eval", "ablate-timestep", "report")


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atklab", description="Protective perturbations against diffusion editing (desk scale).")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="flat key = value file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--out", type=Path, required=True, help="run directory to create")
        s.add_argument("--force", action="store_true", help="allow reusing an existing run directory")
    return p


class Run:
    """Bookkeeping for one CLI invocation: run directory, config, manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, force: bool):
        if out.exists() and any(out.iterdir()) and not force:
            raise ContractError(f"run directory {out} exists; pass --force to reuse it")
        out.mkdir(parents=True, exist_ok=True)
        self.command, self.cfg, self.out = command, cfg, out
        self.checkpoints: dict = {}
        self.outputs: dict = {}
        self.metrics: dict = {}
        (out / "config.txt").write_text(serialize_config(cfg))

    def model(self, key: str):
        path = getattr(self.cfg, key)
        if not path:
            raise ContractError(f"config key {key!r} must point to a checkpoint")
        self.checkpoints[path] = file_hash(path)
        return load_model(path)

    def tensors(self, key: str):
        path = getattr(self.cfg, key)
        if not path:
            raise ContractError(f"config key {key!r} must point to a tensor checkpoint")
        self.checkpoints[path] = file_hash(path)
        return load_checkpoint(path)

    def save(self, name: str, tensors=None, model=None) -> Path:
        path = self.out / name
        digest = save_model(path, model) if model is not None else save_checkpoint(path, tensors)
        self.outputs[name] = digest
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self.outputs[name] = file_hash(path)
        return path

    def finish(self, status: str = "ok"):
        cfg = self.cfg
        RunManifest(command=self.command, config_hash=config_hash(cfg), config=serialize_config(cfg),
                    checkpoints=self.checkpoints, outputs=self.outputs,
                    seeds={"seed": cfg.seed, "data_seed": cfg.data_seed, "train_seed": cfg.train_seed,
                           "eval_seed": cfg.eval_seed, "edit_seeds": list(cfg.seeds)},
                    code_version=__version__, metrics=self.metrics, status=status).write(self.out)


# --------------------------------------------------------------------------
# helpers


def _train_set(cfg: RunConfig):
    if cfg.data_path:
        d = load_checkpoint(cfg.data_path)
        return d["images"], d["labels"].long()
    return stack(generate_set(cfg.n_train, cfg.data_seed, cfg.image_size))


def _clean_images(run: Run) -> torch.Tensor:
    cfg = run.cfg
    if cfg.images_path:
        return run.tensors("images_path")["images"]
    return stack(generate_set(cfg.n_eval, cfg.eval_seed, cfg.image_size))[0]


def _loss_csv(losses) -> str:
    return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))


def _pngs(run: Run, prefix: str, images: torch.Tensor, limit: int = 8):
    for i, img in enumerate(images[:limit]):
        write_png(run.out / f"{prefix}_{i:03d}.png", img)


def _attack(run: Run, cfg: RunConfig, x: torch.Tensor, victim, featnet, vae):
    acfg = cfg.attack_config()
    if acfg.mode == "noise_control" and acfg.noise_target is None:
        raise ContractError("noise_control needs noise_target >= 0 in the config")
    if cfg.calibrate_delta and acfg.mode in ("atkpdm", "atkpdm_plus"):
        short = type(acfg)(**{**acfg.to_dict(), "n_iter": min(acfg.n_iter, 30)})
        acfg.delta, history = calibrate_delta(x[:4], short, victim, featnet, cfg.target_ssim, vae=vae)
        run.metrics["delta_calibration"] = history
        run.metrics["delta"] = acfg.delta
    return run_attack(x, acfg, victim, featnet, vae, cfg.schedule())


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run):
    cfg = run.cfg
    xs, ys = stack(generate_set(cfg.n_train, cfg.data_seed, cfg.image_size))
    run.save("images.atkd", {"images": xs, "labels": ys.float()})
    _pngs(run, "preview", xs)
    run.metrics["class_counts"] = np.bincount(ys.numpy()).tolist()


def cmd_train_victim(run: Run):
    cfg = run.cfg
    xs, _ = _train_set(cfg)
    victim, tl = train_ddpm(xs, cfg.epochs_ddpm, Rng(cfg.train_seed), cfg.schedule(), base=cfg.unet_base)
    run.save("victim.atkd", model=victim)
    run.write_text("train_loss.csv", _loss_csv(tl.losses))
    run.metrics.update(final_loss=tl.final, seconds=tl.seconds)


def cmd_train_vae(run: Run):
    cfg = run.cfg
    xs, _ = _train_set(cfg)
    vae, tl = train_vae(xs, cfg.epochs_vae, Rng(cfg.train_seed), base=cfg.vae_base)
    run.save("vae.atkd", model=vae)
    run.write_text("train_loss.csv", _loss_csv(tl.losses))
    from .evalkit import psnr
    held = stack(generate_set(64, cfg.eval_seed, cfg.image_size))[0]
    with torch.no_grad():
        rt = vae.roundtrip(held)
    run.metrics.update(final_loss=tl.final, seconds=tl.seconds,
                       heldout_psnr=float(np.mean([psnr(a, b) for a, b in zip(held, rt)])))


def cmd_train_featnet(run: Run):
    cfg = run.cfg
    xs, ys = _train_set(cfg)
    fn, tl = train_featurenet(xs, ys, cfg.epochs_featnet, Rng(cfg.train_seed), widths=cfg.featnet_widths)
    run.save("featnet.atkd", model=fn)
    run.write_text("train_loss.csv", _loss_csv(tl.losses))
    hx, hy = stack(generate_set(512, cfg.eval_seed, cfg.image_size))
    run.metrics.update(final_loss=tl.final, seconds=tl.seconds, heldout_accuracy=accuracy(fn, hx, hy))


def cmd_attack(run: Run):
    cfg = run.cfg
    victim = run.model("victim_ckpt")
    featnet = run.model("featnet_ckpt") if cfg.featnet_ckpt else None
    vae = run.model("vae_ckpt") if cfg.mode == "atkpdm_plus" else None
    x = _clean_images(run)
    res = _attack(run, cfg, x, victim, featnet, vae)
    run.save("clean.atkd", {"images": x})
    run.save("adv.atkd", {"images": res.adv})
    _pngs(run, "adv", res.adv)
    rows = "iteration,image,l_attack,l_fidelity,inner_steps\n" + "".join(
        f"{k},{i},{a!r},{f!r},{n}\n" for k, i, a, f, n in res.loss_rows())
    run.write_text("losses.csv", rows)
    run.metrics.update(status=res.status, final_fidelity=res.final_fidelity.tolist(), wall_time=res.wall_time)


def cmd_edit(run: Run):
    cfg = run.cfg
    victim = run.model("victim_ckpt")
    x = run.tensors("adv_path")["images"] if cfg.adv_path else _clean_images(run)
    edits = sdedit(EditRequest(x, cfg.t_star, cfg.stride, cfg.seed, cfg.eta), victim, cfg.schedule())
    run.save("edits.atkd", {"images": edits})
    _pngs(run, "edit", edits)


def _eval(run: Run, victim_key: str = "victim_ckpt", defense: str | None = None) -> EvalReport:
    cfg = run.cfg
    victim = run.model(victim_key)
    featnet = run.model("featnet_ckpt") if cfg.featnet_ckpt else None
    clean = _clean_images(run)
    adv = run.tensors("adv_path")["images"]
    return paired_eval(clean, adv, victim, cfg.t_star, cfg.seeds, featnet, cfg.stride, cfg.eta,
                       defense or cfg.defense, sched=cfg.schedule(), victim_id=victim_key)


def _write_report(run: Run, rep: EvalReport, stem: str):
    run.write_text(f"{stem}.json", rep.to_json())
    run.write_text(f"{stem}.csv", rep.to_csv())
    run.metrics[stem] = {k: v["mean"] for k, v in rep.aggregate().items()}


def cmd_eval(run: Run):
    _write_report(run, _eval(run), "report")


def cmd_defend_eval(run: Run):
    for d in ("none", "crop_resize", "jpeg25"):
        _write_report(run, _eval(run, defense=d), f"report_{d}")


def cmd_transfer_eval(run: Run):
    white = _eval(run, "victim_ckpt")
    black = _eval(run, "victim_b_ckpt")
    black.protocol["setting"] = "black_box"
    _write_report(run, white, "report_white")
    _write_report(run, black, "report_black")
    run.metrics["difference"] = delta_row(white, black)
    run.write_text("difference.json", json.dumps(run.metrics["difference"], indent=2))


def cmd_ablate_timestep(run: Run):
    cfg = run.cfg
    victim = run.model("victim_ckpt")
    featnet = run.model("featnet_ckpt")
    vae = run.model("vae_ckpt") if cfg.mode == "atkpdm_plus" else None
    x = _clean_images(run)
    rows = []
    for t in cfg.ablate_t:
        c = RunConfig(**{**cfg.__dict__, "t_fixed": int(t), "calibrate_delta": False})
        res = run_attack(x, c.attack_config(), victim, featnet, vae, c.schedule())
        rep = paired_eval(x, res.adv, victim, cfg.t_star, cfg.seeds, featnet, cfg.stride, cfg.eta,
                          sched=cfg.schedule())
        agg = rep.aggregate()
        rows.append({"t_fixed": int(t), **{m: agg[m]["mean"] for m in agg}})
    cols = list(rows[0])
    run.write_text("ablation.csv", ",".join(cols) + "\n" + "".join(
        ",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n" for r in rows))
    run.metrics["rows"] = rows


def cmd_report(run: Run):
    src = Path(run.cfg.reports_dir) if run.cfg.reports_dir else run.out.parent
    lines = ["source,metric,mean,std,n"]
    for path in sorted(src.rglob("report*.json")):
        if run.out in path.parents:
            continue
        rep = EvalReport.from_json(path.read_text())
        for m, a in rep.aggregate().items():
            lines.append(f"{path.relative_to(src)},{m},{a['mean']!r},{a['std']!r},{a['n']}")
    run.write_text("summary.csv", "\n".join(lines) + "\n")
    run.metrics["n_reports"] = len(lines) - 1


HANDLERS = {
    "gen-data": cmd_gen_data, "train-victim": cmd_train_victim, "train-vae": cmd_train_vae,
    "train-featnet": cmd_train_featnet, "attack": cmd_attack, "edit": cmd_edit, "eval": cmd_eval,
    "defend-eval": cmd_defend_eval, "transfer-eval": cmd_transfer_eval,
    "ablate-timestep": cmd_ablate_timestep, "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    set_threads_from_env()
    run = None
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else RunConfig()
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        run = Run(args.command, cfg, args.out, args.force)
        HANDLERS[args.command](run)
        run.finish()
        return 0
    except (TrainingError, AttackDiverged) as e:
        print(f"atklab: diverged: {e}", file=sys.stderr)
        code, status = 2, "diverged"
    except (ContractError, FileNotFoundError) as e:
        print(f"atklab: error: {e}", file=sys.stderr)
        code, status = 1, "error"
    if run is not None:
        run.metrics["error"] = status
        run.finish(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
