"""Checkpoints, PNG images, flat run configs and run manifests.

Checkpoint layout (all integers little-endian)::

    b"ATKD" | u32 version=1 | u32 count |
    count x ( u16 name_len | name utf-8 | u8 rank | u32 dims[rank] | f32 payload )
    | u32 crc32(all preceding bytes)
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .diffmath import ContractError

MAGIC = b"ATKD"
VERSION = 1


class CheckpointError(ContractError):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class CrcError(CheckpointError):
    pass


class ConfigError(ContractError):
    pass


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(tensors: "dict[str, torch.Tensor]") -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.array(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4", order="C")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF or any(d > 0xFFFFFFFF for d in arr.shape):
            raise CheckpointError(f"checkpoint: entry {name!r} overflows the header fields")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_checkpoint(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    if len(data) < 16 or data[:4] != MAGIC:
        raise BadMagicError("checkpoint: bad magic")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CrcError("checkpoint: CRC mismatch")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise BadVersionError(f"checkpoint: unsupported version {version}")
    pos, end = 12, len(data) - 4
    out = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + size > end:
                raise CheckpointError(f"checkpoint: entry {name!r} runs past the end of the file")
            arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            pos += size
    except struct.error as e:
        raise CheckpointError(f"checkpoint: truncated ({e})") from None
    if pos != end:
        raise CheckpointError("checkpoint: trailing bytes before CRC")
    return out


def save_checkpoint(path, tensors: "dict[str, torch.Tensor]") -> str:
    data = encode_checkpoint(tensors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    return decode_checkpoint(Path(path).read_bytes())


def save_tensor(path, t: torch.Tensor, name: str = "tensor") -> str:
    return save_checkpoint(path, {name: t})


def load_tensor(path) -> torch.Tensor:
    entries = load_checkpoint(path)
    if len(entries) != 1:
        raise CheckpointError(f"load_tensor: expected one entry, found {len(entries)}")
    return next(iter(entries.values()))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# model checkpoints carry their architecture as rank-0 "meta/" entries

_KINDS = {"victim": 1.0, "vae": 2.0, "featnet": 3.0}


def save_model(path, model) -> str:
    from .models import FeatureNet, VaeCodec, VictimModel

    if isinstance(model, VictimModel):
        kind, meta = "victim", {"base": model.arch["base"], "emb_dim": model.arch["emb_dim"],
                                "in_ch": model.arch["in_ch"], "T": model.T}
    elif isinstance(model, VaeCodec):
        kind, meta = "vae", {"base": model.arch["base"], "zc": model.arch["zc"],
                             "latent_h": model.latent_shape[1], "latent_w": model.latent_shape[2]}
    elif isinstance(model, FeatureNet):
        widths = model.arch["widths"]
        kind, meta = "featnet", {"n_widths": len(widths), **{f"width{i}": w for i, w in enumerate(widths)},
                                 "n_classes": model.net.head.out_features}
    else:
        raise CheckpointError(f"save_model: unsupported model type {type(model).__name__}")
    entries = OrderedDict({"meta/kind": torch.tensor(_KINDS[kind])})
    entries.update({f"meta/{k}": torch.tensor(float(v)) for k, v in meta.items()})
    entries.update(model.state_dict())
    return save_checkpoint(path, entries)


def load_model(path):
    from .models import FeatureCNN, FeatureNet, UNet, VaeCodec, VaeNet, VictimModel

    entries = load_checkpoint(path)
    meta = {k[5:]: float(v) for k, v in entries.items() if k.startswith("meta/")}
    state = OrderedDict((k, v) for k, v in entries.items() if not k.startswith("meta/"))
    kind = {v: k for k, v in _KINDS.items()}.get(meta.get("kind"))
    if kind == "victim":
        unet = UNet(base=int(meta["base"]), emb_dim=int(meta["emb_dim"]), in_ch=int(meta["in_ch"]))
        unet.load_state_dict(state)
        return VictimModel(unet, arch={"base": int(meta["base"]), "emb_dim": int(meta["emb_dim"]),
                                       "in_ch": int(meta["in_ch"])}, T=int(meta["T"]))
    if kind == "vae":
        net = VaeNet(base=int(meta["base"]), zc=int(meta["zc"]))
        net.load_state_dict(state)
        return VaeCodec(net, latent_shape=(int(meta["zc"]), int(meta["latent_h"]), int(meta["latent_w"])),
                        arch={"base": int(meta["base"]), "zc": int(meta["zc"])})
    if kind == "featnet":
        widths = tuple(int(meta[f"width{i}"]) for i in range(int(meta["n_widths"])))
        net = FeatureCNN(widths=widths, n_classes=int(meta["n_classes"]))
        net.load_state_dict(state)
        return FeatureNet(net, arch={"widths": widths})
    raise CheckpointError(f"load_model: {path} is not a model checkpoint")


# --------------------------------------------------------------------------
# PNG


def write_png(path, img: torch.Tensor):
    """Write a ``3 x H x W`` image in [0, 1] as 8-bit RGB."""
    from PIL import Image

    arr = np.round(np.clip(img.detach().cpu().numpy(), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_png(path) -> torch.Tensor:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    # attack
    delta: float = 1.0
    gamma1: float = 100 / 255
    gamma2: float = 40 / 255
    n_iter: int = 300
    inner_max: int = 50
    t_lo: int = 0
    t_hi: int = 500
    t_fixed: int = -1  # -1: sample t in [t_lo, t_hi]
    seed: int = 0
    mode: str = "atkpdm"
    victim_id: str = "victim"
    conv_window: int = 30
    conv_tol: float = 1e-3
    squared_w2: bool = False
    linf_radius: float = 16 / 255
    noise_target: float = -1.0  # -1: use reference_fidelity file or fail
    calibrate_delta: bool = False
    target_ssim: float = 0.8
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.0
    # geometry and training
    image_size: int = 32
    unet_base: int = 32
    vae_base: int = 64
    featnet_widths: tuple = (16, 32, 64)
    n_train: int = 2048
    data_seed: int = 0
    train_seed: int = 1
    epochs_ddpm: int = 30
    epochs_vae: int = 40
    epochs_featnet: int = 20
    # evaluation
    n_eval: int = 16
    eval_seed: int = 12345
    t_star: int = 500
    stride: int = 10
    seeds: tuple = (0, 1)
    defense: str = "none"
    ablate_t: tuple = (100, 200, 300, 400, 500, 600, 700, 800, 900)
    # artifacts
    data_path: str = ""
    images_path: str = ""
    adv_path: str = ""
    victim_ckpt: str = ""
    victim_b_ckpt: str = ""
    vae_ckpt: str = ""
    featnet_ckpt: str = ""
    reports_dir: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, value: str) -> "RunConfig":
        ftypes = {f.name: f for f in fields(self)}
        if key not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _parse_value(ftypes[key], value, key))
        return self

    def attack_config(self):
        from .attack import AttackConfig

        return AttackConfig(delta=self.delta, gamma1=self.gamma1, gamma2=self.gamma2, n_iter=self.n_iter,
                            inner_max=self.inner_max, t_lo=self.t_lo, t_hi=self.t_hi,
                            t_fixed=None if self.t_fixed < 0 else self.t_fixed, seed=self.seed, mode=self.mode,
                            victim_id=self.victim_id, conv_window=self.conv_window, conv_tol=self.conv_tol,
                            squared_w2=self.squared_w2, linf_radius=self.linf_radius,
                            noise_target=None if self.noise_target < 0 else self.noise_target, T=self.T)

    def schedule(self):
        from .diffusion import NoiseSchedule

        return NoiseSchedule(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end, eta=self.eta)


def _parse_value(f: dataclasses.Field, text: str, key: str):
    text = text.strip()
    default = f.default
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(getattr(cfg, k))}\n" for k in RunConfig.keys())


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


# --------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: str
    checkpoints: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    seeds: dict = field(default_factory=dict)
    code_version: str = ""
    metrics: dict = field(default_factory=dict)
    status: str = "ok"

    def write(self, run_dir) -> Path:
        """Write ``manifest.json``, or ``manifest.N.json`` if earlier manifests exist (never overwrites)."""
        run_dir = Path(run_dir)
        path, n = run_dir / "manifest.json", 0
        while path.exists():
            n += 1
            path = run_dir / f"manifest.{n}.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=_json_default))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return "inf" if o > 0 else "-inf"
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
