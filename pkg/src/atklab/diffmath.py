"""Differentiable tensor substrate and seeded randomness.

Tensors are ``torch.Tensor`` values (float32 by default, CPU only). This module
adds what torch leaves implicit: shape-checked op wrappers that raise
:class:`ContractError` with the op name and operand shapes, a scalar-root
``backward`` that returns a gradient map, and a reproducible generator with
explicit child streams.
"""
from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32


class ContractError(ValueError):
    """A precondition on shapes, domains or finiteness was violated."""


def set_threads_from_env() -> int:
    """Apply ``ATKLAB_THREADS`` to torch's intra-op pool, if set."""
    n = os.environ.get("ATKLAB_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))
    return torch.get_num_threads()


def checked(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Return ``t`` unchanged after verifying every element is finite."""
    if not torch.isfinite(t).all():
        raise ContractError(f"{what}: non-finite elements in tensor of shape {tuple(t.shape)}")
    return t


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> torch.Tensor:
    """Checked constructor: builds a tensor and rejects NaN/Inf."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    checked(t)
    return t.requires_grad_(requires_grad)


# --------------------------------------------------------------------------
# randomness


class Rng:
    """PCG64 generator keyed by ``(seed, stream)``.

    Streams are derived through ``numpy.random.SeedSequence`` spawn keys, so
    ``Rng(s).child(i)`` and ``Rng(s, stream=(i,))`` give the same sequence.
    Never share one instance across workers; derive children instead.
    """

    def __init__(self, seed: int, stream: Sequence[int] | int = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(stream_id),))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size, dtype=np.float64)

    def randn(self, shape: Sequence[int]) -> torch.Tensor:
        return randn(self, shape)

    def randint(self, lo: int, hi: int) -> int:
        return rand_uniform_int(self, lo, hi)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ContractError(f"randn: invalid shape {shape}")
    return shape


def randn(rng: Rng, shape) -> torch.Tensor:
    """Standard normal float32 tensor via Box-Muller over ``rng``'s uniforms."""
    shape = _shape(shape)
    n = int(np.prod(shape, dtype=np.int64))
    m = (n + 1) // 2
    u1 = rng.uniform(m)
    u2 = rng.uniform(m)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 lies in (0, 1]
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return torch.from_numpy(z[:n].astype(np.float32).reshape(shape))


def rand_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    """Uniform integer on ``[lo, hi)``."""
    if not lo < hi:
        raise ContractError(f"rand_uniform_int: need lo < hi, got [{lo}, {hi})")
    u = rng.uniform(1)[0]
    return min(hi - 1, lo + int(np.floor(u * (hi - lo))))


def rand_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0) -> torch.Tensor:
    shape = _shape(shape)
    u = rng.uniform(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    return torch.from_numpy((lo + (hi - lo) * u).astype(np.float32))


# --------------------------------------------------------------------------
# checked ops


def _same(op: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    _same("add", a, b)
    return a + b


def sub(a, b):
    _same("sub", a, b)
    return a - b


def mul(a, b):
    _same("mul", a, b)
    return a * b


def scale(a, s: float):
    return a * s


def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def transpose(a):
    if a.dim() < 2:
        raise ContractError(f"transpose: need rank >= 2, got {tuple(a.shape)}")
    return a.transpose(-1, -2)


def trace(a):
    if a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"trace: need a square matrix, got {tuple(a.shape)}")
    return torch.diagonal(a).sum()


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d: shape mismatch {tuple(x.shape)} vs {tuple(w.shape)}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def upsample_nearest(x, factor: int = 2):
    if x.dim() != 4:
        raise ContractError(f"upsample_nearest: need NCHW, got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5):
    if x.dim() < 2 or x.shape[1] % groups:
        raise ContractError(f"group_norm: {groups} groups do not divide shape {tuple(x.shape)}")
    return F.group_norm(x, groups, weight, bias, eps)


silu = F.silu
relu = F.relu
exp = torch.exp
sign = torch.sign


def sqrt(a):
    if (a < 0).any():
        raise ContractError("sqrt: negative input")
    return torch.sqrt(a)


def log(a):
    if (a <= 0).any():
        raise ContractError("log: non-positive input")
    return torch.log(a)


def frobenius_norm(a):
    return torch.sqrt((a * a).sum())


def mean(a, dim=None):
    return a.mean() if dim is None else a.mean(dim)


def sum_(a, dim=None):
    return a.sum() if dim is None else a.sum(dim)


def reshape(a, shape):
    try:
        return a.reshape(tuple(shape))
    except RuntimeError:
        raise ContractError(f"reshape: cannot view {tuple(a.shape)} as {tuple(shape)}") from None


def concat(ts: Sequence[torch.Tensor], dim: int = 0):
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != dim % len(ref)):
            raise ContractError(f"concat: shape mismatch {tuple(ref)} vs {tuple(other)}")
    return torch.cat(list(ts), dim)


def slice_(a, dim: int, start: int, stop: int):
    return a.narrow(dim, start, stop - start)


# --------------------------------------------------------------------------
# reverse mode


def backward(root: torch.Tensor, leaves: Iterable[torch.Tensor]) -> dict[int, torch.Tensor]:
    """Gradients of a scalar ``root`` w.r.t. each leaf, keyed by ``id(leaf)``.

    Leaves the root does not depend on get all-zero gradients.
    """
    if root.numel() != 1:
        raise ContractError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    leaves = list(leaves)
    if not root.requires_grad:
        return {id(l): torch.zeros_like(l) for l in leaves}
    grads = torch.autograd.grad(root.reshape(()), leaves, allow_unused=True)
    return {id(l): torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)}


def grad(root: torch.Tensor, leaf: torch.Tensor) -> torch.Tensor:
    return backward(root, [leaf])[id(leaf)]


def finite_difference(fn, x: torch.Tensor, step: float = 1e-3, coords=None) -> torch.Tensor:
    """Central differences of scalar ``fn`` at ``x``; only ``coords`` (flat indices) if given."""
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if coords is None else coords
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in idx:
            old = flat[i].item()
            flat[i] = old + step
            fp = float(fn(x))
            flat[i] = old - step
            fm = float(fn(x))
            flat[i] = old
            out[i] = (fp - fm) / (2 * step)
    return out.view_as(x)
