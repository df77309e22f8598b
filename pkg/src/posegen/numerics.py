"""Dense tensor kernels used by every other module.

Tensors are plain ``torch.Tensor`` objects (float32 by default) and reverse-mode
differentiation is torch autograd. The functions here add the contracts the rest
of the package relies on: explicit shape checks with no silent broadcasting, a
stabilised row softmax, 3-axis rotary embeddings and RMS normalisation. All of
them are dtype-preserving so test oracles can re-run a graph in float64.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, ShapeError, UsageError

RMS_EPS = 1e-6
ROPE_BASE = 10000.0
N_AXES = 3


class Rng:
    """Splittable counter-based generator (Philox) with float32 torch output.

    Children are derived from the seed tree, never from the parent's stream, so
    ``rng.child(3)`` is the same no matter how many draws the parent has made.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(np.random.Philox(self._ss))

    @property
    def seed(self) -> int:
        return int(self._ss.entropy)

    def child(self, *keys: int) -> "Rng":
        ss = np.random.SeedSequence(self._ss.entropy, spawn_key=tuple(self._ss.spawn_key) + tuple(int(k) for k in keys))
        return Rng(ss)

    def spawn(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, *shape: int, std: float = 1.0) -> Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape, dtype=np.float32) * np.float32(std))

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> Tensor:
        x = self._gen.random(shape, dtype=np.float32)
        return torch.from_numpy(np.float32(low) + x * np.float32(high - low))

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen


def _check_rank(x: Tensor, name: str, min_rank: int = 2) -> None:
    if x.dim() < min_rank:
        raise ShapeError(f"{name} needs rank >= {min_rank}, got shape {tuple(x.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [..., k, p]`` with identical leading extents."""
    _check_rank(a, "matmul lhs")
    _check_rank(b, "matmul rhs")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x [n, in]``, ``weight [out, in]``."""
    if x.dim() != 2 or weight.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}")
    y = matmul(x, weight.t())
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
        y = y + bias
    return y


def softmax_rows(x: Tensor) -> Tensor:
    _check_rank(x, "softmax_rows input")
    z = x - x.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.dim() != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rms_norm gain {tuple(gain.shape)} does not match input {tuple(x.shape)}")
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def rope_axis_pairs(d: int) -> tuple[int, int, int]:
    """Rotary pair counts for the (temporal, height, width) axes.

    Equal thirds when ``d`` is divisible by 6; otherwise the temporal axis takes
    the remainder.
    """
    if d % 2 != 0 or d < 2 * N_AXES:
        raise ConfigError(f"rotary dimension {d} must be even and >= {2 * N_AXES}")
    p = d // 2
    side = p // N_AXES
    return (p - 2 * side, side, side)


def rope_angles(positions: Tensor, d: int, base: float = ROPE_BASE, dtype=torch.float32) -> Tensor:
    """Per-token rotation angles ``[n, d/2]`` for integer ``positions [n, 3]``."""
    if positions.dim() != 2 or positions.shape[1] != N_AXES:
        raise ShapeError(f"positions must be [n, 3], got {tuple(positions.shape)}")
    cols = []
    for axis, k in enumerate(rope_axis_pairs(d)):
        freqs = base ** (-torch.arange(k, dtype=torch.float64) / k)
        cols.append(positions[:, axis : axis + 1].to(torch.float64) * freqs[None, :])
    return torch.cat(cols, dim=1).to(dtype)


def rope_apply(x: Tensor, positions: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of ``x [..., n, d]``."""
    _check_rank(x, "rope_apply input")
    n, d = x.shape[-2], x.shape[-1]
    if positions.shape[0] != n:
        raise ShapeError(f"{positions.shape[0]} positions for {n} tokens")
    ang = rope_angles(positions, d, base, dtype=x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    pairs = x.reshape(*x.shape[:-1], d // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.reshape(x.shape)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Multi-head attention on ``[H, n, hd]`` inputs; returns (output, weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, k.transpose(-1, -2)) * scale
    w = softmax_rows(logits)
    return matmul(w, v), w


def backward(loss: Tensor) -> None:
    if loss.dim() != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def sinusoidal_embedding(t: float | Tensor, dim: int, scale: float = 1000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    arg = torch.as_tensor(t, dtype=torch.float64) * scale * freqs
    emb = torch.cat([torch.cos(arg), torch.sin(arg)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(torch.float32)


def tensor_digest(tensors: Sequence[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
