"""Fixed causal block codec standing in for a pretrained 3D VAE.

Frame 0 forms its own temporal block; later frames are grouped ``s`` at a time.
Every ``3 x s x 8 x 8`` pixel block (the singleton block is repeated ``s``
times) is mapped to ``c`` latent channels by one seeded linear map. Its first
three rows are per-colour block means; the remaining rows are random detail
projections orthogonal to the means. Decoding inverts the mean pathway only, so
the round trip is the block-constant approximation of the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class CodecConfig:
    c: int = 8
    s: int = 4
    spatial: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.s < 1 or self.spatial < 1:
            raise ConfigError(f"codec strides must be positive, got s={self.s}, spatial={self.spatial}")
        if self.c < 3:
            raise ConfigError(f"codec needs c >= 3 channels for the colour-mean rows, got {self.c}")

    @property
    def block_size(self) -> int:
        return 3 * self.s * self.spatial * self.spatial


def latent_shape(F: int, H: int, W: int, cfg: CodecConfig) -> tuple[int, int, int, int]:
    if F < 1 or (F - 1) % cfg.s:
        raise ShapeError(f"frame count F={F} must satisfy (F - 1) % {cfg.s} == 0")
    if H % cfg.spatial:
        raise ShapeError(f"height H={H} is not divisible by the spatial stride {cfg.spatial}")
    if W % cfg.spatial:
        raise ShapeError(f"width W={W} is not divisible by the spatial stride {cfg.spatial}")
    return (cfg.c, (F - 1) // cfg.s + 1, H // cfg.spatial, W // cfg.spatial)


def pixel_frames(f: int, s: int) -> int:
    return (f - 1) * s + 1


def block_frames(j: int, s: int) -> range:
    """Pixel frame indices that latent frame ``j`` encodes."""
    return range(0, 1) if j == 0 else range(1 + (j - 1) * s, 1 + j * s)


@lru_cache(maxsize=16)
def _projection(cfg: CodecConfig) -> Tensor:
    n_per = cfg.s * cfg.spatial * cfg.spatial
    w = np.zeros((cfg.c, cfg.block_size), dtype=np.float64)
    for k in range(3):
        w[k, k * n_per : (k + 1) * n_per] = 1.0 / n_per
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    detail = rng.standard_normal((cfg.c - 3, cfg.block_size))
    detail = detail.reshape(cfg.c - 3, 3, n_per)
    detail -= detail.mean(axis=2, keepdims=True)
    detail = detail.reshape(cfg.c - 3, cfg.block_size)
    detail /= np.linalg.norm(detail, axis=1, keepdims=True) + 1e-12
    w[3:] = detail
    return torch.from_numpy(w)


def projection_matrix(cfg: CodecConfig) -> Tensor:
    """The ``[c, 3*s*8*8]`` float64 encoding map (read-only copy)."""
    return _projection(cfg).clone()


def _blocks(video: Tensor, cfg: CodecConfig) -> Tensor:
    """Rearrange ``[3, F, H, W]`` into ``[f, h, w, 3*s*p*p]`` block vectors."""
    _, F, H, W = video.shape
    _, f, h, w = latent_shape(F, H, W, cfg)
    p, s = cfg.spatial, cfg.s
    first = video[:, :1].expand(3, s, H, W)
    groups = torch.cat([first, video[:, 1:]], dim=1)  # [3, f*s, H, W]
    x = groups.reshape(3, f, s, h, p, w, p)
    x = x.permute(1, 3, 5, 0, 2, 4, 6)  # f, h, w, 3, s, p, p
    return x.reshape(f, h, w, cfg.block_size)


def encode(video: Tensor, cfg: CodecConfig) -> Tensor:
    """``[3, F, H, W]`` pixels in [0, 1] to ``[c, f, h, w]`` float32 latents."""
    if video.dim() != 4 or video.shape[0] != 3:
        raise ShapeError(f"expected a [3, F, H, W] video, got {tuple(video.shape)}")
    # float64 keeps the mean rows exact on block-constant input
    blocks = _blocks(video.detach().to(torch.float64), cfg)
    lat = blocks @ _projection(cfg).t()
    return lat.permute(3, 0, 1, 2).to(torch.float32).contiguous()


def decode(latents: Tensor, cfg: CodecConfig) -> Tensor:
    """``[c, f, h, w]`` latents to the block-constant ``[3, F, H, W]`` video."""
    if latents.dim() != 4 or latents.shape[0] != cfg.c:
        raise ShapeError(f"expected [{cfg.c}, f, h, w] latents, got {tuple(latents.shape)}")
    _, f, h, w = latents.shape
    p, s = cfg.spatial, cfg.s
    means = latents[:3].detach()
    up = means.repeat_interleave(p, dim=2).repeat_interleave(p, dim=3)  # [3, f, H, W]
    reps = torch.full((f,), s, dtype=torch.long)
    reps[0] = 1
    out = up.repeat_interleave(reps, dim=1)
    return out.clamp(0.0, 1.0).contiguous()
