"""Rectified-flow noising, Euler sampling and frame-retention masks.

``x_t = (1 - t) x0 + t eps`` with velocity target ``eps - x0``; sampling runs
``t_k = 1 - k/T`` from 1 down to 0. Latent frames whose pixel frames are all
flagged for preservation are re-pinned after every step to the preserved
latents noised to the current level, so at ``t = 0`` they match exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .codec import block_frames
from .dit import ConditionBundle
from .errors import ConfigError, UsageError
from .kv_share import GateConfig, KvCache, SharingController
from .numerics import Rng


@dataclass
class FrameMask:
    pixel_flags: list[int]  # length F; 1 = preserve, 0 = generate
    s: int

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.pixel_flags):
            raise ValueError("frame flags must be 0 or 1")
        if (len(self.pixel_flags) - 1) % self.s:
            raise ConfigError(f"{len(self.pixel_flags)} frames do not fit temporal stride {self.s}")

    @property
    def f(self) -> int:
        return (len(self.pixel_flags) - 1) // self.s + 1

    def latent_slots(self) -> Tensor:
        """``[s, f]``: latent frame 0 repeats pixel frame 0 in every slot."""
        slots = torch.zeros(self.s, self.f)
        for j in range(self.f):
            frames = list(block_frames(j, self.s))
            if j == 0:
                frames = frames * self.s
            for slot, i in enumerate(frames):
                slots[slot, j] = float(self.pixel_flags[i])
        return slots

    def latent_mask(self, h: int, w: int) -> Tensor:
        return self.latent_slots()[:, :, None, None].expand(self.s, self.f, h, w).contiguous()

    def pinned_latent_frames(self) -> list[int]:
        return [j for j in range(self.f) if all(self.pixel_flags[i] for i in block_frames(j, self.s))]

    @property
    def has_preserved(self) -> bool:
        return any(self.pixel_flags)


def unpack_frame_mask(latent_mask: Tensor) -> list[int]:
    s, f = latent_mask.shape[:2]
    slots = latent_mask[:, :, 0, 0]
    flags = [int(slots[0, 0].item())]
    for j in range(1, f):
        flags += [int(slots[k, j].item()) for k in range(s)]
    return flags


def build_frame_mask(mode: str, F: int, s: int, retain_ratio: float = 0.25) -> FrameMask:
    if mode == "base":
        return FrameMask([0] * F, s)
    if mode != "stitch":
        raise ConfigError(f"unknown frame-mask mode {mode!r}")
    if F < 4:
        raise ConfigError(f"stitch mode needs F >= 4, got {F}")
    q = max(1, math.floor(F * retain_ratio))
    return retention_mask(F, q, s)


def retention_mask(F: int, q: int, s: int, tail: int | None = None) -> FrameMask:
    """First ``q`` and last ``tail`` (default ``q``) frames preserved."""
    tail = q if tail is None else tail
    flags = [1 if i < q or i >= F - tail else 0 for i in range(F)]
    return FrameMask(flags, s)


def noise(x0: Tensor, eps: Tensor, t: float) -> Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"noise: shapes differ {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return (1.0 - t) * x0 + t * eps


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")

    def schedule(self) -> list[float]:
        return [1.0 - k / self.T for k in range(self.T + 1)]


@dataclass
class SampleResult:
    latents: Tensor
    controller: SharingController | None


def sample(
    model,
    bundle: ConditionBundle,
    cfg: SamplerConfig,
    mask: FrameMask | None = None,
    preserved: Tensor | None = None,
    cache: KvCache | None = None,
    gate: GateConfig | None = None,
    capture: bool = False,
    controller_kw: dict | None = None,
    return_controller: bool = False,
):
    """Euler-integrate the velocity field from pure noise to ``t = 0``.

    ``capture=True`` records a source cache at the gated pairs; otherwise a
    ``cache`` plus ``gate`` engages the sharing pathway. The bundle's ``z_vid``
    and ``m`` are replaced; the remaining conditions are used as given.
    """
    c, f, h, w = bundle.z_pose.shape
    mask = mask or FrameMask([0] * ((f - 1) * model.cfg.s + 1), model.cfg.s)
    if mask.f != f:
        raise ConfigError(f"frame mask covers {mask.f} latent frames, bundle has {f}")
    pinned = mask.pinned_latent_frames()
    if mask.has_preserved and preserved is None:
        raise UsageError("stitch-mode sampling needs preserved latents")
    m = mask.latent_mask(h, w)
    eps = Rng(cfg.seed).normal(c, f, h, w)
    x = eps.clone()

    ctrl = None
    kw = controller_kw or {}
    if capture:
        ctrl = SharingController("capture", bundle.subject_indices, gate, KvCache(), **kw)
    elif cache is not None and gate is not None:
        ctrl = SharingController("share", bundle.subject_indices, gate, cache, **kw)
    elif return_controller:
        ctrl = SharingController("observe", bundle.subject_indices, gate, None, **kw)

    sched = cfg.schedule()
    pin = torch.zeros(f, dtype=torch.bool)
    pin[pinned] = True
    pin = pin[None, :, None, None].expand(c, f, h, w)
    with torch.no_grad():
        for k in range(cfg.T):
            t_cur, t_next = sched[k], sched[k + 1]
            if ctrl is not None:
                ctrl.begin_step(cfg.T - k)
            v = model(bundle.replace(z_vid=x, m=m), t_cur, ctrl)
            x = x + (t_next - t_cur) * v
            if pinned:
                x = torch.where(pin, noise(preserved, eps, t_next), x)
    if capture:
        ctrl.cache.freeze()
    if return_controller:
        return SampleResult(x, ctrl)
    return x
