"""Inference-time background KV-sharing between video segments.

A source segment is denoised once while its video-token keys/values and
subject masks are captured at the gated (layer, timestep) pairs. Later segments
run the same gated self-attention layers twice: normally, and with the cached
source keys/values substituted (source subject tokens suppressed). Positions
that are background in both segments take the source-attended result.

Conventions: layers are numbered 1..L and timesteps count down T..1, so the
first denoising step is ``t == T``.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import CacheMissError, ConfigError, UsageError
from .numerics import matmul, softmax_rows, tensor_digest

log = logging.getLogger(__name__)

OTSU_BINS = 64
OTSU_TIE_RTOL = 1e-9


@dataclass
class AttnMask:
    values: Tensor  # [n_vid] in {0, 1}; 1 = subject
    layer: int
    degenerate: bool = False

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ValueError(f"mask must be 1-D, got shape {tuple(self.values.shape)}")


@dataclass(frozen=True)
class GateConfig:
    T: int
    L: int
    k_t: int
    k_l: int

    def __post_init__(self):
        if self.T < 1 or self.L < 1:
            raise ConfigError(f"gate needs T >= 1 and L >= 1, got T={self.T}, L={self.L}")
        if not (0 <= self.k_t <= self.T):
            raise ConfigError(f"k_t={self.k_t} outside [0, {self.T}]")
        if not (0 <= self.k_l <= self.L):
            raise ConfigError(f"k_l={self.k_l} outside [0, {self.L}]")

    @classmethod
    def default(cls, T: int, L: int) -> "GateConfig":
        return cls(T, L, max(1, math.ceil(T / 4)), math.ceil(L / 2))

    @classmethod
    def empty(cls, T: int, L: int) -> "GateConfig":
        return cls(T, L, 0, 0)

    @property
    def is_empty(self) -> bool:
        return self.k_t == 0 or self.k_l == 0

    def timesteps(self) -> list[int]:
        return list(range(self.T, self.T - self.k_t, -1))

    def layers(self) -> list[int]:
        return list(range(self.L - self.k_l + 1, self.L + 1))

    def pairs(self) -> set[tuple[int, int]]:
        return {(l, t) for l in self.layers() for t in self.timesteps()}

    def __contains__(self, lt: tuple[int, int]) -> bool:
        l, t = lt
        return self.L - self.k_l < l <= self.L and self.T - self.k_t < t <= self.T


# ------------------------------------------------------------ mask extraction


def subject_attn_map(text_video_logits: Tensor, subject_indices, softmax: bool = False) -> Tensor:
    """Mean over subject text tokens (and heads) of the scaled text->video logits.

    ``text_video_logits`` is ``[H, n_text, n_vid]`` or ``[n_text, n_vid]``.
    """
    idx = list(subject_indices)
    if not idx:
        raise ConfigError("subject token index set is empty")
    logits = text_video_logits if text_video_logits.dim() == 3 else text_video_logits[None]
    n_text = logits.shape[1]
    if any(i < 0 or i >= n_text for i in idx):
        raise ConfigError(f"subject indices {idx} outside text length {n_text}")
    rows = logits[:, idx, :]
    if softmax:
        rows = softmax_rows(rows)
    return rows.mean(dim=1).mean(dim=0)


def _otsu_boundaries(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    return lo + (hi - lo) * np.arange(1, OTSU_BINS) / OTSU_BINS


def otsu_threshold(values: Tensor) -> float:
    """Between-class-variance maximising threshold over a 64-bin histogram.

    Candidates are the 63 interior bin boundaries; ties go to the lowest one.
    A constant input returns the constant itself.
    """
    v = values.detach().to(torch.float64).reshape(-1).numpy()
    if v.size < 2:
        raise ValueError("otsu_threshold needs at least two values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo
    edges = _otsu_boundaries(v)
    # bin k holds values with exactly k boundaries strictly below them, so
    # "value > edges[k-1]" <=> "bin >= k"
    bins = np.searchsorted(edges, v, side="left")
    counts = np.bincount(bins, minlength=OTSU_BINS).astype(np.float64)
    sums = np.bincount(bins, weights=v, minlength=OTSU_BINS)
    n, total = float(v.size), float(sums.sum())
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n1 = n - n0
    s1 = total - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1) ** 2
    between = np.where((n0 > 0) & (n1 > 0), between, -np.inf)
    # scores within a relative 1e-9 of the best count as ties
    best = between.max()
    return float(edges[int(np.argmax(between >= best - OTSU_TIE_RTOL * abs(best)))])


def threshold_map(values: Tensor, layer: int = 0) -> AttnMask:
    thr = otsu_threshold(values)
    mask = (values.detach() > thr).to(torch.float32)
    degenerate = bool(values.max() == values.min())
    if degenerate:
        log.debug("constant attention map at layer %d: no subject detected", layer)
    return AttnMask(mask, layer, degenerate)


def layer_mask(binary_maps: list[Tensor], l: int | None = None) -> AttnMask:
    """Mean of the binarised maps of layers 1..l, re-binarised by majority (>= 0.5)."""
    maps = binary_maps if l is None else binary_maps[:l]
    if not maps:
        raise ValueError("layer_mask needs at least one map")
    mean = torch.stack(maps).mean(dim=0)
    return AttnMask((mean >= 0.5).to(torch.float32), len(maps))


# ------------------------------------------------------------ attention paths


def shared_attention(q: Tensor, k_src: Tensor, v_src: Tensor, m_src: Tensor, mode: str = "literal") -> Tensor:
    """Current queries against cached source keys/values, source subject keys suppressed.

    ``q`` is ``[H, n, hd]``, ``k_src``/``v_src`` are ``[H, n_src, hd]`` and
    ``m_src`` is ``[n_src]``. ``literal`` multiplies the post-softmax weights by
    ``1 - m_src``; ``renorm`` masks the logits instead so rows stay normalised.
    Returns per-head outputs ``[H, n, hd]``.
    """
    if k_src.shape != v_src.shape or q.shape[0] != k_src.shape[0] or q.shape[2] != k_src.shape[2]:
        raise ConfigError(f"cached K/V {tuple(k_src.shape)} incompatible with queries {tuple(q.shape)}")
    if m_src.shape != (k_src.shape[1],):
        raise ConfigError(f"source mask length {tuple(m_src.shape)} != {k_src.shape[1]} source tokens")
    keep = (1.0 - m_src).to(q.dtype)
    logits = matmul(q, k_src.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mode == "literal":
        w = softmax_rows(logits) * keep
    elif mode == "renorm":
        if not bool(keep.any()):
            return torch.zeros_like(q)
        w = softmax_rows(logits.masked_fill(keep[None, None, :] == 0, float("-inf")))
    else:
        raise ConfigError(f"unknown shared-attention mode {mode!r}")
    return matmul(w, v_src)


def fuse(t_cur: Tensor, t_src: Tensor, m: Tensor, m_src: Tensor) -> Tensor:
    """Keep current tokens where either segment sees subject, else take source-attended ones."""
    keep = torch.logical_or(m > 0.5, m_src > 0.5)
    return torch.where(keep[:, None], t_cur, t_src)


# ------------------------------------------------------------------- cache


@dataclass
class KvEntry:
    k: Tensor  # [H, n_vid, hd]
    v: Tensor
    mask: Tensor  # [n_vid]


@dataclass
class KvCache:
    entries: dict[tuple[int, int], KvEntry] = field(default_factory=dict)
    frozen: bool = False

    def put(self, layer: int, t: int, k: Tensor, v: Tensor, mask: Tensor) -> None:
        if self.frozen:
            raise UsageError("cache is frozen after source capture")
        self.entries[(layer, t)] = KvEntry(k.detach().clone(), v.detach().clone(), mask.detach().clone())

    def get(self, layer: int, t: int) -> KvEntry:
        try:
            return self.entries[(layer, t)]
        except KeyError:
            raise CacheMissError(f"no cached source entry for layer {layer}, timestep {t}") from None

    def freeze(self) -> "KvCache":
        self.frozen = True
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.entries)

    def nbytes(self) -> int:
        return sum(e.k.nbytes + e.v.nbytes + e.mask.nbytes for e in self.entries.values())

    def digest(self) -> str:
        tensors = []
        for key in self.keys():
            e = self.entries[key]
            tensors += [e.k, e.v, e.mask]
        return tensor_digest(tensors)

    def to_named(self) -> dict[str, Tensor]:
        out = {}
        for l, t in self.keys():
            e = self.entries[(l, t)]
            out[f"kv/{l}/{t}/k"] = e.k
            out[f"kv/{l}/{t}/v"] = e.v
            out[f"kv/{l}/{t}/mask"] = e.mask
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "KvCache":
        cache = cls()
        keys = {tuple(int(x) for x in name.split("/")[1:3]) for name in named if name.startswith("kv/")}
        for l, t in sorted(keys):
            p = f"kv/{l}/{t}/"
            cache.put(l, t, named[p + "k"], named[p + "v"], named[p + "mask"])
        return cache.freeze()

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        from .checkpoint import save_tensors

        save_tensors(path, self.to_named(), meta=meta or {})

    @classmethod
    def load(cls, path: str | Path) -> tuple["KvCache", dict]:
        from .checkpoint import load_tensors

        named, meta = load_tensors(path)
        return cls.from_named(named), meta


# ------------------------------------------------------------- controller


class SharingController:
    """Per-trajectory hook object passed to :meth:`DiT.forward`.

    ``mode`` is ``"observe"`` (record maps only), ``"capture"`` (source
    segment: record maps and write the cache at gated pairs) or ``"share"``
    (consumer segment: shared-attention and fuse pathway at gated pairs).
    """

    def __init__(
        self,
        mode: str,
        subject_indices,
        gate: GateConfig | None = None,
        cache: KvCache | None = None,
        attn_mode: str = "literal",
        softmax_maps: bool = False,
        force_mask: Tensor | None = None,
    ):
        if mode not in ("observe", "capture", "share"):
            raise ConfigError(f"unknown controller mode {mode!r}")
        if mode == "share" and cache is None:
            raise UsageError("share mode needs a populated cache")
        if mode == "capture" and cache is None:
            cache = KvCache()
        self.mode = mode
        self.subject_indices = list(subject_indices)
        self.gate = gate
        self.cache = cache
        self.attn_mode = attn_mode
        self.softmax_maps = softmax_maps
        self.force_mask = force_mask
        self.t: int | None = None
        self.latest: dict[int, Tensor] = {}
        self.counters: Counter = Counter()
        if gate is not None and cache is not None and mode == "share" and not gate.is_empty:
            missing = gate.pairs() - set(cache.keys())
            if missing:
                raise CacheMissError(f"cache lacks gated pairs {sorted(missing)[:4]}")

    def begin_step(self, t: int) -> None:
        self.t = t

    def gated(self, layer: int) -> bool:
        return self.gate is not None and self.t is not None and (layer, self.t) in self.gate

    def current_mask(self, layer: int, n_vid: int) -> Tensor:
        if self.force_mask is not None:
            return self.force_mask
        maps = [self.latest[i] for i in range(1, layer + 1) if i in self.latest]
        if not maps:
            return torch.ones(n_vid)
        return layer_mask(maps).values

    def final_mask(self) -> AttnMask | None:
        if not self.latest:
            return None
        return layer_mask([self.latest[i] for i in sorted(self.latest)])

    def on_cross_attention(self, layer: int, internals) -> None:
        amap = subject_attn_map(internals.text_video_logits.detach(), self.subject_indices, self.softmax_maps)
        self.latest[layer] = threshold_map(amap, layer).values
        self.counters["cross"] += 1

    def on_self_attention(self, layer: int, internals, o_vid: Tensor, attn) -> Tensor:
        if not self.gated(layer):
            return o_vid
        n_vid = internals.n_vid
        m = self.current_mask(layer, n_vid)
        if self.mode == "capture":
            self.cache.put(layer, self.t, internals.k_vid, internals.v_vid, m)
            self.counters["capture"] += 1
            return o_vid
        if self.mode != "share":
            return o_vid
        entry = self.cache.get(layer, self.t)
        heads = shared_attention(internals.q_vid, entry.k, entry.v, entry.mask, self.attn_mode)
        o_src = attn.project_heads(heads)
        self.counters["share"] += 1
        return fuse(o_vid, o_src, m, entry.mask)


def run_denoise_with_sharing(model, bundle, cache: KvCache, gate: GateConfig, sampler_cfg, **kw):
    """Denoise ``bundle`` with background KV-sharing against ``cache``."""
    from .sampler import sample

    return sample(model, bundle, sampler_cfg, cache=cache, gate=gate, **kw)
