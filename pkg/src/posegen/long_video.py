"""Interleaved key/stitch segment planning, generation and assembly.

Key segments of ``F_seg`` frames are laid out ``2 * (F_seg - q)`` frames apart;
each stitch segment overlaps the last ``q`` frames of the key before it and the
first ``q`` of the key after it, and contributes only its ``F_seg - 2q``
interior frames to the output.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .codec import CodecConfig, block_frames, decode, encode
from .dit import ConditionBundle, DiT
from .errors import ConfigError, UsageError
from .io import quantize
from .kv_share import GateConfig, KvCache
from .sampler import SamplerConfig, retention_mask, sample

log = logging.getLogger(__name__)


@dataclass
class Segment:
    kind: str  # "key" | "stitch"
    index: int  # position among segments of the same kind
    start: int  # nominal global span [start, end)
    end: int
    seed: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class SegmentPlan:
    segments: list[Segment]
    q: int
    F_seg: int
    total_frames: int
    generated_frames: int
    source_index: int = 0
    shortened: bool = False

    def keys(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "key"]

    def stitches(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "stitch"]

    def emitted(self, seg: Segment) -> tuple[int, int]:
        """Global frame range this segment contributes to the output."""
        if seg.kind == "key":
            lo, hi = seg.start, seg.end
        else:
            lo, hi = seg.start + self.q, seg.end - self.q
        return min(lo, self.total_frames), min(hi, self.total_frames)

    def to_manifest(self) -> dict[str, str]:
        out = {
            "total_frames": str(self.total_frames),
            "generated_frames": str(self.generated_frames),
            "F_seg": str(self.F_seg),
            "q": str(self.q),
            "source_index": str(self.source_index),
            "shortened": str(int(self.shortened)),
            "segments": str(len(self.segments)),
        }
        for i, s in enumerate(self.segments):
            out[f"segment.{i}"] = f"{s.kind},{s.index},{s.start},{s.end},{s.seed}"
        return out

    @classmethod
    def from_manifest(cls, items: dict[str, str]) -> "SegmentPlan":
        segs = []
        for i in range(int(items["segments"])):
            kind, index, start, end, seed = items[f"segment.{i}"].split(",")
            segs.append(Segment(kind, int(index), int(start), int(end), int(seed)))
        return cls(
            segs,
            q=int(items["q"]),
            F_seg=int(items["F_seg"]),
            total_frames=int(items["total_frames"]),
            generated_frames=int(items["generated_frames"]),
            source_index=int(items["source_index"]),
            shortened=bool(int(items["shortened"])),
        )


def plan_length(n_keys: int, F_seg: int, q: int) -> int:
    return n_keys * F_seg + (n_keys - 1) * (F_seg - 2 * q)


def _segment_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(1)[0])


def plan_segments(total_frames: int, F_seg: int, retain_ratio: float = 0.25, seed: int = 0,
                  source_index: int = 0) -> SegmentPlan:
    q = math.floor(F_seg * retain_ratio)
    if F_seg < 1 or total_frames < 1:
        raise ConfigError("frame counts must be positive")
    if F_seg - 2 * q < 1 and total_frames > F_seg:
        raise ConfigError(f"F_seg={F_seg} with q={q} leaves no stitch interior")
    if total_frames <= F_seg:
        seg = Segment("key", 0, 0, F_seg, _segment_seed(seed, 0))
        return SegmentPlan([seg], q, F_seg, total_frames, F_seg, 0, shortened=total_frames < F_seg)
    period = 2 * (F_seg - q)
    n_keys = math.ceil((total_frames + F_seg - 2 * q) / period)
    generated = plan_length(n_keys, F_seg, q)
    segments = []
    for k in range(n_keys):
        start = k * period
        if k:
            segments.append(Segment("stitch", k - 1, start - F_seg + q, start + q, _segment_seed(seed, 2 * k - 1)))
        segments.append(Segment("key", k, start, start + F_seg, _segment_seed(seed, 2 * k)))
    if not 0 <= source_index < n_keys:
        raise ConfigError(f"source index {source_index} outside {n_keys} key segments")
    return SegmentPlan(segments, q, F_seg, total_frames, generated, source_index, shortened=generated != total_frames)


def assemble(plan: SegmentPlan, frames: dict[tuple[str, int], Tensor]) -> Tensor:
    """Concatenate decoded segment frames (each ``[3, F_seg, H, W]``) in plan order."""
    out = []
    for seg in plan.segments:
        key = (seg.kind, seg.index)
        if key not in frames:
            raise UsageError(f"segment {seg.kind} {seg.index} has not been generated")
        lo, hi = plan.emitted(seg)
        if hi > lo:
            out.append(frames[key][:, lo - seg.start : hi - seg.start])
    video = torch.cat(out, dim=1)
    assert video.shape[1] == plan.total_frames, (video.shape, plan.total_frames)
    return video


def frame_sources(plan: SegmentPlan) -> list[tuple[str, int, int]]:
    """For every global frame, the (kind, index, local frame) it is emitted from."""
    out = []
    for seg in plan.segments:
        lo, hi = plan.emitted(seg)
        out += [(seg.kind, seg.index, g - seg.start) for g in range(lo, hi)]
    return out


# ------------------------------------------------------------- generation


def codec_length(F: int, s: int) -> int:
    """Smallest frame count >= F the causal codec accepts."""
    return F if (F - 1) % s == 0 else F + (s - (F - 1) % s)


def _pad_frames(video: Tensor, n: int) -> Tensor:
    if video.shape[1] >= n:
        return video[:, :n]
    tail = video[:, -1:].expand(-1, n - video.shape[1], -1, -1)
    return torch.cat([video, tail], dim=1)


@dataclass
class LongVideoInputs:
    reference: Tensor  # [3, H, W]
    pose: Tensor  # [3, N, H, W]
    hand: Tensor  # [3, N, H, W]
    caption: list[int]
    subject_indices: list[int] = field(default_factory=lambda: [2])


@dataclass
class LongVideoResult:
    video: Tensor  # [3, total, H, W]
    pred_masks: Tensor  # [total, H, W]
    latents: dict[tuple[str, int], Tensor]
    frames: dict[tuple[str, int], Tensor]
    cache: KvCache
    plan: SegmentPlan
    share_counts: dict[tuple[str, int], int] = field(default_factory=dict)


def token_mask_to_pixels(mask: Tensor, f: int, h: int, w: int, codec: CodecConfig, patch=(1, 2, 2)) -> Tensor:
    """Token-level subject mask ``[f*gh*gw]`` to pixel masks ``[F, H, W]``."""
    gh, gw = h // patch[1], w // patch[2]
    grid = mask.reshape(f, gh, gw)
    sy, sx = patch[1] * codec.spatial, patch[2] * codec.spatial
    up = grid.repeat_interleave(sy, dim=1).repeat_interleave(sx, dim=2)
    reps = torch.full((f,), codec.s, dtype=torch.long)
    reps[0] = 1
    return up.repeat_interleave(reps, dim=0)


def _check_compatible(base, stitch) -> None:
    if stitch is None:
        return
    if base.dit != stitch.dit or base.codec != stitch.codec:
        raise ConfigError("base and stitch checkpoints disagree on model or codec configuration")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("POSEGEN_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def generate_long(
    plan: SegmentPlan,
    inputs: LongVideoInputs,
    base_ckpt,
    stitch_ckpt,
    gate: GateConfig | None,
    sampler_T: int = 20,
    workers: int | None = None,
    attn_mode: str = "literal",
    base_model: DiT | None = None,
    stitch_model: DiT | None = None,
) -> LongVideoResult:
    """Source key (cache capture), remaining keys, then stitches; finally assemble."""
    _check_compatible(base_ckpt, stitch_ckpt)
    codec: CodecConfig = base_ckpt.codec
    cfg = base_ckpt.dit
    if gate is not None and gate.L != cfg.L:
        raise ConfigError(f"gate built for L={gate.L}, model has L={cfg.L}")
    if gate is not None and gate.T != sampler_T:
        raise ConfigError(f"gate built for T={gate.T}, sampler uses T={sampler_T}")
    if plan.stitches() and stitch_ckpt is None:
        raise ConfigError("plan has stitch segments but no stitch checkpoint was given")
    base_model = base_model or base_ckpt.build_model()
    if plan.stitches():
        stitch_model = stitch_model or stitch_ckpt.build_model()
    workers = workers or _workers()

    G = codec_length(plan.F_seg, codec.s)
    pose = _pad_frames(inputs.pose, plan.generated_frames + G)
    hand = _pad_frames(inputs.hand, plan.generated_frames + G)
    z_img = encode(inputs.reference[:, None], codec)
    caption = torch.tensor(inputs.caption, dtype=torch.long)
    ctrl_kw = {"attn_mode": attn_mode}

    def bundle_for(seg: Segment) -> ConditionBundle:
        p = _pad_frames(pose[:, seg.start : seg.start + plan.F_seg], G)
        hd = _pad_frames(hand[:, seg.start : seg.start + plan.F_seg], G)
        z_pose = encode(p, codec)
        c, f, h, w = z_pose.shape
        return ConditionBundle(
            z_vid=torch.zeros_like(z_pose),
            m=torch.zeros(codec.s, f, h, w),
            z_pose=z_pose,
            z_hand=encode(hd, codec),
            z_img=z_img,
            caption=caption,
            subject_indices=inputs.subject_indices,
        )

    latents: dict[tuple[str, int], Tensor] = {}
    masks: dict[tuple[str, int], Tensor] = {}
    counts: dict[tuple[str, int], int] = {}

    def record(seg: Segment, res) -> None:
        latents[(seg.kind, seg.index)] = res.latents
        fm = res.controller.final_mask() if res.controller is not None else None
        masks[(seg.kind, seg.index)] = fm.values if fm is not None else None
        counts[(seg.kind, seg.index)] = res.controller.counters["share"] if res.controller is not None else 0

    keys = plan.keys()
    source = keys[plan.source_index]
    scfg = lambda seg: SamplerConfig(T=sampler_T, seed=seg.seed)  # noqa: E731

    capture = gate is not None and not gate.is_empty
    res = sample(base_model, bundle_for(source), scfg(source), gate=gate, capture=capture,
                 controller_kw=ctrl_kw, return_controller=True)
    cache = res.controller.cache if capture else KvCache().freeze()
    record(source, res)

    def run_key(seg: Segment):
        return seg, sample(base_model, bundle_for(seg), scfg(seg), cache=cache, gate=gate,
                           controller_kw=ctrl_kw, return_controller=True)

    rest = [k for k in keys if k is not source]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for seg, r in pool.map(run_key, rest):
            record(seg, r)

    frames: dict[tuple[str, int], Tensor] = {}
    for seg in keys:
        frames[("key", seg.index)] = decode(latents[("key", seg.index)], codec)[:, : plan.F_seg]

    q = plan.q

    def run_stitch(seg: Segment):
        before = frames[("key", seg.index)]
        after = frames[("key", seg.index + 1)]
        px = torch.zeros(3, G, *before.shape[2:])
        px[:, :q] = before[:, plan.F_seg - q :]
        px[:, plan.F_seg - q : plan.F_seg] = after[:, :q]
        px[:, plan.F_seg :] = px[:, plan.F_seg - 1 : plan.F_seg]
        fmask = retention_mask(G, q, codec.s, tail=q + G - plan.F_seg)
        preserved = encode(px, codec)
        r = sample(stitch_model, bundle_for(seg), scfg(seg), mask=fmask, preserved=preserved,
                   cache=cache, gate=gate, controller_kw=ctrl_kw, return_controller=True)
        return seg, r, preserved, fmask

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for seg, r, preserved, fmask in pool.map(run_stitch, plan.stitches()):
            record(seg, r)
            frames[("stitch", seg.index)] = decode(r.latents, codec)[:, : plan.F_seg]

    video = assemble(plan, frames)
    _, _, H, W = (3, 0, *video.shape[2:])
    _, f, h, w = next(iter(latents.values())).shape
    pixel_masks = {}
    for key, m in masks.items():
        if m is None:
            pixel_masks[key] = torch.zeros(plan.F_seg, H, W)
        else:
            pixel_masks[key] = token_mask_to_pixels(m, f, h, w, codec, cfg.patch)[: plan.F_seg]
    pred = torch.stack([pixel_masks[(k, i)][j] for k, i, j in frame_sources(plan)])
    return LongVideoResult(video, pred, latents, frames, cache, plan, counts)


# ------------------------------------------------------------------ metrics

METRIC_COLUMNS = ["segment", "kind", "index", "start", "end", "gate", "bg_mse_vs_source", "mask_iou", "cache_bytes"]
METRICS_VERSION = "posegen-metrics v1"


def segment_metrics(plan: SegmentPlan, video: Tensor, pred_masks: Tensor, gt_masks: Tensor,
                    gate_label: str, cache_bytes: int) -> list[dict]:
    """Per-segment background MSE against the source key and subject-mask IoU.

    Frames are compared after 8-bit quantisation so results computed from
    written PPM frames are identical. Background pixels are those outside the
    ground-truth subject mask in both compared frames.
    """
    vid = quantize(video).to(torch.float64)
    gt = gt_masks[: plan.total_frames] > 0.5
    pred = pred_masks[: plan.total_frames] > 0.5
    src = plan.keys()[plan.source_index]
    rows = []
    for n, seg in enumerate(plan.segments):
        lo, hi = plan.emitted(seg)
        se, cnt, inter, union = 0.0, 0, 0, 0
        for g in range(lo, hi):
            sg = src.start + (g - seg.start)
            if sg >= plan.total_frames:
                continue
            bg = ~gt[g] & ~gt[sg]
            diff = (vid[:, g] - vid[:, sg]).pow(2)[:, bg]
            se += float(diff.sum())
            cnt += int(diff.numel())
        for g in range(lo, hi):
            inter += int((pred[g] & gt[g]).sum())
            union += int((pred[g] | gt[g]).sum())
        rows.append({
            "segment": n,
            "kind": seg.kind,
            "index": seg.index,
            "start": lo,
            "end": hi,
            "gate": gate_label,
            "bg_mse_vs_source": se / cnt if cnt else 0.0,
            "mask_iou": inter / union if union else 0.0,
            "cache_bytes": cache_bytes,
        })
    return rows


def mean_nonsource_key_mse(plan: SegmentPlan, rows: list[dict]) -> float:
    vals = [r["bg_mse_vs_source"] for r in rows if r["kind"] == "key" and r["index"] != plan.source_index]
    return float(sum(vals) / len(vals)) if vals else 0.0


def gate_sweep(plan: SegmentPlan, inputs: LongVideoInputs, base_ckpt, stitch_ckpt, gt_masks: Tensor,
               cells: list[tuple[int, int]], sampler_T: int = 20, workers: int | None = None,
               attn_mode: str = "literal") -> list[dict]:
    """Mean non-source key background MSE and mean mask IoU per ``(k_t, k_l)`` cell."""
    base_model = base_ckpt.build_model()
    stitch_model = stitch_ckpt.build_model() if stitch_ckpt is not None else None
    rows = []
    for kt, kl in cells:
        gate = GateConfig(sampler_T, base_ckpt.dit.L, kt, kl)
        res = generate_long(plan, inputs, base_ckpt, stitch_ckpt, gate, sampler_T, workers, attn_mode,
                            base_model=base_model, stitch_model=stitch_model)
        seg = segment_metrics(plan, res.video, res.pred_masks, gt_masks, f"{kt},{kl}", res.cache.nbytes())
        rows.append({
            "k_t": kt,
            "k_l": kl,
            "bg_mse_vs_source": mean_nonsource_key_mse(plan, seg),
            "mask_iou": float(sum(r["mask_iou"] for r in seg) / len(seg)),
            "cache_bytes": res.cache.nbytes(),
        })
    return rows
