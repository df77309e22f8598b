"""LoRA-only training of the base and stitch model roles."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import torch
from torch import Tensor

from .checkpoint import load_tensors, save_tensors
from .codec import CodecConfig, encode
from .dit import ConditionBundle, DiT, DitConfig
from .errors import ConfigError, DivergenceError
from .numerics import Rng, backward
from .sampler import FrameMask, build_frame_mask, noise
from .synth import Sample

log = logging.getLogger(__name__)

ROLES = ("base", "stitch")


@dataclass(frozen=True)
class TrainConfig:
    role: str = "base"
    steps: int = 200
    batch_size: int = 4
    peak_lr: float = 1e-3
    hand_dropout_p: float = 0.1
    retain_ratio: float = 0.25
    seed: int = 0
    adapter_seed: Optional[int] = None  # default: one seed per role

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        if not 0.0 <= self.hand_dropout_p <= 1.0:
            raise ConfigError(f"dropout probability {self.hand_dropout_p} outside [0, 1]")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @property
    def warmup_steps(self) -> int:
        return math.floor(0.1 * self.steps)

    def resolved_adapter_seed(self) -> int:
        return self.adapter_seed if self.adapter_seed is not None else 1 + ROLES.index(self.role)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate used for optimiser step ``step`` (1-based)."""
    warm, total, peak = cfg.warmup_steps, cfg.steps, cfg.peak_lr
    if warm and step <= warm:
        return peak * step / warm
    span = total - warm
    if span <= 0:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


@dataclass
class EncodedSample:
    x0: Tensor
    z_pose: Tensor
    z_pose_nohand: Tensor
    z_hand: Tensor
    z_img: Tensor
    caption: Tensor
    subject_indices: list[int]


def encode_sample(sample: Sample, codec: CodecConfig) -> EncodedSample:
    hand_region = (sample.hand.sum(dim=0, keepdim=True) > 0).to(sample.pose.dtype)
    return EncodedSample(
        x0=encode(sample.video, codec),
        z_pose=encode(sample.pose, codec),
        z_pose_nohand=encode(sample.pose * (1.0 - hand_region), codec),
        z_hand=encode(sample.hand, codec),
        z_img=encode(sample.reference[:, None], codec),
        caption=torch.tensor(sample.spec.caption_tokens, dtype=torch.long),
        subject_indices=list(sample.spec.subject_token_indices),
    )


def make_bundle(enc: EncodedSample, z_vid: Tensor, m: Tensor) -> ConditionBundle:
    return ConditionBundle(
        z_vid=z_vid,
        m=m,
        z_pose=enc.z_pose,
        z_hand=enc.z_hand,
        z_img=enc.z_img,
        caption=enc.caption,
        subject_indices=enc.subject_indices,
        z_pose_nohand=enc.z_pose_nohand,
    )


def apply_condition_dropout(bundle: ConditionBundle, p: float, rng: Rng) -> ConditionBundle:
    """Independently drop the hand-normal latents and the pose's hand keypoints."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1]")
    drop_normals = rng.random() < p
    drop_keypoints = rng.random() < p
    changes = {}
    if drop_normals:
        changes["z_hand"] = torch.zeros_like(bundle.z_hand)
    if drop_keypoints and bundle.z_pose_nohand is not None:
        changes["z_pose"] = bundle.z_pose_nohand
    return bundle.replace(**changes) if changes else bundle


def role_mask(role: str, F: int, s: int, retain_ratio: float) -> FrameMask:
    return build_frame_mask("base" if role == "base" else "stitch", F, s, retain_ratio)


def training_loss(model: DiT, enc: EncodedSample, rng: Rng, mask: FrameMask | None = None,
                  dropout_p: float = 0.0, t: float | None = None, eps: Tensor | None = None) -> Tensor:
    """Masked velocity MSE at a random noise level.

    Loss covers every latent frame that is not pinned by ``mask``.
    """
    x0 = enc.x0
    c, f, h, w = x0.shape
    mask = mask or FrameMask([0] * ((f - 1) * model.cfg.s + 1), model.cfg.s)
    t = rng.random() if t is None else t
    eps = rng.normal(c, f, h, w) if eps is None else eps
    x_t = noise(x0, eps, t)
    bundle = make_bundle(enc, x_t, mask.latent_mask(h, w))
    bundle = apply_condition_dropout(bundle, dropout_p, rng)
    pred = model(bundle, t)
    target = eps - x0
    keep = torch.ones(f, dtype=torch.bool)
    keep[mask.pinned_latent_frames()] = False
    err = (pred - target)[:, keep]
    return err.pow(2).mean()


@dataclass
class Checkpoint:
    role: str
    step: int
    dit: DitConfig
    codec: CodecConfig
    state: dict[str, Tensor]
    frames: int = 17
    losses: list[tuple[int, float, float]] = field(default_factory=list)

    def meta(self) -> dict:
        meta = {"role": self.role, "step": self.step, "frames": self.frames}
        for k, v in asdict(self.dit).items():
            meta[f"dit.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        for k, v in asdict(self.codec).items():
            meta[f"codec.{k}"] = v
        return meta

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.state, self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        state, meta = load_tensors(path)
        return cls(
            role=meta["role"],
            step=int(meta["step"]),
            dit=dit_config_from_meta(meta),
            codec=CodecConfig(**{f.name: int(meta[f"codec.{f.name}"]) for f in fields(CodecConfig)}),
            state=state,
            frames=int(meta.get("frames", 17)),
        )

    def build_model(self) -> DiT:
        model = DiT(self.dit)
        model.load_trainable_state(self.state)
        model.requires_grad_(False)
        return model


def dit_config_from_meta(meta: dict) -> DitConfig:
    kw = {}
    for f in fields(DitConfig):
        raw = meta[f"dit.{f.name}"]
        if f.name == "patch":
            kw[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name in ("literal_concat",):
            kw[f.name] = raw == "True"
        elif f.name == "image_shift":
            kw[f.name] = raw
        elif f.name == "lora_alpha":
            kw[f.name] = float(raw)
        else:
            kw[f.name] = int(raw)
    return DitConfig(**kw)


def write_loss_csv(path: str | Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for step, loss, lr in losses:
            writer.writerow([step, repr(loss), repr(lr)])


def train(dataset: list[Sample], cfg: TrainConfig, dit_cfg: DitConfig, codec: CodecConfig | None = None,
          init_state: dict[str, Tensor] | None = None, model: DiT | None = None) -> Checkpoint:
    if not dataset:
        raise ValueError("dataset is empty")
    codec = codec or CodecConfig(c=dit_cfg.c, s=dit_cfg.s)
    if codec.c != dit_cfg.c or codec.s != dit_cfg.s:
        raise ConfigError(f"codec (c={codec.c}, s={codec.s}) disagrees with model (c={dit_cfg.c}, s={dit_cfg.s})")
    encoded = [encode_sample(s, codec) for s in dataset]
    F = dataset[0].frames
    mask = role_mask(cfg.role, F, dit_cfg.s, cfg.retain_ratio)

    model = model or DiT(dit_cfg, adapter_seed=cfg.resolved_adapter_seed())
    if init_state is not None:
        model.load_trainable_state(init_state)
    params = list(model.trainable_state().values())
    opt = torch.optim.Adam(params, lr=cfg.peak_lr)
    rng = Rng(cfg.seed)
    losses: list[tuple[int, float, float]] = []
    for step in range(1, cfg.steps + 1):
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        step_rng = rng.child(step)
        picks = step_rng.integers(0, len(encoded), size=cfg.batch_size)
        opt.zero_grad(set_to_none=True)
        loss = sum(
            training_loss(model, encoded[int(i)], step_rng.child(b), mask, cfg.hand_dropout_p)
            for b, i in enumerate(picks)
        ) / cfg.batch_size
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step} (lr={lr:.3g})")
        backward(loss)
        opt.step()
        losses.append((step, value, lr))
        if step % 50 == 0:
            log.info("step %d loss %.4f lr %.2e", step, value, lr)
    state = {k: v.detach().clone() for k, v in model.trainable_state().items()}
    return Checkpoint(cfg.role, cfg.steps, dit_cfg, codec, state, frames=F, losses=losses)


def smoothed(values: list[float], window: int = 20) -> list[float]:
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        out.append(sum(chunk) / len(chunk))
    return out
