"""Diffusion transformer with channel-level motion conditioning and token-level
reference injection.

Video tokens come from a patchifier over ``[z_vid; m; z_pose]`` (plus a gated
hand-normal branch), image tokens from a separate reference patchifier. Both
token sets run through the same blocks; only video tokens take part in
cross-attention and only they are unpatchified. Base weights are a seeded,
frozen initialisation; LoRA adapters and the patchifiers are trainable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .numerics import (
    Rng,
    linear,
    matmul,
    rms_norm,
    rope_apply,
    rope_axis_pairs,
    scaled_dot_attention,
    sinusoidal_embedding,
    tensor_digest,
)

if TYPE_CHECKING:
    from .kv_share import SharingController


@dataclass(frozen=True)
class DitConfig:
    L: int = 8
    d: int = 64
    heads: int = 4
    c: int = 8
    s: int = 4  # frame-mask slots per latent frame (codec temporal stride)
    patch: tuple[int, int, int] = (1, 2, 2)
    text_dim: int = 32
    vocab: int = 32
    lora_rank: int = 4
    lora_alpha: float = 4.0
    ffn_mult: int = 4
    literal_concat: bool = False
    image_shift: str = "width"  # or "temporal"
    base_seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        rope_axis_pairs(self.head_dim)
        if self.patch[0] != 1:
            raise ConfigError(f"temporal patch size must be 1, got {self.patch}")
        if self.image_shift not in ("width", "temporal"):
            raise ConfigError(f"unknown image_shift {self.image_shift!r}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def patch_area(self) -> int:
        return self.patch[1] * self.patch[2]

    @property
    def video_in_channels(self) -> int:
        return 3 * self.c + self.s if self.literal_concat else 2 * self.c + self.s


@dataclass
class TokenSeq:
    tokens: Tensor  # [n, d]
    positions: Tensor  # [n, 3] int64 (t, y, x)

    def __post_init__(self):
        if self.tokens.shape[0] != self.positions.shape[0]:
            raise ShapeError(f"{self.tokens.shape[0]} tokens but {self.positions.shape[0]} positions")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ConditionBundle:
    z_vid: Tensor  # [c, f, h, w] noisy latents
    m: Tensor  # [s, f, h, w] frame mask
    z_pose: Tensor  # [c, f, h, w]
    z_hand: Tensor  # [c, f, h, w]
    z_img: Tensor  # [c, 1, h, w]
    caption: Tensor  # [n_text] int64
    subject_indices: list[int] = field(default_factory=lambda: [2])
    z_pose_nohand: Optional[Tensor] = None  # pose latents with hand keypoints removed

    def __post_init__(self):
        grid = self.z_vid.shape[1:]
        for name in ("m", "z_pose", "z_hand"):
            if getattr(self, name).shape[1:] != grid:
                raise ShapeError(f"{name} grid {tuple(getattr(self, name).shape[1:])} != z_vid grid {tuple(grid)}")
        if self.z_img.shape[1] != 1 or self.z_img.shape[2:] != grid[1:]:
            raise ShapeError(f"z_img shape {tuple(self.z_img.shape)} incompatible with grid {tuple(grid)}")

    def replace(self, **kw) -> "ConditionBundle":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(kw)
        return ConditionBundle(**values)


def video_positions(f: int, gh: int, gw: int) -> Tensor:
    t, y, x = torch.meshgrid(torch.arange(f), torch.arange(gh), torch.arange(gw), indexing="ij")
    return torch.stack([t, y, x], dim=-1).reshape(-1, 3)


def image_positions(gh: int, gw: int, f: int, shift: str = "width") -> Tensor:
    pos = video_positions(1, gh, gw)
    if shift == "width":
        pos[:, 2] += gw
    else:
        pos[:, 0] += f
    return pos


def patch_vectors(z: Tensor, ph: int, pw: int) -> Tensor:
    """``[C, f, h, w]`` to ``[f*(h/ph)*(w/pw), C*ph*pw]`` with (t, y, x) token order."""
    C, f, h, w = z.shape
    if h % ph or w % pw:
        raise ShapeError(f"latent grid {h}x{w} not divisible by patch {ph}x{pw}")
    x = z.reshape(C, f, h // ph, ph, w // pw, pw).permute(1, 2, 4, 0, 3, 5)
    return x.reshape(f * (h // ph) * (w // pw), C * ph * pw)


def unpatch_vectors(x: Tensor, C: int, f: int, h: int, w: int, ph: int, pw: int) -> Tensor:
    x = x.reshape(f, h // ph, w // pw, C, ph, pw).permute(3, 0, 1, 4, 2, 5)
    return x.reshape(C, f, h, w)


# ----------------------------------------------------------------- layers


@dataclass
class LoraAdapter:
    A: Tensor  # [rank, in]
    B: Tensor  # [out, rank]
    alpha: float
    rank: int

    @property
    def scale(self) -> float:
        return self.alpha / self.rank if self.rank else 0.0


def lora_merge(weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """``W + (alpha / rank) * B @ A``."""
    if adapter.A.shape[0] != adapter.rank or adapter.B.shape[1] != adapter.rank:
        raise ConfigError(
            f"adapter rank {adapter.rank} does not match A {tuple(adapter.A.shape)} / B {tuple(adapter.B.shape)}"
        )
    if adapter.B.shape[0] != weight.shape[0] or adapter.A.shape[1] != weight.shape[1]:
        raise ConfigError(f"adapter shapes do not fit weight {tuple(weight.shape)}")
    return weight + adapter.scale * matmul(adapter.B, adapter.A)


class LoraLinear(nn.Module):
    """Frozen linear map with a trainable low-rank residual (B starts at zero)."""

    def __init__(self, weight: Tensor, rank: int, alpha: float, a_init: Tensor, bias: Tensor | None = None):
        super().__init__()
        self.weight = nn.Parameter(weight, requires_grad=False)
        self.bias = None if bias is None else nn.Parameter(bias, requires_grad=False)
        self.rank = rank
        self.alpha = alpha
        if rank:
            self.lora_A = nn.Parameter(a_init)
            self.lora_B = nn.Parameter(torch.zeros(weight.shape[0], rank))
        self.adapters_enabled = True

    @property
    def adapter(self) -> LoraAdapter:
        return LoraAdapter(self.lora_A, self.lora_B, self.alpha, self.rank)

    def forward(self, x: Tensor) -> Tensor:
        y = linear(x, self.weight, self.bias)
        if self.rank and self.adapters_enabled:
            y = y + (self.alpha / self.rank) * linear(linear(x, self.lora_A), self.lora_B)
        return y


class Patchifier(nn.Module):
    def __init__(self, in_channels: int, d: int, ph: int, pw: int, weight: Tensor, bias: Tensor):
        super().__init__()
        self.in_channels, self.ph, self.pw = in_channels, ph, pw
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(bias)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[0] != self.in_channels:
            raise ConfigError(f"patchifier expects {self.in_channels} channels, got {z.shape[0]}")
        return linear(patch_vectors(z, self.ph, self.pw), self.weight, self.bias)


@dataclass
class AttnInternals:
    q: Tensor  # [H, n_vid + n_img, hd], after RoPE
    k: Tensor
    v: Tensor
    n_vid: int

    @property
    def q_vid(self) -> Tensor:
        return self.q[:, : self.n_vid]

    @property
    def k_vid(self) -> Tensor:
        return self.k[:, : self.n_vid]

    @property
    def v_vid(self) -> Tensor:
        return self.v[:, : self.n_vid]


@dataclass
class CrossAttnInternals:
    text_video_logits: Tensor  # [H, n_text, n_vid], scaled by 1/sqrt(hd)
    weights: Tensor  # [H, n_vid, n_ctx]


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(0, 1)


def merge_heads(x: Tensor) -> Tensor:
    H, n, hd = x.shape
    return x.transpose(0, 1).reshape(n, H * hd)


class SelfAttention(nn.Module):
    def __init__(self, q: LoraLinear, k: LoraLinear, v: LoraLinear, o: LoraLinear, heads: int):
        super().__init__()
        self.q, self.k, self.v, self.o = q, k, v, o
        self.heads = heads

    def project_heads(self, heads_out: Tensor) -> Tensor:
        return self.o(merge_heads(heads_out))

    def forward(self, t_vid: TokenSeq, t_img: TokenSeq) -> tuple[Tensor, Tensor, AttnInternals]:
        x = torch.cat([t_vid.tokens, t_img.tokens], dim=0)
        pos = torch.cat([t_vid.positions, t_img.positions], dim=0)
        q = rope_apply(split_heads(self.q(x), self.heads), pos)
        k = rope_apply(split_heads(self.k(x), self.heads), pos)
        v = split_heads(self.v(x), self.heads)
        out, _ = scaled_dot_attention(q, k, v)
        y = self.project_heads(out)
        n = len(t_vid)
        return y[:n], y[n:], AttnInternals(q, k, v, n)


class CrossAttention(nn.Module):
    def __init__(self, q: LoraLinear, k: LoraLinear, v: LoraLinear, o: LoraLinear, heads: int):
        super().__init__()
        self.q, self.k, self.v, self.o = q, k, v, o
        self.heads = heads

    def forward(self, x_vid: Tensor, text_ctx: Tensor, ref_pooled: Tensor | None = None):
        if text_ctx.shape[0] < 1:
            raise ShapeError("cross-attention needs at least one text token")
        ctx = text_ctx if ref_pooled is None else torch.cat([text_ctx, ref_pooled[None]], dim=0)
        q = split_heads(self.q(x_vid), self.heads)
        k = split_heads(self.k(ctx), self.heads)
        v = split_heads(self.v(ctx), self.heads)
        out, w = scaled_dot_attention(q, k, v)
        n_text = text_ctx.shape[0]
        # text -> video logits share the video->text projections, transposed
        scale = 1.0 / math.sqrt(q.shape[-1])
        tv = matmul(k[:, :n_text], q.transpose(-1, -2)) * scale
        return self.o(merge_heads(out)), CrossAttnInternals(tv, w)


class Block(nn.Module):
    def __init__(self, cfg: DitConfig, rng: Rng, adapter_rng: Rng):
        super().__init__()
        d, r, a = cfg.d, cfg.lora_rank, cfg.lora_alpha
        counter = iter(range(1000))

        def lin(n_out: int, n_in: int, gain: float = 1.0, bias: bool = False) -> LoraLinear:
            i = next(counter)
            w = rng.child(i).normal(n_out, n_in, std=gain / math.sqrt(n_in))
            b = torch.zeros(n_out) if bias else None
            return LoraLinear(w, r, a, adapter_rng.child(i).normal(r, n_in, std=1.0 / math.sqrt(n_in)), b)

        out_gain = 1.0 / math.sqrt(2 * cfg.L)
        self.attn = SelfAttention(lin(d, d), lin(d, d), lin(d, d), lin(d, d, out_gain), cfg.heads)
        self.cross = CrossAttention(lin(d, d), lin(d, d), lin(d, d), lin(d, d, out_gain), cfg.heads)
        hidden = cfg.ffn_mult * d
        self.ff_in = lin(hidden, d, bias=True)
        self.ff_out = lin(d, hidden, out_gain, bias=True)
        for name in ("norm1", "norm2", "norm3"):
            self.register_parameter(name, nn.Parameter(torch.ones(d), requires_grad=False))

    def feed_forward(self, x: Tensor) -> Tensor:
        return self.ff_out(torch.nn.functional.gelu(self.ff_in(rms_norm(x, self.norm3)), approximate="tanh"))

    def forward(self, t_vid: TokenSeq, t_img: TokenSeq, text_ctx: Tensor, ref_pooled: Tensor,
                layer: int, ctrl: "SharingController | None" = None) -> tuple[Tensor, Tensor]:
        n = len(t_vid)
        h = rms_norm(torch.cat([t_vid.tokens, t_img.tokens], dim=0), self.norm1)
        o_vid, o_img, internals = self.attn(TokenSeq(h[:n], t_vid.positions), TokenSeq(h[n:], t_img.positions))
        if ctrl is not None:
            o_vid = ctrl.on_self_attention(layer, internals, o_vid, self.attn)
        x_vid = t_vid.tokens + o_vid
        x_img = t_img.tokens + o_img
        o, cross = self.cross(rms_norm(x_vid, self.norm2), text_ctx, ref_pooled)
        if ctrl is not None:
            ctrl.on_cross_attention(layer, cross)
        x_vid = x_vid + o
        x = torch.cat([x_vid, x_img], dim=0)
        x = x + self.feed_forward(x)
        return x[:n], x[n:]


class DiT(nn.Module):
    def __init__(self, cfg: DitConfig, adapter_seed: int = 1):
        super().__init__()
        self.cfg = cfg
        base = Rng(cfg.base_seed)
        adapters = Rng(adapter_seed)
        d, c, pa = cfg.d, cfg.c, cfg.patch_area
        ph, pw = cfg.patch[1], cfg.patch[2]

        n_in = cfg.video_in_channels * pa
        vw = base.child(100).normal(d, n_in, std=1.0 / math.sqrt(n_in))
        self.video_patch = Patchifier(cfg.video_in_channels, d, ph, pw, vw, torch.zeros(d))
        # reference patchifier starts as the video patchifier's z_vid columns
        self.ref_patch = Patchifier(c, d, ph, pw, vw[:, : c * pa].clone(), torch.zeros(d))
        if not cfg.literal_concat:
            hw = base.child(101).normal(d, c * pa, std=1.0 / math.sqrt(c * pa))
            self.hand_patch = Patchifier(c, d, ph, pw, hw, torch.zeros(d))
            self.hand_proj_weight = nn.Parameter(torch.zeros(d, d))
            self.hand_proj_bias = nn.Parameter(torch.zeros(d))

        frozen = lambda t: nn.Parameter(t, requires_grad=False)  # noqa: E731
        self.time_weight = frozen(base.child(102).normal(d, d, std=1.0 / math.sqrt(d)))
        self.text_embed = frozen(base.child(103).normal(cfg.vocab, cfg.text_dim))
        self.text_weight = frozen(base.child(104).normal(d, cfg.text_dim, std=1.0 / math.sqrt(cfg.text_dim)))
        self.blocks = nn.ModuleList(Block(cfg, base.child(200 + i), adapters.child(200 + i)) for i in range(cfg.L))
        self.out_norm = frozen(torch.ones(d))
        self.head_weight = frozen(base.child(105).normal(c * pa, d, std=1.0 / math.sqrt(d)))

    # -- parameter bookkeeping -------------------------------------------------

    def trainable_state(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen_state(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def load_trainable_state(self, state: dict[str, Tensor]) -> None:
        own = self.trainable_state()
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ConfigError(f"adapter state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        with torch.no_grad():
            for name, p in own.items():
                if p.shape != state[name].shape:
                    raise ConfigError(f"{name}: shape {tuple(state[name].shape)} != {tuple(p.shape)}")
                p.copy_(state[name])

    def base_digest(self) -> str:
        return tensor_digest([p for _, p in sorted(self.frozen_state().items())])

    def set_adapters_enabled(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, LoraLinear):
                m.adapters_enabled = enabled

    # -- forward ----------------------------------------------------------------

    def patchify_video(self, bundle: ConditionBundle) -> TokenSeq:
        cfg = self.cfg
        parts = [bundle.z_vid, bundle.m, bundle.z_pose]
        if cfg.literal_concat:
            parts.append(bundle.z_hand)
        tokens = self.video_patch(torch.cat(parts, dim=0))
        if not cfg.literal_concat:
            hand = self.hand_patch(bundle.z_hand)
            tokens = tokens + linear(hand, self.hand_proj_weight, self.hand_proj_bias)
        _, f, h, w = bundle.z_vid.shape
        return TokenSeq(tokens, video_positions(f, h // cfg.patch[1], w // cfg.patch[2]))

    def patchify_ref(self, z_img: Tensor, f: int) -> TokenSeq:
        cfg = self.cfg
        _, _, h, w = z_img.shape
        gh, gw = h // cfg.patch[1], w // cfg.patch[2]
        return TokenSeq(self.ref_patch(z_img), image_positions(gh, gw, f, cfg.image_shift))

    def text_context(self, caption: Tensor) -> Tensor:
        return linear(self.text_embed[caption], self.text_weight)

    def time_embedding(self, t: float | Tensor) -> Tensor:
        return linear(sinusoidal_embedding(t, self.cfg.d)[None], self.time_weight)[0]

    def forward(self, bundle: ConditionBundle, t: float | Tensor, ctrl: "SharingController | None" = None) -> Tensor:
        cfg = self.cfg
        c, f, h, w = bundle.z_vid.shape
        t_vid = self.patchify_video(bundle)
        t_img = self.patchify_ref(bundle.z_img, f)
        ref_pooled = t_img.tokens.mean(dim=0)
        text_ctx = self.text_context(bundle.caption)
        emb = self.time_embedding(t)
        x_vid, x_img = t_vid.tokens + emb, t_img.tokens + emb
        for i, block in enumerate(self.blocks):
            x_vid, x_img = block(TokenSeq(x_vid, t_vid.positions), TokenSeq(x_img, t_img.positions),
                                 text_ctx, ref_pooled, i + 1, ctrl)
        out = linear(rms_norm(x_vid, self.out_norm), self.head_weight)
        return unpatch_vectors(out, c, f, h, w, cfg.patch[1], cfg.patch[2])


def dit_forward(model: DiT, bundle: ConditionBundle, t: float, ctrl: "SharingController | None" = None) -> Tensor:
    return model(bundle, t, ctrl)
