"""Procedural stick-figure videos with aligned pose, hand-normal and mask renders.

A scene is a static textured background plus a 6-joint figure (neck, pelvis,
two elbows, two hands) with a head disc drawn above the neck. Every render is
quantised to multiples of 1/255 so PPM export is lossless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ShapeError

JOINTS = ("neck", "pelvis", "l_elbow", "l_hand", "r_elbow", "r_hand")
BONES = ((0, 1), (0, 2), (2, 3), (0, 4), (4, 5))
BONE_COLORS = np.array(
    [[1.0, 0.2, 0.2], [1.0, 0.6, 0.0], [1.0, 1.0, 0.2], [0.2, 1.0, 0.2], [0.2, 1.0, 1.0]]
)
HAND_KP_COLOR = np.array([1.0, 0.2, 1.0])
# per-frame motion parameters
MOTION_PARAMS = ("dx", "dy", "torso", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow")

VOCAB_SIZE = 32
CAPTION_LEN = 8
BOS, STYLE, SUBJECT = 1, 2, 3
HAND_PATCH = 5


@dataclass(frozen=True)
class Appearance:
    torso_color: tuple[float, float, float]
    arm_color: tuple[float, float, float]
    head_color: tuple[float, float, float]
    hand_color: tuple[float, float, float]
    torso_len: float  # fractions of frame height
    upper_arm: float
    forearm: float


@dataclass
class SceneSpec:
    seed: int
    appearance: Appearance
    motion_script: np.ndarray  # [F, len(MOTION_PARAMS)]
    background_id: int
    caption_tokens: list[int]
    subject_token_indices: list[int] = field(default_factory=lambda: [2])

    def __post_init__(self):
        if not self.subject_token_indices:
            raise ValueError("subject token index set is empty")
        if any(i < 0 or i >= len(self.caption_tokens) for i in self.subject_token_indices):
            raise ValueError(f"subject indices {self.subject_token_indices} outside caption of length {len(self.caption_tokens)}")


@dataclass
class Sample:
    video: Tensor  # [3, F, H, W]
    pose: Tensor  # [3, F, H, W]
    hand: Tensor  # [3, F, H, W]
    reference: Tensor  # [3, H, W]
    gt_subject_mask: Tensor  # [F, H, W] in {0, 1}
    spec: SceneSpec
    clamped: bool = False

    @property
    def frames(self) -> int:
        return self.video.shape[1]


@dataclass(frozen=True)
class DataConfig:
    frames: int = 17
    height: int = 64
    width: int = 64


def _q8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _palette_color(rng: np.random.Generator) -> tuple[float, float, float]:
    hue = rng.random()
    rgb = np.clip(np.abs((hue * 6.0 + np.array([0.0, 4.0, 2.0])) % 6.0 - 3.0) - 1.0, 0.0, 1.0)
    rgb = 0.25 + 0.7 * rgb
    return tuple(float(v) for v in np.round(rgb * 255) / 255)


def random_appearance(rng: np.random.Generator) -> Appearance:
    return Appearance(
        torso_color=_palette_color(rng),
        arm_color=_palette_color(rng),
        head_color=_palette_color(rng),
        hand_color=_palette_color(rng),
        torso_len=float(rng.uniform(0.26, 0.32)),
        upper_arm=float(rng.uniform(0.14, 0.18)),
        forearm=float(rng.uniform(0.12, 0.16)),
    )


def random_motion(rng: np.random.Generator, F: int, amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(F, dtype=np.float64)[:, None]
    freq = rng.uniform(0.05, 0.25, size=(1, len(MOTION_PARAMS)))
    phase = rng.uniform(0, 2 * math.pi, size=(1, len(MOTION_PARAMS)))
    amp = np.array([[0.12, 0.05, 0.2, 0.9, 0.9, 0.9, 0.9]]) * amplitude
    return amp * np.sin(2 * math.pi * freq * t + phase)


def caption_for(appearance: Appearance, background_id: int) -> list[int]:
    def bucket(color, lo):
        return lo + int(np.argmax(color))

    return [
        BOS,
        STYLE,
        SUBJECT,
        bucket(appearance.torso_color, 8),
        bucket(appearance.arm_color, 11),
        bucket(appearance.head_color, 14),
        17 + background_id % 8,
        25 + (background_id // 8) % 7,
    ]


def default_spec(seed: int, frames: int = 17) -> SceneSpec:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    appearance = random_appearance(rng)
    background_id = int(rng.integers(0, 2**31 - 1))
    motion = random_motion(rng, frames)
    return SceneSpec(
        seed=seed,
        appearance=appearance,
        motion_script=motion,
        background_id=background_id,
        caption_tokens=caption_for(appearance, background_id),
        subject_token_indices=[2],
    )


def sibling_spec(spec: SceneSpec) -> SceneSpec:
    """Same appearance and background, independently drawn motion."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed, spawn_key=(1,))))
    return replace(spec, motion_script=random_motion(rng, max(1, len(spec.motion_script))))


def render_background(background_id: int, H: int, W: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(background_id, spawn_key=(7,))))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy /= H
    xx /= W
    base = rng.uniform(0.2, 0.8, size=3)
    img = np.broadcast_to(base[:, None, None], (3, H, W)).copy()
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(1.5, 6.0)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.04, 0.15, size=3)
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        img += amp[:, None, None] * wave[None]
    cy, cx = rng.uniform(0, 1, size=2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.05)
    img += rng.uniform(-0.2, 0.2, size=3)[:, None, None] * blob[None]
    return np.clip(img, 0.05, 0.95)


def joint_positions(appearance: Appearance, params: np.ndarray, H: int, W: int) -> np.ndarray:
    """Joint (x, y) pixel coordinates ``[6, 2]`` for one frame's motion params."""
    dx, dy, torso, ls, le, rs, re = params
    neck = np.array([W * (0.5 + dx), H * (0.3 + dy)])
    down = math.pi / 2 + torso

    def step(origin, angle, length):
        return origin + length * H * np.array([math.cos(angle), math.sin(angle)])

    pelvis = step(neck, down, appearance.torso_len)
    la = down + math.pi / 4 + ls
    ra = down - math.pi / 4 + rs
    l_elbow = step(neck, la, appearance.upper_arm)
    l_hand = step(l_elbow, la + le, appearance.forearm)
    r_elbow = step(neck, ra, appearance.upper_arm)
    r_hand = step(r_elbow, ra + re, appearance.forearm)
    return np.stack([neck, pelvis, l_elbow, l_hand, r_elbow, r_hand])


def segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from pixel centres to the segment ``a -> b`` (coordinates in pixels)."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    u = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + u * ab[0]), py - (a[1] + u * ab[1]))


def _hand_box(center: np.ndarray, H: int, W: int) -> tuple[slice, slice, int, int]:
    cx, cy = int(round(center[0])), int(round(center[1]))
    r = HAND_PATCH // 2
    y0, y1 = max(cy - r, 0), min(cy + r + 1, H)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, W)
    return slice(y0, y1), slice(x0, x1), cy, cx


def render_frame(appearance: Appearance, joints: np.ndarray, background: np.ndarray):
    """Return (video, pose, hand, mask) arrays for one frame."""
    _, H, W = background.shape
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    px = px + 0.5
    py = py + 0.5
    video = background.copy()
    pose = np.zeros_like(background)
    hand = np.zeros_like(background)
    mask = np.zeros((H, W), dtype=bool)
    j = joints + 0.5  # joints sit on pixel centres
    limb_r = max(1.6, 0.032 * H)
    torso_r = max(2.2, 0.05 * H)

    def paint(region, color):
        video[:, region] = np.asarray(color)[:, None]
        mask[region] = True

    paint(segment_distance(px, py, j[0], j[1]) <= torso_r, appearance.torso_color)
    for a, b in BONES[1:]:
        paint(segment_distance(px, py, j[a], j[b]) <= limb_r, appearance.arm_color)
    up = j[0] - j[1]
    up /= np.linalg.norm(up) + 1e-9
    head_r = max(2.5, 0.07 * H)
    head_c = j[0] + up * (head_r + 0.5)
    paint(np.hypot(px - head_c[0], py - head_c[1]) <= head_r, appearance.head_color)

    for (a, b), color in zip(BONES, BONE_COLORS):
        line = segment_distance(px, py, j[a], j[b]) <= 1.0
        pose[:, line] = color[:, None]
    for hand_idx, elbow_idx in ((3, 2), (5, 4)):
        kp = np.hypot(px - j[hand_idx][0], py - j[hand_idx][1]) <= 1.0
        pose[:, kp] = HAND_KP_COLOR[:, None]
        ys, xs, cy, cx = _hand_box(joints[hand_idx], H, W)
        if ys.start >= ys.stop or xs.start >= xs.stop:
            continue
        video[:, ys, xs] = np.asarray(appearance.hand_color)[:, None, None]
        mask[ys, xs] = True
        fore = joints[hand_idx] - joints[elbow_idx]
        theta = math.atan2(fore[1], fore[0])
        gy, gx = np.mgrid[ys, xs].astype(np.float64)
        along = ((gx - cx) * math.cos(theta) + (gy - cy) * math.sin(theta)) / (HAND_PATCH / 2)
        hand[0, ys, xs] = 0.5 + 0.45 * math.cos(theta)
        hand[1, ys, xs] = 0.5 + 0.45 * math.sin(theta)
        hand[2, ys, xs] = 0.55 + 0.4 * np.clip(along, -1, 1)
    return video, pose, hand, mask


def generate_scene(spec: SceneSpec, F: int, H: int, W: int) -> Sample:
    if H % 8 or W % 8:
        raise ShapeError(f"frame size {H}x{W} must be divisible by 8")
    if F < 1 or len(spec.motion_script) != F:
        raise ShapeError(f"motion script has {len(spec.motion_script)} frames, expected F={F}")
    background = _q8(render_background(spec.background_id, H, W))
    clamped = False
    frames = []
    for params in spec.motion_script:
        joints = joint_positions(spec.appearance, params, H, W)
        inside = np.clip(joints, [0, 0], [W - 1, H - 1])
        clamped |= bool(np.any(inside != joints))
        frames.append(render_frame(spec.appearance, inside, background))
    video = np.stack([f[0] for f in frames], axis=1)
    pose = np.stack([f[1] for f in frames], axis=1)
    hand = np.stack([f[2] for f in frames], axis=1)
    mask = np.stack([f[3] for f in frames], axis=0)

    sib = sibling_spec(spec)
    ref_joints = np.clip(joint_positions(spec.appearance, sib.motion_script[0], H, W), [0, 0], [W - 1, H - 1])
    reference = render_frame(spec.appearance, ref_joints, background)[0]

    def t(x):
        return torch.from_numpy(_q8(x).astype(np.float32))

    return Sample(
        video=t(video),
        pose=t(pose),
        hand=t(hand),
        reference=t(reference),
        gt_subject_mask=torch.from_numpy(mask.astype(np.float32)),
        spec=spec,
        clamped=clamped,
    )


def make_dataset(n_scenes: int, cfg: DataConfig, seed: int) -> list[Sample]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    root = np.random.SeedSequence(seed)
    seeds = [int(ss.generate_state(1, dtype=np.uint64)[0]) for ss in root.spawn(n_scenes)]
    return [generate_scene(default_spec(s, cfg.frames), cfg.frames, cfg.height, cfg.width) for s in seeds]


def split(samples: list) -> tuple[list, list]:
    """Even indices train, odd indices validate."""
    return samples[0::2], samples[1::2]


# ---------------------------------------------------------------- disk format


def _meta_lines(sample: Sample) -> list[str]:
    s, a = sample.spec, sample.spec.appearance
    F, H, W = sample.video.shape[1:]
    items = {
        "seed": s.seed,
        "frames": F,
        "height": H,
        "width": W,
        "background_id": s.background_id,
        "caption_tokens": ",".join(map(str, s.caption_tokens)),
        "subject_token_indices": ",".join(map(str, s.subject_token_indices)),
        "torso_color": ",".join(repr(v) for v in a.torso_color),
        "arm_color": ",".join(repr(v) for v in a.arm_color),
        "head_color": ",".join(repr(v) for v in a.head_color),
        "hand_color": ",".join(repr(v) for v in a.hand_color),
        "torso_len": repr(a.torso_len),
        "upper_arm": repr(a.upper_arm),
        "forearm": repr(a.forearm),
        "clamped": int(sample.clamped),
        "motion": ";".join(",".join(repr(float(v)) for v in row) for row in s.motion_script),
    }
    return [f"{k}={v}" for k, v in items.items()]


def export_sample(sample: Sample, directory: str | Path) -> None:
    from .io import write_ppm

    d = Path(directory)
    for name, video in (("video", sample.video), ("pose", sample.pose), ("hand", sample.hand)):
        (d / name).mkdir(parents=True, exist_ok=True)
        for i in range(video.shape[1]):
            write_ppm(d / name / f"frame_{i:04d}.ppm", video[:, i])
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(sample.gt_subject_mask.shape[0]):
        write_ppm(d / "masks" / f"frame_{i:04d}.ppm", sample.gt_subject_mask[i].expand(3, -1, -1))
    write_ppm(d / "reference.ppm", sample.reference)
    (d / "meta.txt").write_text("\n".join(_meta_lines(sample)) + "\n")


def read_meta(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def load_sample(directory: str | Path) -> Sample:
    from .io import read_frames, read_ppm

    d = Path(directory)
    meta = read_meta(d / "meta.txt")
    appearance = Appearance(
        torso_color=_floats(meta["torso_color"]),
        arm_color=_floats(meta["arm_color"]),
        head_color=_floats(meta["head_color"]),
        hand_color=_floats(meta["hand_color"]),
        torso_len=float(meta["torso_len"]),
        upper_arm=float(meta["upper_arm"]),
        forearm=float(meta["forearm"]),
    )
    motion = np.array([_floats(row) for row in meta["motion"].split(";")], dtype=np.float64)
    spec = SceneSpec(
        seed=int(meta["seed"]),
        appearance=appearance,
        motion_script=motion,
        background_id=int(meta["background_id"]),
        caption_tokens=[int(v) for v in meta["caption_tokens"].split(",")],
        subject_token_indices=[int(v) for v in meta["subject_token_indices"].split(",")],
    )
    masks = read_frames(d / "masks")[0]
    return Sample(
        video=read_frames(d / "video"),
        pose=read_frames(d / "pose"),
        hand=read_frames(d / "hand"),
        reference=read_ppm(d / "reference.ppm"),
        gt_subject_mask=(masks > 0.5).to(torch.float32),
        spec=spec,
        clamped=bool(int(meta.get("clamped", "0"))),
    )


def load_dataset(root: str | Path) -> list[Sample]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "meta.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {root}")
    return [load_sample(p) for p in dirs]
