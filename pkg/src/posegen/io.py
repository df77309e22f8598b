"""PPM frames, flat key=value configs and CSV helpers."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import Tensor


def to_u8(img: Tensor) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] to ``[H, W, 3]`` uint8."""
    arr = img.detach().to(torch.float64).clamp(0, 1).numpy()
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | Path, img: Tensor) -> None:
    data = to_u8(img)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    arr = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_frames(directory: str | Path, video: Tensor, prefix: str = "frame") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(video.shape[1]):
        write_ppm(d / f"{prefix}_{i:04d}.ppm", video[:, i])


def read_frames(directory: str | Path) -> Tensor:
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no PPM frames in {directory}")
    return torch.stack([read_ppm(p) for p in paths], dim=1)


def quantize(video: Tensor) -> Tensor:
    """Round to the 8-bit grid PPM stores, as float32."""
    return torch.round(video.detach().to(torch.float64).clamp(0, 1) * 255.0).div(255.0).to(torch.float32)


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(items: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k}={v}" for k, v in items.items()]
    return "\n".join(lines) + "\n"
