"""Independent float64 reference implementations used by the tests."""
from __future__ import annotations

import math

import numpy as np
import torch


def fd_grad(fn, arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = fn(*arrays)
            a[idx] = old - h
            down = fn(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def softmax(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx].astype(np.float64)
        e = np.array([math.exp(v - row.max()) for v in row])
        out[idx] = e / e.sum()
    return out


def rope_axis_split(d: int) -> tuple[int, int, int]:
    p = d // 2
    side = p // 3
    return p - 2 * side, side, side


def rope(x: np.ndarray, pos: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Explicit per-token 2x2 rotations of interleaved pairs."""
    n, d = x.shape[-2], x.shape[-1]
    out = np.array(x, dtype=np.float64)
    split = rope_axis_split(d)
    for tok in range(n):
        pair = 0
        for axis, k in enumerate(split):
            for i in range(k):
                theta = pos[tok, axis] * base ** (-i / k)
                c, s = math.cos(theta), math.sin(theta)
                a, b = x[..., tok, 2 * pair], x[..., tok, 2 * pair + 1]
                out[..., tok, 2 * pair] = a * c - b * s
                out[..., tok, 2 * pair + 1] = a * s + b * c
                pair += 1
    return out


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Loop-based single-head attention, applied per head."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    H, n, hd = q.shape
    out = np.zeros((H, n, v.shape[-1]))
    for h in range(H):
        for i in range(n):
            logits = np.array([q[h, i] @ k[h, j] / math.sqrt(hd) for j in range(k.shape[1])])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[h, i] = sum(w[j] * v[h, j] for j in range(k.shape[1]))
    return out


def otsu_exhaustive(values: np.ndarray, bins: int = 64) -> float:
    """Try every interior bin edge, keep the first maximiser of between-class variance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if lo == hi:
        return float(lo)
    scores = []
    for i in range(1, bins):
        thr = lo + (hi - lo) * i / bins
        below, above = v[v <= thr], v[v > thr]
        if len(below) == 0 or len(above) == 0:
            scores.append((-math.inf, thr))
            continue
        w0, w1 = len(below) / len(v), len(above) / len(v)
        scores.append((w0 * w1 * (below.mean() - above.mean()) ** 2, thr))
    best = max(sc for sc, _ in scores)
    best_thr = next(thr for sc, thr in scores if sc >= best - 1e-9 * abs(best))
    return float(best_thr)


def shared_attention_literal(q, k_src, v_src, m_src) -> np.ndarray:
    q, k_src, v_src = (np.asarray(t, dtype=np.float64) for t in (q, k_src, v_src))
    H, n, hd = q.shape
    out = np.zeros((H, n, v_src.shape[-1]))
    keep = 1.0 - np.asarray(m_src, dtype=np.float64)
    for h in range(H):
        logits = q[h] @ k_src[h].T / math.sqrt(hd)
        w = softmax(logits) * keep[None, :]
        out[h] = w @ v_src[h]
    return out


def to_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float64).numpy()
