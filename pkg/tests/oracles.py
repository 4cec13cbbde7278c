"""Independent reference implementations used to cross-check the library.

Everything here is deliberately written the slow, obvious way (loops,
enumeration, bisection) and never calls the code paths it verifies.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def pixel_iou(a, b, size: int = 64) -> float:
    """Rasterized IoU for integer-coordinate boxes inside size x size."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    grid_a[int(a.y0) : int(a.y1), int(a.x0) : int(a.x1)] = True
    grid_b[int(b.y0) : int(b.y1), int(b.x0) : int(b.x1)] = True
    union = np.count_nonzero(grid_a | grid_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(grid_a & grid_b) / union


def radius_by_bisection(h: float, w: float, t: float, iters: int = 200) -> float:
    """Max radius keeping worst-case IoU >= t, solved numerically per case."""

    def solve(f, lo, hi):
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if f(mid) >= t:
                lo = mid
            else:
                hi = mid
        return lo

    def iou_grow(r):
        return (w * h) / ((w + 2 * r) * (h + 2 * r))

    def iou_shrink(r):
        return max(w - 2 * r, 0.0) * max(h - 2 * r, 0.0) / (w * h)

    def iou_shift(r):
        inter = max(w - r, 0.0) * max(h - r, 0.0)
        return inter / (2 * w * h - inter)

    return min(
        solve(iou_grow, 0.0, 10.0 * (w + h)),
        solve(iou_shrink, 0.0, min(w, h) / 2.0),
        solve(iou_shift, 0.0, min(w, h)),
    )


def splat_max(rows: int, cols: int, splats) -> np.ndarray:
    """Per-cell max over Gaussian kernels, evaluated with plain loops.

    ``splats`` is a list of ((gx, gy), sigma) pairs.
    """
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            for (gx, gy), sigma in splats:
                val = math.exp(-((c - gx) ** 2 + (r - gy) ** 2) / (2.0 * sigma * sigma))
                out[r, c] = max(out[r, c], val)
    return out


def peaks_by_scan(data: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """All strict 8-neighbor maxima >= threshold as (row, col, value)."""
    rows, cols = data.shape
    found = []
    for r in range(rows):
        for c in range(cols):
            val = data[r, c]
            if val < threshold:
                continue
            is_peak = True
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols and data[rr, cc] >= val:
                        is_peak = False
            if is_peak:
                found.append((r, c, float(val)))
    return found


def greedy_consistent_subset(boxes, scores, iou_fn, thresh) -> list[int]:
    """The unique subset consistent with greedy suppression, found by
    checking every subset instead of running the greedy loop."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    for bits in itertools.product((False, True), repeat=n):
        keep = {i for i in range(n) if bits[i]}
        ok = True
        for rank, i in enumerate(order):
            suppressed = any(
                j in keep and iou_fn(boxes[i], boxes[j]) > thresh
                for j in order[:rank]
            )
            if (i in keep) == suppressed:
                ok = False
                break
        if ok:
            return [i for i in order if i in keep]
    raise AssertionError("no greedy-consistent subset found")


def exhaustive_match(sims: np.ndarray, threshold: float) -> list[int]:
    """Assignment a score-ordered greedy matcher must produce, found by
    enumerating every injective assignment and taking the one whose
    (similarity desc, gt index asc) signature is lexicographically best.

    ``sims[i, j]`` is the similarity of ranked prediction i to gt j.
    Returns one gt index (or -1) per prediction.
    """
    n_pred, n_gt = sims.shape
    best_assign: list[int] | None = None
    best_sig: tuple | None = None
    choices = [[-1] + list(range(n_gt)) for _ in range(n_pred)]
    for assign in itertools.product(*choices):
        used = [g for g in assign if g >= 0]
        if len(used) != len(set(used)):
            continue
        if any(g >= 0 and sims[i, g] < threshold for i, g in enumerate(assign)):
            continue
        sig = tuple(
            (sims[i, g], -g) if g >= 0 else (-math.inf, 0)
            for i, g in enumerate(assign)
        )
        if best_sig is None or sig > best_sig:
            best_sig = sig
            best_assign = list(assign)
    assert best_assign is not None
    return best_assign


def forward_straightline(model, image_embeddings, loc_embedding):
    """Naive re-computation of the aligner forward pass (loops, no cache)."""
    cfg = model.config
    d = cfg.dim
    g = cfg.grid
    p = model.params
    scale = 1.0 / math.sqrt(d)

    x = np.array(image_embeddings, dtype=float).reshape(g * g, d)
    if cfg.use_positional:
        quarter = d // 4
        pe = np.zeros((g * g, d))
        for idx in range(g * g):
            row, col = divmod(idx, g)
            for j in range(quarter):
                freq = 10000.0 ** (-j / quarter)
                pe[idx, j] = math.sin(col * freq)
                pe[idx, quarter + j] = math.cos(col * freq)
                pe[idx, 2 * quarter + j] = math.sin(row * freq)
                pe[idx, 3 * quarter + j] = math.cos(row * freq)
        x = x + pe
    tokens = np.concatenate([np.array(loc_embedding, dtype=float)[None, :], p["token_embed"]])

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    def attend(q_in, kv_in, prefix):
        q = q_in @ p[prefix + ".wq"]
        k = kv_in @ p[prefix + ".wk"]
        v = kv_in @ p[prefix + ".wv"]
        out = np.zeros_like(q_in)
        for i in range(q.shape[0]):
            weights = softmax(np.array([q[i] @ k[j] * scale for j in range(k.shape[0])]))
            mixed = sum(weights[j] * v[j] for j in range(k.shape[0]))
            out[i] = q_in[i] + mixed @ p[prefix + ".wo"]
        return out

    for i in range(cfg.blocks):
        tokens = attend(tokens, tokens, f"b{i}.sa")
        tokens = attend(tokens, x, f"b{i}.ti")
        x = attend(x, tokens, f"b{i}.it")
        hidden = np.maximum(tokens @ p[f"b{i}.ffn.w1"] + p[f"b{i}.ffn.b1"], 0.0)
        tokens = tokens + hidden @ p[f"b{i}.ffn.w2"] + p[f"b{i}.ffn.b2"]

    maps = []
    for j in range(3):
        raw = np.array([x[cell] @ tokens[1 + j] * scale for cell in range(g * g)])
        maps.append(p["readout.scale"][j] * raw + p["readout.bias"][j])
    m_logits = maps[0].reshape(g, g)
    h_map = np.log1p(np.exp(-np.abs(maps[1]))) + np.maximum(maps[1], 0.0)
    w_map = np.log1p(np.exp(-np.abs(maps[2]))) + np.maximum(maps[2], 0.0)
    return m_logits, h_map.reshape(g, g), w_map.reshape(g, g)
