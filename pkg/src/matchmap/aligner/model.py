"""Aligner architecture: forward pass and exact manual backward pass.

A four-token sequence (one given prompt token plus three learnable output
tokens for the matching / height / width heads) runs through ``blocks``
rounds of: token self-attention, token->image cross-attention,
image->token cross-attention, then a feed-forward network on the tokens.
All attention is single-head scaled dot-product with residual additions
and no normalization layers, which keeps the backward pass short and
exactly checkable against finite differences.

The three output maps are per-cell dot products between the final image
features and the corresponding final token feature (scaled by 1/sqrt(dim),
then an affine per-map readout): the matching map stays a logit grid, the
height/width maps pass through softplus so they are nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..grid import Heatmap, LogitGrid

OUTPUT_TOKENS = ("match", "height", "width")


@dataclass(frozen=True)
class AlignerConfig:
    dim: int = 64
    grid: int = 32
    blocks: int = 2
    ffn_mult: int = 2
    heads: int = 1
    use_positional: bool = True

    def __post_init__(self) -> None:
        if self.dim < 4 or self.dim % 4 != 0:
            raise ValueError("dim must be a positive multiple of 4")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.ffn_mult < 1:
            raise ValueError("ffn_mult must be >= 1")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")


class AlignerModel:
    """Parameter container; ``params`` keeps declaration order for i/o."""

    def __init__(self, config: AlignerConfig, params: dict[str, np.ndarray]):
        expected = [name for name, _ in param_shapes(config)]
        if list(params.keys()) != expected:
            raise ValueError("parameter set does not match the configuration")
        for name, shape in param_shapes(config):
            arr = params[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite parameter values")
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.version = 0

    def bump_version(self) -> None:
        """Mark parameters as mutated; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "AlignerModel":
        clone = AlignerModel(self.config, {k: v.copy() for k, v in self.params.items()})
        clone.version = self.version
        return clone


def param_shapes(config: AlignerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration-ordered parameter names and shapes."""
    d = config.dim
    m = config.ffn_mult * d
    shapes: list[tuple[str, tuple[int, ...]]] = [("token_embed", (3, d))]
    for i in range(config.blocks):
        for part in ("sa", "ti", "it"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes.append((f"b{i}.{part}.{w}", (d, d)))
        shapes.append((f"b{i}.ffn.w1", (d, m)))
        shapes.append((f"b{i}.ffn.b1", (m,)))
        shapes.append((f"b{i}.ffn.w2", (m, d)))
        shapes.append((f"b{i}.ffn.b2", (d,)))
    shapes.append(("readout.scale", (3,)))
    shapes.append(("readout.bias", (3,)))
    return shapes


def init_model(config: AlignerConfig, seed: int = 0) -> AlignerModel:
    """Randomly initialized model; output projections are damped so the
    residual stream starts close to the identity."""
    rng = np.random.default_rng(seed)
    d = config.dim
    base = d**-0.5
    damp = base / math.sqrt(2.0 * config.blocks)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if name == "readout.scale":
            params[name] = np.ones(shape)
        elif name.endswith((".b1", ".b2")) or name == "readout.bias":
            params[name] = np.zeros(shape)
        elif name.endswith(".wo") or name.endswith(".w2"):
            params[name] = rng.normal(0.0, damp, size=shape)
        else:
            params[name] = rng.normal(0.0, base, size=shape)
    return AlignerModel(config, params)


def positional_encoding(grid: int, dim: int) -> np.ndarray:
    """Fixed 2d sinusoidal encodings, shape (grid*grid, dim)."""
    quarter = dim // 4
    freqs = 10000.0 ** (-np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    xs = xs.reshape(-1, 1) * freqs[None, :]
    ys = ys.reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=1)


@dataclass(frozen=True, eq=False)
class AlignerOutput:
    m_logits: LogitGrid
    h_map: np.ndarray
    w_map: np.ndarray

    def __post_init__(self) -> None:
        for name in ("h_map", "w_map"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.m_logits.rows, self.m_logits.cols):
                raise ValueError(f"{name} shape differs from the logit grid")
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise ValueError(f"{name} must be finite and nonnegative")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def heatmap(self) -> Heatmap:
        return self.m_logits.sigmoid()


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _attend(
    q_in: np.ndarray, kv_in: np.ndarray, p: dict[str, np.ndarray], prefix: str, scale: float
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One residual attention sublayer; returns output and its cache."""
    q = q_in @ p[prefix + ".wq"]
    k = kv_in @ p[prefix + ".wk"]
    v = kv_in @ p[prefix + ".wv"]
    attn = _softmax_rows((q @ k.T) * scale)
    mixed = attn @ v
    out = q_in + mixed @ p[prefix + ".wo"]
    cache = {"q_in": q_in, "kv_in": kv_in, "q": q, "k": k, "v": v, "attn": attn, "mixed": mixed}
    return out, cache


def _attend_backward(
    d_out: np.ndarray,
    cache: dict[str, np.ndarray],
    p: dict[str, np.ndarray],
    prefix: str,
    scale: float,
    grads: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of ``_attend``; returns gradients for (q_in, kv_in)."""
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    grads[prefix + ".wo"] += cache["mixed"].T @ d_out
    d_mixed = d_out @ p[prefix + ".wo"].T
    d_attn = d_mixed @ v.T
    d_v = attn.T @ d_mixed
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    d_scores *= scale
    d_q = d_scores @ k
    d_k = d_scores.T @ q
    grads[prefix + ".wq"] += cache["q_in"].T @ d_q
    grads[prefix + ".wk"] += cache["kv_in"].T @ d_k
    grads[prefix + ".wv"] += cache["kv_in"].T @ d_v
    d_q_in = d_out + d_q @ p[prefix + ".wq"].T
    d_kv_in = d_k @ p[prefix + ".wk"].T + d_v @ p[prefix + ".wv"].T
    return d_q_in, d_kv_in


def aligner_forward(
    model: AlignerModel,
    image_embeddings: np.ndarray,
    loc_embedding: np.ndarray,
) -> tuple[AlignerOutput, dict]:
    """Run the aligner; returns the output maps plus the activation cache
    needed for the exact backward pass."""
    cfg = model.config
    g, d = cfg.grid, cfg.dim
    img = np.asarray(image_embeddings, dtype=np.float64)
    loc = np.asarray(loc_embedding, dtype=np.float64)
    if img.shape != (g, g, d):
        raise ValueError(f"image embeddings must have shape {(g, g, d)}, got {img.shape}")
    if loc.shape != (d,):
        raise ValueError(f"prompt embedding must have shape {(d,)}, got {loc.shape}")
    if not (np.isfinite(img).all() and np.isfinite(loc).all()):
        raise ValueError("aligner inputs must be finite")

    p = model.params
    scale = 1.0 / math.sqrt(d)
    x = img.reshape(g * g, d)
    if cfg.use_positional:
        x = x + positional_encoding(g, d)
    tokens = np.concatenate([loc[None, :], p["token_embed"]], axis=0)

    cache: dict = {
        "model_id": id(model),
        "version": model.version,
        "x0": x,
        "tokens0": tokens,
        "blocks": [],
    }
    for i in range(cfg.blocks):
        block: dict = {}
        tokens, block["sa"] = _attend(tokens, tokens, p, f"b{i}.sa", scale)
        tokens, block["ti"] = _attend(tokens, x, p, f"b{i}.ti", scale)
        x, block["it"] = _attend(x, tokens, p, f"b{i}.it", scale)
        h1 = tokens @ p[f"b{i}.ffn.w1"] + p[f"b{i}.ffn.b1"]
        relu = np.maximum(h1, 0.0)
        block["ffn_in"] = tokens
        block["h1"] = h1
        block["relu"] = relu
        tokens = tokens + relu @ p[f"b{i}.ffn.w2"] + p[f"b{i}.ffn.b2"]
        cache["blocks"].append(block)

    raw = (x @ tokens[1:].T) * scale  # (cells, 3) dot products per output token
    pre = raw * p["readout.scale"][None, :] + p["readout.bias"][None, :]
    cache.update({"x_final": x, "tokens_final": tokens, "raw": raw, "pre": pre})

    m_logits = LogitGrid(pre[:, 0].reshape(g, g))
    h_map = _softplus(pre[:, 1]).reshape(g, g)
    w_map = _softplus(pre[:, 2]).reshape(g, g)
    return AlignerOutput(m_logits, h_map, w_map), cache


def aligner_backward(
    model: AlignerModel,
    cache: dict,
    d_m_logits: np.ndarray,
    d_h_map: np.ndarray,
    d_w_map: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of the forward pass.

    ``d_*`` are upstream gradients w.r.t. the three output maps (the
    softplus on the size maps is handled here).  Returns parameter
    gradients keyed like ``model.params`` plus the prompt-embedding
    gradient.
    """
    if cache.get("model_id") != id(model) or cache.get("version") != model.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    cfg = model.config
    g, d = cfg.grid, cfg.dim
    p = model.params
    scale = 1.0 / math.sqrt(d)

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    pre, raw = cache["pre"], cache["raw"]
    d_pre = np.stack(
        [
            np.asarray(d_m_logits, dtype=np.float64).reshape(g * g),
            np.asarray(d_h_map, dtype=np.float64).reshape(g * g) * _sigmoid(pre[:, 1]),
            np.asarray(d_w_map, dtype=np.float64).reshape(g * g) * _sigmoid(pre[:, 2]),
        ],
        axis=1,
    )
    grads["readout.scale"] += (d_pre * raw).sum(axis=0)
    grads["readout.bias"] += d_pre.sum(axis=0)
    d_raw = d_pre * p["readout.scale"][None, :]

    x, tokens = cache["x_final"], cache["tokens_final"]
    d_x = (d_raw @ tokens[1:]) * scale
    d_tokens = np.zeros_like(tokens)
    d_tokens[1:] = (d_raw.T @ x) * scale

    for i in reversed(range(cfg.blocks)):
        block = cache["blocks"][i]
        # FFN
        grads[f"b{i}.ffn.b2"] += d_tokens.sum(axis=0)
        grads[f"b{i}.ffn.w2"] += block["relu"].T @ d_tokens
        d_relu = d_tokens @ p[f"b{i}.ffn.w2"].T
        d_h1 = d_relu * (block["h1"] > 0)
        grads[f"b{i}.ffn.b1"] += d_h1.sum(axis=0)
        grads[f"b{i}.ffn.w1"] += block["ffn_in"].T @ d_h1
        d_tokens = d_tokens + d_h1 @ p[f"b{i}.ffn.w1"].T
        # image -> tokens
        d_x, d_kv = _attend_backward(d_x, block["it"], p, f"b{i}.it", scale, grads)
        d_tokens = d_tokens + d_kv
        # tokens -> image
        d_tokens, d_kv = _attend_backward(d_tokens, block["ti"], p, f"b{i}.ti", scale, grads)
        d_x = d_x + d_kv
        # token self-attention (queries and keys/values share the input)
        d_tokens, d_kv = _attend_backward(d_tokens, block["sa"], p, f"b{i}.sa", scale, grads)
        d_tokens = d_tokens + d_kv

    grads["token_embed"] += d_tokens[1:]
    d_loc = d_tokens[0].copy()
    return grads, d_loc
