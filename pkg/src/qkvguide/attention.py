"""Scaled dot-product, multi-head, and decoupled text+image cross-attention.

All functions return the softmax weights next to the output; callers that
guide or inspect attention need them, so they are never fused away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

Branch = Literal["text", "image", "self"]
BRANCHES: tuple[str, ...] = ("text", "image", "self")


@dataclass(frozen=True)
class AttentionMap:
    """Softmax weights of one attention call for one batch slot.

    ``weights`` has shape ``[heads, Nq, Nkv]``; each row sums to one.
    """

    weights: np.ndarray
    layer_id: str
    step: int
    branch: Branch

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeError(f"attention map must be [heads, Nq, Nkv], got {self.weights.shape}")
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.step < 0:
            raise ValueError("step must be >= 0")


@dataclass(frozen=True)
class AttentionWeights:
    """Projections of a standard attention layer (no biases)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class DecoupledWeights:
    """Text and image key/value projections sharing one query projection.

    The image branch adds ``lambda_image`` times its attention output to the
    text branch before the shared output projection.
    """

    w_q: np.ndarray
    w_k_text: np.ndarray
    w_v_text: np.ndarray
    w_k_image: np.ndarray
    w_v_image: np.ndarray
    w_out: np.ndarray
    lambda_image: float = 1.0

    def __post_init__(self):
        inner = self.w_q.shape[1]
        for name in ("w_k_text", "w_v_text", "w_k_image", "w_v_image"):
            if getattr(self, name).shape[1] != inner:
                raise ShapeError(
                    f"{name} projects to {getattr(self, name).shape[1]} dims, query projects to {inner}"
                )
        if self.w_out.shape[0] != inner:
            raise ShapeError(f"w_out expects {self.w_out.shape[0]} inputs, attention yields {inner}")
        if not self.lambda_image >= 0:
            raise ConfigError("image branch scale must be >= 0", "guidance.lambda_image")

    def with_lambda(self, lam: float) -> "DecoupledWeights":
        return DecoupledWeights(
            self.w_q, self.w_k_text, self.w_v_text, self.w_k_image, self.w_v_image, self.w_out, lam
        )

    def text_weights(self) -> AttentionWeights:
        return AttentionWeights(self.w_q, self.w_k_text, self.w_v_text, self.w_out)


def scaled_dot_attention(q, k, v) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v for one head. Returns ``(output, weights)``."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("scaled_dot_attention expects rank-2 q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q {q.shape} and k {k.shape} disagree on head dim")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k {k.shape} and v {v.shape} disagree on key count")
    d = q.shape[1]
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    weights = T.softmax_rows(logits)
    return T.matmul(weights, v), weights


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[N, heads*d] -> [heads, N, d]"""
    n, dim = x.shape
    if heads <= 0 or dim % heads:
        raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
    return np.ascontiguousarray(x.reshape(n, heads, dim // heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """[heads, N, d] -> [N, heads*d]"""
    h, n, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * d))


def attend_heads(q, k, v, heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head attention on already projected ``[N, dim]`` operands.

    Returns the merged ``[Nq, dim]`` output and ``[heads, Nq, Nkv]`` weights.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    outs, maps = [], []
    for h in range(heads):
        o, w = scaled_dot_attention(qh[h], kh[h], vh[h])
        outs.append(o)
        maps.append(w)
    return merge_heads(np.stack(outs)), np.stack(maps)


def multi_head_attention(x, context, weights: AttentionWeights, heads: int):
    """Project, attend per head, merge, and output-project.

    ``context=None`` makes this self-attention over ``x``.
    """
    x = T.as_tensor(x)
    ctx = x if context is None else T.as_tensor(context)
    q = T.matmul(x, weights.w_q)
    k = T.matmul(ctx, weights.w_k)
    v = T.matmul(ctx, weights.w_v)
    out, maps = attend_heads(q, k, v, heads)
    return T.matmul(out, weights.w_out), maps


def combine_branches(text_out: np.ndarray, image_out: np.ndarray, lam: float) -> np.ndarray:
    return T.add(text_out, T.scale(image_out, lam))


def decoupled_cross_attention(x, text_ctx, image_ctx, weights: DecoupledWeights, heads: int = 1):
    """Text and image cross-attention with a shared query, summed as text + lambda * image.

    Returns ``(output, text_maps, image_maps)``.
    """
    x = T.as_tensor(x)
    text_ctx, image_ctx = T.as_tensor(text_ctx), T.as_tensor(image_ctx)
    if text_ctx.shape[1] != weights.w_k_text.shape[0]:
        raise ShapeError(f"text context dim {text_ctx.shape[1]} != projection input {weights.w_k_text.shape[0]}")
    if image_ctx.shape[1] != weights.w_k_image.shape[0]:
        raise ShapeError(
            f"image context dim {image_ctx.shape[1]} != projection input {weights.w_k_image.shape[0]}"
        )
    q = T.matmul(x, weights.w_q)
    text_out, text_maps = attend_heads(
        q, T.matmul(text_ctx, weights.w_k_text), T.matmul(text_ctx, weights.w_v_text), heads
    )
    image_out, image_maps = attend_heads(
        q, T.matmul(image_ctx, weights.w_k_image), T.matmul(image_ctx, weights.w_v_image), heads
    )
    hidden = combine_branches(text_out, image_out, weights.lambda_image)
    return T.matmul(hidden, weights.w_out), text_maps, image_maps
