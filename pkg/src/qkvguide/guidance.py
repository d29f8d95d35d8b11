"""Condition guidance (shared KV across batch slots) and mask guidance
(thresholded text cross-attention maps), written as attention processors.

Batch slot roles: ``kv_source_index`` (default 0) is the reference whose keys
and values are shared; ``kv_target_indices`` (default ``{1}``) keep their own
queries but attend over the reference's keys and values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Literal, Protocol, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    AttentionWeights,
    DecoupledWeights,
    attend_heads,
    combine_branches,
    decoupled_cross_attention,
    merge_heads,
    multi_head_attention,
    split_heads,
)
from .errors import ConfigError, InputError, ShapeError

KV_BRANCHES = ("text-cross", "image-cross", "self")
MASK_MODES = ("gated", "hard", "renorm")
ROLES = ("preset", "user")

MaskMode = Literal["gated", "hard", "renorm"]


class CaptureLike(Protocol):
    def record_maps(self, layer_id: str, step: int, branch: str, weights: np.ndarray, masked: bool) -> None: ...

    def record_features(self, layer_id: str, step: int, hidden: np.ndarray) -> None: ...


@dataclass(frozen=True)
class ConditionPair:
    """User prompt P, the preset text condition derived from it, and the style image.

    ``reference_role`` picks which prompt sits in the reference slot (slot 0);
    the other prompt goes to the target slot.
    """

    user_prompt: tuple[str, ...]
    preset_condition: tuple[str, ...]
    style_image: Any
    reference_role: str = "preset"

    def __post_init__(self):
        if not self.user_prompt:
            raise InputError("user prompt is empty after tokenization")
        if not self.preset_condition:
            raise InputError("preset condition is empty after tokenization")
        if self.reference_role not in ROLES:
            raise ConfigError(f"must be one of {ROLES}", "prompts.reference_role")

    @property
    def reference_tokens(self) -> tuple[str, ...]:
        return self.preset_condition if self.reference_role == "preset" else self.user_prompt

    @property
    def target_tokens(self) -> tuple[str, ...]:
        return self.user_prompt if self.reference_role == "preset" else self.preset_condition


@dataclass(frozen=True)
class GuidanceConfig:
    kv_share_enabled: bool = False
    kv_source_index: int = 0
    kv_target_indices: tuple[int, ...] = (1,)
    kv_branches: frozenset[str] = frozenset({"text-cross", "image-cross"})
    mask_enabled: bool = False
    # None means 1/Nkv, the level of a uniform attention row
    tau: float | None = None
    mask_mode: MaskMode = "gated"
    mask_branch: str = "text-cross"
    lambda_image: float = 1.0
    # half-open [start, stop) over sampler step indices; None = every step
    active_steps: tuple[int, int] | None = None
    active_layers: frozenset[str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kv_target_indices", tuple(self.kv_target_indices))
        object.__setattr__(self, "kv_branches", frozenset(self.kv_branches))
        if self.active_layers is not None:
            object.__setattr__(self, "active_layers", frozenset(self.active_layers))
        self.validate()

    def validate(self) -> None:
        if self.kv_source_index < 0:
            raise ConfigError("must be >= 0", "guidance.kv_source_index")
        if not self.kv_target_indices or any(i < 0 for i in self.kv_target_indices):
            raise ConfigError("needs at least one non-negative index", "guidance.kv_target_indices")
        if self.kv_source_index in self.kv_target_indices:
            raise ConfigError("KV source slot cannot also be a target", "guidance.kv_target_indices")
        unknown = self.kv_branches - set(KV_BRANCHES)
        if unknown:
            raise ConfigError(f"unknown branches {sorted(unknown)}; allowed {KV_BRANCHES}", "guidance.kv_branches")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.tau}", "guidance.tau")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"must be one of {MASK_MODES}", "guidance.mask_mode")
        if self.mask_branch != "text-cross":
            raise ConfigError("mask guidance only applies to the text cross-attention branch", "guidance.mask_branch")
        if not 0.0 <= self.lambda_image <= 2.0:
            raise ConfigError(f"must lie in [0, 2], got {self.lambda_image}", "guidance.lambda_image")
        if self.active_steps is not None:
            start, stop = self.active_steps
            if start < 0 or stop < start:
                raise ConfigError("expected [start, stop) with 0 <= start <= stop", "guidance.active_steps")

    @classmethod
    def disabled(cls, **kw) -> "GuidanceConfig":
        return cls(kv_share_enabled=False, mask_enabled=False, **kw)

    def replace(self, **kw) -> "GuidanceConfig":
        return replace(self, **kw)

    def is_active(self, layer_id: str, step: int) -> bool:
        if self.active_steps is not None and not self.active_steps[0] <= step < self.active_steps[1]:
            return False
        if self.active_layers is not None and layer_id not in self.active_layers:
            return False
        return True

    def shares(self, branch: str, layer_id: str, step: int) -> bool:
        return self.kv_share_enabled and branch in self.kv_branches and self.is_active(layer_id, step)

    def masks(self, layer_id: str, step: int) -> bool:
        return self.mask_enabled and self.is_active(layer_id, step)

    def tau_for(self, n_keys: int) -> float:
        return 1.0 / n_keys if self.tau is None else self.tau


@dataclass(frozen=True)
class ThresholdMask:
    mask: np.ndarray
    tau: float
    source_map_id: str = ""


# --- batch construction ---------------------------------------------------


def pad_tokens(tokens: Sequence[str], length: int, pad: str) -> list[str]:
    return list(tokens) + [pad] * (length - len(tokens))


def build_batch(pair: ConditionPair, encoder) -> tuple[np.ndarray, np.ndarray]:
    """Stack reference and target prompt embeddings, duplicate the image features.

    Returns ``(text_ctx [2, Ntok, dim], image_ctx [2, Npatch, dim])``. The
    shorter prompt is padded with ``encoder.pad_token`` so both slots share Ntok.
    """
    ref, tgt = pair.reference_tokens, pair.target_tokens
    n = max(len(ref), len(tgt))
    text = np.stack(
        [
            encoder.encode_text(pad_tokens(ref, n, encoder.pad_token)),
            encoder.encode_text(pad_tokens(tgt, n, encoder.pad_token)),
        ]
    )
    feats = encoder.encode_image(pair.style_image)
    image = np.stack([feats, feats.copy()])
    return text, image


# --- condition guidance ---------------------------------------------------


def share_kv(k_batch, v_batch, cfg: GuidanceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Copy the source slot's keys and values into every target slot.

    Operates on projected ``[B, N, dim]`` tensors; inputs are not modified.
    """
    if not cfg.kv_share_enabled:
        raise ConfigError("share_kv called with KV sharing disabled", "guidance.kv_share_enabled")
    if cfg.kv_source_index in cfg.kv_target_indices:
        raise ConfigError("KV source slot cannot also be a target", "guidance.kv_target_indices")
    k_batch, v_batch = np.asarray(k_batch), np.asarray(v_batch)
    b = k_batch.shape[0]
    if b < 2:
        raise ConfigError("KV sharing needs a batch of at least 2", "guidance.kv_share_enabled")
    if v_batch.shape[0] != b:
        raise ShapeError(f"k batch {k_batch.shape} and v batch {v_batch.shape} differ")
    src = cfg.kv_source_index
    if src >= b or max(cfg.kv_target_indices) >= b:
        raise ConfigError(f"slot index out of range for batch size {b}", "guidance.kv_target_indices")
    k_out, v_out = k_batch.copy(), v_batch.copy()
    for t in cfg.kv_target_indices:
        k_out[t] = k_batch[src]
        v_out[t] = v_batch[src]
    return k_out, v_out


# --- mask guidance --------------------------------------------------------


def _weights_of(m) -> np.ndarray:
    return m.weights if hasattr(m, "weights") else np.asarray(m, dtype=np.float32)


def threshold_map(attn_map, tau: float, source_map_id: str = "") -> ThresholdMask:
    """Binary mask of entries ``>= tau`` (ties are kept)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"must lie in [0, 1], got {tau}", "guidance.tau")
    w = _weights_of(attn_map)
    if not source_map_id and hasattr(attn_map, "layer_id"):
        source_map_id = f"{attn_map.layer_id}@{attn_map.step}/{attn_map.branch}"
    mask = (w >= np.float32(tau)).astype(np.float32)
    return ThresholdMask(mask=mask, tau=float(tau), source_map_id=source_map_id)


def _row_sums(x: np.ndarray) -> np.ndarray:
    # sequential f64 accumulation, same order as the kernels
    return np.cumsum(x.astype(np.float64), axis=-1)[..., -1:]


def masked_weights(weights: np.ndarray, mask: np.ndarray, mode: str) -> np.ndarray:
    """The weight matrix that multiplies V under each mask mode."""
    if weights.shape != mask.shape:
        raise ShapeError(f"map {weights.shape} and mask {mask.shape} differ")
    if mode == "gated":
        return weights * mask
    if mode == "hard":
        return mask.astype(np.float32)
    if mode == "renorm":
        gated = weights * mask
        sums = _row_sums(gated)
        empty = sums == 0.0
        safe = np.where(empty, 1.0, sums)
        renormed = (gated.astype(np.float64) / safe).astype(np.float32)
        # fully masked rows fall back to the untouched row
        return np.where(empty, weights, renormed).astype(np.float32)
    raise ConfigError(f"must be one of {MASK_MODES}", "guidance.mask_mode")


def apply_mask(attn_map, mask: ThresholdMask | np.ndarray, v, mode: str = "gated") -> np.ndarray:
    """Aggregate ``v`` through a thresholded attention map.

    ``gated``: (A * M) v.  ``hard``: M v.  ``renorm``: rownorm(A * M) v.
    Accepts a single ``[Nq, Nkv]`` map with ``v`` ``[Nkv, d]``, or per-head
    ``[heads, Nq, Nkv]`` with ``v`` ``[heads, Nkv, d]``.
    """
    w = _weights_of(attn_map)
    m = mask.mask if isinstance(mask, ThresholdMask) else np.asarray(mask, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    eff = masked_weights(w, m, mode)
    if eff.ndim == 2:
        if v.ndim != 2 or v.shape[0] != eff.shape[1]:
            raise ShapeError(f"map {eff.shape} cannot aggregate v {v.shape}")
        return T.matmul(eff, v)
    if v.ndim != 3 or v.shape[0] != eff.shape[0] or v.shape[1] != eff.shape[2]:
        raise ShapeError(f"map {eff.shape} cannot aggregate v {v.shape}")
    return np.stack([T.matmul(eff[h], v[h]) for h in range(eff.shape[0])])


# --- processors -----------------------------------------------------------


def _project(x_batch: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.stack([T.matmul(x_batch[b], w) for b in range(x_batch.shape[0])])


def _attend_masked(q, k, v, heads: int, tau: float, mode: str) -> tuple[np.ndarray, np.ndarray]:
    _, maps = attend_heads(q, k, v, heads)
    mask = threshold_map(maps, tau)
    out = apply_mask(maps, mask, split_heads(T.as_tensor(v), heads), mode)
    return merge_heads(out), maps


def guided_self_attention(
    x_batch,
    weights: AttentionWeights,
    cfg: GuidanceConfig,
    heads: int,
    layer_id: str = "",
    step: int = 0,
    capture: CaptureLike | None = None,
) -> np.ndarray:
    """Self-attention with optional mutual KV sharing (branch ``self``)."""
    x_batch = T.as_tensor(x_batch)
    q, k, v = _project(x_batch, weights.w_q), _project(x_batch, weights.w_k), _project(x_batch, weights.w_v)
    if cfg.shares("self", layer_id, step):
        k, v = share_kv(k, v, cfg)
    outs, maps = [], []
    for b in range(x_batch.shape[0]):
        o, m = attend_heads(q[b], k[b], v[b], heads)
        outs.append(T.matmul(o, weights.w_out))
        maps.append(m)
    if capture is not None:
        capture.record_maps(layer_id, step, "self", np.stack(maps), False)
    return np.stack(outs)


def guided_cross_attention(
    x_batch,
    text_ctx,
    image_ctx,
    weights: DecoupledWeights,
    cfg: GuidanceConfig,
    heads: int,
    layer_id: str = "",
    step: int = 0,
    capture: CaptureLike | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Decoupled cross-attention with condition and mask guidance.

    Stages: project Q/K/V, share K/V per branch, compute maps, threshold and
    apply the text-branch mask, combine text + lambda * image, output-project.
    Outside the configured step/layer window this reduces to plain decoupled
    cross-attention. Returns ``(output [B, Nq, dim], {"text": maps, "image": maps})``.
    """
    x_batch = T.as_tensor(x_batch)
    text_ctx, image_ctx = T.as_tensor(text_ctx), T.as_tensor(image_ctx)
    if not (x_batch.shape[0] == text_ctx.shape[0] == image_ctx.shape[0]):
        raise ShapeError(
            f"batch sizes differ: x {x_batch.shape}, text {text_ctx.shape}, image {image_ctx.shape}"
        )
    q = _project(x_batch, weights.w_q)
    kt, vt = _project(text_ctx, weights.w_k_text), _project(text_ctx, weights.w_v_text)
    ki, vi = _project(image_ctx, weights.w_k_image), _project(image_ctx, weights.w_v_image)
    if cfg.shares("text-cross", layer_id, step):
        kt, vt = share_kv(kt, vt, cfg)
    if cfg.shares("image-cross", layer_id, step):
        ki, vi = share_kv(ki, vi, cfg)

    masking = cfg.masks(layer_id, step)
    tau = cfg.tau_for(kt.shape[1])
    outs, text_maps, image_maps = [], [], []
    for b in range(x_batch.shape[0]):
        if masking:
            t_out, t_maps = _attend_masked(q[b], kt[b], vt[b], heads, tau, cfg.mask_mode)
        else:
            t_out, t_maps = attend_heads(q[b], kt[b], vt[b], heads)
        i_out, i_maps = attend_heads(q[b], ki[b], vi[b], heads)
        hidden = combine_branches(t_out, i_out, cfg.lambda_image)
        outs.append(T.matmul(hidden, weights.w_out))
        text_maps.append(t_maps)
        image_maps.append(i_maps)
    maps = {"text": np.stack(text_maps), "image": np.stack(image_maps)}
    if capture is not None:
        capture.record_maps(layer_id, step, "text", maps["text"], masking)
        capture.record_maps(layer_id, step, "image", maps["image"], False)
    return np.stack(outs), maps


def plain_self_attention(x_batch, weights: AttentionWeights, heads: int, layer_id="", step=0, capture=None):
    """Reference self-attention path with no guidance hooks at all."""
    x_batch = T.as_tensor(x_batch)
    outs, maps = [], []
    for b in range(x_batch.shape[0]):
        o, m = multi_head_attention(x_batch[b], None, weights, heads)
        outs.append(o)
        maps.append(m)
    if capture is not None:
        capture.record_maps(layer_id, step, "self", np.stack(maps), False)
    return np.stack(outs)


def plain_cross_attention(
    x_batch, text_ctx, image_ctx, weights: DecoupledWeights, heads: int, layer_id="", step=0, capture=None
):
    """Reference decoupled cross-attention path with no guidance hooks at all."""
    x_batch = T.as_tensor(x_batch)
    outs, text_maps, image_maps = [], [], []
    for b in range(x_batch.shape[0]):
        o, tm, im = decoupled_cross_attention(x_batch[b], text_ctx[b], image_ctx[b], weights, heads)
        outs.append(o)
        text_maps.append(tm)
        image_maps.append(im)
    maps = {"text": np.stack(text_maps), "image": np.stack(image_maps)}
    if capture is not None:
        capture.record_maps(layer_id, step, "text", maps["text"], False)
        capture.record_maps(layer_id, step, "image", maps["image"], False)
    return np.stack(outs), maps
