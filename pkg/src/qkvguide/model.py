"""Seeded miniature latent denoiser plus toy text/image encoders and decoder.

The denoiser is a small UNet-shaped stack of spatial-transformer blocks::

    down0 (16x16) -> pool -> down1 (8x8) -> pool -> mid (4x4)
    -> up -> + skip -> up0 (8x8) -> up -> + skip -> up1 (16x16)

Each block runs self-attention, decoupled text+image cross-attention and a
feed-forward mix, each with a residual connection. Weights are untrained
draws whose values depend only on ``(seed, layer id, tensor role)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .attention import AttentionWeights, DecoupledWeights
from .errors import ConfigError, InputError, ShapeError
from .guidance import (
    CaptureLike,
    GuidanceConfig,
    guided_cross_attention,
    guided_self_attention,
    plain_cross_attention,
    plain_self_attention,
)

MAX_TOKENS = 77
PAD_TOKEN = "<pad>"
_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> tuple[str, ...]:
    """Lower-cased word and punctuation tokens."""
    return tuple(_TOKEN_RE.findall(text.lower()))


def sinusoid(position: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = position * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)


# --- images ---------------------------------------------------------------


@dataclass(frozen=True)
class StyleImage:
    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"style image must be [H, W, 3], got {p.shape}")
        if p.shape[0] != p.shape[1]:
            raise ShapeError(f"style image must be square, got {p.shape[:2]}")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise InputError("style image pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", np.ascontiguousarray(p))

    @classmethod
    def from_ppm(cls, path: str | Path) -> "StyleImage":
        with Image.open(path) as im:
            if im.format not in ("PPM", None):
                raise InputError(f"{path}: expected a PPM image, got {im.format}")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
        return cls(rgb)

    @classmethod
    def procedural(cls, size: int = 32) -> "StyleImage":
        """A fixed synthetic 'product shot': warm gradient backdrop with a centered disc."""
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / np.float32(max(size - 1, 1))
        r = np.sqrt((xx - 0.5) ** 2 + (yy - 0.55) ** 2)
        disc = (r < 0.28).astype(np.float32)
        bg = np.stack([0.85 - 0.3 * yy, 0.7 - 0.2 * yy, 0.55 + 0.2 * xx], axis=-1)
        fg = np.stack([0.2 + 0.5 * xx, 0.25 + 0.1 * yy, 0.6 - 0.3 * xx], axis=-1)
        img = disc[..., None] * fg + (1.0 - disc[..., None]) * bg
        # 8-bit quantized so a PPM round trip reproduces it exactly
        return cls(to_uint8(img).astype(np.float32) / np.float32(255.0))

    def to_ppm(self, path: str | Path) -> None:
        write_ppm(self.pixels, path)


@dataclass(frozen=True)
class GeneratedImage:
    pixels: np.ndarray
    run_id: str = ""
    slot: int = 0

    def to_ppm(self, path: str | Path) -> None:
        write_ppm(self.pixels, path)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PPM")


# --- denoiser -------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    latent_size: int = 16
    latent_channels: int = 32
    model_dim: int = 64
    heads: int = 2
    down_blocks: int = 2
    up_blocks: int = 2
    ff_mult: int = 2
    image_size: int = 32
    patch_size: int = 8

    def __post_init__(self):
        for name in ("latent_size", "latent_channels", "model_dim", "heads", "ff_mult", "image_size", "patch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", f"model.{name}")
        if self.down_blocks < 0 or self.up_blocks != self.down_blocks:
            raise ConfigError("up_blocks must equal down_blocks (skip connections)", "model.up_blocks")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}", "model.heads")
        if self.model_dim % 2:
            raise ConfigError("must be even (sinusoidal embeddings)", "model.model_dim")
        if self.latent_size % (2**self.down_blocks):
            raise ConfigError(f"must be divisible by 2**down_blocks = {2**self.down_blocks}", "model.latent_size")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size", "model.patch_size")
        if self.image_size % self.latent_size:
            raise ConfigError("image_size must be a multiple of latent_size", "model.image_size")

    @property
    def block_names(self) -> list[str]:
        return (
            [f"down{i}" for i in range(self.down_blocks)]
            + ["mid"]
            + [f"up{i}" for i in range(self.up_blocks)]
        )

    @property
    def decode_patch(self) -> int:
        return self.image_size // self.latent_size


@dataclass
class Block:
    name: str
    grid: int
    self_attn: AttentionWeights
    cross_attn: DecoupledWeights
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray

    @property
    def self_id(self) -> str:
        return f"{self.name}.self"

    @property
    def cross_id(self) -> str:
        return f"{self.name}.xattn"


def _linear(rng: T.SeededRng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return T.scale(rng.normal((fan_in, fan_out)), gain / math.sqrt(fan_in))


def _pool2(h: np.ndarray, grid: int) -> np.ndarray:
    b, n, d = h.shape
    g = h.reshape(b, grid // 2, 2, grid // 2, 2, d)
    # fixed summation order over the 2x2 window
    s = g[:, :, 0, :, 0] + g[:, :, 0, :, 1] + g[:, :, 1, :, 0] + g[:, :, 1, :, 1]
    return np.ascontiguousarray((s * np.float32(0.25)).reshape(b, (grid // 2) ** 2, d))


def _upsample2(h: np.ndarray, grid: int) -> np.ndarray:
    b, n, d = h.shape
    g = h.reshape(b, grid, 1, grid, 1, d)
    g = np.broadcast_to(g, (b, grid, 2, grid, 2, d))
    return np.ascontiguousarray(g.reshape(b, (2 * grid) ** 2, d))


@dataclass
class ToyDenoiser:
    """Seeded noise predictor. Immutable after construction."""

    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        c = self.config
        root = T.SeededRng(c.seed)
        d = c.model_dim
        self.pad_token = PAD_TOKEN
        self.w_in = _linear(root.child("in", "w"), c.latent_channels, d)
        self.w_time = _linear(root.child("time", "w"), d, d)
        self.w_out = _linear(root.child("out", "w"), d, c.latent_channels, gain=0.5)
        self.w_patch = _linear(root.child("patch", "w"), c.patch_size * c.patch_size * 3, d)
        self.b_patch = T.scale(root.child("patch", "b").normal((d,)), 0.1)
        p = c.decode_patch
        self.w_dec = _linear(root.child("decode", "w"), c.latent_channels, p * p * 3, gain=0.25)
        self._token_rng = root.child("token")

        n = c.down_blocks
        grids = (
            [c.latent_size >> i for i in range(n)]
            + [c.latent_size >> n]
            + [c.latent_size >> (n - 1 - j) for j in range(n)]
        )
        self.blocks: list[Block] = [
            self._make_block(root, name, grid) for name, grid in zip(c.block_names, grids)
        ]

    def _make_block(self, root: T.SeededRng, name: str, grid: int) -> Block:
        d = self.config.model_dim
        ff = d * self.config.ff_mult

        def w(role, fan_in=d, fan_out=d, gain=1.0):
            return _linear(root.child(name, role), fan_in, fan_out, gain)

        return Block(
            name=name,
            grid=grid,
            self_attn=AttentionWeights(w("self.q"), w("self.k"), w("self.v"), w("self.out", gain=0.5)),
            cross_attn=DecoupledWeights(
                w("xattn.q"),
                w("xattn.k_text"),
                w("xattn.v_text"),
                w("xattn.k_image"),
                w("xattn.v_image"),
                w("xattn.out", gain=0.5),
            ),
            w_ff1=w("ff.w1", d, ff),
            b_ff1=T.scale(root.child(name, "ff.b1").normal((ff,)), 0.1),
            w_ff2=w("ff.w2", ff, d, gain=0.5),
            b_ff2=T.scale(root.child(name, "ff.b2").normal((d,)), 0.1),
        )

    @property
    def layer_ids(self) -> list[str]:
        return [lid for b in self.blocks for lid in (b.self_id, b.cross_id)]

    # --- encoders ---------------------------------------------------------

    def token_embedding(self, token: str) -> np.ndarray:
        return self._token_rng.child(token).normal((self.config.model_dim,))

    def encode_text(self, tokens: Sequence[str]) -> np.ndarray:
        """Hash-seeded token rows plus a small sinusoidal position term."""
        tokens = list(tokens)
        if not tokens:
            raise InputError("empty token sequence")
        if len(tokens) > MAX_TOKENS:
            raise InputError(f"{len(tokens)} tokens exceeds the limit of {MAX_TOKENS}")
        d = self.config.model_dim
        rows = [T.add(self.token_embedding(tok), T.scale(sinusoid(i, d), 0.2)) for i, tok in enumerate(tokens)]
        return np.stack(rows)

    def encode_image(self, img: StyleImage) -> np.ndarray:
        px = img.pixels
        p = self.config.patch_size
        h, w, _ = px.shape
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
        if p * p * 3 != self.w_patch.shape[0]:
            raise ShapeError(f"patch size {p} does not match the encoder")
        patches = px.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * 3)
        return T.add(T.matmul(np.ascontiguousarray(patches), self.w_patch), self.b_patch)

    def time_embedding(self, t: int) -> np.ndarray:
        return T.matmul(sinusoid(float(t), self.config.model_dim)[None, :], self.w_time)[0]

    # --- forward ----------------------------------------------------------

    def _norm(self, h: np.ndarray) -> np.ndarray:
        gain = math.sqrt(self.config.model_dim)
        return np.stack([T.scale(T.row_l2_normalize(h[b]), gain) for b in range(h.shape[0])])

    def _feed_forward(self, h: np.ndarray, blk: Block) -> np.ndarray:
        out = []
        for b in range(h.shape[0]):
            a = np.maximum(T.add(T.matmul(h[b], blk.w_ff1), blk.b_ff1), np.float32(0.0))
            out.append(T.add(T.matmul(a, blk.w_ff2), blk.b_ff2))
        return np.stack(out)

    def _block(self, h, blk: Block, contexts, cfg: GuidanceConfig, processor: str, step: int, capture):
        heads = self.config.heads
        text_ctx, image_ctx = contexts
        n = self._norm(h)
        if processor == "guided":
            a = guided_self_attention(n, blk.self_attn, cfg, heads, blk.self_id, step, capture)
        else:
            a = plain_self_attention(n, blk.self_attn, heads, blk.self_id, step, capture)
        h = T.add(h, a)
        n = self._norm(h)
        if processor == "guided":
            a, _ = guided_cross_attention(
                n, text_ctx, image_ctx, blk.cross_attn, cfg, heads, blk.cross_id, step, capture
            )
        else:
            a, _ = plain_cross_attention(
                n, text_ctx, image_ctx, blk.cross_attn.with_lambda(cfg.lambda_image), heads, blk.cross_id, step, capture
            )
        h = T.add(h, a)
        h = T.add(h, self._feed_forward(self._norm(h), blk))
        if capture is not None:
            capture.record_features(blk.name, step, h)
        return h

    def denoise(
        self,
        latents,
        t: int,
        contexts: tuple[np.ndarray, np.ndarray],
        cfg: GuidanceConfig | None = None,
        capture: CaptureLike | None = None,
        step: int = 0,
        processor: str = "guided",
    ) -> np.ndarray:
        """Predict noise for a latent batch ``[B, h, w, c]``.

        ``processor="plain"`` routes attention through the unguided reference
        kernels; ``"guided"`` goes through the guidance processors and is
        bit-identical to plain when ``cfg`` disables every mechanism.
        """
        c = self.config
        cfg = cfg if cfg is not None else GuidanceConfig()
        if processor not in ("guided", "plain"):
            raise ConfigError(f"unknown processor {processor!r}")
        z = T.as_tensor(latents)
        if z.ndim != 4 or z.shape[1:] != (c.latent_size, c.latent_size, c.latent_channels):
            raise ShapeError(
                f"latents {z.shape} do not match [B, {c.latent_size}, {c.latent_size}, {c.latent_channels}]"
            )
        bsz = z.shape[0]
        if processor == "guided" and cfg.kv_share_enabled and bsz < 2:
            raise ConfigError("KV sharing needs a batch of at least 2", "guidance.kv_share_enabled")
        text_ctx, image_ctx = contexts
        if text_ctx.shape[0] != bsz or image_ctx.shape[0] != bsz:
            raise ShapeError(f"context batch sizes {text_ctx.shape[0]}/{image_ctx.shape[0]} != latent batch {bsz}")

        x = z.reshape(bsz, -1, c.latent_channels)
        temb = self.time_embedding(t)
        h = np.stack([T.add(T.matmul(x[b], self.w_in), temb) for b in range(bsz)])

        skips = []
        for blk in self.blocks:
            if blk.name.startswith("up"):
                h = T.add(_upsample2(h, blk.grid // 2), skips.pop())
            h = self._block(h, blk, contexts, cfg, processor, step, capture)
            if blk.name.startswith("down"):
                skips.append(h)
                h = _pool2(h, blk.grid)

        out = self._norm(h)
        eps = np.stack([T.add(x[b], T.matmul(out[b], self.w_out)) for b in range(bsz)])
        return eps.reshape(z.shape)

    # --- decoder ----------------------------------------------------------

    def decode_latents(self, latents, run_id: str = "", slot: int = 0) -> GeneratedImage:
        """Linear un-patchify of one ``[h, w, c]`` latent, offset by 0.5 and clamped to [0, 1]."""
        c = self.config
        z = T.as_tensor(latents)
        if z.shape != (c.latent_size, c.latent_size, c.latent_channels):
            raise ShapeError(f"latent {z.shape} does not match decoder grid")
        p = c.decode_patch
        cells = T.matmul(z.reshape(-1, c.latent_channels), self.w_dec)
        px = cells.reshape(c.latent_size, c.latent_size, p, p, 3).transpose(0, 2, 1, 3, 4)
        px = px.reshape(c.image_size, c.image_size, 3) + np.float32(0.5)
        return GeneratedImage(np.clip(px, 0.0, 1.0).astype(np.float32), run_id, slot)
