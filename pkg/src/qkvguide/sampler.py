"""Deterministic DDIM (eta = 0) sampling loop around the toy denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, LogicError, NumericalError, QKVError
from .guidance import ConditionPair, build_batch
from .inspection import CaptureSink, ConsistencyReport, consistency_metrics
from .model import GeneratedImage, ToyDenoiser, tokenize


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: np.ndarray  # descending, the ones the sampler visits

    @property
    def stride(self) -> int:
        return self.T // len(self.timesteps)

    def alpha_bar(self, t: int) -> float:
        # t < 0 is the clean end of the chain
        return 1.0 if t < 0 else float(self.alpha_bars[t])

    def prev_timestep(self, t: int) -> int:
        return int(t) - self.stride


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, inference_steps: int = 20):
    if T <= 0:
        raise ConfigError("must be positive", "schedule.T")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError("need 0 < beta_start < beta_end < 1", "schedule.beta_start")
    if not 0 < inference_steps <= T:
        raise ConfigError("must lie in [1, T]", "schedule.inference_steps")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    stride = T // inference_steps
    timesteps = (np.arange(inference_steps, dtype=np.int64) * stride)[::-1].copy()
    return NoiseSchedule(T, beta_start, beta_end, betas, alphas, alpha_bars, timesteps)


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    step: int
    schedule: NoiseSchedule

    def __post_init__(self):
        if not np.isfinite(self.z).all():
            raise NumericalError(f"non-finite latents at step {self.step}")


def ddim_update(z, eps, alpha_bar_t: float, alpha_bar_prev: float) -> np.ndarray:
    """x0 = (z - sqrt(1-a_t) eps) / sqrt(a_t);  z' = sqrt(a_prev) x0 + sqrt(1-a_prev) eps."""
    z64 = np.asarray(z, dtype=np.float64)
    e64 = np.asarray(eps, dtype=np.float64)
    x0 = (z64 - math.sqrt(1.0 - alpha_bar_t) * e64) / math.sqrt(alpha_bar_t)
    out = math.sqrt(alpha_bar_prev) * x0 + math.sqrt(1.0 - alpha_bar_prev) * e64
    return out.astype(np.float32)


def ddim_step(state: LatentState, eps, t: int, t_prev: int) -> LatentState:
    if not t > t_prev:
        raise LogicError(f"DDIM step needs t > t_prev, got t={t}, t_prev={t_prev}")
    sched = state.schedule
    z = ddim_update(state.z, eps, sched.alpha_bar(t), sched.alpha_bar(t_prev))
    return LatentState(z, state.step + 1, sched)


@dataclass
class GenerationResult:
    run_id: str
    images: list[GeneratedImage]
    latents: np.ndarray
    capture: CaptureSink | None
    report: ConsistencyReport | None
    denoise_calls: int = 0


def initial_noise(cfg: RunConfig, batch: int = 2) -> np.ndarray:
    m = cfg.model
    rng = T.SeededRng(cfg.seed).child("initial-noise")
    shape = (m.latent_size, m.latent_size, m.latent_channels)
    if cfg.shared_noise:
        z = rng.normal((1,) + shape)
        return np.ascontiguousarray(np.repeat(z, batch, axis=0))
    return rng.normal((batch,) + shape)


def generate(
    cfg: RunConfig,
    capture: bool | CaptureSink = True,
    archive_dir: str | Path | None = None,
    processor: str = "guided",
    on_step: Callable[[int, np.ndarray], None] | None = None,
    model: ToyDenoiser | None = None,
) -> GenerationResult:
    """Run the full batch-2 pipeline for one config.

    ``capture=False`` runs without any sink (no metrics). ``archive_dir``
    streams captured maps to disk. ``processor="plain"`` bypasses the
    guidance processors entirely.
    """
    try:
        model = model if model is not None else ToyDenoiser(cfg.model)
        pair = ConditionPair(
            tokenize(cfg.user_prompt), tokenize(cfg.preset_condition), cfg.style_image, cfg.reference_role
        )
        contexts = build_batch(pair, model)
        if isinstance(capture, CaptureSink):
            sink = capture
        elif capture:
            sink = CaptureSink(cfg.run_id, archive_dir=archive_dir)
        else:
            sink = None

        sched = make_schedule(
            cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.inference_steps
        )
        state = LatentState(initial_noise(cfg), 0, sched)
        null_contexts = (np.zeros_like(contexts[0]), np.zeros_like(contexts[1]))
        calls = 0
        for i, t in enumerate(sched.timesteps):
            t = int(t)
            eps = model.denoise(state.z, t, contexts, cfg.guidance, sink, step=i, processor=processor)
            calls += 1
            if cfg.guidance_scale > 1.0:
                eps_u = model.denoise(state.z, t, null_contexts, cfg.guidance, None, step=i, processor=processor)
                calls += 1
                eps = T.add(eps_u, T.scale(T.add(eps, -eps_u), cfg.guidance_scale))
            state = ddim_step(state, eps, t, sched.prev_timestep(t))
            if on_step is not None:
                on_step(i, state.z)
        images = [model.decode_latents(state.z[s], cfg.run_id, s) for s in range(state.z.shape[0])]
        report = None
        if sink is not None:
            sink.close()
            if sink.keep:
                report = consistency_metrics(sink.records, sink.features, cfg.guidance.tau)
        return GenerationResult(cfg.run_id, images, state.z, sink, report, calls)
    except QKVError as exc:
        exc.run_id = cfg.run_id
        raise
