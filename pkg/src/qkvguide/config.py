"""Run configuration: a TOML file with nested sections.

Every key has a default, unknown keys are rejected, and every value is
validated before any compute runs. ``--set section.key=value`` overrides are
applied on the raw dict before validation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError, QKVError
from .guidance import KV_BRANCHES, ROLES, GuidanceConfig
from .model import MAX_TOKENS, ModelConfig, StyleImage, tokenize

OUTPUT_ROOT_ENV = "QKVGUIDE_OUTPUT_ROOT"
DEFAULT_TEMPLATE = "{prompt}, same style and composition as the reference product photo"

# section -> key -> default. The type of the default is the accepted type,
# except where a validator below says otherwise.
SCHEMA: dict[str, dict[str, Any]] = {
    "model": {
        "seed": 0,
        "latent_size": 16,
        "latent_channels": 32,
        "model_dim": 64,
        "heads": 2,
        "down_blocks": 2,
        "up_blocks": 2,
        "ff_mult": 2,
        "image_size": 32,
        "patch_size": 8,
    },
    "schedule": {
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "inference_steps": 20,
    },
    "sampler": {
        "shared_noise": True,
        "guidance_scale": 1.0,
    },
    "guidance": {
        "kv_share_enabled": True,
        "kv_source_index": 0,
        "kv_target_indices": [1],
        "kv_branches": ["text-cross", "image-cross"],
        "mask_enabled": True,
        "tau": "auto",
        "mask_mode": "gated",
        "mask_branch": "text-cross",
        "lambda_image": 1.0,
        "active_steps": "all",
        "active_layers": "all",
    },
    "prompts": {
        "user_prompt": "a leather handbag on a marble table",
        "preset_condition": "",
        "template": DEFAULT_TEMPLATE,
        "reference_role": "preset",
    },
    "style": {
        "image": "",
    },
    "output": {
        "dir": "runs",
        "run_id": "",
        "capture": True,
    },
}


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected boolean, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {value!r}", key)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected list, got {value!r}", key)
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected string, got {value!r}", key)
    return value


def merge_defaults(raw: dict[str, Any]) -> dict[str, dict[str, Any]]:
    """Fill defaults and reject unknown sections/keys and wrong scalar types."""
    out = copy.deepcopy(SCHEMA)
    for section, values in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section; expected one of {sorted(SCHEMA)}", section)
        if not isinstance(values, dict):
            raise ConfigError("expected a table", section)
        for key, value in values.items():
            dotted = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key; allowed {sorted(SCHEMA[section])}", dotted)
            default = SCHEMA[section][key]
            # a few keys accept either a keyword string or a number/list
            if dotted == "guidance.tau" and isinstance(value, (int, float)) and not isinstance(value, bool):
                out[section][key] = float(value)
            elif dotted in ("guidance.active_steps", "guidance.active_layers") and isinstance(value, list):
                out[section][key] = value
            else:
                out[section][key] = _check_type(dotted, value, default)
    return out


def parse_override(item: str) -> tuple[str, str, Any]:
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like section.key=value", "--set")
    lhs, rhs = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    raw = copy.deepcopy(raw)
    for item in overrides:
        section, key, value = parse_override(item)
        raw.setdefault(section, {})[key] = value
    return raw


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    inference_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run description."""

    model: ModelConfig
    schedule: ScheduleConfig
    guidance: GuidanceConfig
    user_prompt: str
    preset_condition: str
    reference_role: str
    style_image: StyleImage
    shared_noise: bool = True
    guidance_scale: float = 1.0
    output_dir: str = "runs"
    run_id: str = ""
    capture: bool = True
    resolved: dict | None = None

    @property
    def seed(self) -> int:
        return self.model.seed

    def with_guidance(self, **kw) -> "RunConfig":
        return with_values(self, {f"guidance.{k}": v for k, v in kw.items()})


def _guidance_from(sec: dict[str, Any]) -> GuidanceConfig:
    tau = sec["tau"]
    if isinstance(tau, str):
        if tau != "auto":
            raise ConfigError(f"expected a number in [0, 1] or 'auto', got {tau!r}", "guidance.tau")
        tau = None
    steps = sec["active_steps"]
    if isinstance(steps, str):
        if steps != "all":
            raise ConfigError("expected 'all' or [start, stop]", "guidance.active_steps")
        steps = None
    else:
        if len(steps) != 2 or not all(isinstance(s, int) and not isinstance(s, bool) for s in steps):
            raise ConfigError("expected 'all' or [start, stop]", "guidance.active_steps")
        steps = (steps[0], steps[1])
    layers = sec["active_layers"]
    if isinstance(layers, str):
        if layers != "all":
            raise ConfigError("expected 'all' or a list of layer ids", "guidance.active_layers")
        layers = None
    elif not all(isinstance(x, str) for x in layers):
        raise ConfigError("layer ids must be strings", "guidance.active_layers")
    for key in ("kv_target_indices",):
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in sec[key]):
            raise ConfigError("expected a list of integers", f"guidance.{key}")
    if not all(isinstance(b, str) and b in KV_BRANCHES for b in sec["kv_branches"]):
        raise ConfigError(f"entries must be among {KV_BRANCHES}", "guidance.kv_branches")
    return GuidanceConfig(
        kv_share_enabled=sec["kv_share_enabled"],
        kv_source_index=sec["kv_source_index"],
        kv_target_indices=tuple(sec["kv_target_indices"]),
        kv_branches=frozenset(sec["kv_branches"]),
        mask_enabled=sec["mask_enabled"],
        tau=tau,
        mask_mode=sec["mask_mode"],
        mask_branch=sec["mask_branch"],
        lambda_image=sec["lambda_image"],
        active_steps=steps,
        active_layers=layers,
    )


def preset_from_template(template: str, user_prompt: str) -> str:
    if "{prompt}" not in template:
        raise ConfigError("template must contain '{prompt}'", "prompts.template")
    return template.replace("{prompt}", user_prompt)


def build_config(
    raw: dict[str, Any], base_dir: Path | None = None, style: StyleImage | None = None
) -> RunConfig:
    """Validate a raw nested dict (as parsed from TOML) into a RunConfig.

    ``style`` short-circuits loading ``style.image`` from disk.
    """
    res = merge_defaults(raw)
    m, s, g, p = res["model"], res["schedule"], res["guidance"], res["prompts"]
    model = ModelConfig(**m)
    if not 0.0 < s["beta_start"] < s["beta_end"] < 1.0:
        raise ConfigError("need 0 < beta_start < beta_end < 1", "schedule.beta_start")
    if s["T"] <= 0:
        raise ConfigError("must be positive", "schedule.T")
    if not 0 < s["inference_steps"] <= s["T"]:
        raise ConfigError("must lie in [1, T]", "schedule.inference_steps")
    schedule = ScheduleConfig(**s)
    if not 0 <= m["seed"] < 2**63:
        raise ConfigError("must be a non-negative 63-bit integer", "model.seed")
    if res["sampler"]["guidance_scale"] < 0:
        raise ConfigError("must be >= 0", "sampler.guidance_scale")
    guidance = _guidance_from(g)
    if guidance.kv_share_enabled and max(guidance.kv_target_indices + (guidance.kv_source_index,)) > 1:
        raise ConfigError("runs use a batch of 2; slot indices must be 0 or 1", "guidance.kv_target_indices")
    if guidance.active_layers is not None:
        known = {f"{b}.{kind}" for b in model.block_names for kind in ("self", "xattn")}
        unknown = sorted(guidance.active_layers - known)
        if unknown:
            raise ConfigError(f"unknown layer ids {unknown}; available {sorted(known)}", "guidance.active_layers")
    if p["reference_role"] not in ROLES:
        raise ConfigError(f"must be one of {ROLES}", "prompts.reference_role")
    user = p["user_prompt"]
    preset = p["preset_condition"] or preset_from_template(p["template"], user)
    for key, text in (("prompts.user_prompt", user), ("prompts.preset_condition", preset)):
        n = len(tokenize(text))
        if n == 0:
            raise ConfigError("prompt has no tokens", key)
        if n > MAX_TOKENS:
            raise ConfigError(f"{n} tokens exceeds {MAX_TOKENS}", key)

    img_path = res["style"]["image"]
    if style is not None:
        pass
    elif img_path:
        path = Path(img_path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            style = StyleImage.from_ppm(path)
        except (OSError, QKVError) as exc:
            raise ConfigError(f"cannot read style image {path}: {exc}", "style.image") from exc
    else:
        style = StyleImage.procedural(model.image_size)
    if style.pixels.shape[0] != model.image_size:
        raise ConfigError(
            f"style image is {style.pixels.shape[0]}px, model expects {model.image_size}px", "style.image"
        )

    out = res["output"]
    run_id = out["run_id"] or derive_run_id(res, style)
    if any(c in run_id for c in "/\\") or run_id in (".", ".."):
        raise ConfigError("must be a plain directory name", "output.run_id")
    return RunConfig(
        model=model,
        schedule=schedule,
        guidance=guidance,
        user_prompt=user,
        preset_condition=preset,
        reference_role=p["reference_role"],
        style_image=style,
        shared_noise=res["sampler"]["shared_noise"],
        guidance_scale=res["sampler"]["guidance_scale"],
        output_dir=out["dir"],
        run_id=run_id,
        capture=out["capture"],
        resolved=res,
    )


def derive_run_id(resolved: dict, style: StyleImage) -> str:
    body = {k: v for k, v in resolved.items() if k not in ("output", "style")}
    h = hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8"))
    h.update(np.ascontiguousarray(style.pixels).tobytes())
    return "run-" + h.hexdigest()[:12]


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from exc
    return build_config(apply_overrides(raw, overrides or []), base_dir=path.parent)


def with_values(cfg: RunConfig, values: dict[str, Any]) -> RunConfig:
    """Re-validate ``cfg`` with dotted-key replacements; the style image is kept.

    The run id is re-derived unless ``output.run_id`` is among the values.
    """
    raw = copy.deepcopy(cfg.resolved or {})
    raw.setdefault("output", {})["run_id"] = ""
    for dotted, value in values.items():
        section, key = dotted.split(".", 1)
        if section == "guidance":
            value = _to_raw_guidance(key, value)
        raw.setdefault(section, {})[key] = value
    return build_config(raw, style=cfg.style_image)


def _to_raw_guidance(key: str, value: Any) -> Any:
    if key == "tau" and value is None:
        return "auto"
    if key in ("active_steps", "active_layers") and value is None:
        return "all"
    if isinstance(value, (tuple, frozenset, set)):
        return sorted(value) if isinstance(value, (frozenset, set)) else list(value)
    return value


def echo_config(cfg: RunConfig, style_name: str = "style.ppm") -> str:
    """TOML text of the fully resolved config, pinned to its run id and a
    style image stored next to it."""
    res = copy.deepcopy(cfg.resolved)
    res["prompts"]["preset_condition"] = cfg.preset_condition
    res["style"]["image"] = style_name
    res["output"]["run_id"] = cfg.run_id
    return tomli_w.dumps(res)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = output_root() / out
    return out / cfg.run_id
