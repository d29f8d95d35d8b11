"""Command line entry point.

    qkvguide generate CONFIG [--set section.key=value ...]
    qkvguide compare  CONFIG --toggle kv_share|mask|both [--seeds N]
    qkvguide inspect  ARCHIVE --layer ID --step N --slot N --index N [--branch text]
    qkvguide validate CONFIG

Exit codes: 0 success, 1 runtime failure, 2 invalid config or input.
Relative output directories resolve against ``$QKVGUIDE_OUTPUT_ROOT``
(default: the current directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, echo_config, load_config, output_root, run_dir, with_values
from .errors import ConfigError, InputError, QKVError
from .inspection import (
    CaptureSink,
    export_map_image,
    load_record,
    map_stats,
    read_index,
)
from .sampler import generate

log = logging.getLogger("qkvguide")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

TOGGLES = {
    "kv_share": ("kv_share_enabled",),
    "mask": ("mask_enabled",),
    "both": ("kv_share_enabled", "mask_enabled"),
}


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(cfg: RunConfig) -> Path:
    """Generate and write images, capture archive, metrics and config echo."""
    out = run_dir(cfg)
    if out.exists() and (out / "config.toml").exists():
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    archive = out / "captures" if cfg.capture else None
    result = generate(cfg, capture=True, archive_dir=archive)
    for img in result.images:
        img.to_ppm(out / "images" / f"slot{img.slot}.ppm")
    cfg.style_image.to_ppm(out / "style.ppm")
    (out / "config.toml").write_text(echo_config(cfg), encoding="utf-8")
    metrics = {
        "run_id": cfg.run_id,
        "denoise_calls": result.denoise_calls,
        "consistency": result.report.to_dict() if result.report else None,
    }
    _dump_json(metrics, out / "metrics.json")
    return out


def sign_test(diffs: list[float]) -> dict:
    """One-sided paired sign test for positive differences (ties dropped)."""
    pos = sum(d > 0 for d in diffs)
    neg = sum(d < 0 for d in diffs)
    n = pos + neg
    p = sum(math.comb(n, k) for k in range(pos, n + 1)) / 2**n if n else 1.0
    return {"positive": pos, "negative": neg, "ties": len(diffs) - n, "p_value": p}


def compare(cfg: RunConfig, toggle: str, seeds: int = 1) -> dict:
    """Baseline (toggled mechanisms off) vs variant (on) over consecutive seeds."""
    if toggle not in TOGGLES:
        raise ConfigError(f"must be one of {sorted(TOGGLES)}", "--toggle")
    if seeds < 1:
        raise ConfigError("must be >= 1", "--seeds")
    keys = TOGGLES[toggle]
    rows = []
    for i in range(seeds):
        seed = cfg.seed + i
        reports = {}
        for label, flag in (("baseline", False), ("variant", True)):
            values = {f"guidance.{k}": flag for k in keys}
            values["model.seed"] = seed
            variant = with_values(cfg, values)
            res = generate(variant, capture=CaptureSink(variant.run_id))
            reports[label] = res.report
        b, v = reports["baseline"], reports["variant"]
        rows.append(
            {
                "seed": seed,
                "baseline": {"mid_cosine": b.mid_cosine, "mean_iou": b.mean_iou},
                "variant": {"mid_cosine": v.mid_cosine, "mean_iou": v.mean_iou},
                "delta": {
                    "mid_cosine": v.mid_cosine - b.mid_cosine,
                    "mean_iou": v.mean_iou - b.mean_iou,
                    "layer_cosine": {k: v.layer_cosine[k] - b.layer_cosine[k] for k in sorted(b.layer_cosine)},
                    "mask_iou": {k: v.mask_iou[k] - b.mask_iou[k] for k in sorted(b.mask_iou)},
                },
            }
        )
    cos_d = [r["delta"]["mid_cosine"] for r in rows]
    iou_d = [r["delta"]["mean_iou"] for r in rows]
    return {
        "toggle": toggle,
        "seeds": [r["seed"] for r in rows],
        "runs": rows,
        "summary": {
            "mean_delta_mid_cosine": float(np.mean(cos_d)),
            "mean_delta_mean_iou": float(np.mean(iou_d)),
            "mean_baseline_mid_cosine": float(np.mean([r["baseline"]["mid_cosine"] for r in rows])),
            "mean_variant_mid_cosine": float(np.mean([r["variant"]["mid_cosine"] for r in rows])),
            "sign_test_mid_cosine": sign_test(cos_d),
        },
    }


def format_compare(report: dict) -> str:
    lines = [f"toggle: {report['toggle']}", f"{'seed':>6} {'d_mid_cos':>12} {'d_iou':>12}"]
    for r in report["runs"]:
        lines.append(f"{r['seed']:>6} {r['delta']['mid_cosine']:>12.6f} {r['delta']['mean_iou']:>12.6f}")
    s = report["summary"]
    st = s["sign_test_mid_cosine"]
    lines.append(
        f"mean d_mid_cos {s['mean_delta_mid_cosine']:.6f}  mean d_iou {s['mean_delta_mean_iou']:.6f}  "
        f"sign test +{st['positive']}/-{st['negative']}/={st['ties']} p={st['p_value']:.3g}"
    )
    return "\n".join(lines) + "\n"


# --- commands -------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = write_run(cfg)
    print(out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set)
    print(f"ok {cfg.run_id}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set)
    report = compare(cfg, args.toggle, args.seeds)
    out = output_root() / cfg.output_dir if not Path(cfg.output_dir).is_absolute() else Path(cfg.output_dir)
    out = out / f"{cfg.run_id}-compare-{args.toggle}"
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "compare.json")
    text = format_compare(report)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _archive_path(path: Path) -> Path:
    if (path / "index.jsonl").exists():
        return path
    if (path / "captures" / "index.jsonl").exists():
        return path / "captures"
    raise InputError(f"no capture archive under {path}")


def cmd_inspect(args) -> int:
    archive = _archive_path(Path(args.archive))
    entries = read_index(archive)
    layers = sorted({e["layer"] for e in entries})
    if args.layer not in layers:
        raise InputError(f"no records for layer {args.layer!r}; available: {', '.join(layers)}")
    match = [
        e
        for e in entries
        if e["layer"] == args.layer and e["step"] == args.step and e["slot"] == args.slot and e["branch"] == args.branch
    ]
    if not match:
        raise InputError(
            f"no record for layer={args.layer} step={args.step} slot={args.slot} branch={args.branch}"
        )
    rec = load_record(archive, match[0])
    out = Path(args.out) if args.out else archive.parent / "inspect" / (
        f"{args.layer}_{args.branch}_step{args.step}_s{args.slot}_k{args.index}.pgm"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    export_map_image(rec, args.index, out, args.head)
    stats = map_stats(rec.map.weights, args.index, args.head)
    stats["file"] = str(out)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkvguide", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="TOML run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
        return sp

    with_config(sub.add_parser("generate", help="run one batch-2 generation")).set_defaults(func=cmd_generate)
    with_config(sub.add_parser("validate", help="validate a config without running it")).set_defaults(func=cmd_validate)
    cp = with_config(sub.add_parser("compare", help="A/B a guidance mechanism"))
    cp.add_argument("--toggle", choices=sorted(TOGGLES), required=True)
    cp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    cp.set_defaults(func=cmd_compare)

    ip = sub.add_parser("inspect", help="export one captured attention map as PGM")
    ip.add_argument("archive", help="run directory or its captures/ directory")
    ip.add_argument("--layer", required=True)
    ip.add_argument("--step", type=int, required=True)
    ip.add_argument("--slot", type=int, required=True)
    ip.add_argument("--index", type=int, required=True, help="token or patch index (key column)")
    ip.add_argument("--branch", default="text", choices=["text", "image", "self"])
    ip.add_argument("--head", type=int, default=None, help="single head instead of the head mean")
    ip.add_argument("--out", default=None)
    ip.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except QKVError as exc:
        run = getattr(exc, "run_id", None)
        print(f"runtime error{f' in {run}' if run else ''}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
