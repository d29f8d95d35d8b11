"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times matmul, row softmax and row l2 normalization at the shapes the toy
model uses, then one denoise call and one short generation, once per
available backend. Every benchmark also checks that the backends agree bit
for bit.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from qkvguide import tensor as T
from qkvguide.config import build_config, with_values
from qkvguide.guidance import ConditionPair, build_batch
from qkvguide.model import ToyDenoiser, tokenize
from qkvguide.sampler import generate, initial_noise

KERNEL_CASES = [
    ("matmul 256x64 @ 64x64", "matmul", [(256, 64), (64, 64)]),
    ("matmul 256x64 @ 64x256", "matmul", [(256, 64), (64, 256)]),
    ("matmul 64x128 @ 128x64", "matmul", [(64, 128), (128, 64)]),
    ("softmax 256x256", "softmax_rows", [(256, 256)]),
    ("softmax 256x16", "softmax_rows", [(256, 16)]),
    ("l2norm 256x64", "row_l2_normalize", [(256, 64)]),
]


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    backends = T.available_backends()
    cfg = build_config({"schedule": {"inference_steps": 5}, "output": {"capture": False}})
    cfg = with_values(cfg, {"guidance.kv_share_enabled": True, "guidance.mask_enabled": True})
    model = ToyDenoiser(cfg.model)
    pair = ConditionPair(tokenize(cfg.user_prompt), tokenize(cfg.preset_condition), cfg.style_image)
    contexts = build_batch(pair, model)
    z = initial_noise(cfg)

    cases = []
    for label, op, shapes in KERNEL_CASES:
        args = [rng.standard_normal(s).astype(np.float32) for s in shapes]
        cases.append((label, lambda op=op, args=args: getattr(T, op)(*args)))
    cases.append(("denoise (batch 2, guided)", lambda: model.denoise(z, 500, contexts, cfg.guidance)))
    cases.append(("generate (5 steps)", lambda: generate(cfg, capture=False, model=model).latents))

    rows = []
    for label, fn in cases:
        row = {"case": label}
        outputs = []
        for name in backends:
            previous = T.set_backend(name)
            try:
                row[name] = best_of(fn, repeat)
                outputs.append(fn())
            finally:
                T.set_backend(previous)
        row["identical"] = all(np.array_equal(outputs[0], o) for o in outputs[1:])
        rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write the results as JSON")
    args = ap.parse_args(argv)
    backends = T.available_backends()
    if "cython" not in backends:
        print("note: compiled backend not built, timing the numpy fallback only", file=sys.stderr)
    rows = bench(args.repeat)
    head = f"{'case':<28}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        head += f"{'speedup':>10}"
    print(head + "  identical")
    for r in rows:
        line = f"{r['case']:<28}" + "".join(f"{r[b] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{r['python'] / r['cython']:>9.1f}x"
        print(line + f"  {r['identical']}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
