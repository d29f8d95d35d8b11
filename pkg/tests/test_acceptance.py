"""End-to-end acceptance checks; each test records one PASS/FAIL line that
is printed in the terminal summary."""

import io
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from qkvguide import tensor as T
from qkvguide.attention import AttentionMap, DecoupledWeights, decoupled_cross_attention, scaled_dot_attention
from qkvguide.cli import compare
from qkvguide.config import build_config, with_values
from qkvguide.guidance import GuidanceConfig, apply_mask, masked_weights, share_kv, threshold_map
from qkvguide.inspection import export_map_image, read_pgm, quantize_column, map_column
from qkvguide.model import ModelConfig, ToyDenoiser
from qkvguide.sampler import generate

ROOT = Path(__file__).resolve().parents[1]
OFF = {"guidance.kv_share_enabled": False, "guidance.mask_enabled": False}


def record(name, ok, detail):
    ACCEPTANCE_RESULTS[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


def trajectory(cfg, processor):
    steps = []
    generate(cfg, capture=False, processor=processor, on_step=lambda i, z: steps.append(z.copy()))
    return steps


def test_c1_null_guidance_equivalence(default_cfg):
    cfg = with_values(default_cfg, OFF)
    start = time.perf_counter()
    guided = trajectory(cfg, "guided")
    elapsed = time.perf_counter() - start
    plain = trajectory(cfg, "plain")
    equal = [np.array_equal(a, b) for a, b in zip(guided, plain)]
    ok = len(guided) == 20 and all(equal) and elapsed < 5.0
    record("C1 null-guidance equivalence", ok, f"{sum(equal)}/{len(guided)} steps bit-equal, guided run {elapsed:.2f}s")


def test_c2_shared_kv_oracle():
    rng = np.random.default_rng(2)
    worst = 0
    for _ in range(100):
        b = int(rng.integers(2, 5))
        nq, nkv, d = (int(x) for x in rng.integers(1, 20, size=3))
        src = int(rng.integers(0, b))
        targets = tuple(i for i in range(b) if i != src and rng.random() < 0.7) or ((src + 1) % b,)
        cfg = GuidanceConfig(kv_share_enabled=True, kv_source_index=src, kv_target_indices=targets)
        q = rng.standard_normal((b, nq, d)).astype(np.float32)
        k = rng.standard_normal((b, nkv, d)).astype(np.float32)
        v = rng.standard_normal((b, nkv, d)).astype(np.float32)
        k2, v2 = share_kv(k, v, cfg)
        for t in targets:
            out, _ = scaled_dot_attention(q[t], k2[t], v2[t])
            ref, _ = scaled_dot_attention(q[t].copy(), k[src].copy(), v[src].copy())
            ulp = np.abs(out.view(np.int32).astype(np.int64) - ref.view(np.int32).astype(np.int64)).max()
            worst = max(worst, int(ulp))
    record("C2 shared-KV oracle", worst == 0, f"100 fuzzed cases, max difference {worst} ulp")


def test_c3_image_branch_identity():
    rng = np.random.default_rng(3)
    words = ["red", "leather", "bag", "on", "marble", "table", "lamp", "glass", "studio"]
    changed = 0
    for _ in range(20):
        raw = {
            "model": {"seed": int(rng.integers(0, 2**31))},
            "schedule": {"inference_steps": int(rng.integers(2, 8))},
            "sampler": {"shared_noise": bool(rng.integers(2))},
            "guidance": {"kv_share_enabled": False, "mask_enabled": bool(rng.integers(2))},
            "prompts": {"user_prompt": " ".join(rng.choice(words, size=int(rng.integers(1, 9))))},
        }
        base = build_config(raw)
        shared = with_values(base, {"guidance.kv_share_enabled": True, "guidance.kv_branches": ["image-cross"]})
        a, b = generate(base, capture=False), generate(shared, capture=False)
        same = np.array_equal(a.latents, b.latents) and all(
            np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images)
        )
        changed += not same
    record("C3 image-branch duplication identity", changed == 0, f"{20 - changed}/20 fuzzed runs bit-identical")


def test_c4_mask_null(default_cfg):
    base = with_values(default_cfg, {"guidance.mask_enabled": False})
    masked = with_values(default_cfg, {"guidance.mask_enabled": True, "guidance.tau": 0.0, "guidance.mask_mode": "gated"})
    a, b = generate(base), generate(masked)
    same = np.array_equal(a.latents, b.latents) and all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images))
    maps_same = all(np.array_equal(x.map.weights, y.map.weights) for x, y in zip(a.capture.records, b.capture.records))
    record("C4 mask null test", same and maps_same, f"latents, images and {len(a.capture.records)} maps bit-equal: {same and maps_same}")


def test_c5_mask_monotonicity():
    rng = np.random.default_rng(5)
    antitone_fail = convex_fail = 0
    worst = 0.0
    for _ in range(1000):
        heads, nq, nkv, d = (int(x) for x in rng.integers(1, 9, size=4))
        logits = rng.standard_normal((heads, nq, nkv)) * rng.uniform(0.1, 10)
        w = np.stack([T.softmax_rows(l) for l in logits])
        t1, t2 = np.sort(rng.uniform(0, 1, 2))
        m1, m2 = threshold_map(w, t1).mask, threshold_map(w, t2).mask
        antitone_fail += not (m1 >= m2).all()
        v = rng.standard_normal((heads, nkv, d)).astype(np.float32)
        out = apply_mask(w, m2, v, "renorm")
        eff = masked_weights(w, m2, "renorm").astype(np.float64)
        sums = eff.sum(axis=-1)
        worst = max(worst, float(np.abs(sums - 1).max()))
        in_hull = (out >= v.min(axis=1, keepdims=True) - 1e-6).all() and (out <= v.max(axis=1, keepdims=True) + 1e-6).all()
        recon = np.allclose(out, np.einsum("hqk,hkd->hqd", eff, v), atol=1e-5)
        convex_fail += not ((eff >= 0).all() and np.abs(sums - 1).max() <= 1e-6 and in_hull and recon)
    ok = antitone_fail == 0 and convex_fail == 0
    record(
        "C5 mask monotonicity",
        ok,
        f"antitone violations {antitone_fail}/1000, convexity violations {convex_fail}/1000, max |sum-1| {worst:.1e}",
    )


def test_c6_attention_normalization():
    rng = np.random.default_rng(6)
    worst, bad = 0.0, 0
    for _ in range(1000):
        nq, nkv, d = (int(x) for x in rng.integers(1, 40, size=3))
        scale = 10.0 ** rng.uniform(-3, 2)
        q = (rng.standard_normal((nq, d)) * scale).astype(np.float32)
        k = rng.standard_normal((nkv, d)).astype(np.float32)
        _, w = scaled_dot_attention(q, k, rng.standard_normal((nkv, 2)).astype(np.float32))
        err = float(np.abs(w.astype(np.float64).sum(axis=1) - 1).max())
        worst = max(worst, err)
        bad += not (err <= 1e-6 and (w >= 0).all() and (w <= 1).all())
    record("C6 attention normalization", bad == 0, f"1000 calls, {bad} violations, max |row sum - 1| {worst:.1e}")


def test_c7_cli_determinism(tmp_path):
    env = dict(os.environ)
    times = []
    for name in ("a", "b"):
        env["QKVGUIDE_OUTPUT_ROOT"] = str(tmp_path / name)
        start = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "qkvguide", "generate", str(ROOT / "configs" / "default.toml")],
            env=env,
            capture_output=True,
            text=True,
        )
        times.append(time.perf_counter() - start)
        assert proc.returncode == 0, proc.stderr
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    identical = files == files_b and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = identical and max(times) < 10.0
    record("C7 determinism", ok, f"{len(files)} files byte-identical: {identical}, runs {times[0]:.2f}s / {times[1]:.2f}s")


@pytest.mark.slow
def test_c8_directional_consistency(default_cfg):
    cfg = with_values(default_cfg, {**OFF, "guidance.kv_branches": ["text-cross"]})
    assert cfg.preset_condition != cfg.user_prompt
    start = time.perf_counter()
    report = compare(cfg, "kv_share", seeds=20)
    elapsed = time.perf_counter() - start
    s = report["summary"]
    st = s["sign_test_mid_cosine"]
    ok = s["mean_variant_mid_cosine"] > s["mean_baseline_mid_cosine"] and st["p_value"] < 0.05 and elapsed < 180
    record(
        "C8 directional consistency effect",
        ok,
        f"mean mid cosine {s['mean_baseline_mid_cosine']:.4f} -> {s['mean_variant_mid_cosine']:.4f}, "
        f"sign test +{st['positive']}/-{st['negative']} p={st['p_value']:.2g}, {elapsed:.0f}s",
    )


def test_c9_lambda_linearity():
    rng = np.random.default_rng(9)
    lams = np.array([0.0, 0.5, 1.0, 2.0])
    design = np.stack([np.ones_like(lams), lams], axis=1)
    model = ToyDenoiser(ModelConfig())
    worst = 0.0
    cases = []
    for blk in model.blocks:
        cases.append((blk.cross_attn, 64, model.config.heads))
    for _ in range(20):
        d = int(rng.integers(1, 5)) * 4
        cases.append((DecoupledWeights(*(rng.standard_normal((d, d)).astype(np.float32) for _ in range(6))), d, 2))
    for w, d, heads in cases:
        x = rng.standard_normal((16, d)).astype(np.float32)
        text = rng.standard_normal((int(rng.integers(1, 12)), d)).astype(np.float32)
        image = rng.standard_normal((16, d)).astype(np.float32)
        outs = np.stack(
            [decoupled_cross_attention(x, text, image, w.with_lambda(float(l)), heads)[0].astype(np.float64) for l in lams]
        )
        # least-squares fit of out = text_part + lambda * image_part, per element
        coef, *_ = np.linalg.lstsq(design, outs.reshape(len(lams), -1), rcond=None)
        fit = (design @ coef).reshape(outs.shape)
        for o, f in zip(outs, fit):
            worst = max(worst, float(np.linalg.norm(o - f) / np.linalg.norm(o)))
    record("C9 lambda linearity", worst <= 1e-5, f"{len(cases)} layers, max relative residual {worst:.2e}")


def test_c10_file_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    pgm_bad = tensor_bad = 0
    for i in range(200):
        side = int(rng.integers(1, 9))
        nkv = int(rng.integers(1, 10))
        w = rng.dirichlet(np.ones(nkv), size=(2, side * side)).astype(np.float32)
        amap = AttentionMap(w, "mid.xattn", i, "text")
        idx = int(rng.integers(0, nkv))
        written = export_map_image(amap, idx, tmp_path / "m.pgm")
        expected = quantize_column(map_column(w, idx)).reshape(side, side)
        pgm_bad += not (np.array_equal(read_pgm(tmp_path / "m.pgm"), expected) and np.array_equal(written, expected))

        x = (rng.standard_normal(tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(1, 5)))) * 1e3).astype(np.float32)
        buf = io.BytesIO()
        T.dump_tensor(x, buf)
        buf.seek(0)
        y = T.load_tensor(buf)
        tensor_bad += not (y.shape == x.shape and y.tobytes() == x.tobytes())
    ok = pgm_bad == 0 and tensor_bad == 0
    record("C10 file-format round trips", ok, f"200 PGM ({pgm_bad} mismatches), 200 QKVT ({tensor_bad} mismatches)")
