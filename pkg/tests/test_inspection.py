import filecmp
import io
import math

import numpy as np
import pytest

from qkvguide import tensor as T
from qkvguide.attention import AttentionMap
from qkvguide.errors import InputError, LogicError
from qkvguide.inspection import (
    CaptureRecord,
    CaptureSink,
    consistency_metrics,
    cosine,
    export_map_image,
    load_archive,
    map_stats,
    mask_iou,
    read_index,
    read_pgm,
    row_entropy,
)
from qkvguide.sampler import generate


def amap(weights, layer="mid.xattn", step=0, branch="text"):
    return AttentionMap(np.asarray(weights, np.float32), layer, step, branch)


def random_maps(rng, heads, nq, nkv):
    return rng.dirichlet(np.ones(nkv), size=(heads, nq)).astype(np.float32)


def test_default_run_archive_count(default_cfg, tmp_path):
    res = generate(default_cfg, archive_dir=tmp_path)
    expected = 20 * 5 * 3 * 2  # steps x blocks x branches (self, text, image) x slots
    assert res.capture.count == expected
    entries = read_index(tmp_path)
    assert len(entries) == expected
    assert len({(e["run"], e["layer"], e["step"], e["slot"], e["branch"]) for e in entries}) == expected
    assert len(list((tmp_path / "maps").iterdir())) == expected


def test_empty_sink_empty_archive(tmp_path):
    sink = CaptureSink("r", tmp_path)
    sink.close()
    assert read_index(tmp_path) == []
    assert len(sink) == 0


def test_rerun_byte_identical_archive(short_cfg, tmp_path):
    generate(short_cfg, archive_dir=tmp_path / "a")
    generate(short_cfg, archive_dir=tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    a_maps, b_maps = tmp_path / "a" / "maps", tmp_path / "b" / "maps"
    names = sorted(p.name for p in a_maps.iterdir())
    assert names == sorted(p.name for p in b_maps.iterdir())
    assert all((a_maps / n).read_bytes() == (b_maps / n).read_bytes() for n in names)


def test_duplicate_record_rejected():
    sink = CaptureSink("r")
    rec = CaptureRecord(amap(np.full((1, 4, 2), 0.5)), "r", 0)
    sink.append(rec)
    with pytest.raises(LogicError):
        sink.append(rec)
    sink.append(CaptureRecord(rec.map, "r", 1))
    assert sink.count == 2


def test_capture_does_not_alias_maps():
    sink = CaptureSink("r")
    w = np.full((2, 1, 4, 2), 0.5, np.float32)
    sink.record_maps("mid.xattn", 0, "text", w, False)
    w[:] = 0
    assert sink.records[0].map.weights.min() == 0.5


def test_archive_round_trip_lossless(tmp_path, rng):
    sink = CaptureSink("r", tmp_path)
    w = random_maps(rng, 2, 16, 5)
    sink.record_maps("down0.xattn", 3, "text", np.stack([w, w[::-1]]), True)
    sink.close()
    recs = load_archive(tmp_path)
    assert [(r.slot, r.masked) for r in recs] == [(0, True), (1, True)]
    np.testing.assert_array_equal(recs[0].map.weights, w)
    np.testing.assert_array_equal(recs[1].map.weights, w[::-1])


def test_missing_archive(tmp_path):
    with pytest.raises(InputError):
        read_index(tmp_path)


# --- PGM export -----------------------------------------------------------


def test_uniform_map_is_mid_gray(tmp_path):
    img = export_map_image(amap(np.full((2, 16, 4), 0.25)), 1, tmp_path / "u.pgm")
    assert img.shape == (4, 4)
    assert (read_pgm(tmp_path / "u.pgm") == 128).all()


def test_spike_map_single_white_pixel(tmp_path):
    w = np.full((1, 16, 2), 0.5, np.float32)
    w[0, 9] = [1.0, 0.0]
    img = export_map_image(amap(w), 0, tmp_path / "s.pgm")
    assert (tmp_path / "s.pgm").read_bytes()[:2] == b"P5"
    assert img[2, 1] == 255
    assert (np.delete(img.ravel(), 9) == 0).all()


def test_pgm_round_trip(tmp_path, rng):
    for i in range(10):
        w = random_maps(rng, 2, 64, 7)
        img = export_map_image(amap(w), i % 7, tmp_path / f"{i}.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / f"{i}.pgm"), img)


def test_export_errors(tmp_path):
    w = np.full((1, 16, 2), 0.5, np.float32)
    with pytest.raises(InputError):
        export_map_image(amap(w), 2, tmp_path / "x.pgm")
    with pytest.raises(InputError):
        export_map_image(amap(w), 0, tmp_path / "x.pgm", head=3)
    with pytest.raises(InputError):
        export_map_image(amap(np.full((1, 12, 2), 0.5)), 0, tmp_path / "x.pgm")


def test_map_stats_recompute(rng):
    w = random_maps(rng, 2, 16, 5)
    stats = map_stats(w, 3)
    col = w[:, :, 3].astype(np.float64).mean(axis=0)
    assert stats["max"] == pytest.approx(col.max(), rel=1e-12)
    assert stats["argmax"] == int(col.argmax())
    ent = -(w.astype(np.float64) * np.log(w.astype(np.float64))).sum(axis=-1).mean()
    assert stats["entropy"] == pytest.approx(ent, rel=1e-12)


# --- metrics --------------------------------------------------------------


def test_entropy_bounds(rng):
    for n in (2, 5, 77):
        uniform = np.full((3, n), 1.0 / n)
        np.testing.assert_allclose(row_entropy(uniform), math.log(n), atol=1e-6)
        w = rng.dirichlet(np.ones(n), size=200)
        ent = row_entropy(w)
        assert (ent <= math.log(n) + 1e-12).all()
        assert (ent < math.log(n) - 1e-6).all()
    assert row_entropy(np.array([[1.0, 0.0]]))[0] == 0.0


def test_cosine_and_iou_basics(rng):
    x = rng.standard_normal(10)
    assert cosine(x, x) == pytest.approx(1.0)
    assert cosine([1, 0, 0], [0, 3, 0]) == 0.0
    assert cosine(x, -x) == pytest.approx(-1.0)
    m = rng.integers(0, 2, 20).astype(bool)
    assert mask_iou(m, m) == 1.0
    assert mask_iou(np.zeros(3), np.zeros(3)) == 1.0
    assert mask_iou([1, 0], [0, 1]) == 0.0


def test_identical_slots_report_ones(rng):
    sink = CaptureSink("r")
    for step in range(3):
        w = random_maps(rng, 2, 16, 6)
        sink.record_maps("mid.xattn", step, "text", np.stack([w, w]), False)
        h = rng.standard_normal((16, 8)).astype(np.float32)
        sink.record_features("mid", step, np.stack([h, h]))
    rep = consistency_metrics(sink.records, sink.features)
    assert rep.mid_cosine == pytest.approx(1.0)
    assert rep.mean_iou == 1.0
    assert set(rep.entropy) == {"mid.xattn/text/s0", "mid.xattn/text/s1"}


def test_orthogonal_features_zero_cosine():
    a = np.zeros((4, 2), np.float32)
    b = np.zeros((4, 2), np.float32)
    a[:, 0], b[:, 1] = 1.0, 1.0
    rep = consistency_metrics([], {("mid", 0, 0): a, ("mid", 0, 1): b})
    assert rep.mid_cosine == 0.0


def test_independent_random_maps_iou_monte_carlo(rng):
    nkv, nq, trials = 8, 64, 400
    ious, fractions = [], []
    for _ in range(trials):
        a = rng.dirichlet(np.ones(nkv), size=nq)
        b = rng.dirichlet(np.ones(nkv), size=nq)
        ma, mb = a >= 1.0 / nkv, b >= 1.0 / nkv
        fractions += [ma.mean(), mb.mean()]
        rec = [CaptureRecord(amap(x[None]), "r", s) for s, x in enumerate((a, b))]
        ious.append(consistency_metrics(rec).mask_iou["mid.xattn"])
    p = float(np.mean(fractions))
    # two independent Bernoulli(p) masks: E|A & B| / E|A | B| = p / (2 - p)
    assert np.mean(ious) == pytest.approx(p / (2 - p), abs=0.01)
    assert 0.0 <= min(ious) and max(ious) <= 1.0


def test_mismatched_slots_rejected(rng):
    w = random_maps(rng, 1, 4, 3)
    recs = [CaptureRecord(amap(w), "r", 0), CaptureRecord(amap(w, layer="up0.xattn"), "r", 1)]
    with pytest.raises(InputError):
        consistency_metrics(recs)
    h = np.ones((2, 2), np.float32)
    with pytest.raises(InputError):
        consistency_metrics([], {("mid", 0, 0): h, ("up0", 0, 1): h})


def test_tensor_binary_lossless(rng):
    x = rng.standard_normal((3, 5, 7)).astype(np.float32)
    buf = io.BytesIO()
    T.dump_tensor(x, buf)
    buf.seek(0)
    np.testing.assert_array_equal(T.load_tensor(buf), x)
