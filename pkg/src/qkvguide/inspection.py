"""Attention-map capture, archive I/O, PGM export, and slot-consistency metrics.

An archive is a directory holding one ``.qkvt`` tensor file per captured map
plus ``index.jsonl`` with one line per record::

    {"run": ..., "layer": ..., "step": ..., "slot": ..., "branch": ..., "masked": ..., "file": ...}
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from . import tensor as T
from .attention import AttentionMap
from .errors import InputError, LogicError

INDEX_NAME = "index.jsonl"


@dataclass(frozen=True)
class CaptureRecord:
    map: AttentionMap
    run_id: str
    slot: int
    # whether mask guidance was applied to this map's branch at capture time
    masked: bool = False

    @property
    def layer_id(self) -> str:
        return self.map.layer_id

    @property
    def step(self) -> int:
        return self.map.step

    @property
    def branch(self) -> str:
        return self.map.branch

    @property
    def key(self) -> tuple[str, str, int, int, str]:
        return (self.run_id, self.layer_id, self.step, self.slot, self.branch)

    @property
    def filename(self) -> str:
        return f"{self.step:04d}_{self.layer_id}_{self.branch}_s{self.slot}.qkvt"


class CaptureSink:
    """Collects attention maps and block features for one run.

    Appends are serialized with a lock. ``archive_dir`` streams every record
    to disk; ``keep`` holds records in memory for metrics.
    """

    def __init__(self, run_id: str = "", archive_dir: str | Path | None = None, keep: bool = True):
        self.run_id = run_id
        self.archive_dir = Path(archive_dir) if archive_dir is not None else None
        self.keep = keep
        self.records: list[CaptureRecord] = []
        self.features: dict[tuple[str, int, int], np.ndarray] = {}
        self.count = 0
        self._keys: set[tuple] = set()
        self._index_lines: list[str] = []
        self._lock = threading.Lock()
        if self.archive_dir is not None:
            (self.archive_dir / "maps").mkdir(parents=True, exist_ok=True)

    def __len__(self) -> int:
        return self.count

    def append(self, record: CaptureRecord) -> None:
        with self._lock:
            if record.key in self._keys:
                raise LogicError(f"duplicate capture record {record.key}")
            self._keys.add(record.key)
            self.count += 1
            if self.archive_dir is not None:
                rel = f"maps/{record.filename}"
                T.write_tensor(record.map.weights, self.archive_dir / rel)
                self._index_lines.append(
                    json.dumps(
                        {
                            "run": record.run_id,
                            "layer": record.layer_id,
                            "step": record.step,
                            "slot": record.slot,
                            "branch": record.branch,
                            "masked": record.masked,
                            "file": rel,
                        },
                        sort_keys=True,
                    )
                )
            if self.keep:
                self.records.append(record)

    def record_maps(self, layer_id: str, step: int, branch: str, weights: np.ndarray, masked: bool) -> None:
        for slot in range(weights.shape[0]):
            amap = AttentionMap(np.array(weights[slot], copy=True), layer_id, step, branch)
            self.append(CaptureRecord(amap, self.run_id, slot, masked))

    def record_features(self, layer_id: str, step: int, hidden: np.ndarray) -> None:
        with self._lock:
            for slot in range(hidden.shape[0]):
                self.features[(layer_id, step, slot)] = np.array(hidden[slot], copy=True)

    def close(self) -> None:
        if self.archive_dir is not None:
            text = "".join(line + "\n" for line in self._index_lines)
            (self.archive_dir / INDEX_NAME).write_text(text, encoding="utf-8")


def read_index(archive_dir: str | Path) -> list[dict]:
    path = Path(archive_dir) / INDEX_NAME
    if not path.exists():
        raise InputError(f"no capture archive at {archive_dir} (missing {INDEX_NAME})")
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def load_record(archive_dir: str | Path, entry: dict) -> CaptureRecord:
    weights = T.read_tensor(Path(archive_dir) / entry["file"])
    amap = AttentionMap(weights, entry["layer"], entry["step"], entry["branch"])
    return CaptureRecord(amap, entry["run"], entry["slot"], entry.get("masked", False))


def load_archive(archive_dir: str | Path) -> list[CaptureRecord]:
    return [load_record(archive_dir, e) for e in read_index(archive_dir)]


# --- map images -----------------------------------------------------------


def grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise InputError(f"{n} queries do not form a square grid")
    return side


def map_column(weights: np.ndarray, index: int, head: int | None = None) -> np.ndarray:
    """Attention paid to key ``index`` by every query; head-averaged unless ``head`` is given."""
    w = weights if weights.ndim == 3 else weights[None]
    n_keys = w.shape[2]
    if not 0 <= index < n_keys:
        raise InputError(f"key index {index} out of range [0, {n_keys})")
    if head is not None:
        if not 0 <= head < w.shape[0]:
            raise InputError(f"head {head} out of range [0, {w.shape[0]})")
        return w[head, :, index].astype(np.float64)
    return np.cumsum(w[:, :, index].astype(np.float64), axis=0)[-1] / w.shape[0]


def quantize_column(col: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to 8 bits; a constant column becomes mid-gray."""
    lo, hi = float(col.min()), float(col.max())
    if hi == lo:
        return np.full(col.shape, 128, dtype=np.uint8)
    return np.rint((col - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_map_image(record: CaptureRecord | AttentionMap, index: int, path: str | Path, head: int | None = None):
    """Write the attention column for one token/patch as an 8-bit PGM (P5).

    Returns the quantized ``[grid, grid]`` array that was written.
    """
    amap = record.map if isinstance(record, CaptureRecord) else record
    col = map_column(amap.weights, index, head)
    side = grid_side(col.shape[0])
    img = quantize_column(col).reshape(side, side)
    Image.fromarray(img, mode="L").save(path, format="PPM")
    return img


def read_pgm(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise InputError(f"{path}: expected a grayscale PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


# --- statistics -----------------------------------------------------------


def row_entropy(weights: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row along the last axis; 0 log 0 = 0."""
    p = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def map_stats(weights: np.ndarray, index: int, head: int | None = None) -> dict:
    col = map_column(weights, index, head)
    side = grid_side(col.shape[0])
    arg = int(np.argmax(col))
    return {
        "max": float(col.max()),
        "argmax": arg,
        "argmax_yx": [arg // side, arg % side],
        "entropy": float(row_entropy(weights).mean()),
    }


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class ConsistencyReport:
    """Cross-slot similarity proxies.

    ``layer_cosine``: per block, mean over steps of the cosine between the two
    slots' block outputs. ``mask_iou``: per cross-attention layer, mean over
    steps of the IoU of the two slots' thresholded text maps. ``entropy``: per
    (layer, branch, slot), mean row entropy over steps.
    """

    slots: tuple[int, int] = (0, 1)
    layer_cosine: dict[str, float] = field(default_factory=dict)
    mask_iou: dict[str, float] = field(default_factory=dict)
    entropy: dict[str, float] = field(default_factory=dict)

    @property
    def mid_cosine(self) -> float:
        return self.layer_cosine.get("mid", math.nan)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(list(self.mask_iou.values()))) if self.mask_iou else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slots"] = list(self.slots)
        d["mid_cosine"] = self.mid_cosine
        d["mean_iou"] = self.mean_iou
        return d


def consistency_metrics(
    records: Iterable[CaptureRecord],
    features: dict[tuple[str, int, int], np.ndarray] | None = None,
    tau: float | None = None,
    slots: tuple[int, int] = (0, 1),
) -> ConsistencyReport:
    """Compare two batch slots. ``tau=None`` thresholds each map at 1/Nkv."""
    a, b = slots
    features = features or {}
    report = ConsistencyReport(slots=(a, b))

    feat_layers = {s: {(lay, st) for (lay, st, sl) in features if sl == s} for s in (a, b)}
    if feat_layers[a] != feat_layers[b]:
        raise InputError("feature captures for the two slots cover different layers/steps")
    per_layer: dict[str, list[float]] = {}
    for lay, st in sorted(feat_layers[a]):
        per_layer.setdefault(lay, []).append(cosine(features[(lay, st, a)], features[(lay, st, b)]))
    report.layer_cosine = {k: float(np.mean(v)) for k, v in per_layer.items()}

    by_key: dict[tuple[str, int, str], dict[int, np.ndarray]] = {}
    entropies: dict[str, list[float]] = {}
    for rec in records:
        if rec.slot not in (a, b):
            continue
        by_key.setdefault((rec.layer_id, rec.step, rec.branch), {})[rec.slot] = rec.map.weights
        ekey = f"{rec.layer_id}/{rec.branch}/s{rec.slot}"
        entropies.setdefault(ekey, []).append(float(row_entropy(rec.map.weights).mean()))
    report.entropy = {k: float(np.mean(v)) for k, v in sorted(entropies.items())}

    ious: dict[str, list[float]] = {}
    for (lay, st, branch), pair in sorted(by_key.items()):
        if set(pair) != {a, b}:
            raise InputError(f"layer {lay} step {st} branch {branch} is missing a slot")
        if branch != "text":
            continue
        wa, wb = pair[a], pair[b]
        t = 1.0 / wa.shape[-1] if tau is None else tau
        ious.setdefault(lay, []).append(mask_iou(wa >= np.float32(t), wb >= np.float32(t)))
    report.mask_iou = {k: float(np.mean(v)) for k, v in ious.items()}
    return report
