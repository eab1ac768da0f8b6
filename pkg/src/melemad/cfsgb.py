"""Chunk-wise feature selection driven by gradient-boosting importance.

The dataset is cut into overlapping row chunks, a GBDT is trained per chunk,
features whose normalized importance clears the threshold in any chunk are
kept, and the union defines the projected dataset. Per-chunk work is pure and
may run in parallel; results are reduced in chunk order, so the output is
identical for any thread count.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gbdt
from .dataset import LabeledDataset
from .errors import (
    ChunkLargerThanData,
    DegenerateStride,
    EmptySelection,
    IndexOutOfRange,
    ValidationError,
)


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ChunkSpec:
    p: float = 0.2
    q: float = 0.2
    explicit_k: int | None = None

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValidationError("chunk fraction p must be in (0, 1]")
        if not 0.0 <= self.q < 1.0:
            raise ValidationError("overlap fraction q must be in [0, 1)")
        if self.explicit_k is not None and self.explicit_k < 1:
            raise ValidationError("explicit_k must be >= 1")


@dataclass(frozen=True)
class Chunk:
    index: int
    start: int
    stop: int  # exclusive

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ChunkSelection:
    chunk_index: int
    indices: np.ndarray
    scores: np.ndarray  # importance of each selected index in this chunk


@dataclass(frozen=True)
class SelectedFeatureSet:
    global_indices: np.ndarray
    per_chunk: list[ChunkSelection]
    threshold_used: float

    @property
    def r(self) -> int:
        return self.global_indices.shape[0]


@dataclass
class CfsgbReport:
    k: int
    chunk_sizes: list[int]
    chunk_selected_counts: list[int]
    r: int
    seconds_per_stage: dict[str, float]


def make_chunks(n: int, spec: ChunkSpec) -> list[Chunk]:
    """Chunk rows [0, n) into length-l windows, l = round(p*n), stepping by
    l - round(q*l); with explicit_k, exactly k windows start at evenly spaced
    offsets from 0 to n-l. Every row is covered either way."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    l = _half_up(spec.p * n)
    if l < 1:
        raise ValidationError(f"chunk size p={spec.p} rounds to zero samples at n={n}")
    if l > n:
        raise ChunkLargerThanData(f"chunk length {l} exceeds {n} rows")

    if spec.explicit_k is not None:
        k = spec.explicit_k
        if k == 1:
            return [Chunk(0, 0, n)]
        if k * l < n:
            raise ValidationError(
                f"explicit_k={k} chunks of {l} rows cannot cover {n} rows"
            )
        # evenly spaced starts from 0 to n-l; consecutive starts differ by at
        # most l because k*l >= n, so the windows always tile without gaps
        starts = [_half_up(i * (n - l) / (k - 1)) for i in range(k)]
        return [Chunk(i, s, s + l) for i, s in enumerate(starts)]

    overlap = _half_up(spec.q * l)
    stride = l - overlap
    if stride < 1:
        raise DegenerateStride(f"overlap q={spec.q} leaves stride {stride} at l={l}")
    chunks = []
    start = 0
    index = 0
    while True:
        stop = min(start + l, n)
        chunks.append(Chunk(index, start, stop))
        if stop == n:
            return chunks
        start += stride
        index += 1


def threshold_select(importances: np.ndarray, tau: float) -> np.ndarray:
    """Indices whose importance clears tau (inclusive); zero scores never pass."""
    imp = np.asarray(importances)
    return np.flatnonzero((imp >= tau) & (imp > 0))


def select_chunk_features(
    chunk_ds: LabeledDataset, cfg: gbdt.GbdtConfig, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    model = gbdt.train(chunk_ds, cfg)
    importances = gbdt.feature_importance(model)
    return threshold_select(importances, tau), importances


def aggregate(per_chunk: list[np.ndarray]) -> np.ndarray:
    if not per_chunk:
        return np.array([], dtype=np.int64)
    return np.unique(np.concatenate([np.asarray(s, dtype=np.int64) for s in per_chunk]))


def project_dataset(ds: LabeledDataset, s: SelectedFeatureSet) -> LabeledDataset:
    indices = np.asarray(s.global_indices, dtype=np.int64)
    if indices.size == 0:
        raise EmptySelection("no features selected; nothing to project")
    if indices.min() < 0 or indices.max() >= ds.m:
        raise IndexOutOfRange(f"selected index outside [0, {ds.m})")
    return ds.select_columns(np.sort(indices))


def _chunk_importances(
    ds: LabeledDataset, chunks: list[Chunk], cfg: gbdt.GbdtConfig, threads: int = 1
) -> list[np.ndarray]:
    def one(chunk: Chunk) -> np.ndarray:
        chunk_ds = ds.select_rows(np.arange(chunk.start, chunk.stop))
        chunk_cfg = replace(cfg, seed=cfg.seed + chunk.index)
        model = gbdt.train(chunk_ds, chunk_cfg)
        return gbdt.feature_importance(model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, chunks))
    return [one(chunk) for chunk in chunks]


def run_cfsgb(
    ds: LabeledDataset,
    spec: ChunkSpec,
    cfg: gbdt.GbdtConfig,
    tau: float,
    threads: int = 1,
) -> tuple[SelectedFeatureSet, LabeledDataset, CfsgbReport]:
    """Full selection pass: chunk, score, threshold, union, project."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    chunks = make_chunks(ds.n, spec)
    timings["chunking"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    importances = _chunk_importances(ds, chunks, cfg, threads)
    timings["training"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    per_chunk = []
    for chunk, imp in zip(chunks, importances):
        idx = threshold_select(imp, tau)
        per_chunk.append(ChunkSelection(chunk.index, idx, imp[idx]))
    union = aggregate([sel.indices for sel in per_chunk])
    if union.size == 0:
        raise EmptySelection(f"threshold {tau} excluded every feature in every chunk")
    selected = SelectedFeatureSet(union, per_chunk, tau)
    timings["selection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    projected = project_dataset(ds, selected)
    timings["projection"] = time.perf_counter() - t0

    report = CfsgbReport(
        k=len(chunks),
        chunk_sizes=[c.size for c in chunks],
        chunk_selected_counts=[sel.indices.shape[0] for sel in per_chunk],
        r=selected.r,
        seconds_per_stage=timings,
    )
    return selected, projected, report


def threshold_for_top_k(
    ds: LabeledDataset,
    spec: ChunkSpec,
    cfg: gbdt.GbdtConfig,
    k_features: int,
    threads: int = 1,
) -> float:
    """Largest tau keeping at least k_features in the union.

    A feature joins the union if any chunk clears tau, so the governing
    statistic is its maximum importance across chunks; tau is the k-th
    largest of those maxima. If fewer than k_features ever split, falls back
    to the smallest positive maximum (selecting everything selectable).
    """
    if not 1 <= k_features <= ds.m:
        raise ValidationError(f"k_features must be in [1, {ds.m}]")
    chunks = make_chunks(ds.n, spec)
    importances = _chunk_importances(ds, chunks, cfg, threads)
    stat = np.max(np.stack(importances), axis=0)
    ranked = np.sort(stat)[::-1]
    value = ranked[k_features - 1]
    if value > 0:
        return float(value)
    positive = stat[stat > 0]
    return float(positive.min()) if positive.size else 0.0


def save_selection(selected: SelectedFeatureSet, path) -> None:
    payload = {
        "threshold": selected.threshold_used,
        "global_indices": [int(i) for i in selected.global_indices],
        "per_chunk": [
            {
                "chunk": sel.chunk_index,
                "indices": [int(i) for i in sel.indices],
                "scores": [float(s) for s in sel.scores],
            }
            for sel in selected.per_chunk
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_selection(path) -> SelectedFeatureSet:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    per_chunk = [
        ChunkSelection(
            chunk_index=entry["chunk"],
            indices=np.array(entry["indices"], dtype=np.int64),
            scores=np.array(entry["scores"], dtype=np.float64),
        )
        for entry in payload["per_chunk"]
    ]
    return SelectedFeatureSet(
        global_indices=np.array(payload["global_indices"], dtype=np.int64),
        per_chunk=per_chunk,
        threshold_used=payload["threshold"],
    )
