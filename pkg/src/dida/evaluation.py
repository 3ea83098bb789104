"""Grounding evaluation: binarized-map IoU against saliency, and GrabCut seeds."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .attention import (AttentionMap, attention_map, mask_salient_region, soften,
                        vda_signal)
from .encoder import Encoder
from .scenes import Scene, upsample_bilinear

FG, BG, UNKNOWN = 255, 0, 128


def worker_count() -> int:
    """Thread cap from ``DIDA_THREADS``; defaults to the available cores."""
    env = os.environ.get("DIDA_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("DIDA_THREADS must be >= 1")
        return n
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def parallel_map(fn, items, threads: int | None = None) -> list:
    threads = worker_count() if threads is None else threads
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    """1 where strictly greater than ``threshold``, else 0."""
    m = np.asarray(m.data if isinstance(m, T.Tensor) else m, dtype=np.float64)
    return (m > threshold).astype(np.float64)


def iou(a, b) -> float:
    """Intersection over union of two binary masks; two empty masks score 1.0."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def grabcut_seeds(m, hi: float = 0.7, lo: float = 0.1) -> np.ndarray:
    """Trimap codes: FG (255) above ``hi``, BG (0) below ``lo``, UNKNOWN (128) elsewhere."""
    m = np.asarray(m.data if isinstance(m, T.Tensor) else m, dtype=np.float64)
    seeds = np.full(m.shape, UNKNOWN, dtype=np.uint8)
    seeds[m > hi] = FG
    seeds[m < lo] = BG
    return seeds


def scene_attention(encoder: Encoder, scene: Scene, mode: str = "dot") -> AttentionMap:
    """Inference-time attention map for one scene; no graph is kept."""
    masked, _ = mask_salient_region(scene.image, scene.saliency)
    out = encoder(scene.image)
    with T.no_grad():
        out_m = encoder(masked)
    s = vda_signal(out.features, out_m.features, mode)
    amap = attention_map(s, out.activations, retain_graph=False)
    with T.no_grad():
        amap.softened = soften(amap.raw, amap.alpha, amap.beta)
    return amap


def vda_diagnostic(encoder: Encoder, scene: Scene) -> AttentionMap:
    """Threshold-mode map: how well ``encoder`` attends to the masked salient region."""
    return scene_attention(encoder, scene, mode="threshold")


def map_iou(m, mask) -> float:
    """Upsample a map to the mask's resolution, binarize at 0.5, and score it."""
    mask = np.asarray(mask)
    up = upsample_bilinear(np.asarray(m.data if isinstance(m, T.Tensor) else m), *mask.shape)
    return iou(binarize(up), mask)


def scene_ious(encoder: Encoder, scenes: list, mode: str = "dot", threads: int | None = None) -> list:
    """Per-scene IoU of the upsampled softened map against the full-resolution mask."""
    def one(scene):
        return map_iou(scene_attention(encoder, scene, mode).softened, scene.saliency)
    return parallel_map(one, scenes, threads)


def mean_iou(encoder: Encoder, scenes: list, mode: str = "dot", threads: int | None = None) -> float:
    if not scenes:
        raise ValueError("mean_iou needs at least one scene")
    return float(np.mean(scene_ious(encoder, scenes, mode, threads)))
