"""Visual difference attention and the difference-attention loss.

Pipeline for one training image ``I`` with saliency ``S``::

    I_m        = I with the tight box around S > 0.5 filled by I's channel means
    f, f_m     = encoder(I).features, encoder(I_m).features
    s          = f . (f - f_m)                     (dot mode, differentiable)
               | sum(top-|.| entries of f - f_m)   (threshold mode, diagnostic)
    G          = ds/dA for the activations A of I
    M          = relu(sum_i mean(G_i) * A_i) / max(...)
    M_soft     = sigmoid(16 * (M - 0.5))
    loss       = 1 - cos(M_soft, S pooled to the map grid)

``G`` is built with graph links during training, so the loss gradient
reaches the encoder parameters both through ``A`` and through ``G``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder
from .scenes import Scene, downsample_mask
from .tensor import Tensor

SOFT_ALPHA = 16.0
SOFT_BETA = 0.5
KEEP_FRACTION = 0.25
NORM_GUARD = 1e-12
MODES = ("dot", "threshold")


class NoSalientRegion(ValueError):
    """The saliency map has no pixel above 0.5."""


@dataclass(frozen=True)
class MaskSpec:
    row0: int
    col0: int
    row1: int   # exclusive
    col1: int   # exclusive
    fill: str = "channel_mean"

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)


@dataclass
class AttentionMap:
    raw: Tensor                    # M, p x q, max-normalized to [0, 1]
    softened: Tensor | None = None # M_soft, p x q, entries in (0, 1)
    weights: Tensor | None = None  # per-map GAP of the gradient
    alpha: float = SOFT_ALPHA
    beta: float = SOFT_BETA


def mask_salient_region(image, saliency, threshold: float = 0.5) -> tuple[np.ndarray, MaskSpec]:
    """Fill the tight bounding box of ``saliency > threshold`` with the image's per-channel mean."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    saliency = np.asarray(saliency.data if isinstance(saliency, Tensor) else saliency)
    if saliency.shape != image.shape[1:]:
        raise ValueError(f"saliency shape {saliency.shape} does not match image {image.shape}")
    rows, cols = np.nonzero(saliency > threshold)
    if rows.size == 0:
        raise NoSalientRegion("no saliency value above %.2f" % threshold)
    box = MaskSpec(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    masked = image.copy()
    fill = image.mean(axis=(1, 2))
    masked[:, box.row0:box.row1, box.col0:box.col1] = fill[:, None, None]
    return masked, box


def difference_vector(f, f_m) -> Tensor:
    if f.shape != f_m.shape:
        raise ValueError(f"feature length mismatch {f.shape} vs {f_m.shape}")
    return T.sub(f, f_m)


def dominant_selection(values, keep_fraction: float = KEEP_FRACTION) -> np.ndarray:
    """0/1 mask over the ceil(keep_fraction * k) largest magnitudes; ties go to lower indices."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    v = np.asarray(values.data if isinstance(values, Tensor) else values).reshape(-1)
    keep = math.ceil(keep_fraction * v.size)
    order = np.argsort(-np.abs(v), kind="stable")
    sel = np.zeros(v.size)
    sel[order[:keep]] = 1.0
    return sel


def dominant_difference(f_d, keep_fraction: float = KEEP_FRACTION) -> Tensor:
    """Keep the dominant entries of ``f_d``, zero the rest; the selection is a constant."""
    f_d = f_d if isinstance(f_d, Tensor) else Tensor(f_d)
    return T.mul(f_d, Tensor(dominant_selection(f_d, keep_fraction)))


def vda_signal(f, f_m, mode: str = "dot", keep_fraction: float = KEEP_FRACTION) -> Tensor:
    f_d = difference_vector(f, f_m)
    if mode == "dot":
        return T.dot(f, f_d)
    if mode == "threshold":
        return T.sum(dominant_difference(f_d, keep_fraction))
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def attention_map(s: Tensor, activations: Tensor, retain_graph: bool = False) -> AttentionMap:
    """Gradient-weighted map of the activations for signal ``s``; returns the raw map only.

    With ``retain_graph`` the map stays differentiable with respect to
    everything ``s`` and ``activations`` depend on. Without it the result is
    a plain tensor.
    """
    A = activations
    if A.ndim != 3:
        raise ValueError(f"activations must be n x p x q, got {A.shape}")
    if not retain_graph:
        with T.no_grad():
            return _attention_map(s, A, retain_graph=False)
    return _attention_map(s, A, retain_graph=True)


def _attention_map(s, A, retain_graph):
    (G,) = T.backward(s, [A], build_higher=retain_graph)
    weights = T.mean(G, axis=(1, 2))
    combined = T.sum(T.mul(T.expand(weights, A.shape, (1, 2)), A), axis=0)
    M = T.relu(combined)
    if M.data.max() > 0.0:
        M = T.div(M, T.amax(M))
    return AttentionMap(raw=M, weights=weights)


def soften(M, alpha: float = SOFT_ALPHA, beta: float = SOFT_BETA) -> Tensor:
    return T.sigmoid(T.mul(T.sub(M, beta), alpha))


def _guarded_norm(v: Tensor, eps: float) -> Tensor:
    n = T.l2_norm(v)
    return n if n.data >= eps else Tensor(eps)


def dida_loss(m_soft, s_low, eps: float = NORM_GUARD) -> Tensor:
    """1 - cosine similarity of the flattened maps; each norm is floored at ``eps``."""
    m_soft = m_soft if isinstance(m_soft, Tensor) else Tensor(m_soft)
    s_low = s_low if isinstance(s_low, Tensor) else Tensor(s_low)
    if m_soft.shape != s_low.shape:
        raise ValueError(f"map shapes differ: {m_soft.shape} vs {s_low.shape}")
    m = T.reshape(m_soft, (m_soft.size,))
    s = T.reshape(s_low, (s_low.size,))
    cos = T.div(T.dot(m, s), T.mul(_guarded_norm(m, eps), _guarded_norm(s, eps)))
    return T.sub(1.0, cos)


def dida_forward(encoder: Encoder, scene: Scene, target=None,
                 alpha: float = SOFT_ALPHA, beta: float = SOFT_BETA) -> tuple[Tensor, AttentionMap]:
    """Loss and map for one scene; the loss is differentiable in every encoder parameter.

    ``target`` replaces the pooled saliency mask when given.
    """
    masked, _ = mask_salient_region(scene.image, scene.saliency)
    out = encoder(scene.image)
    out_m = encoder(masked)
    s = vda_signal(out.features, out_m.features, "dot")
    amap = attention_map(s, out.activations, retain_graph=True)
    amap.softened = soften(amap.raw, alpha, beta)
    amap.alpha, amap.beta = alpha, beta
    if target is None:
        target = downsample_mask(scene.saliency, *amap.raw.shape)
    return dida_loss(amap.softened, target), amap


def contrastive_loss(view_a: list, view_b: list, temperature: float = 0.5) -> Tensor:
    """In-batch NT-Xent over cosine similarities; ``view_a[i]`` and ``view_b[i]`` are positives."""
    n = len(view_a)
    if n < 2 or len(view_b) != n:
        raise ValueError("contrastive_loss needs two equal views with batch >= 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    feats = [T.div(v, T.l2_norm(v)) for v in list(view_a) + list(view_b)]
    Z = T.stack(feats)
    logits = T.mul(T.matmul(Z, T.transpose(Z)), 1.0 / temperature)
    # exp(-1e4) underflows to exactly 0, removing self-similarity from the softmax
    logits = T.add(logits, Tensor(-1e4 * np.eye(2 * n)))
    positives = np.zeros((2 * n, 2 * n))
    idx = np.arange(2 * n)
    positives[idx, (idx + n) % (2 * n)] = 1.0
    total = T.sub(T.sum(T.logsumexp(logits, axis=1)), T.sum(T.mul(logits, Tensor(positives))))
    return T.mul(total, 1.0 / (2 * n))
