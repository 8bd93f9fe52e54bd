"""One-shot global L1 magnitude pruning and mask algebra.

A mask is a plain dict: parameter path -> uint8 array of the parameter's
shape, 1 = weight survives, 0 = pruned. The prunable domain is exactly the
encoder-region weight matrices (2-D tensors under "encoder/"); biases,
layer norms, embeddings, the feature projection and the CTC head are never
pruned. A mask is detached from the weights it was ranked on, so a mask
derived from one model can be applied to another of the same shape.
"""
from __future__ import annotations

import math

import numpy as np

from .params import ParameterTree

Mask = dict[str, np.ndarray]


def prunable_paths(params: ParameterTree) -> list[str]:
    return [p for p, v in params.items() if p.startswith("encoder/") and v.ndim == 2]


def global_l1_prune(params: ParameterTree, sparsity: float) -> Mask:
    """Zero the floor(sparsity * N) smallest-magnitude prunable weights.

    Ranking is global across all prunable matrices; ties are broken by
    (path lexicographic, flat index ascending), so the mask is a pure
    function of the weights.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity {sparsity} outside [0, 1]")
    paths = prunable_paths(params)
    if not paths:
        raise ValueError("parameter tree has no prunable (encoder matrix) entries")

    magnitudes = np.concatenate([np.abs(params[p]).ravel() for p in paths])
    n = magnitudes.size
    k = min(n, int(math.floor(float(sparsity) * n + 1e-9)))

    flat = np.ones(n, dtype=np.uint8)
    if k > 0:
        # stable sort on magnitude alone == tie-break by (path, flat index),
        # because the concatenation is already in that order
        order = np.argsort(magnitudes, kind="stable")
        flat[order[:k]] = 0

    mask: Mask = {}
    offset = 0
    for p in paths:
        size = params[p].size
        mask[p] = flat[offset:offset + size].reshape(params[p].shape)
        offset += size
    return mask


def _check_domains(a: Mask, b: Mask) -> None:
    if sorted(a) != sorted(b):
        raise ValueError("masks cover different parameter paths")
    for p in a:
        if a[p].shape != b[p].shape:
            raise ValueError(f"mask shapes differ at {p!r}: {a[p].shape} vs {b[p].shape}")


def apply_mask(params: ParameterTree, mask: Mask) -> ParameterTree:
    """Elementwise product on masked paths; all other paths pass through."""
    out = ParameterTree(config=params.config)
    for path, value in params.items():
        if path in mask:
            if mask[path].shape != value.shape:
                raise ValueError(f"mask shape {mask[path].shape} != parameter "
                                 f"shape {value.shape} at {path!r}")
            out[path] = value * mask[path]
        else:
            out[path] = value
    missing = [p for p in mask if p not in params]
    if missing:
        raise ValueError(f"mask paths missing from parameters: {missing}")
    return out


def iou(a: Mask, b: Mask) -> float:
    """|surviving(a) & surviving(b)| / |surviving(a) | surviving(b)|."""
    _check_domains(a, b)
    inter = sum(int(np.count_nonzero(a[p] & b[p])) for p in a)
    union = sum(int(np.count_nonzero(a[p] | b[p])) for p in a)
    if union == 0:
        raise ValueError("IOU undefined: both masks have empty surviving sets")
    return inter / union


def union_mask(a: Mask, b: Mask) -> Mask:
    _check_domains(a, b)
    return {p: (a[p] | b[p]).astype(np.uint8) for p in a}


def intersection_mask(a: Mask, b: Mask) -> Mask:
    _check_domains(a, b)
    return {p: (a[p] & b[p]).astype(np.uint8) for p in a}


def mask_sparsity(mask: Mask) -> float:
    """Fraction of zeros over the mask domain."""
    total = sum(m.size for m in mask.values())
    if total == 0:
        raise ValueError("mask has an empty domain")
    zeros = sum(int(m.size - np.count_nonzero(m)) for m in mask.values())
    return zeros / total


def surviving_count(mask: Mask) -> int:
    return sum(int(np.count_nonzero(m)) for m in mask.values())
