"""Objectness-driven per-query loss reweighting.

Teacher encoder maps are fused with (student) query features into scalar
attention maps, pooled under each predicted box with RoIAlign, and summed
into a per-query objectness score.  Queries the model already attends to
get small classification weights; under-attended ones get large weights.
The whole path is detached: the weights act as constants in the loss.
"""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Tensor, min_max_scale
from .geometry import roi_align
from .matching import Assignment

logger = logging.getLogger(__name__)

MODES = ("encoder", "matched", "all")


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(mat ** 2, axis=-1, keepdims=True))
    return mat / np.where(norms > 0, norms, 1.0)


def query_fused_maps(encoder_maps: list[np.ndarray],
                     query_feats: np.ndarray | None) -> list[np.ndarray]:
    """Scalar attention map per scale.

    With query features (m, C): mean over the m queries of the inner
    product between each (normalized) map position and each (normalized)
    query.  Without query features: channel-mean of the normalized map.
    """
    maps = []
    for fmap in encoder_maps:
        h, w, c = fmap.shape
        flat = _normalize_rows(fmap.reshape(h * w, c))
        if query_feats is None:
            fused = flat.mean(axis=1)
        else:
            q = _normalize_rows(np.asarray(query_feats, dtype=np.float64))
            fused = flat @ q.mean(axis=0)
        maps.append(fused.reshape(h, w))
    return maps


def objectness_scores(fused_maps: list[np.ndarray], boxes: np.ndarray,
                      out_h: int = 7, out_w: int = 7,
                      samples_per_bin: int = 2) -> np.ndarray:
    """Sum of all RoIAlign bins of every scale, per box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.zeros(boxes.shape[0])
    for fmap in fused_maps:
        pooled = roi_align(Tensor(fmap), boxes, out_h, out_w, samples_per_bin)
        scores = scores + pooled.data.sum(axis=(1, 2))
    return scores


def sample_weights(scores: np.ndarray, beta: float = 0.2) -> np.ndarray:
    """w = (1 - min_max_scale(S))^beta, anti-monotone in the scores."""
    if beta <= 0:
        raise ValueError(f"reweighting beta must be positive, got {beta}")
    return (1.0 - min_max_scale(scores)) ** beta


def compute_query_weights(teacher_maps: list[np.ndarray], student_query_feats: np.ndarray,
                          student_boxes: np.ndarray, assignment: Assignment,
                          mode: str = "matched", beta: float = 0.2,
                          out_h: int = 7, out_w: int = 7, samples_per_bin: int = 2):
    """Full reweighting path -> (weights, scores, fused maps).

    mode "encoder": maps only; "matched": fuse queries matched to
    pseudo-labels (falls back to "all" when nothing matched); "all": fuse
    every query.
    """
    if mode not in MODES:
        raise ValueError(f"unknown objectness mode '{mode}' (choose from {MODES})")
    feats = np.asarray(student_query_feats, dtype=np.float64)
    selected: np.ndarray | None
    if mode == "encoder":
        selected = None
    elif mode == "matched":
        rows = [q for q, _ in assignment.pairs]
        if rows:
            selected = feats[rows]
        else:
            logger.info("no matched queries for objectness fusion; using all queries")
            selected = feats
    else:
        selected = feats
    maps = query_fused_maps(teacher_maps, selected)
    scores = objectness_scores(maps, student_boxes, out_h, out_w, samples_per_bin)
    return sample_weights(scores, beta), scores, maps
