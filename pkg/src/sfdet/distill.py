"""Feature imitation between teacher and student encoder maps.

The teacher runs an extra forward pass on the student's strongly augmented
view; its finest-scale map, query features, and prediction entropies shape
a per-query spatial mask and a per-query reliability weight.  Only the
student map receives gradient.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bernoulli_entropy, min_max_scale


def query_uncertainty_weights(class_probs: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Per-query weights from top-1 prediction entropy.

    Confident queries (low entropy) weigh 1, maximally uncertain ones 0;
    a constant entropy vector degrades to uniform weight 1.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    top1 = probs.max(axis=1)
    entropy = bernoulli_entropy(top1)
    return (1.0 - min_max_scale(entropy)) ** beta


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(mat ** 2, axis=-1, keepdims=True))
    return mat / np.where(norms > 0, norms, 1.0)


def distill_masks(teacher_map: np.ndarray, teacher_query_feats: np.ndarray) -> np.ndarray:
    """Per-query spatial masks in [0, 1] of shape (n_q, H, W).

    Each mask is the min-max rescaled inner-product map between the
    (normalized) teacher features and one (normalized) teacher query; a
    constant map degenerates to a uniform mask of ones so the distillation
    stays neutral rather than vanishing.
    """
    h, w, c = teacher_map.shape
    flat = _normalize_rows(teacher_map.reshape(h * w, c))
    q = _normalize_rows(np.asarray(teacher_query_feats, dtype=np.float64))
    raw = flat @ q.T  # (H*W, n_q)
    masks = np.empty((q.shape[0], h, w))
    for j in range(q.shape[0]):
        col = raw[:, j]
        if col.max() == col.min():
            masks[j] = 1.0
        else:
            masks[j] = min_max_scale(col).reshape(h, w)
    return masks


def distill_loss(student_map: Tensor, teacher_map: np.ndarray,
                 masks: np.ndarray, query_weights: np.ndarray) -> Tensor:
    """(1/(n_q*H*W*C)) * sum_j w_j * || mask_j ⊙ (teacher - student) ||^2.

    The mask broadcasts over channels; the teacher side is a constant.
    """
    teacher_map = np.asarray(teacher_map, dtype=np.float64)
    if student_map.shape != teacher_map.shape:
        raise ad.ShapeError(
            f"distill_loss: student map {student_map.shape} vs teacher map {teacher_map.shape}")
    n_q = masks.shape[0]
    h, w, c = teacher_map.shape
    w_q = np.asarray(query_weights, dtype=np.float64).reshape(-1)
    combined = np.einsum("j,jhw->hw", w_q, masks ** 2)
    residual = ad.sub(Tensor(teacher_map), student_map)
    weighted = ad.mul(ad.mul(residual, residual), Tensor(combined[:, :, None]))
    return ad.div(ad.sum_(weighted), float(n_q * h * w * c))
