"""Detection losses: focal classification (optionally reweighted per query),
L1+GIoU box regression, and per-layer auxiliary terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import DetectorOutput
from .geometry import giou_pairs
from .matching import Assignment, detection_cost, hungarian

# Smallest representable guard so log arguments never hit zero exactly;
# a no-op (bitwise) for any probability >= 1e-300.
_LOG_GUARD = 1e-300


@dataclass
class LossBreakdown:
    """Scalar loss components of one optimization step."""

    cls: float = 0.0
    reg: float = 0.0
    aux: float = 0.0
    contrast: float = 0.0
    distill: float = 0.0
    total: float = 0.0


def _guarded_log(p: Tensor) -> Tensor:
    return ad.log(ad.add(p, ad.relu(ad.sub(_LOG_GUARD, p))))


def focal_terms(probs: Tensor, target_classes_per_query: np.ndarray,
                alpha: float, gamma: float) -> Tensor:
    """Per-query focal mass, summed over classes -> Tensor (n_q,).

    ``target_classes_per_query`` holds a 1-based class id for matched
    queries and 0 for unmatched ones (all-negative rows).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"focal alpha must lie in [0, 1], got {alpha}")
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    n_q, k = probs.shape
    targets = np.asarray(target_classes_per_query, dtype=np.intp).reshape(-1)
    pos = np.zeros((n_q, k))
    matched = targets > 0
    pos[np.nonzero(matched)[0], targets[matched] - 1] = 1.0
    pos_t = Tensor(pos)
    neg_t = Tensor(1.0 - pos)

    one_minus_p = ad.sub(1.0, probs)
    pos_term = ad.mul(ad.mul(ad.pow_(one_minus_p, gamma), _guarded_log(probs)), -alpha)
    neg_term = ad.mul(ad.mul(ad.pow_(probs, gamma), _guarded_log(one_minus_p)), -(1.0 - alpha))
    grid = ad.add(ad.mul(pos_t, pos_term), ad.mul(neg_t, neg_term))
    return ad.sum_(grid, axis=1)


def focal_loss(probs: Tensor, target_classes_per_query: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over queries of the per-query focal mass."""
    return ad.mean(focal_terms(probs, target_classes_per_query, alpha, gamma))


def weighted_cls_loss(probs: Tensor, target_classes_per_query: np.ndarray,
                      weights: np.ndarray, alpha: float = 0.25,
                      gamma: float = 2.0) -> Tensor:
    """(1/n_q) * sum_i w_i * focal_term_i; identical to focal_loss when w == 1."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != probs.shape[0]:
        raise ValueError(f"weights length {w.shape[0]} != query count {probs.shape[0]}")
    if np.any(w < 0):
        raise ValueError("classification weights must be non-negative")
    terms = focal_terms(probs, target_classes_per_query, alpha, gamma)
    return ad.mean(ad.mul(terms, Tensor(w)))


def box_loss(pred_boxes: Tensor, target_boxes: np.ndarray,
             pairs: list[tuple[int, int]], l1_weight: float = 5.0,
             giou_weight: float = 2.0) -> Tensor:
    """Mean over matched pairs of l1_weight*|d|_1 + giou_weight*(1 - GIoU)."""
    if not pairs:
        return Tensor(0.0)
    q_idx = [q for q, _ in pairs]
    t_idx = [t for _, t in pairs]
    pred = ad.take_rows(pred_boxes, q_idx)
    tgt = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)[t_idx]
    l1 = ad.sum_(ad.abs_(ad.sub(pred, Tensor(tgt))), axis=1)
    g = ad.reshape(giou_pairs(pred, tgt), (len(pairs),))
    per_pair = ad.add(ad.mul(l1, l1_weight), ad.mul(ad.sub(1.0, g), giou_weight))
    return ad.mean(per_pair)


def _targets_per_query(n_q: int, assignment: Assignment,
                       target_classes: np.ndarray) -> np.ndarray:
    out = np.zeros(n_q, dtype=np.intp)
    tc = np.asarray(target_classes, dtype=np.intp).reshape(-1)
    for q, t in assignment.pairs:
        out[q] = tc[t]
    return out


def match_layer(probs: np.ndarray, boxes: np.ndarray, target_boxes: np.ndarray,
                target_classes: np.ndarray, class_weight: float = 2.0,
                l1_weight: float = 5.0, giou_weight: float = 2.0) -> Assignment:
    cost = detection_cost(probs, boxes, target_boxes, target_classes,
                          class_weight=class_weight, l1_weight=l1_weight,
                          giou_weight=giou_weight)
    return hungarian(cost)


def detection_loss(output: DetectorOutput, target_boxes: np.ndarray,
                   target_classes: np.ndarray, weights: np.ndarray | None = None,
                   alpha: float = 0.25, gamma: float = 2.0, cls_weight: float = 8.0,
                   l1_weight: float = 5.0, giou_weight: float = 2.0,
                   match_class_weight: float = 2.0, match_l1_weight: float = 5.0,
                   match_giou_weight: float = 2.0,
                   final_assignment: Assignment | None = None):
    """Classification + regression on the final decoder layer, plus the same
    loss on every earlier layer (auxiliary), each with its own assignment.

    ``cls_weight`` balances the query-mean focal term against the
    regression terms (a coefficient convention, like l1/giou weights).
    Targets may be ground truth or pseudo-labels; an empty target set is
    valid (all-negative classification, zero regression).  A precomputed
    final-layer assignment may be passed in (the trainer derives per-query
    weights from it before building the loss).  Returns (cls, reg, aux
    Tensors, final-layer Assignment).
    """
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    n_q = output.class_logits.shape[0]
    if weights is None:
        weights = np.ones(n_q)

    def layer_losses(probs_t: Tensor, boxes_t: Tensor, assign: Assignment | None = None):
        if assign is None:
            assign = match_layer(probs_t.data, boxes_t.data, target_boxes, target_classes,
                                 match_class_weight, match_l1_weight, match_giou_weight)
        per_query = _targets_per_query(n_q, assign, target_classes)
        cls = ad.mul(weighted_cls_loss(probs_t, per_query, weights, alpha, gamma),
                     cls_weight)
        reg = box_loss(boxes_t, target_boxes, assign.pairs, l1_weight, giou_weight)
        return cls, reg, assign

    cls_final, reg_final, assign_final = layer_losses(output.class_probs, output.boxes,
                                                      final_assignment)

    aux = Tensor(0.0)
    for l in range(len(output.class_logits_layers) - 1):
        probs_l = ad.sigmoid(output.class_logits_layers[l])
        cls_l, reg_l, _ = layer_losses(probs_l, output.boxes_layers[l])
        aux = ad.add(aux, ad.add(cls_l, reg_l))

    return cls_final, reg_final, aux, assign_final


def assemble_total(cls_t: Tensor, reg_t: Tensor, aux_t: Tensor,
                   contrast_t: Tensor, distill_t: Tensor,
                   contrast_weight: float, distill_weight: float):
    """Fixed-order total so the reported breakdown recomposes within 1e-12."""
    total = ad.add(ad.add(ad.add(cls_t, reg_t), aux_t),
                   ad.add(ad.mul(contrast_t, contrast_weight),
                          ad.mul(distill_t, distill_weight)))
    breakdown = LossBreakdown(cls=cls_t.item(), reg=reg_t.item(), aux=aux_t.item(),
                              contrast=contrast_t.item(), distill=distill_t.item(),
                              total=total.item())
    return total, breakdown
