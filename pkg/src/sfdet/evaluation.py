"""Per-class average precision at IoU 0.5 and its mean.

All-point interpolation over the precision envelope; predictions are
greedily matched in descending confidence order (ties broken by insertion
index) to the highest-IoU unclaimed ground-truth box of the same class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorConfig, forward
from .geometry import iou_matrix


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    map50: float
    counts: dict[str, int] = field(default_factory=dict)

    def format_lines(self) -> list[str]:
        lines = [f"map50={self.map50!r}"]
        for cid in sorted(self.per_class_ap):
            ap = self.per_class_ap[cid]
            lines.append(f"class{cid}_ap={'nan' if ap is None else repr(ap)}")
        for key in sorted(self.counts):
            lines.append(f"{key}={self.counts[key]}")
        return lines


def _greedy_match(pred_confs, pred_boxes, pred_images, gt_boxes, gt_images,
                  iou_thresh: float):
    """True-positive flags in descending-confidence order (stable ties)."""
    order = np.argsort(-pred_confs, kind="stable")
    gt_taken = np.zeros(gt_images.shape[0], dtype=bool)
    tp = np.zeros(order.size)
    for rank, p in enumerate(order):
        candidates = np.nonzero((gt_images == pred_images[p]) & ~gt_taken)[0]
        if candidates.size == 0:
            continue
        ious = iou_matrix(pred_boxes[p:p + 1], gt_boxes[candidates])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            gt_taken[candidates[best]] = True
            tp[rank] = 1.0
    return tp


def average_precision(pred_confs, pred_boxes, pred_images,
                      gt_boxes, gt_images, iou_thresh: float = 0.5):
    """Single-class AP; returns None when the class has no ground truth."""
    gt_images = np.asarray(gt_images, dtype=np.intp).reshape(-1)
    n_gt = gt_images.shape[0]
    if n_gt == 0:
        return None
    pred_confs = np.asarray(pred_confs, dtype=np.float64).reshape(-1)
    if pred_confs.size == 0:
        return 0.0
    pred_images = np.asarray(pred_images, dtype=np.intp).reshape(-1)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)

    tp = _greedy_match(pred_confs, pred_boxes, pred_images, gt_boxes, gt_images,
                       iou_thresh)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    # precision envelope, then area under the recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(pred_per_image, gt_per_image, num_classes: int,
                        iou_thresh: float = 0.5) -> EvalReport:
    """pred_per_image: (boxes, classes, confs) triple per image;
    gt_per_image: (boxes, classes) per image."""
    per_class: dict[int, float | None] = {}
    n_pred = sum(np.asarray(p[2]).size for p in pred_per_image)
    n_gt = sum(np.asarray(g[1]).size for g in gt_per_image)
    tp_total = 0
    for cid in range(1, num_classes + 1):
        confs, boxes, imgs = [], [], []
        for i, (pb, pc, pf) in enumerate(pred_per_image):
            keep = np.asarray(pc).reshape(-1) == cid
            confs.extend(np.asarray(pf).reshape(-1)[keep])
            boxes.extend(np.asarray(pb).reshape(-1, 4)[keep])
            imgs.extend([i] * int(keep.sum()))
        gboxes, gimgs = [], []
        for i, (gb, gc) in enumerate(gt_per_image):
            keep = np.asarray(gc).reshape(-1) == cid
            gboxes.extend(np.asarray(gb).reshape(-1, 4)[keep])
            gimgs.extend([i] * int(keep.sum()))
        confs_a = np.asarray(confs, dtype=np.float64)
        boxes_a = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        imgs_a = np.asarray(imgs, dtype=np.intp)
        gboxes_a = np.asarray(gboxes, dtype=np.float64).reshape(-1, 4)
        gimgs_a = np.asarray(gimgs, dtype=np.intp)
        per_class[cid] = average_precision(confs_a, boxes_a, imgs_a,
                                           gboxes_a, gimgs_a, iou_thresh)
        if gimgs_a.size and confs_a.size:
            tp_total += int(_greedy_match(confs_a, boxes_a, imgs_a,
                                          gboxes_a, gimgs_a, iou_thresh).sum())
    defined = [ap for ap in per_class.values() if ap is not None]
    map50 = float(np.mean(defined)) if defined else 0.0
    return EvalReport(per_class_ap=per_class, map50=map50,
                      counts={"gt": n_gt, "predictions": n_pred,
                              "true_positives": tp_total})


def predict(params, cfg: DetectorConfig, image: np.ndarray,
            conf_floor: float = 0.05):
    """Top-1 detection per query above the confidence floor."""
    out = forward(params, image, cfg)
    probs = out.class_probs.data
    boxes = out.boxes.data
    confs = probs.max(axis=1)
    classes = probs.argmax(axis=1) + 1
    keep = confs >= conf_floor
    return boxes[keep], classes[keep], confs[keep]


def evaluate_model(params, cfg: DetectorConfig, samples, conf_floor: float = 0.05,
                   iou_thresh: float = 0.5) -> EvalReport:
    preds = [predict(params, cfg, s.image, conf_floor) for s in samples]
    gts = [(s.gt_boxes, s.gt_classes) for s in samples]
    return evaluate_detections(preds, gts, cfg.num_classes, iou_thresh)
