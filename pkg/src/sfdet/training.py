"""Training loops: supervised source pretraining and the self-training
adaptation stage.

Adaptation runs a teacher/student pair initialized from the same source
checkpoint.  Each step: the teacher labels a weakly augmented view, the
student learns on the strong view (optionally with objectness reweighting,
bank-based contrastive learning, and feature distillation from an extra
teacher pass on the strong view), and the teacher absorbs the student by
EMA every ``interval`` student updates.  The interval either stays fixed
or grows with the epoch index (base + epoch // growth).

Everything is deterministic given (config, seed): per-purpose RNG streams
are derived from (seed, epoch, sample index), so resuming from an epoch
boundary reproduces an uninterrupted run bitwise.  The student update is
plain gradient descent through an adaptive-moment optimizer; the teacher
is never touched by the optimizer.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .contrastive import (
    MemoryBankSet,
    assign_pairs,
    contrastive_loss,
    fuse_query_features,
    update_banks,
)
from .data import SceneSample, augment
from .detector import DetectorConfig, clone_params, ema_blend, forward, init_params
from .distill import distill_loss, distill_masks, query_uncertainty_weights
from .evaluation import evaluate_model
from .losses import LossBreakdown, assemble_total, detection_loss, match_layer
from .objectness import compute_query_weights


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class PseudoLabels:
    boxes: np.ndarray      # (m, 4)
    classes: np.ndarray    # (m,), 1-based
    confidences: np.ndarray

    def __len__(self) -> int:
        return self.classes.shape[0]


def pseudo_label(class_probs: np.ndarray, boxes: np.ndarray,
                 conf_thresh: float) -> PseudoLabels:
    """Keep every query whose top-1 score clears the threshold (no NMS)."""
    probs = np.asarray(class_probs, dtype=np.float64)
    confs = probs.max(axis=1)
    keep = confs >= conf_thresh
    return PseudoLabels(boxes=np.asarray(boxes, dtype=np.float64)[keep],
                        classes=probs.argmax(axis=1)[keep] + 1,
                        confidences=confs[keep])


def dynamic_interval(epoch: int, base: int, growth: int) -> int:
    """Teacher-update interval for the given epoch: base + epoch // growth."""
    if base < 1 or growth < 1 or epoch < 0:
        raise ValueError("need base >= 1, growth >= 1, epoch >= 0")
    return base + epoch // growth


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay
    (decay applies to matrices only, not biases/norm gains)."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def serialize(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        out["opt/step"] = np.asarray(float(self.step_count))
        return out

    def restore(self, record: dict[str, np.ndarray]) -> None:
        for k in self.m:
            if f"opt/m/{k}" in record:
                self.m[k] = np.asarray(record[f"opt/m/{k}"]).reshape(self.m[k].shape)
                self.v[k] = np.asarray(record[f"opt/v/{k}"]).reshape(self.v[k].shape)
        self.step_count = int(record.get("opt/step", 0))


# ---------------------------------------------------------------------------
# deterministic RNG streams

_PURPOSE = {"shuffle": 1, "weak": 2, "strong": 3, "bank": 4}


def stream(seed: int, epoch: int, index: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(epoch), int(index), _PURPOSE[purpose]]))


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return stream(seed, epoch, 0, "shuffle").permutation(count)


# ---------------------------------------------------------------------------
# metrics stream


def format_record(fields: dict) -> str:
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value!r}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text("")

    def write(self, fields: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(format_record(fields) + "\n")


def _breakdown_fields(step: int, epoch: int, br: LossBreakdown, interval: int,
                      n_pseudo: int) -> dict:
    return {"iter": step, "epoch": epoch, "loss_cls": br.cls, "loss_reg": br.reg,
            "loss_aux": br.aux, "loss_contrast": br.contrast, "loss_distill": br.distill,
            "loss_total": br.total, "ema_interval": interval, "n_pseudo": n_pseudo}


# ---------------------------------------------------------------------------
# supervised pretraining


def pretrain(cfg: RunConfig, samples: list[SceneSample], out_dir,
             resume_from=None, metrics: MetricsWriter | None = None,
             stop_after_epoch: int | None = None):
    """Train a detector on labeled source scenes with the detection loss.

    Returns the trained parameter dict.  ``stop_after_epoch`` interrupts the
    run at an epoch boundary; resuming that checkpoint under the same config
    reproduces the uninterrupted run bitwise (per-purpose RNG streams are
    derived from (seed, epoch, sample), never from live generator state).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    det_cfg = cfg.detector_config()
    aug_cfg = dataclasses.replace(
        cfg.augment_config(),
        contrast_range=(cfg.train.pretrain_contrast_lo, cfg.train.pretrain_contrast_hi))
    seed = cfg.train.seed

    start_epoch = 0
    if resume_from is not None:
        ckpt_cfg, params, extras = load_checkpoint(resume_from)
        if ckpt_cfg != det_cfg:
            raise ValueError("resume checkpoint does not match the configured detector")
        optimizer = AdamW(params, cfg.train.pretrain_lr, cfg.train.beta1,
                          cfg.train.beta2, cfg.train.eps, cfg.train.weight_decay)
        optimizer.restore(extras)
        start_epoch = int(extras.get("state/epoch", 0))
    else:
        params = init_params(det_cfg, seed=seed)
        optimizer = AdamW(params, cfg.train.pretrain_lr, cfg.train.beta1,
                          cfg.train.beta2, cfg.train.eps, cfg.train.weight_decay)

    if metrics is None:
        metrics = MetricsWriter(out_dir / "metrics.log")
    drop_epoch = int(np.floor(cfg.train.pretrain_epochs * cfg.train.pretrain_lr_drop))
    batch = max(1, cfg.train.pretrain_batch)
    step = start_epoch * ((len(samples) + batch - 1) // batch)
    times = []
    end_epoch = cfg.train.pretrain_epochs
    if stop_after_epoch is not None:
        end_epoch = min(end_epoch, stop_after_epoch)

    for epoch in range(start_epoch, end_epoch):
        optimizer.lr = cfg.train.pretrain_lr * (0.1 if drop_epoch and epoch >= drop_epoch else 1.0)
        order = epoch_order(seed, epoch, len(samples))
        for lo in range(0, len(order), batch):
            t0 = time.perf_counter()
            members = [samples[i] for i in order[lo:lo + batch]]
            ad.zero_grads(params)
            with Tape() as tape:
                cls_t, reg_t, aux_t = Tensor(0.0), Tensor(0.0), Tensor(0.0)
                for sample in members:
                    view = augment(sample, cfg.train.pretrain_aug,
                                   stream(seed, epoch, sample.seed_index, "weak"), aug_cfg)
                    out = forward(params, view.image, det_cfg)
                    c, r, a, _ = detection_loss(
                        out, view.gt_boxes, view.gt_classes, None,
                        alpha=cfg.loss.focal_alpha, gamma=cfg.loss.focal_gamma,
                        cls_weight=cfg.loss.cls_weight,
                        l1_weight=cfg.loss.l1_weight, giou_weight=cfg.loss.giou_weight,
                        match_class_weight=cfg.match.class_weight,
                        match_l1_weight=cfg.match.l1_weight,
                        match_giou_weight=cfg.match.giou_weight)
                    cls_t, reg_t, aux_t = ad.add(cls_t, c), ad.add(reg_t, r), ad.add(aux_t, a)
                scale = 1.0 / len(members)
                cls_t, reg_t, aux_t = (ad.mul(t, scale) for t in (cls_t, reg_t, aux_t))
                total, br = assemble_total(cls_t, reg_t, aux_t, Tensor(0.0), Tensor(0.0),
                                           cfg.contrast.weight, cfg.distill.weight)
                if not np.isfinite(br.total):
                    raise DivergenceError(f"non-finite loss at step {step}")
                tape.backward(total)
            optimizer.step()
            times.append(time.perf_counter() - t0)
            step += 1
            if step % cfg.train.log_interval == 0:
                metrics.write(_breakdown_fields(step, epoch, br, 0, 0))

    state = optimizer.serialize()
    state["state/epoch"] = np.asarray(float(end_epoch))
    state["state/step"] = np.asarray(float(step))
    save_checkpoint(out_dir / "checkpoint.ckpt", det_cfg, params, extra=state)
    _write_timing(out_dir, times)
    return params


def _write_timing(out_dir: Path, times: list[float]) -> None:
    mean_ms = 1000.0 * float(np.mean(times)) if times else 0.0
    total_s = float(np.sum(times)) if times else 0.0
    (Path(out_dir) / "timing.txt").write_text(
        f"iterations={len(times)}\nmean_ms_per_iter={mean_ms!r}\ntotal_s={total_s!r}\n")


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptArtifacts:
    teacher: dict[str, Tensor]
    student: dict[str, Tensor]
    banks: MemoryBankSet
    breakdowns: list[LossBreakdown] = field(default_factory=list)
    teacher_updates: int = 0


def adaptation_step(cfg: RunConfig, det_cfg: DetectorConfig, teacher, student,
                    optimizer: AdamW, banks: MemoryBankSet,
                    members: list[SceneSample], epoch: int, bank_rng) -> tuple[LossBreakdown, int]:
    """One student update over a batch of target samples.

    Returns the loss breakdown and the batch pseudo-label count.  Teacher
    parameters are plain values (requires_grad False), so no gradient can
    reach them by construction.
    """
    seed = cfg.train.seed
    aug_cfg = cfg.augment_config()
    n_pseudo = 0

    prepared = []
    for sample in members:
        weak = augment(sample, "weak", stream(seed, epoch, sample.seed_index, "weak"), aug_cfg)
        strong = augment(sample, "strong", stream(seed, epoch, sample.seed_index, "strong"), aug_cfg)
        teacher_weak = forward(teacher, weak.image, det_cfg)
        labels = pseudo_label(teacher_weak.class_probs.data, teacher_weak.boxes.data,
                              cfg.teacher.conf_thresh)
        n_pseudo += len(labels)
        teacher_strong = forward(teacher, strong.image, det_cfg) if cfg.distill.enabled else None
        prepared.append((strong, teacher_weak, teacher_strong, labels))

    ad.zero_grads(student)
    with Tape() as tape:
        cls_t, reg_t, aux_t, fdis_t = Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0)
        batch_features: list[tuple[Tensor, np.ndarray]] = []
        for strong, teacher_weak, teacher_strong, labels in prepared:
            out = forward(student, strong.image, det_cfg)
            assign = match_layer(out.class_probs.data, out.boxes.data,
                                 labels.boxes, labels.classes,
                                 cfg.match.class_weight, cfg.match.l1_weight,
                                 cfg.match.giou_weight)
            if cfg.reweight.enabled:
                teacher_maps = [m.data for m in teacher_weak.encoder_maps]
                weights, _, _ = compute_query_weights(
                    teacher_maps, out.query_feats[-1].data, out.boxes.data, assign,
                    mode=cfg.reweight.mode, beta=cfg.reweight.beta,
                    out_h=cfg.reweight.roi_size, out_w=cfg.reweight.roi_size,
                    samples_per_bin=cfg.reweight.roi_samples)
            else:
                weights = None
            c, r, a, _ = detection_loss(
                out, labels.boxes, labels.classes, weights,
                alpha=cfg.loss.focal_alpha, gamma=cfg.loss.focal_gamma,
                cls_weight=cfg.loss.cls_weight,
                l1_weight=cfg.loss.l1_weight, giou_weight=cfg.loss.giou_weight,
                match_class_weight=cfg.match.class_weight,
                match_l1_weight=cfg.match.l1_weight,
                match_giou_weight=cfg.match.giou_weight,
                final_assignment=assign)
            cls_t, reg_t, aux_t = ad.add(cls_t, c), ad.add(reg_t, r), ad.add(aux_t, a)

            if cfg.contrast.enabled:
                fused, valid = fuse_query_features(out.query_feats)
                batch_features.append((fused, assign_pairs(valid, assign, labels.classes)))

            if cfg.distill.enabled:
                f_teacher = teacher_strong.encoder_maps[0].data
                masks = distill_masks(f_teacher, teacher_strong.query_feats[-1].data)
                w_q = query_uncertainty_weights(teacher_strong.class_probs.data,
                                                beta=cfg.distill.beta)
                fdis_t = ad.add(fdis_t, distill_loss(out.encoder_maps[0], f_teacher,
                                                     masks, w_q))

        scale = 1.0 / len(prepared)
        cls_t, reg_t, aux_t = (ad.mul(t, scale) for t in (cls_t, reg_t, aux_t))
        fdis_t = ad.mul(fdis_t, scale)
        if cfg.contrast.enabled:
            cont_t = contrastive_loss(banks, batch_features, cfg.contrast.temperature)
        else:
            cont_t = Tensor(0.0)
        total, br = assemble_total(cls_t, reg_t, aux_t, cont_t, fdis_t,
                                   cfg.contrast.weight, cfg.distill.weight)
        if not np.isfinite(br.total):
            raise DivergenceError("non-finite adaptation loss")
        tape.backward(total)
    optimizer.step()

    if cfg.contrast.enabled:
        for fused, labels in batch_features:
            update_banks(banks, fused.data, labels, strategy=cfg.contrast.strategy,
                         rng=bank_rng)
    return br, n_pseudo


def adapt(cfg: RunConfig, source_params: dict[str, Tensor],
          samples: list[SceneSample], out_dir,
          eval_samples: list[SceneSample] | None = None,
          metrics: MetricsWriter | None = None) -> AdaptArtifacts:
    """Full adaptation loop; saves the teacher as the adapted model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    det_cfg = cfg.detector_config()
    seed = cfg.train.seed

    student = clone_params(source_params, requires_grad=True)
    teacher = clone_params(source_params, requires_grad=False)
    optimizer = AdamW(student, cfg.train.adapt_lr, cfg.train.beta1,
                      cfg.train.beta2, cfg.train.eps, cfg.train.weight_decay)
    banks = MemoryBankSet(det_cfg.num_classes, cfg.contrast.bank_capacity,
                          det_cfg.embed_dim)
    if metrics is None:
        metrics = MetricsWriter(out_dir / "metrics.log")

    fixed = cfg.fixed_interval()
    batch = max(1, cfg.train.adapt_batch)
    artifacts = AdaptArtifacts(teacher=teacher, student=student, banks=banks)
    step = 0
    updates_since_ema = 0
    times: list[float] = []

    for epoch in range(cfg.train.adapt_epochs):
        interval = fixed if fixed is not None else dynamic_interval(
            epoch, cfg.teacher.base_interval, cfg.teacher.interval_growth)
        bank_rng = stream(seed, epoch, 0, "bank")
        order = epoch_order(seed, epoch, len(samples))
        for lo in range(0, len(order), batch):
            members = [samples[i] for i in order[lo:lo + batch]]
            t0 = time.perf_counter()
            br, n_pseudo = adaptation_step(cfg, det_cfg, teacher, student, optimizer,
                                           banks, members, epoch, bank_rng)
            times.append(time.perf_counter() - t0)
            step += 1
            updates_since_ema += 1
            if updates_since_ema >= interval:
                ema_blend(teacher, student, cfg.teacher.ema_rate)
                updates_since_ema = 0
                artifacts.teacher_updates += 1
            artifacts.breakdowns.append(br)
            if step % cfg.train.log_interval == 0:
                metrics.write(_breakdown_fields(step, epoch, br, interval, n_pseudo))

    extras = optimizer.serialize()
    extras.update(banks.serialize())
    extras.update({f"student/{k}": v.data for k, v in student.items()})
    extras["state/step"] = np.asarray(float(step))
    extras["state/epoch"] = np.asarray(float(cfg.train.adapt_epochs))
    extras["state/updates_since_ema"] = np.asarray(float(updates_since_ema))
    save_checkpoint(out_dir / "adapted.ckpt", det_cfg, teacher, extra=extras)
    _write_timing(out_dir, times)

    if eval_samples is not None:
        report = evaluate_model(teacher, det_cfg, eval_samples,
                                conf_floor=cfg.eval.conf_floor,
                                iou_thresh=cfg.eval.iou_thresh)
        metrics.write({"iter": step, "epoch": cfg.train.adapt_epochs,
                       "map50": report.map50})
        (out_dir / "eval.txt").write_text("\n".join(report.format_lines()) + "\n")
    return artifacts
