"""Finite-difference verification of every loss and the detector itself.

Each check draws random instances, runs the tape backward, and compares
against central differences (h = 1e-5) at relative tolerance 1e-4 with an
absolute floor of 1e-8.  The detector check samples coordinates instead of
sweeping every parameter so the whole suite stays fast.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, finite_difference_grad
from .contrastive import MemoryBankSet, contrastive_loss
from .detector import DetectorConfig, clone_params, forward, init_params
from .distill import distill_loss
from .losses import box_loss, focal_loss, weighted_cls_loss

REL_TOL = 1e-4
ABS_FLOOR = 1e-8
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    instances: int
    seconds: float


def _max_mismatch(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    tol = REL_TOL * np.maximum(np.abs(analytic), np.abs(numeric)) + ABS_FLOOR
    ratio = np.abs(analytic - numeric) / tol
    return float(ratio.max()) if ratio.size else 0.0


def _check_loss(name: str, make_instance, instances: int, rng) -> CheckResult:
    """make_instance(rng) -> (x0 array, f: Tensor -> scalar Tensor)."""
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        x0, f = make_instance(rng)
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        fd = finite_difference_grad(f, Tensor(x0), h=STEP)
        worst = max(worst, _max_mismatch(x.grad, fd))
    return CheckResult(name, worst <= 1.0, worst, instances, time.perf_counter() - t0)


def _focal_instance(rng):
    probs = rng.uniform(0.05, 0.95, size=(5, 3))
    targets = rng.integers(0, 4, size=5)
    return probs, lambda t: focal_loss(t, targets)


def _weighted_instance(rng):
    probs = rng.uniform(0.05, 0.95, size=(5, 3))
    targets = rng.integers(0, 4, size=5)
    weights = rng.uniform(0, 1, size=5)
    return probs, lambda t: weighted_cls_loss(t, targets, weights)


def _random_boxes(rng, n):
    return np.concatenate([rng.uniform(0.25, 0.75, size=(n, 2)),
                           rng.uniform(0.08, 0.3, size=(n, 2))], axis=1)


def _box_instance(rng):
    pred = _random_boxes(rng, 4)
    tgt = _random_boxes(rng, 3)
    pairs = [(0, 1), (2, 0), (3, 2)]
    return pred, lambda t: box_loss(t, tgt, pairs)


def _contrastive_instance(rng):
    k = int(rng.integers(1, 4))
    dim = 5
    banks = MemoryBankSet(num_classes=k, capacity=6, feature_dim=dim)
    for _ in range(int(rng.integers(2, 10))):
        v = rng.normal(size=dim)
        banks.insert(int(rng.integers(0, k + 1)), v / np.linalg.norm(v))
    feats = rng.normal(size=(4, dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    labels = rng.integers(0, k + 1, size=4)
    labels[0] = 1  # guarantee at least one foreground anchor candidate
    return feats, lambda t: contrastive_loss(banks, [(t, labels)], 0.07)


def _distill_instance(rng):
    teacher = rng.normal(size=(4, 4, 6))
    student = rng.normal(size=(4, 4, 6))
    masks = rng.uniform(0, 1, size=(3, 4, 4))
    wq = rng.uniform(0, 1, size=3)
    return student, lambda t: distill_loss(t, teacher, masks, wq)


def _detector_check(instances: int, coords_per_instance: int, rng) -> CheckResult:
    cfg = DetectorConfig(image_size=8, embed_dim=8, num_queries=4,
                         decoder_layers=2, num_classes=2, ffn_dim=16,
                         patch_strides=(2, 2, 2))
    t0 = time.perf_counter()
    worst = 0.0

    def scalar_loss(params, image):
        out = forward(params, image, cfg)
        total = ad.mean(ad.mul(out.class_logits, out.class_logits))
        total = ad.add(total, ad.mean(ad.mul(out.boxes, out.boxes)))
        for fmap in out.encoder_maps:
            total = ad.add(total, ad.mean(ad.mul(fmap, fmap)))
        return total

    for i in range(instances):
        params = init_params(cfg, seed=int(rng.integers(1 << 30)))
        image = rng.uniform(0, 1, size=(8, 8, 3))
        ad.zero_grads(params)
        with Tape() as tape:
            loss = scalar_loss(params, image)
        tape.backward(loss)
        names = list(params)
        for _ in range(coords_per_instance):
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(d)) for d in params[name].shape)
            vals = []
            for sign in (+STEP, -STEP):
                probe = clone_params(params)
                probe[name].data[idx] += sign
                vals.append(scalar_loss(probe, image).item())
            fd = (vals[0] - vals[1]) / (2 * STEP)
            analytic = params[name].grad[idx] if params[name].grad is not None else 0.0
            worst = max(worst, _max_mismatch(np.asarray([analytic]), np.asarray([fd])))
    return CheckResult("detector_forward_backward", worst <= 1.0, worst,
                       instances, time.perf_counter() - t0)


def run_all(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        _check_loss("focal_loss", _focal_instance, instances, rng),
        _check_loss("weighted_cls_loss", _weighted_instance, instances, rng),
        _check_loss("box_l1_giou_loss", _box_instance, instances, rng),
        _check_loss("contrastive_loss", _contrastive_instance, instances, rng),
        _check_loss("distill_loss", _distill_instance, instances, rng),
        _detector_check(instances, coords_per_instance=24, rng=rng),
    ]
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.name}: worst_error_ratio={r.max_error:.3e} "
                     f"instances={r.instances} time={r.seconds:.2f}s")
    total = sum(r.seconds for r in results)
    lines.append(f"total_time={total:.2f}s")
    return "\n".join(lines)
