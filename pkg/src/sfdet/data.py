"""Synthetic scene generation with a parameterized domain shift.

Scenes are small RGB grids holding 1..max_objects textured rectangles on a
dark noisy background.  Each class owns a distinct channel-intensity
signature and texture frequency, so a nearest-color classifier separates
the classes perfectly at zero shift.  Target-domain samples push the
rendering through a ShiftProfile (channel mixing, contrast change, additive
noise, then a convex haze blend toward mid-gray).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_tensors, save_tensors

GRAY = 0.5
BACKGROUND_LEVEL = 0.1
TEXTURE_AMP = 0.3

# Channel signature and texture frequency per class (1-based ids index this).
PALETTE: tuple[tuple[tuple[float, float, float], float], ...] = (
    ((0.95, 0.15, 0.10), 2.0),
    ((0.10, 0.90, 0.20), 5.0),
    ((0.15, 0.25, 0.95), 9.0),
    ((0.90, 0.85, 0.10), 3.5),
    ((0.85, 0.15, 0.90), 7.0),
    ((0.10, 0.85, 0.85), 11.0),
)


@dataclass(frozen=True)
class ShiftProfile:
    noise_sigma: float = 0.0
    contrast_scale: float = 1.0
    haze_blend: float = 0.0
    channel_mix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if not 0.0 <= self.haze_blend <= 1.0:
            raise ValueError(f"haze_blend must lie in [0, 1], got {self.haze_blend}")
        mix = np.asarray(self.channel_mix, dtype=np.float64)
        if mix.shape != (3, 3) or np.any(np.abs(mix.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("channel_mix must be 3x3 with rows summing to 1")

    def mix_matrix(self) -> np.ndarray:
        return np.asarray(self.channel_mix, dtype=np.float64)

    def is_identity(self) -> bool:
        return (self.noise_sigma == 0.0 and self.contrast_scale == 1.0
                and self.haze_blend == 0.0
                and np.array_equal(self.mix_matrix(), np.eye(3)))


TOY_FOG = ShiftProfile(noise_sigma=0.05, haze_blend=0.5)


@dataclass
class SceneSample:
    image: np.ndarray             # (H, W, 3) in [0, 1]
    gt_boxes: np.ndarray          # (n, 4) cxcywh, normalized
    gt_classes: np.ndarray        # (n,) 1-based
    domain: str = "source"
    seed_index: int = 0


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 3
    image_size: int = 32
    min_objects: int = 1
    max_objects: int = 5
    overlap_cap: float = 0.3
    box_min: float = 0.22
    box_max: float = 0.45

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must lie in [1, {len(PALETTE)}]")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


def _rects_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    from .geometry import corners

    ca, cb = corners(a.reshape(1, 4))[0], corners(b.reshape(1, 4))[0]
    return (min(ca[2], cb[2]) > max(ca[0], cb[0])
            and min(ca[3], cb[3]) > max(ca[1], cb[1]))


def _half(box: np.ndarray) -> np.ndarray:
    return np.array([box[0], box[1], box[2] / 2, box[3] / 2])


def _placement_ok(box: np.ndarray, accepted: list[np.ndarray], cap: float) -> bool:
    """IoU capped, and every object's central half stays unoccluded so the
    scene is class-separable by construction regardless of paint order."""
    from .geometry import iou_matrix

    if not accepted:
        return True
    ious = iou_matrix(box.reshape(1, 4), np.stack(accepted))
    if float(ious.max()) > cap:
        return False
    for old in accepted:
        if _rects_intersect(box, _half(old)) or _rects_intersect(_half(box), old):
            return False
    return True


def _sample_boxes(rng: np.random.Generator, cfg: SceneConfig):
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    accepted: list[np.ndarray] = []
    classes: list[int] = []
    for _ in range(n_obj):
        placed = False
        for _ in range(60):  # bounded retries; on failure the scene keeps fewer objects
            w, h = rng.uniform(cfg.box_min, cfg.box_max, size=2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            box = np.array([cx, cy, w, h])
            if _placement_ok(box, accepted, cfg.overlap_cap):
                accepted.append(box)
                classes.append(int(rng.integers(1, cfg.num_classes + 1)))
                placed = True
                break
        if not placed:
            break
    if not accepted:  # the first box can always be placed, but stay defensive
        accepted = [np.array([0.5, 0.5, cfg.box_min, cfg.box_min])]
        classes = [1]
    return np.stack(accepted), np.asarray(classes, dtype=np.intp)


def _render(boxes: np.ndarray, classes: np.ndarray, cfg: SceneConfig,
            rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    img = BACKGROUND_LEVEL + rng.normal(0.0, 0.02, size=(size, size, 3))
    coords = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(coords, coords, indexing="xy")
    diag = uu + vv
    for box, cls in zip(boxes, classes):
        color, freq = PALETTE[cls - 1]
        cx, cy, w, h = box
        x0 = int(np.floor((cx - w / 2) * size))
        x1 = int(np.ceil((cx + w / 2) * size))
        y0 = int(np.floor((cy - h / 2) * size))
        y1 = int(np.ceil((cy + h / 2) * size))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, size), min(y1, size)
        tex = 1.0 - TEXTURE_AMP + TEXTURE_AMP * 0.5 * (
            1.0 + np.sin(2.0 * np.pi * freq * diag[y0:y1, x0:x1]))
        img[y0:y1, x0:x1, :] = np.asarray(color) * tex[:, :, None]
    return np.clip(img, 0.0, 1.0)


def apply_shift(image: np.ndarray, profile: ShiftProfile,
                rng: np.random.Generator) -> np.ndarray:
    """Channel mix -> contrast -> noise -> haze; identity stages are skipped
    so a null profile reproduces the input bitwise."""
    out = image
    mix = profile.mix_matrix()
    if not np.array_equal(mix, np.eye(3)):
        out = out @ mix.T
    if profile.contrast_scale != 1.0:
        out = (out - GRAY) * profile.contrast_scale + GRAY
    if profile.noise_sigma > 0.0:
        out = out + rng.normal(0.0, profile.noise_sigma, size=out.shape)
    if profile.haze_blend > 0.0:
        out = (1.0 - profile.haze_blend) * out + profile.haze_blend * GRAY
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0)


def generate_scene(seed: int, index: int, cfg: SceneConfig,
                   shift: ShiftProfile | None = None,
                   domain: str = "source") -> SceneSample:
    """Deterministic in (seed, index); the shift applies after rendering."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 0xDA7A]))
    boxes, classes = _sample_boxes(rng, cfg)
    img = _render(boxes, classes, cfg, rng)
    if shift is not None and not shift.is_identity():
        img = apply_shift(img, shift, rng)
    return SceneSample(image=img, gt_boxes=boxes, gt_classes=classes,
                       domain=domain, seed_index=index)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise: float = 0.01
    weak_jitter: float = 0.75         # max |shift| in pixels
    strong_noise: float = 0.08
    channel_jitter: float = 0.25      # per-channel scale in [1-cj, 1+cj]
    contrast_range: tuple[float, float] = (0.4, 1.1)  # global contrast about mid-gray
    brightness_jitter: float = 0.1
    erase_prob: float = 0.7
    erase_frac: tuple[float, float] = (0.1, 0.35)


def translate(image: np.ndarray, boxes: np.ndarray, dx_px: float, dy_px: float):
    """Sub-pixel translation with bilinear resampling and clamped borders.

    Content moves by (+dx, +dy) pixels; boxes shift accordingly and are
    clipped to the unit square.
    """
    from .geometry import clip_boxes

    if dx_px == 0.0 and dy_px == 0.0:
        return image, boxes
    h, w, _ = image.shape
    ys = np.clip(np.arange(h) - dy_px, 0, h - 1)
    xs = np.clip(np.arange(w) - dx_px, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    shifted = (image[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
               + image[np.ix_(y0, x1)] * (1 - wy) * wx
               + image[np.ix_(y1, x0)] * wy * (1 - wx)
               + image[np.ix_(y1, x1)] * wy * wx)
    moved = boxes.copy()
    if moved.size:
        moved[:, 0] += dx_px / w
        moved[:, 1] += dy_px / h
        moved = clip_boxes(moved)
    return shifted, moved


def augment(sample: SceneSample, mode: str, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> SceneSample:
    """Label-preserving stochastic corruption; weak views jitter position,
    strong views add heavy noise, channel scaling, and rectangle erasing."""
    if mode not in ("weak", "strong"):
        raise ValueError(f"augment mode must be 'weak' or 'strong', got '{mode}'")
    img = sample.image
    boxes = sample.gt_boxes
    if mode == "weak":
        if cfg.weak_jitter > 0.0:
            dx, dy = rng.uniform(-cfg.weak_jitter, cfg.weak_jitter, size=2)
            img, boxes = translate(img, boxes, dx, dy)
        if cfg.weak_noise > 0.0:
            img = np.clip(img + rng.normal(0.0, cfg.weak_noise, size=img.shape), 0.0, 1.0)
    else:
        if cfg.channel_jitter > 0.0:
            scale = rng.uniform(1 - cfg.channel_jitter, 1 + cfg.channel_jitter, size=3)
            img = img * scale[None, None, :]
        if cfg.contrast_range != (1.0, 1.0):
            contrast = rng.uniform(*cfg.contrast_range)
            img = (img - GRAY) * contrast + GRAY
        if cfg.brightness_jitter > 0.0:
            img = img + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
        if cfg.strong_noise > 0.0:
            img = img + rng.normal(0.0, cfg.strong_noise, size=img.shape)
        if cfg.erase_prob > 0.0 and rng.uniform() < cfg.erase_prob:
            h, w, _ = img.shape
            fh = rng.uniform(*cfg.erase_frac)
            fw = rng.uniform(*cfg.erase_frac)
            eh, ew = max(1, int(fh * h)), max(1, int(fw * w))
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            img = img.copy() if img is sample.image else img
            img[y:y + eh, x:x + ew, :] = GRAY
        if img is not sample.image:
            img = np.clip(img, 0.0, 1.0)
    return SceneSample(image=img, gt_boxes=boxes, gt_classes=sample.gt_classes,
                       domain=sample.domain, seed_index=sample.seed_index)


# ---------------------------------------------------------------------------
# persistence (named-tensor container, see checkpoint.py for the layout)


def save_dataset(path, samples: list[SceneSample], cfg: SceneConfig,
                 shift: ShiftProfile | None) -> None:
    profile = shift if shift is not None else ShiftProfile()
    record: dict[str, np.ndarray] = {
        "meta/num_classes": np.asarray(float(cfg.num_classes)),
        "meta/image_size": np.asarray(float(cfg.image_size)),
        "meta/count": np.asarray(float(len(samples))),
        "meta/shift": np.asarray([profile.noise_sigma, profile.contrast_scale,
                                  profile.haze_blend]),
        "meta/channel_mix": profile.mix_matrix(),
    }
    for i, s in enumerate(samples):
        record[f"sample{i}/image"] = s.image
        record[f"sample{i}/boxes"] = s.gt_boxes
        record[f"sample{i}/classes"] = s.gt_classes.astype(np.float64)
        record[f"sample{i}/meta"] = np.asarray([float(s.seed_index),
                                                1.0 if s.domain == "target" else 0.0])
    save_tensors(path, record)


def load_dataset(path):
    """Returns (samples, meta dict with num_classes/image_size/shift)."""
    record = load_tensors(path)
    count = int(record["meta/count"])
    meta = {
        "num_classes": int(record["meta/num_classes"]),
        "image_size": int(record["meta/image_size"]),
        "shift": record["meta/shift"],
        "channel_mix": record["meta/channel_mix"],
    }
    samples = []
    for i in range(count):
        s_meta = record[f"sample{i}/meta"]
        samples.append(SceneSample(
            image=record[f"sample{i}/image"],
            gt_boxes=record[f"sample{i}/boxes"].reshape(-1, 4),
            gt_classes=record[f"sample{i}/classes"].astype(np.intp).reshape(-1),
            domain="target" if s_meta[1] == 1.0 else "source",
            seed_index=int(s_meta[0]),
        ))
    return samples, meta


def build_split(seed: int, count: int, cfg: SceneConfig,
                shift: ShiftProfile | None, domain: str,
                index_offset: int = 0) -> list[SceneSample]:
    return [generate_scene(seed, index_offset + i, cfg, shift, domain)
            for i in range(count)]
