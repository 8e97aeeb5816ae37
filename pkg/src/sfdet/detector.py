"""Miniature query-based set-prediction detector.

Three strided linear patch-projection stages stand in for a backbone and
encoder, producing a 3-scale feature pyramid with fixed sinusoidal
positional encodings.  A stack of decoder layers runs dense softmax
cross-attention from learned queries to the flattened finest-scale map;
queries never attend to each other, so the predictor is exactly
permutation-equivariant in the query dimension.  Shared sigmoid heads
emit per-class scores and (cx, cy, w, h) boxes in the unit square for
every decoder layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# Scale indices of the pyramid, coarsest stride last.
SCALE_NAMES = ("s3", "s4", "s5")


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    in_channels: int = 3
    embed_dim: int = 32
    num_queries: int = 16
    decoder_layers: int = 3
    num_classes: int = 3
    ffn_dim: int = 64
    patch_strides: tuple[int, int, int] = (4, 2, 2)
    # standardize each encoder token before adding positional encodings, so
    # global affine intensity shifts cannot crush the content signal
    token_norm: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("detector: num_classes must be >= 1")
        if self.embed_dim % 4 != 0:
            raise ValueError("detector: embed_dim must be divisible by 4 (positional encoding)")
        size = self.image_size
        for s in self.patch_strides:
            if size % s != 0:
                raise ValueError(f"detector: image size {self.image_size} not divisible by strides {self.patch_strides}")
            size //= s
        if size < 1:
            raise ValueError("detector: pyramid collapses below 1x1")

    @property
    def scale_sizes(self) -> tuple[int, int, int]:
        sizes = []
        size = self.image_size
        for s in self.patch_strides:
            size //= s
            sizes.append(size)
        return tuple(sizes)


@dataclass
class DetectorOutput:
    encoder_maps: list[Tensor]        # 3 maps of shape (H_i, W_i, C)
    query_feats: list[Tensor]         # per decoder layer, (n_q, C)
    class_logits_layers: list[Tensor]  # per decoder layer, (n_q, k)
    boxes_layers: list[Tensor]        # per decoder layer, (n_q, 4)
    class_probs: Tensor = field(init=False)

    def __post_init__(self):
        self.class_probs = ad.sigmoid(self.class_logits_layers[-1])

    @property
    def class_logits(self) -> Tensor:
        return self.class_logits_layers[-1]

    @property
    def boxes(self) -> Tensor:
        return self.boxes_layers[-1]


# ---------------------------------------------------------------------------
# parameters


def _param_shapes(cfg: DetectorConfig) -> dict[str, tuple]:
    c = cfg.embed_dim
    shapes: dict[str, tuple] = {}
    in_dim = cfg.in_channels
    for name, stride in zip(SCALE_NAMES, cfg.patch_strides):
        shapes[f"enc.{name}.w"] = (stride * stride * in_dim, c)
        shapes[f"enc.{name}.b"] = (c,)
        in_dim = c
    shapes["queries"] = (cfg.num_queries, c)
    for l in range(cfg.decoder_layers):
        p = f"dec.{l}"
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = (c, c)
        for bias in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{bias}"] = (c,)
        shapes[f"{p}.norm1.g"] = (c,)
        shapes[f"{p}.norm1.b"] = (c,)
        shapes[f"{p}.ffn.w1"] = (c, cfg.ffn_dim)
        shapes[f"{p}.ffn.b1"] = (cfg.ffn_dim,)
        shapes[f"{p}.ffn.w2"] = (cfg.ffn_dim, c)
        shapes[f"{p}.ffn.b2"] = (c,)
        shapes[f"{p}.norm2.g"] = (c,)
        shapes[f"{p}.norm2.b"] = (c,)
    shapes["head.cls.w"] = (c, cfg.num_classes)
    shapes["head.cls.b"] = (cfg.num_classes,)
    shapes["head.box.w1"] = (c, c)
    shapes["head.box.b1"] = (c,)
    shapes["head.box.w2"] = (c, 4)
    shapes["head.box.b2"] = (4,)
    return shapes


def expected_param_count(cfg: DetectorConfig) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


# Sigmoid heads start near this foreground probability so the focal
# negatives stay quiet at initialization (standard focal-detector practice).
CLASS_PRIOR = 0.01


def init_params(cfg: DetectorConfig, seed: int, requires_grad: bool = True) -> dict[str, Tensor]:
    """Deterministic initialization: Xavier matrices, zero biases, unit norms."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name == "queries":
            data = rng.normal(0.0, 1.0, size=shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif name == "head.cls.b":
            data = np.full(shape, -math.log((1.0 - CLASS_PRIOR) / CLASS_PRIOR))
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=requires_grad)
    return params


def zero_params(cfg: DetectorConfig, requires_grad: bool = False) -> dict[str, Tensor]:
    return {name: Tensor(np.zeros(shape), requires_grad=requires_grad)
            for name, shape in _param_shapes(cfg).items()}


def validate_params(cfg: DetectorConfig, params: dict[str, Tensor]) -> None:
    shapes = _param_shapes(cfg)
    if set(params) != set(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ShapeError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
    total = sum(p.size for p in params.values())
    assert total == expected_param_count(cfg)


def clone_params(params: dict[str, Tensor], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def ema_blend(teacher: dict[str, Tensor], student: dict[str, Tensor], rate: float) -> dict[str, Tensor]:
    """In-place teacher <- rate * teacher + (1 - rate) * student."""
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ShapeError(f"ema_blend: {name} shapes differ ({t.shape} vs {s.shape})")
        t.data = rate * t.data + (1.0 - rate) * s.data
    return teacher


# ---------------------------------------------------------------------------
# positional encodings

_POSENC_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def sincos_positional(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, flattened to (h*w, c)."""
    key = (h, w, c)
    if key not in _POSENC_CACHE:
        quarter = c // 4
        omega = 1.0 / np.power(10000.0, np.arange(quarter) / max(quarter, 1))
        ys = np.arange(h)[:, None] * omega[None, :]
        xs = np.arange(w)[:, None] * omega[None, :]
        pe = np.zeros((h, w, c))
        pe[:, :, 0:quarter] = np.sin(ys)[:, None, :]
        pe[:, :, quarter:2 * quarter] = np.cos(ys)[:, None, :]
        pe[:, :, 2 * quarter:3 * quarter] = np.sin(xs)[None, :, :]
        pe[:, :, 3 * quarter:] = np.cos(xs)[None, :, :]
        _POSENC_CACHE[key] = pe.reshape(h * w, c)
    return _POSENC_CACHE[key]


# ---------------------------------------------------------------------------
# forward


def _patchify_array(img: np.ndarray, stride: int) -> np.ndarray:
    h, w, c = img.shape
    gh, gw = h // stride, w // stride
    blocks = img.reshape(gh, stride, gw, stride, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, stride * stride * c)


def _patchify_tensor(t: Tensor, h: int, w: int, stride: int) -> Tensor:
    c = t.shape[-1]
    gh, gw = h // stride, w // stride
    t = ad.reshape(t, (gh, stride, gw, stride, c))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (gh * gw, stride * stride * c))


def _standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean(x, axis=1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean(ad.mul(centered, centered), axis=1, keepdims=True)
    return ad.mul(centered, ad.pow_(ad.add(var, eps), -0.5))


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.add(ad.mul(_standardize(x, eps), g), b)


def forward(params: dict[str, Tensor], image: np.ndarray, cfg: DetectorConfig) -> DetectorOutput:
    """Run the detector; deterministic in (params, image)."""
    image = np.asarray(image, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
    if image.shape != expected:
        raise ShapeError(f"detector forward: image shape {image.shape}, config wants {expected}")

    c = cfg.embed_dim
    maps: list[Tensor] = []
    tokens_flat: list[Tensor] = []
    size = cfg.image_size
    current: Tensor | None = None
    for name, stride in zip(SCALE_NAMES, cfg.patch_strides):
        if current is None:
            patches = Tensor(_patchify_array(image, stride))
        else:
            patches = _patchify_tensor(current, size, size, stride)
        size //= stride
        tokens = ad.add(ad.matmul(patches, params[f"enc.{name}.w"]), params[f"enc.{name}.b"])
        if cfg.token_norm:
            tokens = _standardize(tokens)
        tokens = ad.add(tokens, Tensor(sincos_positional(size, size, c)))
        tokens_flat.append(tokens)
        current = ad.reshape(tokens, (size, size, c))
        maps.append(current)

    memory = tokens_flat[0]  # finest scale feeds cross-attention
    scale = 1.0 / math.sqrt(c)
    q = params["queries"]
    query_feats: list[Tensor] = []
    logits_layers: list[Tensor] = []
    boxes_layers: list[Tensor] = []
    for l in range(cfg.decoder_layers):
        p = f"dec.{l}"
        qp = ad.add(ad.matmul(q, params[f"{p}.attn.wq"]), params[f"{p}.attn.bq"])
        kp = ad.add(ad.matmul(memory, params[f"{p}.attn.wk"]), params[f"{p}.attn.bk"])
        vp = ad.add(ad.matmul(memory, params[f"{p}.attn.wv"]), params[f"{p}.attn.bv"])
        attn = ad.softmax(ad.mul(ad.matmul(qp, ad.transpose(kp)), scale), axis=1)
        mixed = ad.add(ad.matmul(ad.matmul(attn, vp), params[f"{p}.attn.wo"]),
                       params[f"{p}.attn.bo"])
        q = _layer_norm(ad.add(q, mixed), params[f"{p}.norm1.g"], params[f"{p}.norm1.b"])
        hidden = ad.relu(ad.add(ad.matmul(q, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
        ff = ad.add(ad.matmul(hidden, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])
        q = _layer_norm(ad.add(q, ff), params[f"{p}.norm2.g"], params[f"{p}.norm2.b"])
        query_feats.append(q)

        logits_layers.append(ad.add(ad.matmul(q, params["head.cls.w"]), params["head.cls.b"]))
        hb = ad.relu(ad.add(ad.matmul(q, params["head.box.w1"]), params["head.box.b1"]))
        raw = ad.add(ad.matmul(hb, params["head.box.w2"]), params["head.box.b2"])
        boxes_layers.append(ad.sigmoid(raw))

    return DetectorOutput(encoder_maps=maps, query_feats=query_feats,
                          class_logits_layers=logits_layers, boxes_layers=boxes_layers)
