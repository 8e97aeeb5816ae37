"""Named-tensor container: the on-disk format for checkpoints and dumps.

Layout (all integers little-endian):
    magic   4 bytes  b"SFNT"
    version u32      currently 1
    count   u64      number of records
    record: name_len u32, name utf-8, rank u32, dims u64 each,
            payload  raw little-endian float64

Round-trips are bit-exact; loading preserves record order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .detector import DetectorConfig, validate_params

MAGIC = b"SFNT"
VERSION = 1

_CONFIG_FIELDS = ("image_size", "in_channels", "embed_dim", "num_queries",
                  "decoder_layers", "num_classes", "ffn_dim")


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a named-tensor container")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 16
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        out[name] = arr.reshape(dims)
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes in container")
    return out


# ---------------------------------------------------------------------------
# detector checkpoints


def pack_params(params: dict[str, Tensor], prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in params.items()}


def save_checkpoint(path, cfg: DetectorConfig, params: dict[str, Tensor],
                    extra: dict[str, np.ndarray] | None = None) -> None:
    record: dict[str, np.ndarray] = {
        f"meta/{name}": np.asarray(float(getattr(cfg, name)))
        for name in _CONFIG_FIELDS
    }
    record["meta/patch_strides"] = np.asarray(cfg.patch_strides, dtype=np.float64)
    record.update(pack_params(params))
    if extra:
        record.update(extra)
    save_tensors(path, record)


def load_checkpoint(path, requires_grad: bool = True):
    """Returns (config, params, extras); parameter shapes are validated."""
    record = load_tensors(path)
    try:
        kwargs = {name: int(record[f"meta/{name}"]) for name in _CONFIG_FIELDS}
        strides = tuple(int(s) for s in record["meta/patch_strides"])
    except KeyError as err:
        raise CheckpointError(f"{path}: missing checkpoint metadata {err}") from err
    cfg = DetectorConfig(patch_strides=strides, **kwargs)
    params = {k[len("param/"):]: Tensor(v, requires_grad=requires_grad)
              for k, v in record.items() if k.startswith("param/")}
    validate_params(cfg, params)
    extras = {k: v for k, v in record.items()
              if not k.startswith("param/") and not k.startswith("meta/")}
    return cfg, params, extras
