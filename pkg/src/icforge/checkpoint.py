"""Flat binary checkpoint files.

Layout, all little-endian:

    8 bytes   magic "ICFORGE1"
    u32       header length
    ...       header JSON (config fields, training flags, step count)
    u32       array count
    per array u16 name length, name utf-8, u8 ndim, ndim x u32 dims,
              float64 raw data in C order

Arrays are written sorted by name so identical states produce identical
bytes. Optimizer moments ride along under an "opt." name prefix, which
lets a resumed run continue exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .model import CriticModel, ModelConfig

MAGIC = b"ICFORGE1"
FORMAT_VERSION = 1


@dataclass
class TrainFlags:
    """Switches that shape training and inference-time fusing."""

    with_aal: bool = True
    with_de: bool = True
    frozen_base: bool = False
    lora_rank: int = 0
    lora_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainFlags":
        return cls(**d)


def save_checkpoint(
    path,
    model: CriticModel,
    flags: TrainFlags,
    step: int = 0,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    header = {
        "format": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "flags": flags.to_dict(),
        "step": int(step),
    }
    arrays: dict[str, np.ndarray] = {k: v.data for k, v in model.params.items()}
    for key, arr in (extras or {}).items():
        arrays["opt." + key] = np.asarray(arr, dtype=np.float64)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[CriticModel, TrainFlags, int, dict[str, np.ndarray]]:
    """Rebuild a model (adapters included) plus flags, step, and extras."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ValidationError(f"checkpoint truncated at byte {off} reading {what}")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(8, "magic") != MAGIC:
        raise ValidationError("checkpoint magic mismatch at byte 0")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"checkpoint header unreadable: {exc}") from exc
    cfg = ModelConfig(**header["config"])
    flags = TrainFlags.from_dict(header["flags"])
    step = int(header.get("step", 0))

    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims")) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        if size > 1 << 28:
            raise ValidationError(f"array '{name}' dims overflow at byte {off}")
        data = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8")
        arrays[name] = data.reshape(dims).copy()
    if off != len(raw):
        raise ValidationError(f"checkpoint has {len(raw) - off} trailing bytes")

    model = CriticModel(cfg)
    if flags.lora_rank > 0:
        model.add_adapters(flags.lora_rank, flags.lora_scale)
    extras: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            extras[name[len("opt."):]] = arr
            continue
        if name not in model.params:
            raise ValidationError(f"checkpoint carries unknown parameter '{name}'")
        if model.params[name].data.shape != arr.shape:
            raise ValidationError(
                f"parameter '{name}' shape {arr.shape} does not match model"
            )
        model.params[name].data = arr
    missing = set(model.params) - {n for n in arrays if not n.startswith("opt.")}
    if missing:
        raise ValidationError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    return model, flags, step, extras
