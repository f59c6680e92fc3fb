"""Binary and JSON persistence formats.

Float image sidecar (.f32), authoritative over the inspection PNG:
    magic  b"FIMG0001"
    uint32 little-endian: height, width, channels
    float32 little-endian pixel data, row-major (H, W, C)

Checkpoint container (.ckpt), one file holding named float tensors:
    magic  b"BGCK0001"
    uint32 little-endian header length
    UTF-8 JSON header: {"format_version", "meta": {...},
        "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    raw little-endian tensor blobs at the stated offsets (relative to the
    end of the header), in header order

JSON manifests are serialized canonically (sorted keys, compact
separators) so byte hashes are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FLOAT_MAGIC = b"FIMG0001"
CKPT_MAGIC = b"BGCK0001"
CKPT_VERSION = 1


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    return sha256_hex(Path(path).read_bytes())


def write_json(path, obj) -> str:
    """Write canonical JSON; returns the content hash."""
    data = canonical_json_bytes(obj)
    Path(path).write_bytes(data)
    return sha256_hex(data)


def read_json(path):
    return json.loads(Path(path).read_text())


# -- float image sidecar -----------------------------------------------------


def write_float_image(path, image) -> None:
    image = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {image.shape}")
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(FLOAT_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(image.astype("<f4").tobytes())


def read_float_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FLOAT_MAGIC:
        raise ValueError(f"{path}: not a float image file")
    h, w, c = struct.unpack("<III", raw[8:20])
    data = np.frombuffer(raw[20:], dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w, c).astype(np.float64)


def image_content_hash(image) -> str:
    """Hash of the float32 representation (what write_float_image stores)."""
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    h, w, c = arr.shape
    return sha256_hex(struct.pack("<III", h, w, c) + arr.astype("<f4").tobytes())


def write_png(path, image) -> None:
    """8-bit PNG for human inspection; the .f32 sidecar is authoritative."""
    from PIL import Image as PILImage

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def save_image_pair(base_path, image) -> None:
    base = Path(base_path)
    write_float_image(base.with_suffix(".f32"), image)
    write_png(base.with_suffix(".png"), image)


# -- checkpoint container ----------------------------------------------------


def write_checkpoint(path, arrays: dict, meta: dict | None = None) -> str:
    """Persist named arrays; returns the file's sha256 (the checkpoint hash)."""
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors.append({
            "name": name,
            "dtype": arr.dtype.str.lstrip("<>="),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json_bytes({
        "format_version": CKPT_VERSION,
        "meta": meta or {},
        "tensors": tensors,
    })
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return file_sha256(path)


def read_checkpoint(path):
    """Returns (arrays, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    if header["format_version"] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    base = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        buf = raw[start:start + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype="<" + t["dtype"]).reshape(t["shape"]).copy()
    return arrays, header["meta"]
