"""Binary containers and image I/O.

Three little-endian container formats share one layout idiom:

* ``TRIP1`` — plane stacks: magic, u32 ``P H W C``, f32 payload in C order,
  then a u32-length-prefixed UTF-8 JSON meta blob.
* ``IMGF1`` — raw float images: magic, u32 ``H W C``, f32 payload, meta blob.
* ``CKPT1`` — checkpoints: magic, u32 header length, a JSON header carrying
  module name, config, step, RNG state and a tensor directory, then the named
  f32 tensor blobs in directory order.

PNGs are written 8-bit with an sRGB chunk plus tEXt provenance entries.
All writers go through an atomic temp-file rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

TRIPLANE_MAGIC = b"TRIP1"
IMAGE_MAGIC = b"IMGF1"
CHECKPOINT_MAGIC = b"CKPT1"

_U32 = struct.Struct("<I")


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _meta_blob(meta: dict | None) -> bytes:
    raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _read_meta(buf: bytes, offset: int) -> dict:
    (n,) = _U32.unpack_from(buf, offset)
    return json.loads(buf[offset + 4 : offset + 4 + n].decode("utf-8"))


def write_triplane(path: str | Path, planes: np.ndarray, meta: dict | None = None) -> None:
    planes = np.ascontiguousarray(planes, dtype="<f4")
    if planes.ndim != 4:
        raise ValueError(f"triplane payload must be P x H x W x C, got shape {planes.shape}")
    head = TRIPLANE_MAGIC + b"".join(_U32.pack(d) for d in planes.shape)
    atomic_write_bytes(path, head + planes.tobytes() + _meta_blob(meta))


def read_triplane(path: str | Path) -> tuple[np.ndarray, dict]:
    buf = Path(path).read_bytes()
    if buf[:5] != TRIPLANE_MAGIC:
        raise ValueError(f"{path}: not a TRIP1 file")
    p, h, w, c = struct.unpack_from("<4I", buf, 5)
    off = 5 + 16
    count = p * h * w * c
    planes = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(p, h, w, c)
    return planes.copy(), _read_meta(buf, off + 4 * count)


def write_imgf(path: str | Path, array: np.ndarray, meta: dict | None = None) -> None:
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"image payload must be H x W [x C], got shape {array.shape}")
    array = np.ascontiguousarray(array)
    head = IMAGE_MAGIC + b"".join(_U32.pack(d) for d in array.shape)
    atomic_write_bytes(path, head + array.tobytes() + _meta_blob(meta))


def read_imgf(path: str | Path) -> tuple[np.ndarray, dict]:
    buf = Path(path).read_bytes()
    if buf[:5] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an IMGF1 file")
    h, w, c = struct.unpack_from("<3I", buf, 5)
    off = 5 + 12
    count = h * w * c
    array = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(h, w, c)
    return array.copy(), _read_meta(buf, off + 4 * count)


def write_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """``header`` gains a ``tensors`` directory; blobs are stored as f32."""
    blobs = []
    directory = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = dict(header)
    header["tensors"] = directory
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write_bytes(path, CHECKPOINT_MAGIC + _U32.pack(len(raw)) + raw + b"".join(blobs))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CKPT1 file")
    (n,) = _U32.unpack_from(buf, 5)
    header = json.loads(buf[9 : 9 + n].decode("utf-8"))
    tensors = {}
    off = 9 + n
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        tensors[entry["name"]] = (
            np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        )
        off += 4 * count
    return header, tensors


def write_png(path: str | Path, rgb: np.ndarray, text: dict[str, str] | None = None) -> None:
    """8-bit sRGB-tagged PNG from floats in [0, 1] (H x W x 3 or H x W)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    quantized = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    info = PngInfo()
    info.add(b"sRGB", b"\x00")  # rendering intent: perceptual
    for key, value in (text or {}).items():
        info.add_text(key, str(value))
    img = Image.fromarray(quantized)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        img.save(tmp, format="PNG", pnginfo=info)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_png(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64) / 255.0
        text = {k: str(v) for k, v in (img.text or {}).items()}
    return arr, text
