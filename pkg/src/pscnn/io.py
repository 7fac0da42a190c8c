"""PSTEN001 tensor files and checkpoint directories.

A PSTEN001 file is the 8-byte magic ``PSTEN001``, a little-endian uint32
rank, ``rank`` little-endian uint32 dims, then the values as little-endian
float32 in row-major order.

A checkpoint is a directory of PSTEN001 files plus ``manifest.json``::

    {"schema": "pscnn.checkpoint/1",
     "meta": {...},
     "tensors": {"name": {"file": "name.psten", "shape": [..]}, ...}}
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSTEN001"
CHECKPOINT_SCHEMA = "pscnn.checkpoint/1"


def tensor_bytes(array):
    arr = np.ascontiguousarray(np.asarray(getattr(array, "data", array)), dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def save_tensor(path, array):
    Path(path).write_bytes(tensor_bytes(array))


def parse_tensor(buf):
    if buf[:8] != MAGIC:
        raise ValueError("not a PSTEN001 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    start = 12 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != 4 * count:
        raise ValueError(f"PSTEN001 payload holds {len(buf) - start} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)


def load_tensor(path):
    return parse_tensor(Path(path).read_bytes())


def save_checkpoint(directory, tensors, meta=None):
    """Write ``tensors`` (name → array) and ``meta`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".psten"
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]))
        save_tensor(directory / fname, arr)
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"schema": CHECKPOINT_SCHEMA, "meta": meta or {}, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Return (tensors, meta) from a checkpoint directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = load_tensor(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(f"tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
        tensors[name] = arr
    return tensors, manifest["meta"]


def write_ppm(path, image):
    """Write a [3, H, W] float image in [0, 1] as binary PPM (P6)."""
    Path(path).write_bytes(ppm_bytes(image))


def ppm_bytes(image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {img.shape}")
    pix = np.clip(np.round(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + pix.tobytes()
