"""File formats: PNG images, header-prefixed raw float32 tensors, JSON lines.

Tensor files are one line of JSON ``{"dtype": "float32", "shape": [...],
"field": name}`` terminated by ``\\n``, followed by the little-endian
C-order payload.
"""
import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_png(path, img):
    """Write an ``(H, W, 3)`` or ``(H, W)`` array in ``[0, 1]`` as 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32)
    return arr / 255.0


def save_tensor(path, arr, field):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = {"dtype": "float32", "shape": list(arr.shape), "field": field}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(arr.tobytes(order="C"))


def load_tensor(path, with_header=False):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(header["shape"]).copy()
    return (arr, header) if with_header else arr


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
