"""Writers for the layerlens on-disk contract.

Tensor blob (one tensor per file):
    magic "SPT1", u32 LE version=1, u32 LE ndim, ndim x u64 LE extents,
    payload of little-endian IEEE-754 binary32, row-major.

Dataset blob:
    magic "SPD1", u32 LE version=1, u32 N, u32 H, u32 W, u32 C,
    u8 has_labels, N*H*W*C unsigned bytes row-major [N, H, W, C],
    then (if has_labels) N x u16 LE labels.

Manifest: UTF-8 JSON with layers in execution order; weighted layers map
role names to blob paths relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SPT1"
DATASET_MAGIC = b"SPD1"
VERSION = 1


class ExportError(Exception):
    pass


def write_tensor_blob(path, array) -> Path:
    """One float32 tensor, row-major. Any real dtype in, float32 out."""
    path = Path(path)
    a = np.asarray(array, dtype="<f4")  # tobytes handles layout; keeps 0-d intact
    header = TENSOR_MAGIC + struct.pack("<II", VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(a.tobytes(order="C"))
    return path


def write_dataset_blob(path, images, labels=None) -> Path:
    """uint8 [N, H, W, C] images plus optional u16 labels."""
    path = Path(path)
    images = np.asarray(images)
    if images.ndim != 4:
        raise ExportError(f"images must be [N, H, W, C], got shape {images.shape}")
    if images.dtype != np.uint8:
        raise ExportError(f"images must be uint8, got {images.dtype}")
    n, h, w, c = images.shape
    if n == 0:
        raise ExportError("refusing to write an empty dataset")
    header = DATASET_MAGIC + struct.pack("<IIIIIB", VERSION, n, h, w, c,
                                         0 if labels is None else 1)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(images).tobytes(order="C"))
        if labels is not None:
            lab = np.asarray(labels)
            if lab.shape != (n,):
                raise ExportError(f"labels must have shape ({n},), got {lab.shape}")
            if lab.min() < 0 or lab.max() > np.iinfo(np.uint16).max:
                raise ExportError("labels out of u16 range")
            fh.write(lab.astype("<u2").tobytes(order="C"))
    return path


def write_manifest(path, name, class_count, input_size, normalization, layers) -> Path:
    """Assemble and write the model manifest.

    layers: list of dicts already in execution order, each with at least
    "id" and "kind"; weighted entries carry a "weights" role -> relative
    path map. normalization: (mean, std) per-channel sequences in unit
    pixel scale.
    """
    mean, std = normalization
    doc = {
        "format": "layerlens-model",
        "version": VERSION,
        "name": name,
        "class_count": int(class_count),
        "input_size": [int(input_size[0]), int(input_size[1])],
        "normalization": {"mean": [float(v) for v in mean],
                          "std": [float(v) for v in std]},
        "layers": layers,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path
