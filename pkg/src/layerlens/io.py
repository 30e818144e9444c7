"""On-disk formats: tensor blobs, dataset blobs, and the model manifest.

Tensor blob (one tensor per file)
    magic  b"SPT1"
    u32 LE version  = 1
    u32 LE ndim     (1..4)
    ndim x u64 LE extents
    payload: little-endian IEEE-754 binary32, row-major

Dataset blob
    magic  b"SPD1"
    u32 LE version = 1
    u32 LE N, H, W, C
    u8 has_labels
    payload: N*H*W*C unsigned bytes, row-major [N, H, W, C]
    labels (if has_labels): N x u16 LE

Model manifest: UTF-8 JSON listing layers in execution order. Weighted
layers carry a "weights" map of role -> blob path relative to the
manifest. Top-level fields: name, class_count, input_size [H, W], and
normalization {mean, std} per input channel in unit (pixel/255) scale.
A layer may carry "input": "<earlier layer id>" to read its input from
that layer instead of its predecessor; this is how the projection branch
of a downsampling residual block is written down. "add" layers sum their
input with the output of the layer named by "ref_id".
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BlobIOError, FormatError, ValidationError

TENSOR_MAGIC = b"SPT1"
DATASET_MAGIC = b"SPD1"
FORMAT_VERSION = 1

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "global_avgpool", "linear", "add", "flatten")

_REQUIRED_PARAMS = {
    "conv2d": ("in_ch", "out_ch", "kh", "kw", "stride", "pad"),
    "batchnorm": ("channels", "epsilon"),
    "maxpool": ("k", "stride"),
    "linear": ("in_dim", "out_dim"),
    "add": ("ref_id",),
    "relu": (),
    "global_avgpool": (),
    "flatten": (),
}

_WEIGHT_ROLES = {
    "conv2d": {"required": ("weight",), "optional": ("bias",)},
    "linear": {"required": ("weight",), "optional": ("bias",)},
    "batchnorm": {"required": ("gamma", "beta", "running_mean", "running_var"), "optional": ()},
}


# ---------------------------------------------------------------------------
# tensor blobs


def write_tensor(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not 1 <= arr.ndim <= 4:
        raise ValidationError(f"tensor rank must be 1..4, got {arr.ndim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise BlobIOError(f"tensor blob not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise BlobIOError(f"{path}: truncated header, {len(raw)} bytes")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {TENSOR_MAGIC!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"{path}: bad ndim {ndim}")
    header_end = 12 + 8 * ndim
    if len(raw) < header_end:
        raise BlobIOError(f"{path}: truncated extents")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: nonpositive extent in {dims}")
    count = int(np.prod(dims))
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise BlobIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return data.reshape(dims).copy()


# ---------------------------------------------------------------------------
# dataset blobs


@dataclass
class DatasetBlob:
    """Raw images [N, H, W, C] as unsigned bytes, with optional labels."""

    images: np.ndarray
    labels: np.ndarray | None
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [N, H, W, C], got shape {self.images.shape}")
        if self.labels is not None and len(self.labels) != self.images.shape[0]:
            raise ValidationError(
                f"labels length {len(self.labels)} != image count {self.images.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def write_dataset(path, images, labels=None) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 4:
        raise ValidationError(f"images must be [N, H, W, C], got shape {images.shape}")
    n, h, w, c = images.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIIB", FORMAT_VERSION, n, h, w, c, 1 if labels is not None else 0))
        f.write(images.tobytes())
        if labels is not None:
            lab = np.ascontiguousarray(labels, dtype="<u2")
            if lab.shape != (n,):
                raise ValidationError(f"labels must be length {n}, got shape {lab.shape}")
            f.write(lab.tobytes())


def load_dataset(path) -> DatasetBlob:
    path = Path(path)
    if not path.exists():
        raise BlobIOError(f"dataset blob not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 25:
        raise BlobIOError(f"{path}: truncated header, {len(raw)} bytes")
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    version, n, h, w, c, has_labels = struct.unpack_from("<IIIIIB", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: bad has_labels byte {has_labels}")
    pixel_count = n * h * w * c
    expected = 25 + pixel_count + (2 * n if has_labels else 0)
    if len(raw) != expected:
        raise BlobIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, count=pixel_count, offset=25)
    images = images.reshape(n, h, w, c).copy()
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=25 + pixel_count)
        labels = labels.astype(np.int64)
    return DatasetBlob(images=images, labels=labels, name=path.stem)


# ---------------------------------------------------------------------------
# model manifest


@dataclass
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    weight_paths: dict = field(default_factory=dict)
    input_id: str | None = None  # None = previous layer ("input" for the first)


@dataclass
class ModelGraph:
    name: str
    layers: list[LayerSpec]
    weights: dict  # layer id -> {role: float32 ndarray}
    class_count: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    input_hw: tuple[int, int]

    def __post_init__(self):
        self._index = {spec.id: i for i, spec in enumerate(self.layers)}

    def layer_index(self, layer_id: str) -> int:
        if layer_id not in self._index:
            raise ValidationError(f"unknown layer id: {layer_id!r}")
        return self._index[layer_id]

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self.layer_index(layer_id)]

    @property
    def input_channels(self) -> int:
        return len(self.norm_mean)

    def weighted_layers(self) -> list[LayerSpec]:
        """Conv and linear layers, in execution order."""
        return [s for s in self.layers if s.kind in ("conv2d", "linear")]


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _propagate_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Static output shape for one layer; raises ValidationError on mismatch."""
    p = spec.params
    kind = spec.kind
    if kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != p["in_ch"]:
            raise ValidationError(f"layer {spec.id!r}: conv2d expects {p['in_ch']} channels, input shape {in_shape}")
        ho = _conv_out(in_shape[1], p["kh"], p["stride"], p["pad"])
        wo = _conv_out(in_shape[2], p["kw"], p["stride"], p["pad"])
        if ho < 1 or wo < 1:
            raise ValidationError(f"layer {spec.id!r}: kernel larger than padded input {in_shape}")
        return (p["out_ch"], ho, wo)
    if kind == "batchnorm":
        if in_shape[0] != p["channels"]:
            raise ValidationError(f"layer {spec.id!r}: batchnorm over {p['channels']} channels, input shape {in_shape}")
        return in_shape
    if kind == "relu":
        return in_shape
    if kind == "maxpool":
        if len(in_shape) != 3:
            raise ValidationError(f"layer {spec.id!r}: maxpool needs a spatial input, got {in_shape}")
        pad = p.get("pad", 0)
        ho = _conv_out(in_shape[1], p["k"], p["stride"], pad)
        wo = _conv_out(in_shape[2], p["k"], p["stride"], pad)
        if ho < 1 or wo < 1:
            raise ValidationError(f"layer {spec.id!r}: pool window larger than input {in_shape}")
        return (in_shape[0], ho, wo)
    if kind == "global_avgpool":
        if len(in_shape) != 3:
            raise ValidationError(f"layer {spec.id!r}: global_avgpool needs a spatial input, got {in_shape}")
        return (in_shape[0],)
    if kind == "flatten":
        if len(in_shape) != 3:
            raise ValidationError(f"layer {spec.id!r}: flatten needs a spatial input, got {in_shape}")
        return (int(np.prod(in_shape)),)
    if kind == "linear":
        if len(in_shape) != 1 or in_shape[0] != p["in_dim"]:
            raise ValidationError(f"layer {spec.id!r}: linear expects dim {p['in_dim']}, input shape {in_shape}")
        return (p["out_dim"],)
    if kind == "add":
        return in_shape
    raise FormatError(f"layer {spec.id!r}: unknown kind {kind!r}")


_EXPECTED_SHAPES = {
    "conv2d": lambda p: {"weight": (p["out_ch"], p["in_ch"], p["kh"], p["kw"]), "bias": (p["out_ch"],)},
    "linear": lambda p: {"weight": (p["out_dim"], p["in_dim"]), "bias": (p["out_dim"],)},
    "batchnorm": lambda p: {role: (p["channels"],) for role in _WEIGHT_ROLES["batchnorm"]["required"]},
}


def _parse_layer(entry, pos: int) -> LayerSpec:
    if not isinstance(entry, dict):
        raise FormatError(f"layer #{pos}: entry must be an object")
    lid = entry.get("id")
    kind = entry.get("kind")
    if not isinstance(lid, str) or not lid:
        raise FormatError(f"layer #{pos}: missing id")
    if kind not in LAYER_KINDS:
        raise FormatError(f"layer {lid!r}: unknown kind {kind!r}")
    params = {}
    for key in _REQUIRED_PARAMS[kind]:
        if key not in entry:
            raise FormatError(f"layer {lid!r}: missing parameter {key!r}")
        params[key] = entry[key]
    if kind == "maxpool" and "pad" in entry:
        params["pad"] = entry["pad"]
    for key in ("in_ch", "out_ch", "kh", "kw", "stride", "k", "in_dim", "out_dim", "channels", "pad"):
        if key in params:
            if not isinstance(params[key], int) or params[key] < (0 if key == "pad" else 1):
                raise FormatError(f"layer {lid!r}: parameter {key!r} must be a positive integer")
    if kind == "batchnorm" and not (isinstance(params["epsilon"], (int, float)) and params["epsilon"] > 0):
        raise FormatError(f"layer {lid!r}: epsilon must be positive")
    if kind == "add" and not isinstance(params["ref_id"], str):
        raise FormatError(f"layer {lid!r}: ref_id must be a layer id string")
    weight_paths = entry.get("weights", {})
    if not isinstance(weight_paths, dict):
        raise FormatError(f"layer {lid!r}: weights must be a mapping")
    input_id = entry.get("input")
    if input_id is not None and not isinstance(input_id, str):
        raise FormatError(f"layer {lid!r}: input must be a layer id string")
    return LayerSpec(id=lid, kind=kind, params=params, weight_paths=dict(weight_paths), input_id=input_id)


def load_model(manifest_path) -> ModelGraph:
    """Parse a manifest, load every referenced blob, and validate the graph."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise BlobIOError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{manifest_path}: top level must be an object")

    for key in ("class_count", "input_size", "normalization", "layers"):
        if key not in doc:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    class_count = doc["class_count"]
    if not isinstance(class_count, int) or class_count < 2:
        raise FormatError("class_count must be an integer >= 2")
    input_size = doc["input_size"]
    if (not isinstance(input_size, list) or len(input_size) != 2
            or any(not isinstance(v, int) or v < 1 for v in input_size)):
        raise FormatError("input_size must be [H, W] with positive integers")
    norm = doc["normalization"]
    if not isinstance(norm, dict) or "mean" not in norm or "std" not in norm:
        raise FormatError("normalization must hold per-channel mean and std")
    mean = np.asarray(norm["mean"], dtype=np.float32)
    std = np.asarray(norm["std"], dtype=np.float32)
    if mean.ndim != 1 or mean.shape != std.shape or mean.size < 1:
        raise FormatError("normalization mean/std must be equal-length vectors")
    if np.any(std <= 0):
        raise FormatError("normalization std entries must be positive")

    entries = doc["layers"]
    if not isinstance(entries, list) or not entries:
        raise FormatError("layers must be a non-empty list")
    layers = [_parse_layer(entry, i) for i, entry in enumerate(entries)]

    ids = [s.id for s in layers]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate layer ids: {dup}")
    index = {lid: i for i, lid in enumerate(ids)}

    # weights
    weights: dict[str, dict[str, np.ndarray]] = {}
    for spec in layers:
        roles = _WEIGHT_ROLES.get(spec.kind)
        if roles is None:
            if spec.weight_paths:
                raise ValidationError(f"layer {spec.id!r}: kind {spec.kind!r} takes no weights")
            continue
        expected = _EXPECTED_SHAPES[spec.kind](spec.params)
        loaded = {}
        for role in roles["required"]:
            if role not in spec.weight_paths:
                raise ValidationError(f"layer {spec.id!r}: missing weight {role!r}")
        for role, rel in spec.weight_paths.items():
            if role not in roles["required"] and role not in roles["optional"]:
                raise ValidationError(f"layer {spec.id!r}: unexpected weight role {role!r}")
            arr = read_tensor(manifest_path.parent / rel)
            if arr.shape != expected[role]:
                raise ValidationError(
                    f"layer {spec.id!r}: weight {role!r} has shape {arr.shape}, expected {expected[role]}"
                )
            loaded[role] = arr
        weights[spec.id] = loaded

    # shape propagation over the graph
    shapes: dict[str, tuple] = {"input": (int(mean.size), int(input_size[0]), int(input_size[1]))}
    for pos, spec in enumerate(layers):
        src = spec.input_id if spec.input_id is not None else ("input" if pos == 0 else layers[pos - 1].id)
        if src != "input":
            if src not in index or index[src] >= pos:
                raise ValidationError(f"layer {spec.id!r}: input {src!r} is not an earlier layer")
        in_shape = shapes[src]
        if spec.kind == "add":
            ref = spec.params["ref_id"]
            if ref != "input" and (ref not in index or index[ref] >= pos):
                raise ValidationError(f"layer {spec.id!r}: ref_id {ref!r} is not an earlier layer")
            ref_shape = shapes[ref]
            if ref_shape != in_shape:
                raise ValidationError(
                    f"layer {spec.id!r}: add joins shapes {in_shape} and {ref_shape}"
                )
        shapes[spec.id] = _propagate_shape(spec, in_shape)

    last = layers[-1]
    if last.kind != "linear" or last.params["out_dim"] != class_count:
        raise ValidationError(
            f"final layer must be linear with out_dim == class_count ({class_count}), "
            f"got {last.kind!r} -> {shapes[last.id]}"
        )

    return ModelGraph(
        name=str(doc.get("name", manifest_path.stem)),
        layers=layers,
        weights=weights,
        class_count=class_count,
        norm_mean=mean,
        norm_std=std,
        input_hw=(int(input_size[0]), int(input_size[1])),
    )


def static_shapes(graph: ModelGraph) -> dict:
    """Per-tap feature shape (without batch dim), keyed by tap id.

    "input" maps to the normalized input shape (C, H, W); every layer id
    maps to that layer's output shape.
    """
    shapes = {"input": (graph.input_channels, graph.input_hw[0], graph.input_hw[1])}
    for pos, spec in enumerate(graph.layers):
        src = spec.input_id if spec.input_id is not None else ("input" if pos == 0 else graph.layers[pos - 1].id)
        shapes[spec.id] = _propagate_shape(spec, shapes[src])
    return shapes


def save_model(graph: ModelGraph, out_dir, blob_dir: str = "blobs") -> Path:
    """Write manifest + tensor blobs; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in graph.layers:
        entry = {"id": spec.id, "kind": spec.kind}
        entry.update(spec.params)
        if spec.input_id is not None:
            entry["input"] = spec.input_id
        if spec.id in graph.weights and graph.weights[spec.id]:
            paths = {}
            for role, arr in graph.weights[spec.id].items():
                rel = f"{blob_dir}/{spec.id}.{role}.spt"
                write_tensor(out_dir / rel, arr)
                paths[role] = rel
            entry["weights"] = paths
        entries.append(entry)
    doc = {
        "format": "layerlens-model",
        "version": FORMAT_VERSION,
        "name": graph.name,
        "class_count": graph.class_count,
        "input_size": [graph.input_hw[0], graph.input_hw[1]],
        "normalization": {
            "mean": [float(v) for v in graph.norm_mean],
            "std": [float(v) for v in graph.norm_std],
        },
        "layers": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return manifest_path
