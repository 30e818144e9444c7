"""Deterministic forward propagation with named tap points.

Activations are stored float32; every matrix product accumulates in
float64 and is cast back, so results are bit-identical across repeated
runs and stable (within 1e-5) across batch splits.

Tap ids name places to read features: "input" is the normalized image
batch, and each layer id is that layer's output (post-activation where an
activation follows the weight). Partial propagation (`forward_from`)
continues the network from a tap; starting inside a residual span whose
skip branch would be missing raises a topology error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TopologyError, ValidationError
from .io import DatasetBlob, ModelGraph, static_shapes
from .linalg import relative_keep_mask, svd

DEFAULT_BATCH = 256


@dataclass(frozen=True)
class TapPoint:
    """A named read point; position is always after the layer's activation."""

    layer_id: str
    position: str = "post_activation"


def as_tap(tap) -> TapPoint:
    if isinstance(tap, TapPoint):
        return tap
    if isinstance(tap, str):
        return TapPoint(layer_id=tap)
    raise ValidationError(f"tap must be a TapPoint or tap id string, got {type(tap).__name__}")


@dataclass
class FeatureBatch:
    """Activations read at one tap: [B, C, H, W] at spatial taps, [B, D] after."""

    tap: TapPoint
    activations: np.ndarray

    @property
    def pixel_avg(self) -> np.ndarray:
        """Spatial mean per channel, [B, C]; 1-D activations pass through."""
        a = self.activations
        if a.ndim == 2:
            return a
        if a.ndim != 4:
            raise ShapeError(f"activations must be [B, C, H, W] or [B, D], got {a.shape}")
        return a.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)

    def __len__(self) -> int:
        return self.activations.shape[0]


# ---------------------------------------------------------------------------
# tap bookkeeping


def all_tap_ids(graph: ModelGraph) -> list[str]:
    return ["input"] + [s.id for s in graph.layers]


def validate_tap(graph: ModelGraph, tap) -> str:
    tap_id = as_tap(tap).layer_id
    if tap_id != "input":
        graph.layer_index(tap_id)
    return tap_id


def _tap_position(graph: ModelGraph, tap_id: str) -> int:
    """Index of the layer whose output the tap reads; "input" is -1."""
    return -1 if tap_id == "input" else graph.layer_index(tap_id)


def _source_position(graph: ModelGraph, pos: int) -> int:
    spec = graph.layers[pos]
    if spec.input_id is not None:
        return _tap_position(graph, spec.input_id)
    return pos - 1


def _reference_positions(graph: ModelGraph, pos: int) -> list[int]:
    """Positions whose outputs layer `pos` reads (data input, plus add ref)."""
    refs = [_source_position(graph, pos)]
    spec = graph.layers[pos]
    if spec.kind == "add":
        refs.append(_tap_position(graph, spec.params["ref_id"]))
    return refs


def block_boundary_taps(graph: ModelGraph) -> list[str]:
    """Taps from which partial propagation to the end is well defined.

    A tap at position p qualifies when no later layer reads an output
    produced strictly before p. On a pure chain every tap qualifies; taps
    inside a residual span are excluded.
    """
    n = len(graph.layers)
    min_ref_after = np.full(n + 1, n)
    for pos in range(n - 1, -1, -1):
        min_ref_after[pos] = min(
            min_ref_after[pos + 1], min(_reference_positions(graph, pos))
        )
    out = []
    for tap_id in all_tap_ids(graph):
        p = _tap_position(graph, tap_id)
        if min_ref_after[p + 1] >= p:
            out.append(tap_id)
    return out


def analysis_taps(graph: ModelGraph) -> list[tuple[str, str]]:
    """(weighted layer id, tap feeding it) pairs, in execution order.

    The feature analyzed against a conv or linear weight is that layer's
    input, read at the tap just upstream of it.
    """
    pairs = []
    for pos, spec in enumerate(graph.layers):
        if spec.kind not in ("conv2d", "linear"):
            continue
        src = _source_position(graph, pos)
        pairs.append((spec.id, "input" if src < 0 else graph.layers[src].id))
    return pairs


def penultimate_tap(graph: ModelGraph) -> tuple[str, str]:
    """The final linear layer and the tap feeding it."""
    weighted = graph.weighted_layers()
    final = weighted[-1]
    for layer_id, tap_id in analysis_taps(graph):
        if layer_id == final.id:
            return layer_id, tap_id
    raise ValidationError("model has no weighted layers")  # pragma: no cover


# ---------------------------------------------------------------------------
# primitive layer evaluation


def normalize_images(graph: ModelGraph, images) -> np.ndarray:
    """uint8 [N, H, W, C] pixels -> float32 [N, C, H, W], (p/255 - mean)/std."""
    if isinstance(images, DatasetBlob):
        images = images.images
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"images must be [N, H, W, C], got shape {images.shape}")
    n, h, w, c = images.shape
    if c != graph.input_channels:
        raise ValidationError(f"model expects {graph.input_channels} channels, images have {c}")
    if (h, w) != graph.input_hw:
        raise ValidationError(f"model expects {graph.input_hw} input, images are {(h, w)}")
    x = images.astype(np.float64) / 255.0
    x = (x - graph.norm_mean.astype(np.float64)) / graph.norm_std.astype(np.float64)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2).astype(np.float32))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patch matrix for conv-as-matmul.

    Returns (cols [B, C*kh*kw, P], h_out, w_out) where column p holds the
    receptive field at output position (p // w_out, p % w_out), flattened
    so entry c*kh*kw + i*kw + j is input channel c at kernel offset (i, j).
    The reshaped kernel times this matrix reproduces the convolution.
    """
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"window {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _conv2d(x, weight, bias, stride, pad):
    out_ch = weight.shape[0]
    cols, ho, wo = im2col(x.astype(np.float64), weight.shape[2], weight.shape[3], stride, pad)
    w2 = weight.reshape(out_ch, -1).astype(np.float64)
    out = np.matmul(w2[None, :, :], cols)
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None]
    return out.reshape(x.shape[0], out_ch, ho, wo).astype(np.float32)


def _linear(x, weight, bias):
    out = x.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(np.float32)


def _batchnorm(x, w, epsilon):
    gamma = w["gamma"].astype(np.float64)
    beta = w["beta"].astype(np.float64)
    mean = w["running_mean"].astype(np.float64)
    var = w["running_var"].astype(np.float64)
    scale = gamma / np.sqrt(var + epsilon)
    shift = beta - mean * scale
    if x.ndim == 4:
        scale = scale[None, :, None, None]
        shift = shift[None, :, None, None]
    return (x.astype(np.float64) * scale + shift).astype(np.float32)


def _maxpool(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    windows = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return windows.max(axis=(2, 3))


def _apply_layer(spec, x, weights, ref_value=None):
    p = spec.params
    kind = spec.kind
    if kind == "conv2d":
        w = weights[spec.id]
        return _conv2d(x, w["weight"], w.get("bias"), p["stride"], p["pad"])
    if kind == "linear":
        w = weights[spec.id]
        return _linear(x, w["weight"], w.get("bias"))
    if kind == "batchnorm":
        return _batchnorm(x, weights[spec.id], p["epsilon"])
    if kind == "relu":
        return np.maximum(x, np.float32(0.0))
    if kind == "maxpool":
        return _maxpool(x, p["k"], p["stride"], p.get("pad", 0))
    if kind == "global_avgpool":
        return x.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
    if kind == "flatten":
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))
    if kind == "add":
        if ref_value is None:
            raise ValidationError(f"layer {spec.id!r}: add reference not available")
        return x + ref_value
    raise ValidationError(f"layer {spec.id!r}: unknown kind {kind!r}")  # pragma: no cover


# ---------------------------------------------------------------------------
# propagation


def _run_span(graph, weights, x, start_pos, end_pos, collect=(), start_tap="input"):
    """Run layers (start_pos, end_pos] given the tap value at start_pos.

    Returns (output at end_pos, {tap id: activations} for `collect`).
    `start_pos` is the position whose output `x` is (-1 for "input").
    """
    layers = graph.layers
    collect = set(collect)
    cache_ids = set()
    for pos in range(start_pos + 1, end_pos + 1):
        spec = layers[pos]
        if spec.input_id is not None:
            cache_ids.add(spec.input_id)
        if spec.kind == "add":
            cache_ids.add(spec.params["ref_id"])

    collected = {}
    if start_tap in collect:
        collected[start_tap] = x
    cache = {start_tap: x} if start_tap in cache_ids else {}
    prev, prev_id = x, start_tap
    for pos in range(start_pos + 1, end_pos + 1):
        spec = layers[pos]
        src = spec.input_id if spec.input_id is not None else prev_id
        if src == prev_id:
            inp = prev
        elif src in cache:
            inp = cache[src]
        else:
            raise TopologyError(
                f"layer {spec.id!r} reads {src!r}, which is not available when starting "
                f"from tap {start_tap!r}; start from a block-boundary tap instead"
            )
        ref_value = None
        if spec.kind == "add":
            ref = spec.params["ref_id"]
            if ref == prev_id:
                ref_value = prev
            elif ref in cache:
                ref_value = cache[ref]
            else:
                raise TopologyError(
                    f"layer {spec.id!r} adds {ref!r}, which is not available when starting "
                    f"from tap {start_tap!r}; start from a block-boundary tap instead"
                )
        out = _apply_layer(spec, inp, weights, ref_value)
        if spec.id in cache_ids:
            cache[spec.id] = out
        if spec.id in collect:
            collected[spec.id] = out
        prev, prev_id = out, spec.id
    return prev, collected


def forward(graph: ModelGraph, images, taps=(), batch_size: int = DEFAULT_BATCH):
    """Full forward pass over raw images.

    Returns (logits [N, K] float32, list of FeatureBatch matching `taps`
    order). Batches internally; results are batch-size invariant within
    float32 roundoff.
    """
    return _forward_weights(graph, graph.weights, images, taps, batch_size)


def _forward_weights(graph, weights, images, taps, batch_size):
    tap_ids = [validate_tap(graph, t) for t in taps]
    if isinstance(images, DatasetBlob):
        images = images.images
    n = images.shape[0]
    if n == 0:
        raise ValidationError("empty image batch")
    last = len(graph.layers) - 1
    logits_parts = []
    tap_parts: dict[str, list] = {t: [] for t in tap_ids}
    for lo in range(0, n, batch_size):
        x = normalize_images(graph, images[lo : lo + batch_size])
        out, collected = _run_span(graph, weights, x, -1, last, collect=tap_ids)
        logits_parts.append(out)
        for t in tap_parts:
            tap_parts[t].append(collected[t])
    logits = np.concatenate(logits_parts, axis=0)
    features = [
        FeatureBatch(tap=TapPoint(t), activations=np.concatenate(tap_parts[t], axis=0))
        for t in tap_ids
    ]
    return logits, features


def forward_from(graph: ModelGraph, start_tap, features: np.ndarray, end_tap) -> np.ndarray:
    """Propagate tap activations forward: slice-equivalent to a full pass.

    `features` must be the activations read at `start_tap` (batch leading).
    Raises TopologyError when a layer in the span reads an output produced
    before the start tap, which happens for taps inside residual spans.
    """
    start_id = validate_tap(graph, start_tap)
    end_id = validate_tap(graph, end_tap)
    start_pos = _tap_position(graph, start_id)
    end_pos = _tap_position(graph, end_id)
    if end_pos < start_pos:
        raise ValidationError(f"end tap {end_id!r} precedes start tap {start_id!r}")
    features = np.asarray(features)
    expected = static_shapes(graph)[start_id]
    if tuple(features.shape[1:]) != expected:
        raise ShapeError(
            f"features for tap {start_id!r} must be [B, {', '.join(map(str, expected))}], "
            f"got {features.shape}"
        )
    if start_pos == end_pos:
        # identity span: hand back the input untouched (dtype included)
        return features
    features = features.astype(np.float32, copy=False)
    out, _ = _run_span(graph, graph.weights, features, start_pos, end_pos, start_tap=start_id)
    return out


def truncate_matrix(w2: np.ndarray, epsilon: float) -> np.ndarray:
    """Rank-truncated reconstruction keeping singular values s_k/s_0 >= epsilon."""
    dec = svd(w2)
    mask = relative_keep_mask(dec.s, epsilon)
    r = int(mask.sum())
    rec = (dec.u[:, :r] * dec.s[:r]) @ dec.vt[:r]
    return rec.astype(np.float32)


def truncated_weights(graph: ModelGraph, epsilon: float) -> dict:
    """Weight table with every conv/linear matrix replaced by its truncation.

    epsilon = 0 returns the original arrays untouched, so propagation with
    the result is bit-identical to the untruncated model.
    """
    if epsilon == 0.0:
        return graph.weights
    out = {}
    for spec in graph.layers:
        if spec.id not in graph.weights:
            continue
        roles = dict(graph.weights[spec.id])
        if spec.kind in ("conv2d", "linear"):
            w = roles["weight"]
            w2 = w.reshape(w.shape[0], -1)
            roles["weight"] = truncate_matrix(w2, epsilon).reshape(w.shape)
        out[spec.id] = roles
    return out


def forward_truncated(graph: ModelGraph, epsilon: float, images, taps=(), batch_size: int = DEFAULT_BATCH):
    """Forward pass with rank-truncated conv/linear weights."""
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"truncation cut must lie in [0, 1), got {epsilon}")
    return _forward_weights(graph, truncated_weights(graph, epsilon), images, taps, batch_size)
