"""Stable rank, conv-as-matrix operators, truncated projection scoring.

A convolution is treated as the matrix it applies to each receptive-field
patch. Projection scores measure how much of a feature vector survives
projection onto the row space of the downstream weight, after dropping
singular directions below a relative threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import FeatureBatch, im2col
from .errors import DomainError, ShapeError, ValidationError
from .io import ModelGraph
from .linalg import frobenius_norm, relative_keep_mask, svd
from .metrics import HIGHER_IS_ID, ScoreSet

DEFAULT_EPSILON = 1e-2  # relative singular-value cut used across commands


def stable_rank(a: np.ndarray) -> float:
    """Squared Frobenius norm over squared spectral norm.

    A smooth lower bound on rank: 1 for rank-1 matrices, min(dims) when all
    singular values are equal, and invariant to scaling. The spectral norm
    comes from a full SVD so repeated calls agree bitwise.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"stable_rank expects a matrix, got rank {a.ndim}")
    fro = frobenius_norm(a)
    if fro == 0.0:
        raise DomainError("stable rank of the zero matrix is undefined")
    top = svd(a).s[0]
    return float((fro / top) ** 2)


@dataclass(frozen=True)
class LocalLinearOp:
    """The matrix a conv or linear layer applies to one input (patch) vector.

    For conv the matrix is an exact re-layout of the kernel: row o, column
    c*kh*kw + i*kw + j holds kernel[o, c, i, j], matching the im2col patch
    layout. conv_geom carries the window geometry needed to extract those
    patches; it is None for linear layers.
    """

    layer_id: str
    matrix: np.ndarray
    kind: str
    conv_geom: dict | None = None


def conv_local_operator(graph: ModelGraph, layer_id: str) -> LocalLinearOp:
    spec = graph.layer(layer_id)
    if spec.kind not in ("conv2d", "linear"):
        raise ValidationError(f"layer {layer_id!r} has kind {spec.kind!r}; need conv2d or linear")
    weight = graph.weights[layer_id]["weight"]
    if spec.kind == "linear":
        return LocalLinearOp(layer_id=layer_id, matrix=weight, kind="linear")
    p = spec.params
    matrix = weight.reshape(weight.shape[0], -1)
    geom = {"kh": p["kh"], "kw": p["kw"], "stride": p["stride"], "pad": p["pad"]}
    return LocalLinearOp(layer_id=layer_id, matrix=matrix, kind="conv2d", conv_geom=geom)


@dataclass(frozen=True)
class ProjectionBasis:
    """Orthonormal basis of the weight's leading right-singular directions.

    Columns of v_eps span the input directions whose singular values
    satisfy s_k / s_0 >= epsilon; everything below is dropped.
    """

    layer_id: str
    epsilon: float
    v_eps: np.ndarray
    kept_singular_values: np.ndarray
    conv_geom: dict | None = None


def projection_basis(op: LocalLinearOp, epsilon: float) -> ProjectionBasis:
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"relative cut must lie in [0, 1), got {epsilon}")
    dec = svd(op.matrix)
    mask = relative_keep_mask(dec.s, epsilon)
    r = int(mask.sum())
    if r < 1:
        raise DomainError(f"layer {op.layer_id!r}: weight is zero, no projection directions")
    v_eps = np.ascontiguousarray(dec.vt[:r].T.astype(np.float32))
    return ProjectionBasis(
        layer_id=op.layer_id,
        epsilon=float(epsilon),
        v_eps=v_eps,
        kept_singular_values=dec.s[:r].copy(),
        conv_geom=op.conv_geom,
    )


@dataclass
class ProjectionScores:
    """Per-sample projected norm and norm ratio, both higher for ID."""

    norm: ScoreSet
    ratio: ScoreSet


def projection_scores(basis: ProjectionBasis, features: FeatureBatch) -> ProjectionScores:
    """Score features by how much of them the kept weight directions carry.

    1-D features are projected directly. Spatial features are scored per
    receptive-field patch using the layer's window geometry, then averaged
    over positions; zero-norm patches are left out of a sample's ratio
    average, and samples with no usable patch (or zero-norm 1-D features)
    are excluded with a count.
    """
    a = features.activations
    v = basis.v_eps.astype(np.float64)
    tap_name = features.tap.layer_id
    if a.ndim == 2:
        if a.shape[1] != v.shape[0]:
            raise ShapeError(
                f"features at {tap_name!r} have dim {a.shape[1]}, basis expects {v.shape[0]}"
            )
        x = a.astype(np.float64)
        proj_norm = np.linalg.norm(x @ v, axis=1)
        full_norm = np.linalg.norm(x, axis=1)
        valid = full_norm > 0.0
        ratio = np.where(valid, proj_norm / np.where(valid, full_norm, 1.0), 0.0)
        norm_scores = proj_norm
        ratio_scores = ratio[valid]
        excluded = int((~valid).sum())
    elif a.ndim == 4:
        if basis.conv_geom is None:
            raise ShapeError(
                f"features at {tap_name!r} are spatial but the basis belongs to a linear layer"
            )
        g = basis.conv_geom
        cols, _, _ = im2col(a.astype(np.float64), g["kh"], g["kw"], g["stride"], g["pad"])
        if cols.shape[1] != v.shape[0]:
            raise ShapeError(
                f"patches at {tap_name!r} have dim {cols.shape[1]}, basis expects {v.shape[0]}"
            )
        # [B, P, r] and [B, P] patch norms
        proj = np.einsum("bdp,dr->bpr", cols, v, optimize=True)
        proj_norm = np.linalg.norm(proj, axis=2)
        full_norm = np.linalg.norm(cols, axis=1)
        norm_scores = proj_norm.mean(axis=1)
        valid = full_norm > 0.0
        any_valid = valid.any(axis=1)
        safe = np.where(valid, full_norm, 1.0)
        per_patch_ratio = np.where(valid, proj_norm / safe, 0.0)
        counts = valid.sum(axis=1)
        sums = per_patch_ratio.sum(axis=1)
        ratio_scores = (sums[any_valid] / counts[any_valid])
        excluded = int((~any_valid).sum())
    else:
        raise ShapeError(f"activations must be [B, D] or [B, C, H, W], got {a.shape}")

    label = f"projection@{basis.layer_id}"
    meta = {"tap": tap_name, "epsilon": basis.epsilon, "kept_dims": int(v.shape[1])}
    return ProjectionScores(
        norm=ScoreSet(name=f"{label}:norm", orientation=HIGHER_IS_ID,
                      scores=norm_scores, excluded_count=0, meta=dict(meta)),
        ratio=ScoreSet(name=f"{label}:ratio", orientation=HIGHER_IS_ID,
                       scores=ratio_scores, excluded_count=excluded, meta=dict(meta)),
    )


def parameter_census(graph: ModelGraph, epsilon: float) -> dict:
    """Parameters kept after truncating every weighted layer at `epsilon`.

    A layer truncated to rank r stores r*(rows+cols) numbers in factored
    form when that is smaller than the dense rows*cols, otherwise the dense
    count; biases and batchnorm tensors are not part of the census.
    """
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"relative cut must lie in [0, 1), got {epsilon}")
    per_layer = {}
    kept_total = 0
    dense_total = 0
    for spec in graph.weighted_layers():
        op = conv_local_operator(graph, spec.id)
        rows, cols = op.matrix.shape
        dense = rows * cols
        s = svd(op.matrix).s
        r = int(relative_keep_mask(s, epsilon).sum())
        factored = r * (rows + cols)
        kept = factored if factored < dense else dense
        per_layer[spec.id] = {"rank": r, "kept": kept, "dense": dense}
        kept_total += kept
        dense_total += dense
    return {
        "kept": kept_total,
        "total": dense_total,
        "ratio": kept_total / dense_total,
        "per_layer": per_layer,
    }
