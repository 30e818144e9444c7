"""Class means, tied covariance, and Mahalanobis distance scoring.

Statistics are always fit on pixel-averaged features: a conv activation
[B, C, H, W] collapses to its per-channel spatial mean [B, C] before any
mean or covariance is taken. The tied covariance is the plain average of
the per-class covariances (each normalized by its own class count), and
its inverse is the Moore-Penrose inverse restricted to eigenvalues within
a relative cut of the largest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import FeatureBatch, TapPoint, as_tap, forward
from .errors import BlobIOError, DomainError, FormatError, ValidationError
from .io import DatasetBlob, ModelGraph, read_tensor, write_tensor
from .linalg import SymEig, relative_keep_mask, sym_eig
from .metrics import HIGHER_IS_OOD, ScoreSet

EIG_CUT = 1e-6  # relative eigenvalue threshold for the pseudoinverse


@dataclass
class CovarianceBundle:
    """Fitted per-class means plus one shared covariance and its eigenbasis."""

    tap: TapPoint
    class_means: np.ndarray  # [K, C] float64
    tied_cov: np.ndarray  # [C, C] float64
    eig: SymEig
    kept_dims: int
    inv_eigenvalues: np.ndarray  # [kept_dims] float64
    degenerate: bool = False

    @property
    def class_count(self) -> int:
        return self.class_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]


def _pixel_avg(features) -> np.ndarray:
    if isinstance(features, FeatureBatch):
        return features.pixel_avg.astype(np.float64)
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 4:
        return arr.mean(axis=(2, 3))
    if arr.ndim != 2:
        raise ValidationError(f"features must be [B, C] or [B, C, H, W], got shape {arr.shape}")
    return arr


def fit_covariance_from_features(features, labels, class_count: int, tap="input") -> CovarianceBundle:
    """Fit means and tied covariance from already-extracted features."""
    x = _pixel_avg(features)
    if labels is None:
        raise ValidationError("covariance fit needs labeled samples")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValidationError(f"{labels.shape[0]} labels for {x.shape[0]} samples")
    if class_count < 2:
        raise ValidationError("need at least two classes")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValidationError(
            f"labels must lie in [0, {class_count}), found range "
            f"[{labels.min()}, {labels.max()}]"
        )

    dim = x.shape[1]
    means = np.zeros((class_count, dim))
    cov = np.zeros((dim, dim))
    for c in range(class_count):
        xc = x[labels == c]
        if xc.shape[0] < 2:
            raise ValidationError(f"class {c} has {xc.shape[0]} samples, need at least 2")
        mu = xc.mean(axis=0)
        means[c] = mu
        diff = xc - mu
        cov += (diff.T @ diff) / xc.shape[0]
    cov /= class_count

    eig = sym_eig(cov)
    mask = relative_keep_mask(eig.eigenvalues, EIG_CUT)
    kept = int(mask.sum())
    degenerate = kept == 0
    inv = 1.0 / eig.eigenvalues[:kept] if kept else np.zeros(0)
    return CovarianceBundle(
        tap=as_tap(tap),
        class_means=means,
        tied_cov=cov,
        eig=eig,
        kept_dims=kept,
        inv_eigenvalues=inv,
        degenerate=degenerate,
    )


def fit_covariance(graph: ModelGraph, train: DatasetBlob, tap, batch_size: int = 256) -> CovarianceBundle:
    """Run the model over a labeled set and fit statistics at one tap."""
    if train.labels is None:
        raise ValidationError(f"dataset {train.name!r} has no labels; covariance fit needs them")
    tap_id = as_tap(tap).layer_id
    _, feats = forward(graph, train, taps=[tap_id], batch_size=batch_size)
    return fit_covariance_from_features(feats[0], train.labels, graph.class_count, tap=tap_id)


def mahalanobis(bundle: CovarianceBundle, features) -> ScoreSet:
    """Distance to the nearest class mean in the whitened feature space.

    Higher means further from every class, i.e. more OOD-like. The
    quadratic form uses only the kept eigenpairs, matching the
    Moore-Penrose inverse of the tied covariance.
    """
    if bundle.degenerate or bundle.kept_dims == 0:
        raise DomainError("tied covariance is degenerate: no eigenvalue above the cut")
    x = _pixel_avg(features)
    if x.shape[1] != bundle.feature_dim:
        raise ValidationError(
            f"features have dim {x.shape[1]}, bundle was fit with {bundle.feature_dim}"
        )
    v = bundle.eig.eigenvectors[:, : bundle.kept_dims]
    inv = bundle.inv_eigenvalues
    dists = np.empty((x.shape[0], bundle.class_count))
    for c in range(bundle.class_count):
        diff = x - bundle.class_means[c]
        y = diff @ v
        dists[:, c] = np.einsum("bk,k,bk->b", y, inv, y)
    best = np.clip(dists.min(axis=1), 0.0, None)
    tap_name = bundle.tap.layer_id
    return ScoreSet(
        name=f"mahalanobis@{tap_name}",
        orientation=HIGHER_IS_OOD,
        scores=np.sqrt(best),
        meta={"tap": tap_name, "kept_dims": bundle.kept_dims},
    )


# ---------------------------------------------------------------------------
# serialization: tensor blobs + JSON sidecar, so fit and score can be
# separate command invocations


def save_bundle(bundle: CovarianceBundle, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "class_means.spt", bundle.class_means)
    write_tensor(out_dir / "tied_cov.spt", bundle.tied_cov)
    write_tensor(out_dir / "eigenvalues.spt", bundle.eig.eigenvalues)
    write_tensor(out_dir / "eigenvectors.spt", bundle.eig.eigenvectors)
    sidecar = {
        "kind": "covariance-bundle",
        "tap": bundle.tap.layer_id,
        "kept_dims": bundle.kept_dims,
        "eig_cut": EIG_CUT,
        "degenerate": bundle.degenerate,
        "class_count": bundle.class_count,
        "feature_dim": bundle.feature_dim,
    }
    path = out_dir / "bundle.json"
    path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return out_dir


def load_bundle(bundle_dir) -> CovarianceBundle:
    bundle_dir = Path(bundle_dir)
    sidecar_path = bundle_dir / "bundle.json"
    if not sidecar_path.exists():
        raise BlobIOError(f"bundle sidecar not found: {sidecar_path}")
    try:
        doc = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar_path}: not valid JSON: {exc}") from exc
    if doc.get("kind") != "covariance-bundle":
        raise FormatError(f"{sidecar_path}: not a covariance bundle sidecar")
    means = read_tensor(bundle_dir / "class_means.spt").astype(np.float64)
    cov = read_tensor(bundle_dir / "tied_cov.spt").astype(np.float64)
    values = read_tensor(bundle_dir / "eigenvalues.spt").astype(np.float64)
    vectors = read_tensor(bundle_dir / "eigenvectors.spt").astype(np.float64)
    kept = int(doc["kept_dims"])
    if means.shape != (doc["class_count"], doc["feature_dim"]):
        raise ValidationError(f"{bundle_dir}: class_means shape {means.shape} disagrees with sidecar")
    if not 0 <= kept <= values.size:
        raise ValidationError(f"{bundle_dir}: kept_dims {kept} out of range")
    inv = 1.0 / values[:kept] if kept else np.zeros(0)
    return CovarianceBundle(
        tap=TapPoint(str(doc["tap"])),
        class_means=means,
        tied_cov=cov,
        eig=SymEig(eigenvalues=values, eigenvectors=vectors),
        kept_dims=kept,
        inv_eigenvalues=inv,
        degenerate=bool(doc.get("degenerate", False)),
    )
