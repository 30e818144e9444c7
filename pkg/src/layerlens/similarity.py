"""Centered gram matrices and truncation-aware representation similarity.

Similarity between two taps is computed entirely from the eigenbases of
their centered gram matrices: small gram eigenvalues are dropped first
(relative cut eps_gram), the bases are compared through the overlap
matrix D = P_a^T P_b, and eigenvalues of the resulting alignment matrix
below eps_sim are dropped again before taking the trace. Linear
regression and canonical correlation scores fall out of the same D.

Conv activations enter the gram as flat [C*H*W] vectors; pixel averaging
is a Mahalanobis-pipeline convention, not a similarity one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import as_tap, forward
from .errors import DomainError, ValidationError
from .io import DatasetBlob, ModelGraph
from .linalg import relative_keep_mask, sym_eig

EPS_GRAM = 1e-6
EPS_SIM = 1e-6
DEFAULT_SAMPLES = 10000
_BLOCK_COLS = 4096


@dataclass
class GramEig:
    """Kept eigenpairs of a centered gram matrix, plus the sample selection."""

    tap: str
    sample_ids: np.ndarray
    eigenvalues: np.ndarray  # kept, descending, positive
    eigenvectors: np.ndarray  # [N, kept]
    eps_gram: float
    seed: int | None = None
    degenerate: bool = False

    @property
    def kept_dims(self) -> int:
        return int(self.eigenvalues.size)


def select_sample_ids(total: int, n_samples: int, seed: int) -> np.ndarray:
    """Seeded uniform selection without replacement, sorted ascending."""
    if n_samples > total:
        raise ValidationError(f"requested {n_samples} samples from a set of {total}")
    if n_samples < 2:
        raise ValidationError("need at least 2 samples for a gram matrix")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total, size=n_samples, replace=False))


def collect_features(graph: ModelGraph, dataset, tap, sample_ids, batch_size: int = 256) -> np.ndarray:
    """Activations at one tap for the selected samples, flattened to [N, D]."""
    images = dataset.images if isinstance(dataset, DatasetBlob) else np.asarray(dataset)
    tap_id = as_tap(tap).layer_id
    _, feats = forward(graph, images[np.asarray(sample_ids)], taps=[tap_id], batch_size=batch_size)
    a = feats[0].activations
    return np.ascontiguousarray(a.reshape(a.shape[0], -1))


def gram_from_features(features, tap="features", eps_gram: float = EPS_GRAM,
                       sample_ids=None, seed=None) -> GramEig:
    """Centered gram eigendecomposition of row-per-sample features.

    The gram of the sample-mean-centered features equals the doubly
    centered inner-product matrix. Accumulation runs in float64 over
    column blocks (deterministic order); the assembled gram is stored in
    float32 before factorization.
    """
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError(f"features must be [N >= 2, D], got shape {x.shape}")
    n, d = x.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    sample_ids = np.asarray(sample_ids)
    if sample_ids.shape != (n,):
        raise ValidationError(f"{sample_ids.size} sample ids for {n} rows")

    mean = x.astype(np.float64).mean(axis=0)
    k = np.zeros((n, n))
    for lo in range(0, d, _BLOCK_COLS):
        block = x[:, lo : lo + _BLOCK_COLS].astype(np.float64) - mean[lo : lo + _BLOCK_COLS]
        k += block @ block.T
    k32 = k.astype(np.float32)

    eig = sym_eig(k32, sym_tol=1e-4)
    mask = relative_keep_mask(eig.eigenvalues, eps_gram)
    kept = int(mask.sum())
    return GramEig(
        tap=as_tap(tap).layer_id,
        sample_ids=sample_ids,
        eigenvalues=eig.eigenvalues[:kept].copy(),
        eigenvectors=np.ascontiguousarray(eig.eigenvectors[:, :kept]),
        eps_gram=float(eps_gram),
        seed=seed,
        degenerate=kept == 0,
    )


def gram(graph: ModelGraph, dataset, tap, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
         eps_gram: float = EPS_GRAM, batch_size: int = 256) -> GramEig:
    """Gram eigenbasis of one tap's features over a seeded sample selection."""
    images = dataset.images if isinstance(dataset, DatasetBlob) else np.asarray(dataset)
    ids = select_sample_ids(images.shape[0], n_samples, seed)
    feats = collect_features(graph, images, tap, ids, batch_size=batch_size)
    return gram_from_features(feats, tap=tap, eps_gram=eps_gram, sample_ids=ids, seed=seed)


@dataclass
class SimilarityReport:
    tap_a: str
    tap_b: str
    cka: float
    lr: float
    cca: float
    cka_matrix_stable_rank: float
    kept_a: int = 0
    kept_b: int = 0
    kept_sim: int = 0


def cka(a: GramEig, b: GramEig, eps_sim: float = EPS_SIM) -> SimilarityReport:
    """Trace overlap of two gram eigenbases, truncation-aware.

    Both operands must describe the same samples in the same order. The
    alignment matrix sqrt(La) D Lb D^T sqrt(La) is diagonalized, its small
    eigenvalues dropped at the relative cut, and the surviving trace
    normalized by the gram norms.
    """
    if not np.array_equal(a.sample_ids, b.sample_ids):
        raise ValidationError("gram operands were built from different sample selections")
    if a.degenerate or b.degenerate:
        raise DomainError("centered gram is zero; similarity undefined")
    la = a.eigenvalues
    lb = b.eigenvalues
    d = a.eigenvectors.T @ b.eigenvectors  # [ra, rb]

    sqrt_la = np.sqrt(la)
    m = (sqrt_la[:, None] * (d * lb[None, :]) @ d.T) * sqrt_la[None, :]
    eig = sym_eig(m, sym_tol=1e-4)
    mask = relative_keep_mask(eig.eigenvalues, eps_sim)
    kept = int(mask.sum())
    vals = eig.eigenvalues[:kept]

    denom = np.sqrt((la**2).sum() * (lb**2).sum())
    cka_value = float(vals.sum() / denom) if kept else 0.0
    lr_value = float(((d**2) * lb[None, :]).sum() / lb.sum())
    cca_value = float((d**2).sum() / min(la.size, lb.size))
    sr = float((vals**2).sum() / vals[0] ** 2) if kept else 0.0
    return SimilarityReport(
        tap_a=a.tap,
        tap_b=b.tap,
        cka=cka_value,
        lr=lr_value,
        cca=cca_value,
        cka_matrix_stable_rank=sr,
        kept_a=la.size,
        kept_b=lb.size,
        kept_sim=kept,
    )


@dataclass
class SimilarityGrid:
    taps: list[str]
    reports: list[list[SimilarityReport]]
    seed: int
    n_samples: int

    def cka_values(self) -> np.ndarray:
        n = len(self.taps)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                out[i, j] = self.reports[i][j].cka
        return out


def cka_grid(graph: ModelGraph, dataset, taps, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             eps_gram: float = EPS_GRAM, eps_sim: float = EPS_SIM,
             batch_size: int = 256) -> SimilarityGrid:
    """Pairwise similarity over a tap list, one shared sample selection."""
    taps = [as_tap(t).layer_id for t in taps]
    if len(taps) < 2:
        raise ValidationError("similarity grid needs at least 2 taps")
    grams = [gram(graph, dataset, t, n_samples=n_samples, seed=seed,
                  eps_gram=eps_gram, batch_size=batch_size) for t in taps]
    n = len(taps)
    reports = [
        [cka(grams[i], grams[j], eps_sim=eps_sim) for j in range(n)]
        for i in range(n)
    ]
    return SimilarityGrid(taps=taps, reports=reports, seed=seed, n_samples=n_samples)


def grid_csv(grid: SimilarityGrid) -> str:
    """Square CSV: header row/column of tap ids, cells CKA to 6 decimals."""
    lines = ["tap," + ",".join(grid.taps)]
    for i, tap in enumerate(grid.taps):
        cells = [f"{grid.reports[i][j].cka:.6f}" for j in range(len(grid.taps))]
        lines.append(tap + "," + ",".join(cells))
    return "\n".join(lines) + "\n"
