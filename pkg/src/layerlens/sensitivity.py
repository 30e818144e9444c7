"""Noise sensitivity between tap pairs.

For each sample, the feature read at the inject tap gets one Gaussian
perturbation rescaled to a fixed norm (times the feature's own norm), the
span between the taps is re-run, and sensitivity is the relative squared
change observed downstream:

    psi = ||M(x + eta*||x||) - M(x)||^2 / ||M(x)||^2,   ||eta|| = noise_norm

One draw per sample; the reported statistics are the median and quartiles.
For the identity span psi equals noise_norm^2 by construction, which anchors
the convention that noise_norm bounds ||eta|| before the ||x|| scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import as_tap, forward, forward_from
from .errors import ValidationError
from .io import DatasetBlob, ModelGraph
from .metrics import HIGHER_IS_OOD, ScoreSet, auroc, quantile_summary

DEFAULT_NOISE_NORM = 0.1


@dataclass
class SensitivityReport:
    inject_tap: str
    observe_tap: str
    per_sample_psi: np.ndarray
    median_psi: float
    quartiles: tuple[float, float]
    seed: int
    noise_norm: float
    excluded_count: int = 0

    def score_set(self) -> ScoreSet:
        """Per-sample psi as a detector output (more sensitive = more OOD)."""
        return ScoreSet(
            name=f"sensitivity@{self.inject_tap}->{self.observe_tap}",
            orientation=HIGHER_IS_OOD,
            scores=self.per_sample_psi,
            excluded_count=self.excluded_count,
            meta={"inject": self.inject_tap, "observe": self.observe_tap,
                  "seed": self.seed, "noise_norm": self.noise_norm},
        )


def _sphere_noise(rng, shape, radius: float) -> np.ndarray:
    """Gaussian draws rescaled to exact norm `radius` per sample (float64)."""
    eta = rng.standard_normal(shape)
    flat = eta.reshape(shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    # a zero draw has probability zero; guard anyway
    norms[norms == 0.0] = 1.0
    flat *= radius / norms
    return eta


def noise_sensitivity(graph: ModelGraph, dataset, inject_tap, observe_tap,
                      noise_norm: float = DEFAULT_NOISE_NORM, seed: int = 0,
                      batch_size: int = 256) -> SensitivityReport:
    """Per-sample noise sensitivity between two taps.

    The inject tap must precede the observe tap and must be a valid
    restart point (inside a residual span the skip branch would be
    missing; that raises a topology error). Samples whose downstream
    feature has zero norm are excluded and counted.
    """
    if noise_norm < 0:
        raise ValidationError(f"noise norm must be >= 0, got {noise_norm}")
    inject_id = as_tap(inject_tap).layer_id
    observe_id = as_tap(observe_tap).layer_id
    images = dataset.images if isinstance(dataset, DatasetBlob) else np.asarray(dataset)

    _, feats = forward(graph, images, taps=[inject_id, observe_id], batch_size=batch_size)
    base_in = feats[0].activations.astype(np.float64)
    base_out = feats[1].activations.astype(np.float64)

    rng = np.random.default_rng(seed)
    n = base_in.shape[0]
    eta = _sphere_noise(rng, base_in.shape, noise_norm)
    in_norms = np.linalg.norm(base_in.reshape(n, -1), axis=1)
    perturbed = base_in + eta * in_norms.reshape((n,) + (1,) * (base_in.ndim - 1))

    psi = np.empty(n)
    for lo in range(0, n, batch_size):
        chunk = perturbed[lo : lo + batch_size]
        out = forward_from(graph, inject_id, chunk, observe_id)
        diff = out.astype(np.float64) - base_out[lo : lo + batch_size]
        psi[lo : lo + batch_size] = (diff.reshape(diff.shape[0], -1) ** 2).sum(axis=1)

    out_norm_sq = (base_out.reshape(n, -1) ** 2).sum(axis=1)
    valid = out_norm_sq > 0.0
    excluded = int((~valid).sum())
    psi = psi[valid] / out_norm_sq[valid]

    if psi.size == 0:
        raise ValidationError("every sample had a zero-norm downstream feature")
    q = quantile_summary(psi)
    return SensitivityReport(
        inject_tap=inject_id,
        observe_tap=observe_id,
        per_sample_psi=psi,
        median_psi=q.median,
        quartiles=(q.q25, q.q75),
        seed=seed,
        noise_norm=noise_norm,
        excluded_count=excluded,
    )


def noise_sensitivity_profile(graph: ModelGraph, dataset, tap_pairs,
                              noise_norm: float = DEFAULT_NOISE_NORM, seed: int = 0,
                              batch_size: int = 256) -> list[SensitivityReport]:
    """One report per (inject, observe) pair, all from the same root seed."""
    reports = []
    for k, (inject, observe) in enumerate(tap_pairs):
        reports.append(noise_sensitivity(
            graph, dataset, inject, observe,
            noise_norm=noise_norm, seed=seed + k, batch_size=batch_size,
        ))
    return reports


def sensitivity_auroc(id_report: SensitivityReport, ood_report: SensitivityReport) -> float:
    """AUROC of per-sample psi; OOD samples are expected to be more sensitive."""
    if (id_report.inject_tap, id_report.observe_tap) != (ood_report.inject_tap, ood_report.observe_tap):
        raise ValidationError(
            f"reports cover different spans: "
            f"{id_report.inject_tap}->{id_report.observe_tap} vs "
            f"{ood_report.inject_tap}->{ood_report.observe_tap}"
        )
    return auroc(id_report.score_set(), ood_report.score_set())
