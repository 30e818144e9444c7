"""Sweep the spectral cut and trade parameters against test accuracy.

forward_truncated rebuilds every weighted layer from the singular
directions whose relative singular value clears epsilon, then runs the
usual forward pass. parameter_census prices the same cut without running
anything, so the two columns line up by construction.
"""

from pathlib import Path

import numpy as np

from layerlens.engine import forward, forward_truncated
from layerlens.io import load_dataset, load_model
from layerlens.spectral import parameter_census

ROOT = Path(__file__).resolve().parents[1]
SWEEP = [0.0, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def main() -> None:
    graph = load_model(ROOT / "fixtures" / "model" / "manifest.json")
    test = load_dataset(ROOT / "fixtures" / "data" / "id_test.spd")
    images, labels = test.images, test.labels

    base_logits, _ = forward(graph, images)
    print(f"baseline accuracy {accuracy(base_logits, labels):.4f} on {len(images)} samples")
    print(f"{'epsilon':>8}  {'kept ratio':>10}  {'accuracy':>8}")
    for eps in SWEEP:
        census = parameter_census(graph, eps)
        logits, _ = forward_truncated(graph, eps, images)
        print(f"{eps:>8.4f}  {census['ratio']:>10.4f}  {accuracy(logits, labels):>8.4f}")
    print()
    print("accuracy should hold flat while the kept ratio falls, then break")
    print("once the cut reaches directions the classifier actually uses")


if __name__ == "__main__":
    main()
