"""Compare representations across depth with a truncated-spectrum CKA grid.

Gram matrices are built once per tap from a shared sample draw, then every
pair is scored. Eigenvalues below the relative cut are treated as noise
and dropped before the trace, which keeps huge near-null spaces from
washing out the comparison.
"""

from pathlib import Path

from layerlens.io import load_dataset, load_model
from layerlens.similarity import cka_grid

ROOT = Path(__file__).resolve().parents[1]
TAPS = ["input", "pool1", "pool2", "pool3", "relu4", "fc2"]


def main() -> None:
    graph = load_model(ROOT / "fixtures" / "model" / "manifest.json")
    test = load_dataset(ROOT / "fixtures" / "data" / "id_test.spd")
    grid = cka_grid(graph, test, TAPS, n_samples=512, seed=11)
    values = grid.cka_values()

    width = max(len(t) for t in TAPS)
    header = " ".join(f"{t:>{width}}" for t in TAPS)
    print(f"cka over {grid.n_samples} shared samples")
    print(f"{'':>{width}} {header}")
    for i, row_tap in enumerate(TAPS):
        row = " ".join(f"{values[i, j]:>{width}.3f}" for j in range(len(TAPS)))
        print(f"{row_tap:>{width}} {row}")
    print()
    print("adjacent taps should read high, input vs logits low; a sharp")
    print("drop between neighbours marks where the representation turns over")


if __name__ == "__main__":
    main()
