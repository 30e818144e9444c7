"""Walk the bundled checkpoint and read off each layer's stable rank.

Stable rank (squared Frobenius norm over squared spectral norm) says how
many directions of a weight matrix carry real energy. A conv layer is
flattened to its patch-space matrix first, so the number is comparable
across layer kinds.
"""

from pathlib import Path

from layerlens.engine import analysis_taps
from layerlens.io import load_model
from layerlens.spectral import conv_local_operator, stable_rank

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    graph = load_model(ROOT / "fixtures" / "model" / "manifest.json")
    print(f"model: {len(graph.layers)} layers, classes={graph.class_count}")
    print()
    print(f"{'layer':>8}  {'shape':>12}  {'stable rank':>11}  {'rows':>5}")
    for layer_id, _ in analysis_taps(graph):
        op = conv_local_operator(graph, layer_id)
        rank = stable_rank(op.matrix)
        rows, cols = op.matrix.shape
        print(f"{layer_id:>8}  {rows:>5} x {cols:<5}  {rank:>11.3f}  {rows:>5}")
    print()
    print("ranks far below the row count mean the layer concentrates its")
    print("energy in a few directions and is a candidate for truncation")


if __name__ == "__main__":
    main()
