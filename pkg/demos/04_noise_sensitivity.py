"""Inject calibrated noise at each depth and watch how hard the logits move.

psi is the squared relative change of the mapped output when the input at
the injection tap is perturbed by a fixed relative amount. Layers that
amplify noise for OOD inputs more than for ID inputs make psi itself a
usable detection score, which the AUROC column below measures.
"""

from pathlib import Path

from layerlens.engine import block_boundary_taps
from layerlens.io import load_dataset, load_model
from layerlens.sensitivity import noise_sensitivity, sensitivity_auroc

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    graph = load_model(ROOT / "fixtures" / "model" / "manifest.json")
    test = load_dataset(ROOT / "fixtures" / "data" / "id_test.spd")
    ood = load_dataset(ROOT / "fixtures" / "data" / "ood.spd")
    id_images = test.images[:500]
    ood_images = ood.images[:500]

    taps = block_boundary_taps(graph)[:-1]  # logits-to-logits is the identity span
    print(f"noise_norm=0.1, observing at the logits, {len(id_images)} samples/side")
    print(f"{'inject':>8}  {'id med psi':>10}  {'ood med psi':>11}  {'auroc':>6}")
    for tap in taps:
        rep_id = noise_sensitivity(graph, id_images, tap, "fc2", noise_norm=0.1, seed=5)
        rep_ood = noise_sensitivity(graph, ood_images, tap, "fc2", noise_norm=0.1, seed=5)
        a = sensitivity_auroc(rep_id, rep_ood)
        print(f"{tap:>8}  {rep_id.median_psi:>10.4f}  "
              f"{rep_ood.median_psi:>11.4f}  {a:>6.3f}")
    print()
    print("a rising psi column toward the head means later layers amplify")
    print("perturbations instead of contracting them")


if __name__ == "__main__":
    main()
