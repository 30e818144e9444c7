"""Generate the committed test fixture: a small trained checkpoint plus datasets.

Four synthetic pattern classes on 16x16 RGB:
    0 horizontal ramp, 1 vertical ramp, 2 centered blob, 3 diagonal stripes
each with a class hue, random phase/contrast, and pixel noise. The sink
dataset is uniform byte noise.

The model is a three-block conv stack. Conv kernels stay at their seeded
random init; batchnorm running stats are measured from the training set one
block at a time; the final linear layer is fit by softmax regression on the
penultimate activations. That is enough training for high accuracy on the
patterns while keeping generation fast and fully reproducible.

Run from the repository root:
    python3 scripts/make_fixture.py
"""

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from layerlens.engine import forward
from layerlens.io import DatasetBlob, LayerSpec, ModelGraph, save_model, write_dataset
from layerlens.metrics import auroc
from layerlens.stats import fit_covariance, mahalanobis

SEED = 20240817
HW = 16
CLASSES = 4
TRAIN_PER_CLASS = 625
TEST_PER_CLASS = 250
OOD_COUNT = 1000

HUES = np.array([
    [1.00, 0.55, 0.45],
    [0.45, 1.00, 0.55],
    [0.50, 0.60, 1.00],
    [1.00, 0.95, 0.40],
])


def make_class_images(rng, label, count):
    yy, xx = np.meshgrid(np.linspace(0, 1, HW), np.linspace(0, 1, HW), indexing="ij")
    out = np.empty((count, HW, HW, 3), dtype=np.uint8)
    for i in range(count):
        phase = rng.uniform(0, 1)
        if label == 0:
            base = (xx + phase) % 1.0
        elif label == 1:
            base = (yy + phase) % 1.0
        elif label == 2:
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            base = np.exp(-r2 / 0.08)
        else:
            base = 0.5 + 0.5 * np.sin(2 * np.pi * (3 * (xx + yy) / 2 + phase))
        contrast = rng.uniform(0.75, 1.0)
        offset = rng.uniform(0.0, 0.15)
        img = (offset + contrast * base)[..., None] * HUES[label]
        img = img * 255.0 + rng.normal(0, 6.0, size=(HW, HW, 3))
        out[i] = np.clip(img, 0, 255).astype(np.uint8)
    return out


def make_datasets(rng):
    def split(per_class, shuffle_rng):
        images = np.concatenate([make_class_images(rng, c, per_class) for c in range(CLASSES)])
        labels = np.repeat(np.arange(CLASSES), per_class).astype(np.int64)
        order = shuffle_rng.permutation(len(labels))
        return images[order], labels[order]

    train_x, train_y = split(TRAIN_PER_CLASS, rng)
    test_x, test_y = split(TEST_PER_CLASS, rng)
    ood_x = rng.integers(0, 256, size=(OOD_COUNT, HW, HW, 3), dtype=np.uint8)
    return (train_x, train_y), (test_x, test_y), ood_x


def he_conv(rng, out_ch, in_ch, k):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


def he_linear(rng, out_dim, in_dim):
    std = np.sqrt(2.0 / in_dim)
    return (rng.standard_normal((out_dim, in_dim)) * std).astype(np.float32)


def bn_identity(c):
    return {
        "gamma": np.ones(c, dtype=np.float32),
        "beta": np.zeros(c, dtype=np.float32),
        "running_mean": np.zeros(c, dtype=np.float32),
        "running_var": np.ones(c, dtype=np.float32),
    }


def build_model(rng):
    layers = [
        LayerSpec(id="conv1", kind="conv2d",
                  params={"in_ch": 3, "out_ch": 16, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="bn1", kind="batchnorm", params={"channels": 16, "epsilon": 1e-5}),
        LayerSpec(id="relu1", kind="relu"),
        LayerSpec(id="pool1", kind="maxpool", params={"k": 2, "stride": 2}),
        LayerSpec(id="conv2", kind="conv2d",
                  params={"in_ch": 16, "out_ch": 32, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="bn2", kind="batchnorm", params={"channels": 32, "epsilon": 1e-5}),
        LayerSpec(id="relu2", kind="relu"),
        LayerSpec(id="pool2", kind="maxpool", params={"k": 2, "stride": 2}),
        LayerSpec(id="conv3", kind="conv2d",
                  params={"in_ch": 32, "out_ch": 32, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="bn3", kind="batchnorm", params={"channels": 32, "epsilon": 1e-5}),
        LayerSpec(id="relu3", kind="relu"),
        LayerSpec(id="pool3", kind="maxpool", params={"k": 2, "stride": 2}),
        LayerSpec(id="flat", kind="flatten"),
        LayerSpec(id="fc1", kind="linear", params={"in_dim": 128, "out_dim": 64}),
        LayerSpec(id="relu4", kind="relu"),
        LayerSpec(id="fc2", kind="linear", params={"in_dim": 64, "out_dim": CLASSES}),
    ]
    weights = {
        "conv1": {"weight": he_conv(rng, 16, 3, 3), "bias": np.zeros(16, dtype=np.float32)},
        "bn1": bn_identity(16),
        "conv2": {"weight": he_conv(rng, 32, 16, 3), "bias": np.zeros(32, dtype=np.float32)},
        "bn2": bn_identity(32),
        "conv3": {"weight": he_conv(rng, 32, 32, 3), "bias": np.zeros(32, dtype=np.float32)},
        "bn3": bn_identity(32),
        "fc1": {"weight": he_linear(rng, 64, 128), "bias": np.zeros(64, dtype=np.float32)},
        "fc2": {"weight": np.zeros((CLASSES, 64), dtype=np.float32),
                "bias": np.zeros(CLASSES, dtype=np.float32)},
    }
    return layers, weights


def graph_of(layers, weights):
    return ModelGraph(
        name="pattern-vgg-mini",
        layers=layers,
        weights=weights,
        class_count=CLASSES,
        norm_mean=np.full(3, 0.5, dtype=np.float32),
        norm_std=np.full(3, 0.25, dtype=np.float32),
        input_hw=(HW, HW),
    )


def measure_bn_stats(layers, weights, train_x):
    for stage in (1, 2, 3):
        graph = graph_of(layers, weights)
        _, feats = forward(graph, train_x, taps=[f"conv{stage}"])
        a = feats[0].activations.astype(np.float64)
        weights[f"bn{stage}"]["running_mean"] = a.mean(axis=(0, 2, 3)).astype(np.float32)
        weights[f"bn{stage}"]["running_var"] = np.maximum(
            a.var(axis=(0, 2, 3)), 1e-4).astype(np.float32)


def train_head(layers, weights, train_x, train_y, rng, epochs=400, lr=0.5):
    graph = graph_of(layers, weights)
    _, feats = forward(graph, train_x, taps=["relu4"])
    z = feats[0].activations.astype(np.float64)
    n, d = z.shape
    y = np.eye(CLASSES)[train_y]
    w = rng.standard_normal((CLASSES, d)) * 0.01
    b = np.zeros(CLASSES)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    for step in range(epochs):
        logits = z @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - y) / n
        gw = g.T @ z + 1e-4 * w
        gb = g.sum(axis=0)
        vw = 0.9 * vw - lr * gw
        vb = 0.9 * vb - lr * gb
        w += vw
        b += vb
    weights["fc2"]["weight"] = w.astype(np.float32)
    weights["fc2"]["bias"] = b.astype(np.float32)


def accuracy(graph, images, labels):
    logits, _ = forward(graph, images)
    return float((np.argmax(logits, axis=1) == labels).mean())


def main():
    rng = np.random.default_rng(SEED)
    (train_x, train_y), (test_x, test_y), ood_x = make_datasets(rng)
    layers, weights = build_model(rng)
    measure_bn_stats(layers, weights, train_x)
    train_head(layers, weights, train_x, train_y, rng)
    graph = graph_of(layers, weights)

    train_acc = accuracy(graph, train_x, train_y)
    test_acc = accuracy(graph, test_x, test_y)
    print(f"train accuracy {train_acc:.4f}  test accuracy {test_acc:.4f}")

    train_blob = DatasetBlob(images=train_x, labels=train_y, name="id_train")
    bundle = fit_covariance(graph, train_blob, "relu4")
    _, id_feats = forward(graph, test_x, taps=["relu4"])
    _, ood_feats = forward(graph, ood_x, taps=["relu4"])
    auc = auroc(mahalanobis(bundle, id_feats[0]), mahalanobis(bundle, ood_feats[0]))
    print(f"penultimate feature-distance AUROC vs noise: {auc:.4f}")

    if test_acc < 0.9 or auc < 0.998:
        raise SystemExit("fixture quality gate failed; adjust generation parameters")

    model_dir = ROOT / "fixtures" / "model"
    data_dir = ROOT / "fixtures" / "data"
    manifest = save_model(graph, model_dir)
    write_dataset(data_dir / "id_train.spd", train_x, train_y)
    write_dataset(data_dir / "id_test.spd", test_x, test_y)
    write_dataset(data_dir / "ood.spd", ood_x)

    total = sum(f.stat().st_size for f in model_dir.rglob("*") if f.is_file())
    print(f"model: {manifest} ({total / 1e6:.2f} MB)")
    for f in sorted(data_dir.glob("*.spd")):
        print(f"data:  {f} ({f.stat().st_size / 1e6:.2f} MB)")


if __name__ == "__main__":
    main()
