"""Shared builders: small in-memory models and the committed fixture."""

from pathlib import Path

import numpy as np
import pytest

from layerlens.io import LayerSpec, ModelGraph, load_dataset, load_model

ROOT = Path(__file__).resolve().parent.parent
FIXTURE_MODEL = ROOT / "fixtures" / "model" / "manifest.json"
FIXTURE_DATA = ROOT / "fixtures" / "data"


def build_graph(layers, weights, class_count, input_hw, channels, name="test-model"):
    mean = np.full(channels, 0.5, dtype=np.float32)
    std = np.full(channels, 0.25, dtype=np.float32)
    return ModelGraph(
        name=name,
        layers=layers,
        weights=weights,
        class_count=class_count,
        norm_mean=mean,
        norm_std=std,
        input_hw=input_hw,
    )


def linear_model(n, k, rng, bias=True, scale=1.0):
    """Input [1, 1, n] -> flatten -> linear(n, k)."""
    w = (rng.standard_normal((k, n)) * scale).astype(np.float32)
    weights = {"fc": {"weight": w}}
    if bias:
        weights["fc"]["bias"] = (rng.standard_normal(k) * 0.1).astype(np.float32)
    layers = [
        LayerSpec(id="flat", kind="flatten"),
        LayerSpec(id="fc", kind="linear", params={"in_dim": n, "out_dim": k}),
    ]
    return build_graph(layers, weights, class_count=k, input_hw=(1, 1), channels=n)


def conv_stack_model(rng, in_hw=(8, 8), channels=3, classes=4):
    """conv-bn-relu-pool-conv-relu-flatten-linear-relu-linear chain."""
    c1, c2 = 6, 8
    h, w = in_hw
    flat_dim = c2 * (h // 2) * (w // 2)
    hidden = 10
    layers = [
        LayerSpec(id="conv1", kind="conv2d",
                  params={"in_ch": channels, "out_ch": c1, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="bn1", kind="batchnorm", params={"channels": c1, "epsilon": 1e-5}),
        LayerSpec(id="relu1", kind="relu"),
        LayerSpec(id="pool1", kind="maxpool", params={"k": 2, "stride": 2}),
        LayerSpec(id="conv2", kind="conv2d",
                  params={"in_ch": c1, "out_ch": c2, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="relu2", kind="relu"),
        LayerSpec(id="flat", kind="flatten"),
        LayerSpec(id="fc1", kind="linear", params={"in_dim": flat_dim, "out_dim": hidden}),
        LayerSpec(id="relu3", kind="relu"),
        LayerSpec(id="fc2", kind="linear", params={"in_dim": hidden, "out_dim": classes}),
    ]
    weights = {
        "conv1": {
            "weight": (rng.standard_normal((c1, channels, 3, 3)) * 0.3).astype(np.float32),
            "bias": (rng.standard_normal(c1) * 0.1).astype(np.float32),
        },
        "bn1": {
            "gamma": (1.0 + 0.1 * rng.standard_normal(c1)).astype(np.float32),
            "beta": (0.1 * rng.standard_normal(c1)).astype(np.float32),
            "running_mean": (0.2 * rng.standard_normal(c1)).astype(np.float32),
            "running_var": (0.5 + rng.random(c1)).astype(np.float32),
        },
        "conv2": {
            "weight": (rng.standard_normal((c2, c1, 3, 3)) * 0.2).astype(np.float32),
            "bias": (rng.standard_normal(c2) * 0.1).astype(np.float32),
        },
        "fc1": {
            "weight": (rng.standard_normal((hidden, flat_dim)) * 0.1).astype(np.float32),
            "bias": (rng.standard_normal(hidden) * 0.1).astype(np.float32),
        },
        "fc2": {
            "weight": (rng.standard_normal((classes, hidden)) * 0.3).astype(np.float32),
            "bias": (rng.standard_normal(classes) * 0.1).astype(np.float32),
        },
    }
    return build_graph(layers, weights, class_count=classes, input_hw=in_hw, channels=channels)


def residual_model(rng, channels=3, in_hw=(6, 6), classes=3):
    """One residual block with a 1x1 projection on the skip branch."""
    c = 5
    layers = [
        LayerSpec(id="conv_in", kind="conv2d",
                  params={"in_ch": channels, "out_ch": c, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="relu_in", kind="relu"),
        LayerSpec(id="conv_a", kind="conv2d",
                  params={"in_ch": c, "out_ch": c, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        LayerSpec(id="relu_a", kind="relu"),
        LayerSpec(id="conv_b", kind="conv2d",
                  params={"in_ch": c, "out_ch": c, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
        # projection branch reads the block input, not the previous layer
        LayerSpec(id="conv_skip", kind="conv2d",
                  params={"in_ch": c, "out_ch": c, "kh": 1, "kw": 1, "stride": 1, "pad": 0},
                  input_id="relu_in"),
        LayerSpec(id="merge", kind="add", params={"ref_id": "conv_b"}),
        LayerSpec(id="relu_out", kind="relu"),
        LayerSpec(id="gap", kind="global_avgpool"),
        LayerSpec(id="fc", kind="linear", params={"in_dim": c, "out_dim": classes}),
    ]
    weights = {}
    for lid, shape in [
        ("conv_in", (c, channels, 3, 3)),
        ("conv_a", (c, c, 3, 3)),
        ("conv_b", (c, c, 3, 3)),
        ("conv_skip", (c, c, 1, 1)),
    ]:
        weights[lid] = {
            "weight": (rng.standard_normal(shape) * 0.3).astype(np.float32),
            "bias": (rng.standard_normal(shape[0]) * 0.1).astype(np.float32),
        }
    weights["fc"] = {
        "weight": (rng.standard_normal((classes, c)) * 0.5).astype(np.float32),
        "bias": np.zeros(classes, dtype=np.float32),
    }
    return build_graph(layers, weights, class_count=classes, input_hw=in_hw, channels=channels)


def random_images(rng, n, h, w, c):
    return rng.integers(0, 256, size=(n, h, w, c), dtype=np.uint8)


@pytest.fixture(scope="session")
def fixture_model():
    return load_model(FIXTURE_MODEL)


@pytest.fixture(scope="session")
def fixture_train():
    return load_dataset(FIXTURE_DATA / "id_train.spd")


@pytest.fixture(scope="session")
def fixture_test():
    return load_dataset(FIXTURE_DATA / "id_test.spd")


@pytest.fixture(scope="session")
def fixture_ood():
    return load_dataset(FIXTURE_DATA / "ood.spd")
