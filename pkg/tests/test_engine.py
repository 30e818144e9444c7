import numpy as np
import pytest

from layerlens.engine import (
    FeatureBatch,
    TapPoint,
    all_tap_ids,
    analysis_taps,
    block_boundary_taps,
    forward,
    forward_from,
    forward_truncated,
    im2col,
    normalize_images,
    penultimate_tap,
)
from layerlens.errors import ShapeError, TopologyError, ValidationError
from layerlens.io import LayerSpec

import oracles
from conftest import build_graph, conv_stack_model, random_images, residual_model


def _oracle_layers(graph):
    """Translate a chain graph into the oracle evaluator's layer dicts."""
    out = []
    for spec in graph.layers:
        entry = {"kind": spec.kind}
        w = graph.weights.get(spec.id, {})
        if spec.kind == "conv2d":
            entry.update(weight=w["weight"].astype(np.float64),
                         bias=None if "bias" not in w else w["bias"].astype(np.float64),
                         stride=spec.params["stride"], pad=spec.params["pad"])
        elif spec.kind == "linear":
            entry.update(weight=w["weight"].astype(np.float64),
                         bias=None if "bias" not in w else w["bias"].astype(np.float64))
        elif spec.kind == "batchnorm":
            entry.update(gamma=w["gamma"].astype(np.float64), beta=w["beta"].astype(np.float64),
                         mean=w["running_mean"].astype(np.float64),
                         var=w["running_var"].astype(np.float64), eps=spec.params["epsilon"])
        elif spec.kind == "maxpool":
            entry.update(k=spec.params["k"], stride=spec.params["stride"])
        out.append(entry)
    return out


class TestNormalize:
    def test_hand_computed_pixel(self):
        rng = np.random.default_rng(0)
        graph = conv_stack_model(rng)
        images = np.zeros((1, 8, 8, 3), dtype=np.uint8)
        images[0, 2, 5, 1] = 200
        x = normalize_images(graph, images)
        assert x.shape == (1, 3, 8, 8)
        # (200/255 - 0.5) / 0.25, channels-first layout
        np.testing.assert_allclose(x[0, 1, 2, 5], (200 / 255 - 0.5) / 0.25, rtol=1e-6)
        np.testing.assert_allclose(x[0, 0, 0, 0], (0.0 - 0.5) / 0.25, rtol=1e-6)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(1)
        graph = conv_stack_model(rng)
        with pytest.raises(ValidationError):
            normalize_images(graph, np.zeros((1, 8, 8, 4), dtype=np.uint8))


class TestForward:
    def test_zero_conv_weights_zero_logits(self):
        layers = [
            LayerSpec(id="c", kind="conv2d",
                      params={"in_ch": 2, "out_ch": 3, "kh": 3, "kw": 3, "stride": 1, "pad": 1}),
            LayerSpec(id="flat", kind="flatten"),
            LayerSpec(id="fc", kind="linear", params={"in_dim": 3 * 4 * 4, "out_dim": 2}),
        ]
        rng = np.random.default_rng(2)
        weights = {
            "c": {"weight": np.zeros((3, 2, 3, 3), dtype=np.float32),
                  "bias": np.zeros(3, dtype=np.float32)},
            "fc": {"weight": rng.standard_normal((2, 48)).astype(np.float32),
                   "bias": np.zeros(2, dtype=np.float32)},
        }
        graph = build_graph(layers, weights, class_count=2, input_hw=(4, 4), channels=2)
        logits, _ = forward(graph, random_images(rng, 3, 4, 4, 2))
        assert not logits.any()

    def test_identity_conv_returns_normalized_input(self):
        c = 3
        eye = np.zeros((c, c, 1, 1), dtype=np.float32)
        for i in range(c):
            eye[i, i, 0, 0] = 1.0
        layers = [
            LayerSpec(id="c", kind="conv2d",
                      params={"in_ch": c, "out_ch": c, "kh": 1, "kw": 1, "stride": 1, "pad": 0}),
            LayerSpec(id="flat", kind="flatten"),
            LayerSpec(id="fc", kind="linear", params={"in_dim": c * 16, "out_dim": 2}),
        ]
        rng = np.random.default_rng(3)
        weights = {
            "c": {"weight": eye},
            "fc": {"weight": rng.standard_normal((2, 48)).astype(np.float32)},
        }
        graph = build_graph(layers, weights, class_count=2, input_hw=(4, 4), channels=c)
        images = random_images(rng, 2, 4, 4, c)
        _, feats = forward(graph, images, taps=["input", "c"])
        np.testing.assert_array_equal(feats[0].activations, feats[1].activations)
        np.testing.assert_array_equal(feats[0].activations, normalize_images(graph, images))

    def test_matches_naive_evaluator(self):
        """Engine output vs nested-loop reference, several seeds."""
        for seed in range(3):
            rng = np.random.default_rng(seed)
            graph = conv_stack_model(rng)
            images = random_images(rng, 4, 8, 8, 3)
            logits, _ = forward(graph, images)
            x = normalize_images(graph, images).astype(np.float64)
            expected = oracles.naive_forward(_oracle_layers(graph), x)
            np.testing.assert_allclose(logits, expected, atol=1e-5)

    def test_deterministic_bytes(self):
        rng = np.random.default_rng(4)
        graph = conv_stack_model(rng)
        images = random_images(rng, 6, 8, 8, 3)
        a, _ = forward(graph, images)
        b, _ = forward(graph, images)
        assert a.tobytes() == b.tobytes()

    def test_batch_size_invariance(self):
        rng = np.random.default_rng(5)
        graph = conv_stack_model(rng)
        images = random_images(rng, 10, 8, 8, 3)
        full, _ = forward(graph, images, batch_size=10)
        split, _ = forward(graph, images, batch_size=3)
        np.testing.assert_allclose(full, split, atol=1e-5)

    def test_residual_matches_explicit_composition(self):
        rng = np.random.default_rng(6)
        graph = residual_model(rng)
        images = random_images(rng, 3, 6, 6, 3)
        logits, feats = forward(graph, images, taps=["merge"])
        x = normalize_images(graph, images).astype(np.float64)
        w = {k: {r: a.astype(np.float64) for r, a in v.items()} for k, v in graph.weights.items()}
        h_in = np.maximum(oracles.naive_conv2d(x, w["conv_in"]["weight"], w["conv_in"]["bias"], 1, 1), 0)
        h_a = np.maximum(oracles.naive_conv2d(h_in, w["conv_a"]["weight"], w["conv_a"]["bias"], 1, 1), 0)
        h_b = oracles.naive_conv2d(h_a, w["conv_b"]["weight"], w["conv_b"]["bias"], 1, 1)
        h_skip = oracles.naive_conv2d(h_in, w["conv_skip"]["weight"], w["conv_skip"]["bias"], 1, 0)
        merged = h_skip + h_b
        np.testing.assert_allclose(feats[0].activations, merged, atol=1e-5)
        pooled = np.maximum(merged, 0).mean(axis=(2, 3))
        expected = pooled @ w["fc"]["weight"].T + w["fc"]["bias"]
        np.testing.assert_allclose(logits, expected, atol=1e-5)

    def test_unknown_tap(self):
        rng = np.random.default_rng(7)
        graph = conv_stack_model(rng)
        with pytest.raises(ValidationError):
            forward(graph, random_images(rng, 1, 8, 8, 3), taps=["nope"])

    def test_empty_batch(self):
        rng = np.random.default_rng(8)
        graph = conv_stack_model(rng)
        with pytest.raises(ValidationError):
            forward(graph, np.zeros((0, 8, 8, 3), dtype=np.uint8))


class TestFeatureBatch:
    def test_pixel_avg_matches_mean(self):
        rng = np.random.default_rng(9)
        acts = rng.standard_normal((5, 7, 3, 4)).astype(np.float32)
        fb = FeatureBatch(tap=TapPoint("t"), activations=acts)
        np.testing.assert_allclose(fb.pixel_avg, acts.mean(axis=(2, 3)), atol=1e-6)

    def test_flat_passthrough(self):
        acts = np.ones((2, 6), dtype=np.float32)
        fb = FeatureBatch(tap=TapPoint("t"), activations=acts)
        assert fb.pixel_avg is acts


class TestIm2col:
    def test_patch_layout(self):
        """Column entry c*kh*kw + i*kw + j must be channel c, offset (i, j)."""
        x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3)
        cols, ho, wo = im2col(x, 2, 2, 1, 0)
        assert (ho, wo) == (2, 2)
        # patch at output (0, 0)
        p = cols[0, :, 0]
        expected = [x[0, c, i, j] for c in range(2) for i in range(2) for j in range(2)]
        np.testing.assert_array_equal(p, expected)

    def test_reproduces_conv(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        cols, ho, wo = im2col(x, 3, 3, 2, 1)
        out = (w.reshape(4, -1)[None] @ cols).reshape(2, 4, ho, wo)
        np.testing.assert_allclose(out, oracles.naive_conv2d(x, w, None, 2, 1), atol=1e-10)


class TestForwardFrom:
    def test_identity_span(self):
        rng = np.random.default_rng(11)
        graph = conv_stack_model(rng)
        feats = rng.standard_normal((2, 6, 8, 8)).astype(np.float32)
        out = forward_from(graph, "conv1", feats, "conv1")
        assert out is feats

    def test_input_to_final_equals_forward(self):
        rng = np.random.default_rng(12)
        graph = conv_stack_model(rng)
        images = random_images(rng, 4, 8, 8, 3)
        logits, _ = forward(graph, images)
        x = normalize_images(graph, images)
        np.testing.assert_array_equal(forward_from(graph, "input", x, "fc2"), logits)

    def test_slice_equivalence_every_tap(self):
        """Restarting from any chain tap reproduces the full pass."""
        rng = np.random.default_rng(13)
        graph = conv_stack_model(rng)
        images = random_images(rng, 3, 8, 8, 3)
        taps = all_tap_ids(graph)
        logits, feats = forward(graph, images, taps=taps)
        final = graph.layers[-1].id
        for tap, fb in zip(taps, feats):
            out = forward_from(graph, tap, fb.activations, final)
            np.testing.assert_allclose(out, logits, atol=1e-5)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(14)
        graph = conv_stack_model(rng)
        with pytest.raises(ShapeError):
            forward_from(graph, "conv1", np.zeros((2, 5, 8, 8), dtype=np.float32), "fc2")

    def test_end_before_start(self):
        rng = np.random.default_rng(15)
        graph = conv_stack_model(rng)
        with pytest.raises(ValidationError):
            forward_from(graph, "fc1", np.zeros((1, 10), dtype=np.float32), "conv1")

    def test_residual_span_topology_error(self):
        rng = np.random.default_rng(16)
        graph = residual_model(rng)
        feats = np.zeros((1, 5, 6, 6), dtype=np.float32)
        with pytest.raises(TopologyError) as err:
            forward_from(graph, "conv_a", feats, "fc")
        assert "block-boundary" in str(err.value)

    def test_residual_boundary_tap_works(self):
        rng = np.random.default_rng(17)
        graph = residual_model(rng)
        images = random_images(rng, 2, 6, 6, 3)
        logits, feats = forward(graph, images, taps=["relu_in", "merge"])
        for tap, fb in zip(["relu_in", "merge"], feats):
            out = forward_from(graph, tap, fb.activations, "fc")
            np.testing.assert_allclose(out, logits, atol=1e-5)


class TestTapEnumeration:
    def test_all_taps(self):
        rng = np.random.default_rng(18)
        graph = conv_stack_model(rng)
        ids = all_tap_ids(graph)
        assert ids[0] == "input"
        assert len(ids) == len(graph.layers) + 1

    def test_chain_every_tap_is_boundary(self):
        rng = np.random.default_rng(19)
        graph = conv_stack_model(rng)
        assert block_boundary_taps(graph) == all_tap_ids(graph)

    def test_residual_boundaries_exclude_span(self):
        rng = np.random.default_rng(20)
        graph = residual_model(rng)
        taps = block_boundary_taps(graph)
        for inside in ("conv_a", "relu_a", "conv_b", "conv_skip"):
            assert inside not in taps
        for ok in ("input", "conv_in", "relu_in", "merge", "relu_out", "gap", "fc"):
            assert ok in taps

    def test_analysis_pairs(self):
        rng = np.random.default_rng(21)
        graph = conv_stack_model(rng)
        pairs = analysis_taps(graph)
        assert pairs == [("conv1", "input"), ("conv2", "pool1"),
                         ("fc1", "flat"), ("fc2", "relu3")]

    def test_residual_skip_pair_uses_override(self):
        rng = np.random.default_rng(22)
        graph = residual_model(rng)
        pairs = dict(analysis_taps(graph))
        assert pairs["conv_skip"] == "relu_in"

    def test_penultimate(self):
        rng = np.random.default_rng(23)
        graph = conv_stack_model(rng)
        assert penultimate_tap(graph) == ("fc2", "relu3")


class TestForwardTruncated:
    def test_zero_epsilon_bit_identical(self):
        rng = np.random.default_rng(24)
        graph = conv_stack_model(rng)
        images = random_images(rng, 5, 8, 8, 3)
        a, _ = forward(graph, images)
        b, _ = forward_truncated(graph, 0.0, images)
        assert a.tobytes() == b.tobytes()

    def test_matches_explicit_reconstruction(self):
        """Truncated inference vs oracle-rebuilt weights through the oracle evaluator."""
        rng = np.random.default_rng(25)
        graph = conv_stack_model(rng)
        images = random_images(rng, 4, 8, 8, 3)
        eps = 0.5
        logits, _ = forward_truncated(graph, eps, images)
        layers = _oracle_layers(graph)
        for spec, entry in zip(graph.layers, layers):
            if spec.kind in ("conv2d", "linear"):
                w = entry["weight"]
                rebuilt = oracles.truncated_reconstruction(w.reshape(w.shape[0], -1), eps)
                entry["weight"] = rebuilt.reshape(w.shape)
        x = normalize_images(graph, images).astype(np.float64)
        expected = oracles.naive_forward(layers, x)
        np.testing.assert_allclose(logits, expected, atol=1e-5)

    def test_epsilon_domain(self):
        rng = np.random.default_rng(26)
        graph = conv_stack_model(rng)
        with pytest.raises(ValidationError):
            forward_truncated(graph, 1.0, random_images(rng, 1, 8, 8, 3))
