"""Cross-implementation parity: torch forward vs exported-artifact forward.

The analysis package is a test-only dependency here; the exporter itself
never imports it. Agreement is checked on raw uint8 probe images, with
normalization applied by each side independently (torch from the arch
registry, the reader from the manifest it loaded).
"""

import warnings

import numpy as np
import pytest

from helpers import probe_images, seeded_module, torch_logits
from lensexport.export import export_module, export_model
from lensexport.archs import ARCHITECTURES

layerlens_io = pytest.importorskip("layerlens.io")
layerlens_engine = pytest.importorskip("layerlens.engine")

ARCHS = ("tiny2", "vgg13", "vgg16", "resnet18", "resnet34")


@pytest.mark.parametrize("arch", ARCHS)
def test_logit_parity(arch, tmp_path):
    module = seeded_module(arch, seed=hash(arch) % 1000)
    images = probe_images(arch, n=32, seed=9)
    want = torch_logits(module, images, arch)

    manifest = export_model(module, arch, tmp_path)
    graph = layerlens_io.load_model(manifest)
    got, _ = layerlens_engine.forward(graph, images)

    assert got.shape == want.shape
    assert np.abs(got - want).max() <= 1e-4


@pytest.mark.parametrize("arch", ARCHS)
def test_manifest_loads_without_warnings(arch, tmp_path):
    manifest = export_model(seeded_module(arch), arch, tmp_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        graph = layerlens_io.load_model(manifest)
    assert caught == []
    assert graph.class_count == 10


def test_parity_survives_a_saved_checkpoint(tmp_path):
    # the full intended flow: train elsewhere, save, rebuild, export
    import torch

    module = seeded_module("resnet18", seed=21)
    ckpt = tmp_path / "resnet18.pt"
    torch.save(module.state_dict(), ckpt)

    manifest = export_model(ckpt, "resnet18", tmp_path / "out")
    graph = layerlens_io.load_model(manifest)
    images = probe_images("resnet18", n=16, seed=13)
    got, _ = layerlens_engine.forward(graph, images)
    want = torch_logits(module, images, "resnet18")
    assert np.abs(got - want).max() <= 1e-4


def test_custom_class_count(tmp_path):
    module = seeded_module("tiny2", class_count=4, seed=6)
    manifest = export_module(module, tmp_path, name="tiny4", class_count=4,
                             input_size=(8, 8),
                             normalization=ARCHITECTURES["tiny2"].normalization)
    graph = layerlens_io.load_model(manifest)
    assert graph.class_count == 4
    images = probe_images("tiny2", n=8, seed=2)
    got, _ = layerlens_engine.forward(graph, images)
    assert got.shape == (8, 4)
