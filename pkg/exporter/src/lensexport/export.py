"""One-shot export entry points plus the two tiny CLIs."""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archs import ARCHITECTURES, build
from .formats import ExportError, write_dataset_blob, write_manifest, write_tensor_blob
from .walk import walk

DATASET_SPLITS = {
    "cifar10": ("train", "test"),
    "cifar100": ("train", "test"),
    "svhn": ("train", "test"),
    "mnist": ("train", "test"),
}


def export_module(module: nn.Module, out_dir, *, name: str, class_count: int,
                  input_size, normalization) -> Path:
    """Write manifest + blobs for an already-built module. Returns the
    manifest path. The module is switched to eval mode first so batchnorm
    and dropout export with inference semantics."""
    module.eval()
    layers, tensors = walk(module)
    out_dir = Path(out_dir)
    for rel, array in tensors.items():
        write_tensor_blob(out_dir / rel, array)
    return write_manifest(out_dir / "manifest.json", name, class_count,
                          input_size, normalization, layers)


def export_model(checkpoint, arch_name: str, out_dir, *, class_count: int = 10,
                 name: str | None = None) -> Path:
    """Build arch_name, load the checkpoint state dict into it, export.

    checkpoint: path to a torch-saved state dict, or an nn.Module to
    export as-is (its architecture is trusted to match arch_name).
    """
    if arch_name not in ARCHITECTURES:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ExportError(f"unknown architecture {arch_name!r}; known: {known}")
    spec = ARCHITECTURES[arch_name]
    if isinstance(checkpoint, nn.Module):
        module = checkpoint
    else:
        module = build(arch_name, class_count)
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        try:
            module.load_state_dict(state)
        except RuntimeError as exc:
            raise ExportError(
                f"checkpoint does not match architecture {arch_name!r}: {exc}"
            ) from exc
    return export_module(module, out_dir, name=name or arch_name,
                         class_count=class_count, input_size=spec.input_size,
                         normalization=spec.normalization)


def mnist_to_input(images) -> tuple[np.ndarray, list[str]]:
    """Grayscale 28x28 digits -> uint8 [N, 32, 32, 3], plus the rules used.

    Resizing runs bilinear on unit-scale floats and rounds back to bytes;
    the single channel is replicated, not colorized.
    """
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ExportError(f"expected uint8 [N, 28, 28], got {images.dtype} {images.shape}")
    x = torch.from_numpy(images).unsqueeze(1).float() / 255.0
    x = torch.nn.functional.interpolate(x, size=(32, 32), mode="bilinear",
                                        align_corners=False)
    grey = torch.clamp(torch.round(x * 255.0), 0, 255).to(torch.uint8)
    out = grey.repeat(1, 3, 1, 1).permute(0, 2, 3, 1).contiguous().numpy()
    rules = [
        "resize 28x28 -> 32x32, bilinear on unit-scale floats, rounded to uint8",
        "replicate single channel to 3 channels",
    ]
    return out, rules


def _fetch(name: str, split: str, root, download: bool):
    import torchvision.datasets as D  # optional dependency, import on use

    train = split == "train"
    if name == "cifar10":
        ds = D.CIFAR10(root, train=train, download=download)
        return np.asarray(ds.data, dtype=np.uint8), np.asarray(ds.targets), []
    if name == "cifar100":
        ds = D.CIFAR100(root, train=train, download=download)
        return np.asarray(ds.data, dtype=np.uint8), np.asarray(ds.targets), []
    if name == "svhn":
        ds = D.SVHN(root, split=split, download=download)
        images = np.ascontiguousarray(np.transpose(ds.data, (0, 2, 3, 1)))
        return images.astype(np.uint8), np.asarray(ds.labels), []
    ds = D.MNIST(root, train=train, download=download)
    images, rules = mnist_to_input(ds.data.numpy())
    return images, np.asarray(ds.targets), rules


def export_dataset(name: str, split: str, out_path, *, root="data",
                   download: bool = False, arrays=None) -> Path:
    """Dump one dataset split as an SPD1 blob plus a JSON sidecar.

    arrays: optional (images, labels) pair that skips the torchvision
    fetch; images must already be uint8 [N, H, W, C] except for mnist,
    which takes raw [N, 28, 28] digits and applies its input rule.
    Downloads are verified by torchvision's own checksums; a mismatch
    raises before anything is written.
    """
    if name not in DATASET_SPLITS:
        known = ", ".join(sorted(DATASET_SPLITS))
        raise ExportError(f"unknown dataset {name!r}; known: {known}")
    if split not in DATASET_SPLITS[name]:
        raise ExportError(f"dataset {name!r} has no split {split!r}")
    if arrays is not None:
        images, labels = arrays
        rules = []
        if name == "mnist":
            images, rules = mnist_to_input(images)
        images = np.asarray(images)
        labels = None if labels is None else np.asarray(labels)
    else:
        images, labels, rules = _fetch(name, split, root, download)
    if len(images) == 0:
        raise ExportError(f"{name}/{split}: empty split")

    out_path = Path(out_path)
    write_dataset_blob(out_path, images, labels)
    sidecar = {
        "source": f"torchvision:{name}" if arrays is None else "arrays",
        "split": split,
        "n": int(len(images)),
        "image_shape": [int(v) for v in images.shape[1:]],
        "labels": labels is not None,
        "transforms": rules,
    }
    side_path = out_path.with_name(out_path.name + ".json")
    side_path.write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")
    return out_path


def model_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lensexport-model",
                                 description="Export a torch checkpoint to "
                                 "manifest + tensor blobs.")
    ap.add_argument("checkpoint", help="torch-saved state dict")
    ap.add_argument("arch", choices=sorted(ARCHITECTURES))
    ap.add_argument("out_dir")
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--name", default=None)
    args = ap.parse_args(argv)
    try:
        manifest = export_model(args.checkpoint, args.arch, args.out_dir,
                                class_count=args.classes, name=args.name)
    except (ExportError, OSError) as exc:
        print(f"error: {exc}")
        return 2
    print(f"wrote {manifest}")
    return 0


def dataset_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lensexport-data",
                                 description="Dump a torchvision dataset "
                                 "split as an SPD1 blob.")
    ap.add_argument("name", choices=sorted(DATASET_SPLITS))
    ap.add_argument("split")
    ap.add_argument("out_path")
    ap.add_argument("--root", default="data")
    ap.add_argument("--download", action="store_true")
    args = ap.parse_args(argv)
    try:
        out = export_dataset(args.name, args.split, args.out_path,
                             root=args.root, download=args.download)
    except (ExportError, OSError, RuntimeError) as exc:
        print(f"error: {exc}")
        return 2
    print(f"wrote {out}")
    return 0
