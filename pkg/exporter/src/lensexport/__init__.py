"""Convert PyTorch classifiers and torchvision datasets to the layerlens
on-disk formats: a JSON layer manifest, SPT1 tensor blobs, and SPD1
dataset blobs. This package only writes those files; it never imports
the analysis side."""

from .archs import ARCHITECTURES, build
from .export import export_dataset, export_model, export_module
from .formats import write_dataset_blob, write_manifest, write_tensor_blob

__all__ = [
    "ARCHITECTURES",
    "build",
    "export_dataset",
    "export_model",
    "export_module",
    "write_dataset_blob",
    "write_manifest",
    "write_tensor_blob",
]
