"""Turn a walkable torch module tree into manifest layers plus tensors.

The tree is traversed in child order, which for the reference
architectures equals execution order. Dropout and Identity vanish (both
are inference no-ops), a Flatten directly after global average pooling
vanishes too (the reader's pooled output is already flat), and anything
unrecognized aborts with the offending submodule's qualified path.
"""

from __future__ import annotations

import numpy as np
from torch import nn

from .archs import BasicBlock
from .formats import ExportError


def _pair(value, what, path):
    pair = (value, value) if isinstance(value, int) else tuple(value)
    if len(pair) != 2 or pair[0] != pair[1]:
        raise ExportError(f"{path}: only square {what} supported, got {value!r}")
    return int(pair[0])


def _tensor(t) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


class ManifestWalk:
    def __init__(self):
        self.layers: list[dict] = []
        self.tensors: dict[str, np.ndarray] = {}  # blob rel path -> array
        self._counts: dict[str, int] = {}
        self.prev_id: str | None = None

    def _next_id(self, prefix: str) -> str:
        self._counts[prefix] = self._counts.get(prefix, 0) + 1
        return f"{prefix}{self._counts[prefix]}"

    def _emit(self, layer: dict, weights: dict[str, np.ndarray] | None = None,
              input_id: str | None = None) -> str:
        if input_id is not None:
            layer["input"] = input_id
        if weights:
            refs = {}
            for role, value in weights.items():
                rel = f"blobs/{layer['id']}.{role}.spt"
                self.tensors[rel] = value
                refs[role] = rel
            layer["weights"] = refs
        self.layers.append(layer)
        self.prev_id = layer["id"]
        return layer["id"]

    def _conv(self, m: nn.Conv2d, path: str, input_id: str | None = None) -> str:
        if m.groups != 1:
            raise ExportError(f"{path}: grouped conv not supported")
        if _pair(m.dilation, "dilation", path) != 1:
            raise ExportError(f"{path}: dilated conv not supported")
        if not isinstance(m.padding, (int, tuple, list)):
            raise ExportError(f"{path}: string padding not supported")
        kh, kw = (m.kernel_size, m.kernel_size) if isinstance(m.kernel_size, int) \
            else tuple(m.kernel_size)
        layer = {
            "id": self._next_id("conv"),
            "kind": "conv2d",
            "in_ch": int(m.in_channels),
            "out_ch": int(m.out_channels),
            "kh": int(kh),
            "kw": int(kw),
            "stride": _pair(m.stride, "stride", path),
            "pad": _pair(m.padding, "padding", path),
        }
        weights = {"weight": _tensor(m.weight)}
        if m.bias is not None:
            weights["bias"] = _tensor(m.bias)
        return self._emit(layer, weights, input_id)

    def _batchnorm(self, m: nn.BatchNorm2d, path: str) -> str:
        if not m.affine or not m.track_running_stats:
            raise ExportError(f"{path}: batchnorm must be affine with running stats")
        layer = {
            "id": self._next_id("bn"),
            "kind": "batchnorm",
            "channels": int(m.num_features),
            "epsilon": float(m.eps),
        }
        return self._emit(layer, {
            "gamma": _tensor(m.weight),
            "beta": _tensor(m.bias),
            "running_mean": _tensor(m.running_mean),
            "running_var": _tensor(m.running_var),
        })

    def _block(self, m: BasicBlock, path: str) -> None:
        entry = self.prev_id
        if entry is None:
            raise ExportError(f"{path}: residual block cannot be the first layer")
        self._conv(m.conv1, f"{path}.conv1")
        self._batchnorm(m.bn1, f"{path}.bn1")
        self._emit({"id": self._next_id("relu"), "kind": "relu"})
        self._conv(m.conv2, f"{path}.conv2")
        main_out = self._batchnorm(m.bn2, f"{path}.bn2")
        if m.downsample is not None:
            # projection path reads the block input, then the add joins
            # its output with the main path via ref_id
            self._conv(m.downsample[0], f"{path}.downsample.0", input_id=entry)
            self._batchnorm(m.downsample[1], f"{path}.downsample.1")
            self._emit({"id": self._next_id("add"), "kind": "add", "ref_id": main_out})
        else:
            self._emit({"id": self._next_id("add"), "kind": "add", "ref_id": entry})
        self._emit({"id": self._next_id("relu"), "kind": "relu"})

    def visit(self, module: nn.Module, path: str) -> None:
        if isinstance(module, nn.Sequential):
            for child_name, child in module.named_children():
                self.visit(child, f"{path}.{child_name}" if path else child_name)
            return
        if isinstance(module, BasicBlock):
            self._block(module, path)
            return
        if isinstance(module, nn.Conv2d):
            self._conv(module, path)
            return
        if isinstance(module, nn.BatchNorm2d):
            self._batchnorm(module, path)
            return
        if isinstance(module, nn.ReLU):
            self._emit({"id": self._next_id("relu"), "kind": "relu"})
            return
        if isinstance(module, nn.MaxPool2d):
            if module.padding not in (0, (0, 0)):
                raise ExportError(f"{path}: padded maxpool not supported")
            if module.dilation not in (1, (1, 1)):
                raise ExportError(f"{path}: dilated maxpool not supported")
            if module.ceil_mode:
                raise ExportError(f"{path}: ceil_mode maxpool not supported")
            stride = module.stride if module.stride is not None else module.kernel_size
            self._emit({
                "id": self._next_id("pool"),
                "kind": "maxpool",
                "k": _pair(module.kernel_size, "kernel", path),
                "stride": _pair(stride, "stride", path),
            })
            return
        if isinstance(module, nn.AdaptiveAvgPool2d):
            size = module.output_size
            sizes = {size} if isinstance(size, int) else set(size)
            if sizes != {1}:
                raise ExportError(f"{path}: only global (1x1) average pooling supported")
            self._emit({"id": self._next_id("gap"), "kind": "global_avgpool"})
            return
        if isinstance(module, nn.Flatten):
            if module.start_dim != 1 or module.end_dim != -1:
                raise ExportError(f"{path}: only full flatten from dim 1 supported")
            if self.layers and self.layers[-1]["kind"] == "global_avgpool":
                return  # pooled output is already [N, C] on the reader side
            self._emit({"id": self._next_id("flat"), "kind": "flatten"})
            return
        if isinstance(module, nn.Linear):
            layer = {
                "id": self._next_id("fc"),
                "kind": "linear",
                "in_dim": int(module.in_features),
                "out_dim": int(module.out_features),
            }
            weights = {"weight": _tensor(module.weight)}
            if module.bias is not None:
                weights["bias"] = _tensor(module.bias)
            self._emit(layer, weights)
            return
        if isinstance(module, (nn.Dropout, nn.Dropout2d, nn.Identity)):
            return  # inference no-ops
        raise ExportError(f"unsupported module at {path or '<root>'}: "
                          f"{type(module).__name__}")


def walk(module: nn.Module):
    """Manifest layer dicts plus blob tensors for a walkable module."""
    w = ManifestWalk()
    w.visit(module, "")
    if not w.layers:
        raise ExportError("module produced no layers")
    return w.layers, w.tensors
