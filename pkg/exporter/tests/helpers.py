import numpy as np
import torch

from lensexport.archs import ARCHITECTURES, build


def seeded_module(arch: str, class_count: int = 10, seed: int = 0):
    """Reference net with randomized weights and non-trivial batchnorm
    statistics, in eval mode. Default-initialized running stats (zero
    mean, unit var) would let a broken batchnorm path slip through."""
    torch.manual_seed(seed)
    module = build(arch, class_count)
    g = torch.Generator().manual_seed(seed + 1)
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean = torch.randn(m.num_features, generator=g) * 0.3
            m.running_var = torch.rand(m.num_features, generator=g) + 0.5
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.num_features, generator=g) + 0.5)
                m.bias.copy_(torch.randn(m.num_features, generator=g) * 0.2)
    module.eval()
    return module


def probe_images(arch: str, n: int = 32, seed: int = 1) -> np.ndarray:
    h, w = ARCHITECTURES[arch].input_size
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8)


def torch_logits(module, images: np.ndarray, arch: str) -> np.ndarray:
    """Source-side forward with the same normalization the manifest declares."""
    mean, std = ARCHITECTURES[arch].normalization
    x = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
    x = (x - torch.tensor(mean).view(1, 3, 1, 1)) / torch.tensor(std).view(1, 3, 1, 1)
    with torch.no_grad():
        return module(x.float()).numpy()
