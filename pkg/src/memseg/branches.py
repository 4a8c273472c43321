"""The three encoders: a deep semantic branch on the downscaled patch, a shallow
memory-interaction branch and a very shallow spatial branch on the full patch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class PatchPair:
    full: Tensor   # (N, 3, H, W)
    down: Tensor   # (N, 3, H/ds, W/ds)


@dataclass
class BranchOutputs:
    latent: Tensor                 # (N, D, h/4, w/4), also the memory update features
    f_b: Tensor | None = None      # (N, D, H/2, W/2)
    m_b: Tensor | None = None      # (N, C, H/2, W/2) logits
    m_l: Tensor | None = None      # (N, C, H, W) logits
    guide_b: Tensor | None = None  # probabilities fed to the query head (refined when memory is on)
    guide_l: Tensor | None = None
    sem_logits: Tensor | None = None


def _batched(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def _check_input(x: Tensor, multiple: int, what: str):
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(what, x.shape, ("N", 3, "H", "W"))
    h, w = x.shape[2:]
    if h < multiple or w < multiple or h % multiple or w % multiple:
        raise ValueError(f"{what}: spatial size {h}x{w} must be a positive multiple of {multiple}")


def make_patch_pair(full: Tensor, downscale: int) -> PatchPair:
    full = _batched(full)
    h, w = full.shape[2:]
    if h % downscale or w % downscale:
        raise ValueError(f"patch {h}x{w} not divisible by downscale factor {downscale}")
    return PatchPair(full, T.resize_bilinear(full, h // downscale, w // downscale))


class ResBlock(Module):
    def __init__(self, width: int, *, seed: int, name: str, dtype):
        self.conv1 = Conv2d(width, width, 3, seed=seed, name=f"{name}.conv1", dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, seed=seed, name=f"{name}.conv2", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(T.add(x, self.conv2(T.relu(self.conv1(x)))))


class SemanticBranch(Module):
    """Four conv blocks (strides 2,1,2,1), two residual blocks, 1x1 projection to D."""

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype=np.float64):
        w = cfg.semantic_width
        self.blocks = [
            Conv2d(3, w, 3, 2, seed=seed, name="semantic.0", dtype=dtype),
            Conv2d(w, w, 3, 1, seed=seed, name="semantic.1", dtype=dtype),
            Conv2d(w, w, 3, 2, seed=seed, name="semantic.2", dtype=dtype),
            Conv2d(w, w, 3, 1, seed=seed, name="semantic.3", dtype=dtype),
        ]
        self.res = [ResBlock(w, seed=seed, name=f"semantic.res{i}", dtype=dtype) for i in range(2)]
        self.proj = Conv2d(w, cfg.feat_dim, 1, seed=seed, name="semantic.proj", dtype=dtype)
        # class logits on the latent grid, only used by the bilinear-upsampling baseline
        self.cls = Conv2d(cfg.feat_dim, cfg.num_classes, 1, seed=seed, name="semantic.cls", dtype=dtype)

    def __call__(self, down: Tensor) -> Tensor:
        x = _batched(down)
        _check_input(x, 4, "semantic_branch")
        for conv in self.blocks:
            x = T.relu(conv(x))
        for block in self.res:
            x = block(x)
        out = self.proj(x)
        out.tag = "semantic"
        return out


class MemoryBranch(Module):
    """Stride-2 5x5 conv then two 1x1 convs at D channels; 1x1 class head on top."""

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype=np.float64):
        d = cfg.feat_dim
        self.blocks = [
            Conv2d(3, d, 5, 2, seed=seed, name="memory.0", dtype=dtype),
            Conv2d(d, d, 1, 1, seed=seed, name="memory.1", dtype=dtype),
            Conv2d(d, d, 1, 1, seed=seed, name="memory.2", dtype=dtype),
        ]
        self.head = Conv2d(d, cfg.num_classes, 1, seed=seed, name="memory.head", dtype=dtype)

    def __call__(self, full: Tensor) -> tuple[Tensor, Tensor]:
        x = _batched(full)
        _check_input(x, 2, "memory_branch")
        for conv in self.blocks:
            x = T.relu(conv(x))
        x.tag = "memory"
        return x, self.head(x)


class SpatialBranch(Module):
    """Three stride-1 convs (3x3, 1x1, 1x1) producing full-resolution class logits."""

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype=np.float64):
        w = cfg.spatial_width
        self.convs = [
            Conv2d(3, w, 3, 1, seed=seed, name="spatial.0", dtype=dtype),
            Conv2d(w, w, 1, 1, seed=seed, name="spatial.1", dtype=dtype),
            Conv2d(w, cfg.num_classes, 1, 1, seed=seed, name="spatial.2", dtype=dtype),
        ]

    def __call__(self, full: Tensor) -> Tensor:
        x = _batched(full)
        _check_input(x, 1, "spatial_branch")
        for conv in self.convs[:-1]:
            x = T.relu(conv(x))
        return self.convs[-1](x)
