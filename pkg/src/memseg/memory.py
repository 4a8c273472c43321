"""Cross-image class-prototype memory: moving-average updates from semantic
features and a linear-cost read that refines the memory-branch mask."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

IGNORE = 255


@dataclass
class MemoryBank:
    M: np.ndarray                 # (D, C); column c is the prototype of class c
    initialized: np.ndarray       # (C,) bool
    momentum: float = 0.9

    @classmethod
    def empty(cls, feat_dim: int, num_classes: int, momentum: float = 0.9, dtype=np.float64) -> "MemoryBank":
        if num_classes <= 0:
            raise ValueError("number of classes must be positive")
        return cls(np.zeros((feat_dim, num_classes), dtype=dtype), np.zeros(num_classes, dtype=bool), momentum)

    @property
    def feat_dim(self) -> int:
        return self.M.shape[0]

    @property
    def num_classes(self) -> int:
        return self.M.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.M.copy(), self.initialized.copy(), self.momentum)


@dataclass
class UpdateBatch:
    features: np.ndarray          # (D, N)
    labels: np.ndarray            # (N,)
    source: str = "semantic"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[1] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match {self.labels.shape[0]} labels")

    def classes(self, num_classes: int) -> np.ndarray:
        lab = self.labels[self.labels != IGNORE]
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes}) or equal {IGNORE}")
        return np.unique(lab)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label sampling at cell centers of a grid ``factor`` times coarser."""
    if factor == 1:
        return labels
    off = factor // 2
    return labels[..., off::factor, off::factor]


def update_batch_from(features: Tensor, labels: np.ndarray) -> UpdateBatch:
    """Flatten (N, D, h, w) features and full-resolution (N, H, W) labels into a batch."""
    n, d, h, w = features.shape
    factor = labels.shape[-2] // h
    lab = downsample_labels(labels, factor)
    feats = features.data.transpose(1, 0, 2, 3).reshape(d, n * h * w)
    return UpdateBatch(feats.copy(), lab.reshape(-1), source=features.tag or "")


def init_memory(batch: UpdateBatch, num_classes: int, momentum: float = 0.9) -> MemoryBank:
    bank = MemoryBank.empty(batch.features.shape[0], num_classes, momentum, batch.features.dtype)
    for c in batch.classes(num_classes):
        bank.M[:, c] = batch.features[:, batch.labels == c].mean(axis=1)
        bank.initialized[c] = True
    return bank


def _cosine(feats: np.ndarray, proto: np.ndarray) -> np.ndarray:
    nf = np.linalg.norm(feats, axis=0)
    npr = np.linalg.norm(proto)
    denom = nf * npr
    sims = np.zeros(feats.shape[1], dtype=np.float64)
    ok = denom > 0
    sims[ok] = (proto @ feats[:, ok]) / denom[ok]
    return sims


def transform_features(batch: UpdateBatch, bank: MemoryBank) -> dict[int, np.ndarray]:
    """Per-class weighted mean that favours features unlike the stored prototype.

    Weights are (1 - cos) normalized over the class; if they all vanish the plain
    mean is used instead. A zero-norm feature or prototype counts as cos = 0.
    """
    out = {}
    for c in batch.classes(bank.num_classes):
        feats = batch.features[:, batch.labels == c]
        if not bank.initialized[c]:
            out[int(c)] = feats.mean(axis=1)
            continue
        weights = 1.0 - _cosine(feats, bank.M[:, c])
        total = weights.sum()
        if total <= 0:
            out[int(c)] = feats.mean(axis=1)
        else:
            out[int(c)] = feats @ (weights / total)
    return out


def mean_update_ablation(batch: UpdateBatch, bank: MemoryBank) -> dict[int, np.ndarray]:
    return {int(c): batch.features[:, batch.labels == c].mean(axis=1) for c in batch.classes(bank.num_classes)}


def update_memory(bank: MemoryBank, transformed: dict[int, np.ndarray]) -> MemoryBank:
    new = bank.copy()
    m = bank.momentum
    for c, v in transformed.items():
        if new.initialized[c]:
            new.M[:, c] = m * new.M[:, c] + (1.0 - m) * v
        else:
            new.M[:, c] = v
            new.initialized[c] = True
    return new


def _relation(bank: MemoryBank, f_b: Tensor) -> tuple[Tensor, tuple]:
    """M^T F_b / sqrt(D) per pixel, as (N*h*w, C)."""
    n, d, h, w = f_b.shape
    if d != bank.feat_dim:
        raise T.ShapeError("read_refine (feature dim of bank vs f_b)", bank.M.shape, f_b.shape)
    if not bank.initialized.any():
        raise ValueError("read_refine: memory bank has no initialized class")
    mem = Tensor((bank.M / np.sqrt(d)).astype(f_b.dtype))   # constant: no gradient reaches the bank
    flat = T.reshape(T.transpose(f_b, (0, 2, 3, 1)), (n * h * w, d))
    return T.matmul(flat, mem), (n, h, w)


def _to_grid(x: Tensor, shape: tuple) -> Tensor:
    n, h, w = shape
    return T.transpose(T.reshape(x, (n, h, w, x.shape[1])), (0, 3, 1, 2))


def read_refine(bank: MemoryBank, f_b: Tensor, m_b: Tensor) -> Tensor:
    """(1 + softmax_c(M^T F_b / sqrt D)) * m_b, elementwise; uninitialized classes get zero weight."""
    if m_b.shape[1] != bank.num_classes or m_b.shape[2:] != f_b.shape[2:]:
        raise T.ShapeError("read_refine (mask vs bank/features)", m_b.shape, f_b.shape)
    rel, shape = _relation(bank, f_b)
    weights = T.softmax(rel, axis=1, mask=bank.initialized[None, :])
    return T.mul(T.add(_to_grid(weights, shape), 1.0), m_b)


class ConcatReadHead(Module):
    """1x1 conv over [relation, m_b]; starts as the identity on the m_b channels."""

    def __init__(self, num_classes: int, dtype=np.float64):
        c = num_classes
        w = np.zeros((c, 2 * c, 1, 1), dtype=dtype)
        w[np.arange(c), c + np.arange(c), 0, 0] = 1.0
        self.conv = Conv2d(2 * c, c, 1, dtype=dtype)
        self.conv.weight = Tensor(w, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


def read_refine_concat_ablation(bank: MemoryBank, f_b: Tensor, m_b: Tensor, head: ConcatReadHead) -> Tensor:
    if m_b.shape[1] != bank.num_classes or m_b.shape[2:] != f_b.shape[2:]:
        raise T.ShapeError("read_refine_concat (mask vs bank/features)", m_b.shape, f_b.shape)
    rel, shape = _relation(bank, f_b)
    rel = T.mul(rel, Tensor(bank.initialized.astype(rel.dtype)[None, :]))
    return head(T.concat([_to_grid(rel, shape), m_b], axis=1))
