"""Coordinate-based decoding of class logits from the nearest latent embedding,
guided by the two high-resolution masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .tensor import Tensor


@dataclass(frozen=True)
class CoordGrid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"empty coordinate grid {self.height}x{self.width}")

    def rows(self, dtype=np.float64) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.height, dtype=dtype) + 1.0) / self.height

    def cols(self, dtype=np.float64) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.width, dtype=dtype) + 1.0) / self.width

    def centers(self, dtype=np.float64) -> np.ndarray:
        """(height*width, 2) cell centers in row-major order."""
        r, c = np.meshgrid(self.rows(dtype), self.cols(dtype), indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=1)


def _nearest_axis(x: np.ndarray, n: int) -> np.ndarray:
    # first guess from the closed form, then settle rounding against the neighbours
    guess = np.clip(np.ceil((x + 1.0) * n / 2.0).astype(np.int64) - 1, 0, n - 1)
    best = guess.copy()
    best_d = np.abs(x - (-1.0 + (2.0 * guess + 1.0) / n))
    for off in (-1, 1):
        cand = np.clip(guess + off, 0, n - 1)
        d = np.abs(x - (-1.0 + (2.0 * cand + 1.0) / n))
        better = (d < best_d) | ((d == best_d) & (cand < best))
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best


def nearest_lookup(xq: np.ndarray, grid: CoordGrid) -> tuple[np.ndarray, np.ndarray]:
    """Nearest cell center for each query.

    ``xq`` is (..., 2). Returns the (..., 2) integer cell index and the (..., 2)
    center coordinate. Ties go to the smaller row, then the smaller column.
    """
    xq = np.asarray(xq, dtype=np.float64)
    i = _nearest_axis(xq[..., 0], grid.height)
    j = _nearest_axis(xq[..., 1], grid.width)
    idx = np.stack([i, j], axis=-1)
    center = np.stack([-1.0 + (2.0 * i + 1.0) / grid.height,
                       -1.0 + (2.0 * j + 1.0) / grid.width], axis=-1)
    return idx, center


class PositionalEncoder(Module):
    def __init__(self, n: int, dtype=np.float64):
        self.freqs = Tensor(2.0 * np.exp(np.arange(1, n + 1, dtype=np.float64)).astype(dtype), requires_grad=True)

    @property
    def n(self) -> int:
        return self.freqs.shape[0]


def periodic_encode(delta: np.ndarray, enc: PositionalEncoder) -> Tensor:
    """(Q, 2) offsets -> (Q, 4n): per axis [w1 sin d, w1 cos d, ..., wn sin d, wn cos d]."""
    delta = np.asarray(delta)
    q = delta.shape[0]
    n = enc.n
    dt = enc.freqs.dtype
    w = T.reshape(enc.freqs, (1, 1, n, 1))
    s = Tensor(np.sin(delta).astype(dt).reshape(q, 2, 1, 1))
    c = Tensor(np.cos(delta).astype(dt).reshape(q, 2, 1, 1))
    parts = T.concat([T.mul(s, w), T.mul(c, w)], axis=3)   # (q, 2, n, 2)
    return T.reshape(parts, (q, 4 * n))


def query_width(feat_dim: int, num_classes: int, n_freqs: int) -> int:
    return feat_dim + 3 * (2 + 4 * n_freqs) + 2 * num_classes


def encoding_scale(feat_dim: int, num_classes: int, n_freqs: int, dtype=np.float64) -> np.ndarray:
    """Fixed per-column input scale for the query vector: 1 everywhere except the
    encoding columns, which are divided by their frequency's initial value.

    The encoding's cosine terms are nearly constant inputs of size up to 2e^n;
    left unscaled they swamp the latent and the head only learns the class prior.
    """
    init = 2.0 * np.exp(np.arange(1, n_freqs + 1, dtype=np.float64))
    # (axis, freq, sin/cos) flattened, as laid out by periodic_encode
    enc = 1.0 / np.repeat(init, 2)
    enc = np.tile(enc, 2)
    blocks = []
    for width in (feat_dim, num_classes, num_classes):
        blocks += [np.ones(width + 2), enc]
    return np.concatenate(blocks).astype(dtype)


class QueryHead(Module):
    def __init__(self, feat_dim: int, num_classes: int, n_freqs: int, hidden=(128, 128), *,
                 seed: int = 0, dtype=np.float64):
        self.mlp = MLP(query_width(feat_dim, num_classes, n_freqs), list(hidden), num_classes,
                       seed=seed, name="query", dtype=dtype)
        # a constant, not a parameter
        self.input_scale = encoding_scale(feat_dim, num_classes, n_freqs, dtype)

    @property
    def in_features(self) -> int:
        return self.mlp.in_features

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.ShapeError("query head (input width)", x.shape, (self.in_features,))
        return self.mlp(T.mul(x, self.input_scale))


def flatten_grid(x: Tensor) -> Tensor:
    """(N, ch, h, w) -> (N*h*w, ch) so cells can be gathered by flat index."""
    n, ch, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n * h * w, ch))


def _source_terms(xq: np.ndarray, batch_index: np.ndarray, src: Tensor | None, flat: Tensor | None,
                  enc: PositionalEncoder, width: int, dtype) -> list[Tensor]:
    """[value*, x_q - x*, phi(x_q - x*)] for one source grid; zeros when the source is off."""
    q = xq.shape[0]
    if src is None:
        return [Tensor(np.zeros((q, width + 2 + 4 * enc.n), dtype=dtype))]
    _, _, h, w = src.shape
    idx, center = nearest_lookup(xq, CoordGrid(h, w))
    rows = batch_index * (h * w) + idx[:, 0] * w + idx[:, 1]
    delta = (xq - center)
    return [T.take_rows(flat, rows), Tensor(delta.astype(dtype)), periodic_encode(delta, enc)]


def query_points(latent: Tensor, guide_b: Tensor | None, guide_l: Tensor | None,
                 xq: np.ndarray, batch_index: np.ndarray, enc: PositionalEncoder, head: QueryHead,
                 flats: tuple | None = None) -> Tensor:
    """Logits (Q, C) for queries ``xq`` (Q, 2), each belonging to sample ``batch_index``."""
    dtype = latent.dtype
    num_classes = head.mlp.layers[-1].weight.shape[1]
    if flats is None:
        flats = tuple(None if g is None else flatten_grid(g) for g in (latent, guide_b, guide_l))
    if latent.shape[1] + 3 * (2 + 4 * enc.n) + 2 * num_classes != head.in_features:
        raise T.ShapeError("query_pixel (latent channels vs head input)", latent.shape, (head.in_features,))
    parts = []
    for src, flat, width in ((latent, flats[0], latent.shape[1]),
                             (guide_b, flats[1], num_classes),
                             (guide_l, flats[2], num_classes)):
        parts += _source_terms(xq, batch_index, src, flat, enc, width, dtype)
    return head(T.concat(parts, axis=1))


def query_pixel(xq, latent: Tensor, guide_b: Tensor | None, guide_l: Tensor | None,
                enc: PositionalEncoder, head: QueryHead) -> Tensor:
    """Logits (C,) at one normalized coordinate for an unbatched set of grids."""
    def b(x):
        if x is None:
            return None
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x
    out = query_points(b(latent), b(guide_b), b(guide_l), np.asarray(xq, dtype=np.float64).reshape(1, 2),
                       np.zeros(1, dtype=np.int64), enc, head)
    return T.reshape(out, (out.shape[1],))


def query_mask(latent: Tensor, guide_b: Tensor | None, guide_l: Tensor | None, out_h: int, out_w: int,
               enc: PositionalEncoder, head: QueryHead, chunk_rows: int | None = None) -> Tensor:
    """Decode (N, C, out_h, out_w) logits, materializing ``chunk_rows`` output rows at a time."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    chunk_rows = out_h if chunk_rows is None else chunk_rows
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    n = latent.shape[0]
    grid = CoordGrid(out_h, out_w)
    ys, xs = grid.rows(), grid.cols()
    flats = tuple(None if g is None else flatten_grid(g) for g in (latent, guide_b, guide_l))
    chunks = []
    for r0 in range(0, out_h, chunk_rows):
        r1 = min(r0 + chunk_rows, out_h)
        rr, cc = np.meshgrid(ys[r0:r1], xs, indexing="ij")
        pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
        q = pts.shape[0]
        xq = np.tile(pts, (n, 1))
        bidx = np.repeat(np.arange(n), q)
        logits = query_points(latent, guide_b, guide_l, xq, bidx, enc, head, flats)
        chunks.append(T.reshape(logits, (n, r1 - r0, out_w, logits.shape[1])))
        del logits
    out = chunks[0] if len(chunks) == 1 else T.concat(chunks, axis=1)
    del chunks
    return T.transpose(out, (0, 3, 1, 2))


def bilinear_baseline(low_logits: Tensor, out_h: int, out_w: int) -> Tensor:
    return T.resize_bilinear(low_logits, out_h, out_w)
