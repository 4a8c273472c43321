"""Overlapping patch decomposition, per-patch inference under a byte budget, merge,
and activation-memory accounting."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memtrack import BudgetExceeded, MemoryTracker
from .model import SegModel
from .query import query_width
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch: int
    stride: int
    placements: tuple   # ((row0, col0), ...) row-major

    def __len__(self):
        return len(self.placements)


def _axis_starts(extent: int, patch: int, stride: int) -> list[int]:
    n = math.ceil((extent - patch) / stride) + 1
    starts = [min(i * stride, extent - patch) for i in range(n)]
    return sorted(set(starts))


def partition(image_h: int, image_w: int, patch: int, overlap: int) -> PatchGrid:
    if patch > min(image_h, image_w):
        raise ValueError(f"patch {patch} exceeds image extent {image_h}x{image_w}; "
                         "use global mode or pad the image")
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must satisfy 0 <= overlap < patch, got {overlap} for patch {patch}")
    stride = patch - overlap
    rows = _axis_starts(image_h, patch, stride)
    cols = _axis_starts(image_w, patch, stride)
    return PatchGrid(image_h, image_w, patch, stride, tuple((r, c) for r in rows for c in cols))


class MergeBuffer:
    """Running sum of per-pixel class probabilities and coverage counts."""

    def __init__(self, num_classes: int, h: int, w: int, dtype=np.float64):
        # tracked tensors, so the accumulators show up in the memory report
        self.prob_sum = Tensor(np.zeros((num_classes, h, w), dtype=dtype))
        self.count = Tensor(np.zeros((h, w), dtype=dtype))

    def add(self, probs: np.ndarray, r0: int, c0: int):
        ph, pw = probs.shape[1:]
        self.prob_sum.data[:, r0:r0 + ph, c0:c0 + pw] += probs
        self.count.data[r0:r0 + ph, c0:c0 + pw] += 1

    def labels(self) -> np.ndarray:
        if np.any(self.count.data == 0):
            raise ValueError("merge: some pixels are not covered by any patch")
        mean = self.prob_sum.data / self.count.data
        return np.argmax(mean, axis=0).astype(np.uint8)


def merge(patch_logits: list, grid: PatchGrid) -> np.ndarray:
    """Average softmax probabilities over covering patches, then argmax."""
    if len(patch_logits) != len(grid.placements):
        raise ValueError(f"merge: got {len(patch_logits)} patch outputs for {len(grid.placements)} placements")
    first = np.asarray(patch_logits[0].data if isinstance(patch_logits[0], Tensor) else patch_logits[0])
    buf = MergeBuffer(first.shape[0], grid.image_h, grid.image_w)
    for logits, (r0, c0) in zip(patch_logits, grid.placements):
        lg = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
        with T.no_grad():
            probs = T.softmax(lg, axis=0)
        buf.add(probs.data, r0, c0)
    return buf.labels()


@dataclass
class MemoryReport:
    estimated_peak_bytes: int
    measured_peak_bytes: int
    budget_bytes: int
    per_stage: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def within_budget(self) -> bool:
        return self.measured_peak_bytes <= self.budget_bytes

    def to_dict(self) -> dict:
        return {
            "estimated_peak_bytes": int(self.estimated_peak_bytes),
            "measured_peak_bytes": int(self.measured_peak_bytes),
            "budget_bytes": int(self.budget_bytes),
            "within_budget": self.within_budget,
            "per_stage": {k: int(v) for k, v in self.per_stage.items()},
            "wall_time": self.wall_time,
        }


def predict_probs(model: SegModel, crop: np.ndarray, out_h: int, out_w: int, chunk_rows: int,
                  tracker: MemoryTracker | None = None) -> np.ndarray:
    """Class probabilities (C, out_h, out_w) for one patch; uses nothing but the crop
    and the model, so no state leaks between patches."""
    stage = tracker.in_stage if tracker is not None else _null_stage
    with T.no_grad():
        with stage("branches"):
            x = Tensor(np.ascontiguousarray(crop, dtype=model.dtype)[None])
            out = model.encode(x)
            del x
            # only the decoding inputs survive into the query stage
            out.f_b = out.m_b = out.m_l = None
        with stage("query"):
            logits = model.decode(out, out_h, out_w, chunk_rows)
            del out
            probs = T.softmax(logits, axis=1)
            del logits
        T.check_finite(probs, "patch probabilities")
        return probs.data[0]


class _null_stage:
    def __init__(self, name):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def infer_local(image: np.ndarray, model: SegModel, budget_bytes: int, patch: int, overlap: int | None = None,
                chunk_rows: int = 32, workers: int = 1) -> tuple[np.ndarray, MemoryReport]:
    """Segment a (3, H, W) image patch by patch; raises BudgetExceeded if the
    measured high-water mark passes ``budget_bytes``."""
    t0 = time.perf_counter()
    overlap = patch // 16 if overlap is None else overlap
    _, h, w = image.shape
    mult = model.cfg.patch_multiple
    if patch % mult:
        raise ValueError(f"patch {patch} must be a multiple of {mult}")
    grid = partition(h, w, patch, overlap)
    estimate = estimate_peak_memory(model, patch, chunk_rows, (h, w), workers)
    main = MemoryTracker(budget_bytes)
    main.hold(model.param_bytes())
    with main:
        with main.in_stage("merge"):
            buf = MergeBuffer(model.cfg.num_classes, h, w, model.dtype)
        if workers == 1:
            for r0, c0 in grid.placements:
                crop = image[:, r0:r0 + patch, c0:c0 + patch]
                buf.add(predict_probs(model, crop, patch, patch, chunk_rows, main), r0, c0)
            per_stage = dict(main.stage_peaks)
            measured = main.peak_bytes
        else:
            measured, per_stage = _run_workers(image, model, grid, chunk_rows, workers, buf, main, budget_bytes)
        labels = buf.labels()
    del buf
    report = MemoryReport(estimate, measured, budget_bytes, per_stage, time.perf_counter() - t0)
    if measured > budget_bytes:
        raise BudgetExceeded(max(per_stage, key=per_stage.get), measured, budget_bytes)
    return labels, report


def _run_workers(image, model, grid, chunk_rows, workers, buf, main, budget_bytes):
    # patches run in waves of `workers`; each wave is merged in placement order so the
    # floating-point accumulation does not depend on thread scheduling
    patch = grid.patch
    trackers = [MemoryTracker() for _ in range(workers)]

    def job(slot, r0, c0):
        tr = trackers[slot]
        with tr:
            return predict_probs(model, image[:, r0:r0 + patch, c0:c0 + patch], patch, patch, chunk_rows, tr)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(grid.placements), workers):
            wave = grid.placements[start:start + workers]
            futures = [pool.submit(job, i, r0, c0) for i, (r0, c0) in enumerate(wave)]
            results = [f.result() for f in futures]
            for probs, (r0, c0) in zip(results, wave):
                buf.add(probs, r0, c0)
            del results
            # conservative: every worker may sit at its own peak simultaneously
            total = main.peak_bytes + sum(t.peak_bytes for t in trackers)
            if total > budget_bytes:
                raise BudgetExceeded("query", total, budget_bytes)
    per_stage = dict(main.stage_peaks)
    for t in trackers:
        for k, v in t.stage_peaks.items():
            per_stage[k] = per_stage.get(k, 0) + v
    return main.peak_bytes + sum(t.peak_bytes for t in trackers), per_stage


def global_size(h: int, w: int, target_side: int, multiple: int) -> tuple[int, int]:
    """Largest size <= target_side on the long side, kept a multiple of ``multiple``."""
    scale = min(1.0, target_side / max(h, w))
    nh = max(multiple, int(h * scale) // multiple * multiple)
    nw = max(multiple, int(w * scale) // multiple * multiple)
    return nh, nw


def infer_global(image: np.ndarray, model: SegModel, target_side: int, chunk_rows: int = 32,
                 budget_bytes: int | None = None) -> tuple[np.ndarray, MemoryReport]:
    """Downscale the whole image, encode once, decode at the original resolution."""
    t0 = time.perf_counter()
    _, h, w = image.shape
    nh, nw = global_size(h, w, target_side, model.cfg.patch_multiple)
    tracker = MemoryTracker(budget_bytes)
    tracker.hold(model.param_bytes())
    with tracker:
        with tracker.in_stage("resize"):
            if (nh, nw) == (h, w):
                small = np.ascontiguousarray(image, dtype=model.dtype)
            else:
                with T.no_grad():
                    small = T.resize_bilinear(Tensor(np.asarray(image, dtype=model.dtype)), nh, nw).data
        probs = predict_probs(model, small, h, w, chunk_rows, tracker)
        del small
        labels = np.argmax(probs, axis=0).astype(np.uint8)
        del probs
    est = estimate_peak_memory(model, max(nh, nw), chunk_rows, None, 1, out_hw=(h, w))
    report = MemoryReport(est, tracker.peak_bytes, budget_bytes or tracker.peak_bytes,
                          dict(tracker.stage_peaks), time.perf_counter() - t0)
    return labels, report


# ---------------------------------------------------------------- estimate

def _conv_bytes(cin, cout, k, h_out, w_out, s):
    """Live bytes while a conv runs: im2col buffer plus output."""
    cols = 0 if k == 1 else h_out * w_out * cin * k * k * s
    return cols + cout * h_out * w_out * s


def estimate_peak_memory(model: SegModel, patch: int, chunk_rows: int | None,
                         image_hw: tuple | None = None, workers: int = 1, out_hw: tuple | None = None) -> int:
    """Analytic high-water mark of live tensor bytes for one patch pipeline.

    Sum of: parameters; merge buffers ((C+1)*H*W for local mode); and the larger of
      branches stage: input crop + downscaled crop + the widest layer transient,
        i.e. max over layers of (layer input + im2col columns + layer output),
        with completed branch outputs held as they accumulate;
      query stage: decoding inputs (latent, guidance masks, and their flattened
        copies) + one chunk of Q = chunk_rows*out_w queries holding the concatenated
        input (width F), its rescaled copy, the gathered terms it was built from, then three hidden
        activations at a time, plus the assembled (C, out_h, out_w) logits,
        their transposed copy and the softmax output.
    Parameters and merge buffers are counted once; worker pipelines add up.
    """
    c = model.cfg
    ab = model.ablation
    s = np.dtype(model.dtype).itemsize
    p = patch
    ncls, d = c.num_classes, c.feat_dim
    pd = p // c.downscale
    hz = pd // 4
    oh, ow = out_hw if out_hw is not None else (p, p)
    fixed = model.param_bytes()
    if image_hw is not None:
        fixed += (ncls + 1) * image_hw[0] * image_hw[1] * s

    # ---- branches
    base = 3 * p * p * s + 3 * pd * pd * s
    sw = c.semantic_width
    sem_layers = [(3, sw, 3, pd // 2), (sw, sw, 3, pd // 2), (sw, sw, 3, pd // 4), (sw, sw, 3, pd // 4)]
    sem_peak = max(cin * hh * hh * s + _conv_bytes(cin, cout, k, hh, hh, s) + cout * hh * hh * s
                   for cin, cout, k, hh in sem_layers)
    held = d * hz * hz * s   # latent
    branch_peak = base + sem_peak
    if ab.upsampler == "bilinear":
        held += ncls * hz * hz * s
    else:
        hb = p // 2
        if ab.use_m_b:
            mem_peak = base + held + _conv_bytes(3, d, 5, hb, hb, s) + d * hb * hb * s
            branch_peak = max(branch_peak, mem_peak)
            # f_b, m_b logits, probs; reading the bank adds a flattened copy and relation maps
            read = (d + 4 * ncls) * hb * hb * s if ab.use_memory else 0
            held_b = (d + 2 * ncls) * hb * hb * s
            branch_peak = max(branch_peak, base + held + held_b + read)
            held += ncls * hb * hb * s
        if ab.use_m_l:
            sp = c.spatial_width
            spa_peak = base + held + _conv_bytes(3, sp, 3, p, p, s) + sp * p * p * s
            branch_peak = max(branch_peak, spa_peak, base + held + 3 * ncls * p * p * s)
            held += ncls * p * p * s

    # ---- query
    if ab.upsampler == "bilinear":
        query_peak = held + 3 * ncls * oh * ow * s
    else:
        rows = oh if chunk_rows is None else min(chunk_rows, oh)
        q = rows * ow
        feat = query_width(d, ncls, c.n_freqs)
        h1, h2 = c.hidden[0], c.hidden[-1]
        # everything assembled for one chunk: gathered terms, the concatenated input and
        # its rescaled copy, then three hidden-width activations (matmul output,
        # bias-added copy, relu) while the input lives
        chunk = q * s * (3 * feat + 3 * max(h1, h2))
        flats = held
        logits = 3 * ncls * oh * ow * s
        query_peak = 2 * held + chunk + ncls * oh * ow * s
        query_peak = max(query_peak, held + flats + logits)
    return int(fixed + workers * max(branch_peak, query_peak))
