"""Training loop, evaluation and the ablation-matrix runner."""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import AblationConfig, RunConfig
from .data import SplitMix64, load_manifest, read_scene
from .memory import (downsample_labels, init_memory, mean_update_ablation, transform_features,
                     update_batch_from, update_memory)
from .metrics import IoUReport, confusion_matrix, report_from_confusion
from .model import SegModel
from .optim import OptimizerState, clip_grad_norm, sgd_step
from .tensor import NonFiniteError, Tensor
from .tiling import infer_global, infer_local

log = logging.getLogger(__name__)

# RunRecord fields that vary between otherwise identical runs
TIMING_FIELDS = ("wall_time", "train_time", "eval_time")


class TrainingDiverged(NonFiniteError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        super().__init__(f"loss became {loss} at iteration {iteration}; lower train.base_lr")


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    row: str
    val_history: list = field(default_factory=list)    # [{"iter", "miou"}]
    loss_trace: list = field(default_factory=list)     # [{"iter", "loss", "main", "aux_b", "aux_l"}]
    test: dict | None = None                           # IoUReport.to_dict()
    memory: dict | None = None                         # MemoryReport.to_dict() of one test image
    checkpoint_sha256: str = ""
    wall_time: float = 0.0
    train_time: float = 0.0
    eval_time: float = 0.0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def stable_dict(self) -> dict:
        doc = self.to_dict()
        for k in TIMING_FIELDS:
            doc.pop(k, None)
        if doc["memory"] is not None:
            doc["memory"].pop("wall_time", None)
        return doc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.stable_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def test_miou(self) -> float:
        return float(self.test["miou"]) if self.test else float("nan")


class SceneSet:
    """Scenes of one split held as uint8 in memory."""

    def __init__(self, root, names: list[str]):
        self.names = list(names)
        imgs, labs = [], []
        for n in self.names:
            s = read_scene(root, n)
            imgs.append(np.round(s.image * 255).astype(np.uint8))
            labs.append(s.labels)
        self.images = imgs
        self.labels = labs

    def __len__(self):
        return len(self.names)

    def image(self, i: int, dtype) -> np.ndarray:
        return self.images[i].astype(dtype) / np.dtype(dtype).type(255.0)


def sample_batch(rng: SplitMix64, scenes: SceneSet, batch: int, crop: int, dtype):
    """Random crops with random horizontal and vertical flips."""
    xs, ys = [], []
    for _ in range(batch):
        i = rng.randint(0, len(scenes))
        img, lab = scenes.images[i], scenes.labels[i]
        h, w = lab.shape
        if crop > min(h, w):
            raise ValueError(f"crop {crop} larger than scene {h}x{w}")
        r0 = rng.randint(0, h - crop + 1)
        c0 = rng.randint(0, w - crop + 1)
        x = img[:, r0:r0 + crop, c0:c0 + crop]
        y = lab[r0:r0 + crop, c0:c0 + crop]
        if rng.uniform1() < 0.5:
            x, y = x[:, :, ::-1], y[:, ::-1]
        if rng.uniform1() < 0.5:
            x, y = x[:, ::-1], y[::-1]
        xs.append(x)
        ys.append(y)
    x = np.stack(xs).astype(dtype) / np.dtype(dtype).type(255.0)
    return np.ascontiguousarray(x), np.ascontiguousarray(np.stack(ys))


def sample_queries(rng: SplitMix64, labels: np.ndarray, count: int):
    """``count`` random pixel centers per crop: coords (N*count, 2), batch index, labels."""
    n, h, w = labels.shape
    flat = (rng.uniform(n * count) * (h * w)).astype(np.int64)
    r, c = flat // w, flat % w
    bidx = np.repeat(np.arange(n), count)
    xq = np.stack([-1.0 + (2.0 * r + 1.0) / h, -1.0 + (2.0 * c + 1.0) / w], axis=1)
    return xq, bidx, labels[bidx, r, c]


def compute_loss(model: SegModel, x: np.ndarray, y: np.ndarray, weights, queries=None):
    """Weighted sum of the main and auxiliary cross-entropies; also returns the
    branch outputs so the caller can update the memory bank."""
    out = model.encode(Tensor(x))
    n, _, h, w = x.shape
    if model.ablation.upsampler == "bilinear":
        main = T.cross_entropy(model.decode(out, h, w), y)
    elif queries is None:
        main = T.cross_entropy(model.decode(out, h, w, chunk_rows=h), y)
    else:
        xq, bidx, yq = queries
        main = T.cross_entropy(model.decode_points(out, xq, bidx), yq)
    terms = {"main": main}
    total = T.mul(main, weights[0])
    if out.m_b is not None:
        terms["aux_b"] = T.cross_entropy(out.m_b, downsample_labels(y, 2))
        total = T.add(total, T.mul(terms["aux_b"], weights[1]))
    if out.m_l is not None:
        terms["aux_l"] = T.cross_entropy(out.m_l, y)
        total = T.add(total, T.mul(terms["aux_l"], weights[2]))
    return total, terms, out


def _init_bank(model: SegModel, scenes: SceneSet, rng: SplitMix64):
    # one randomly drawn training image, seen whole at the semantic branch's input scale
    i = rng.randint(0, len(scenes))
    img = scenes.image(i, model.dtype)
    with T.no_grad():
        feats = model.encode(Tensor(img[None]), use_bank=False)
        src = feats.latent if model.ablation.update_source == "semantic" else feats.f_b
        batch = update_batch_from(src, scenes.labels[i][None])
    model.bank = init_memory(batch, model.cfg.num_classes, model.cfg.momentum)


def _update_bank(model: SegModel, out, y: np.ndarray):
    src = out.latent if model.ablation.update_source == "semantic" else out.f_b
    # the bank is plain arrays; only detached feature values reach it
    batch = update_batch_from(src, y)
    assert isinstance(model.bank.M, np.ndarray) and not isinstance(batch.features, Tensor)
    if model.ablation.update_mode == "cosine":
        transformed = transform_features(batch, model.bank)
    else:
        transformed = mean_update_ablation(batch, model.bank)
    model.bank = update_memory(model.bank, transformed)


def predict(model: SegModel, image: np.ndarray, cfg: RunConfig):
    tc = cfg.tiling
    if tc.mode == "global":
        return infer_global(image, model, tc.target_side, tc.chunk_rows)
    return infer_local(image, model, tc.budget_bytes, tc.patch, tc.effective_overlap, tc.chunk_rows, tc.workers)


def evaluate(model: SegModel, scenes: SceneSet, cfg: RunConfig, limit: int | None = None):
    """Accumulated confusion over scenes -> (IoUReport, MemoryReport of the first scene)."""
    c = model.cfg.num_classes
    conf = np.zeros((c, c), dtype=np.int64)
    first = None
    for i in range(len(scenes) if limit is None else min(limit, len(scenes))):
        labels, rep = predict(model, scenes.image(i, model.dtype), cfg)
        conf += confusion_matrix(labels, scenes.labels[i], c)
        first = first or rep
    return report_from_confusion(conf), first


def train(cfg: RunConfig, manifest_path, out_dir=None, scenes: dict | None = None) -> tuple[SegModel, RunRecord]:
    """Train one configuration; writes ``model.ckpt`` and ``run.json`` to ``out_dir`` if given.

    ``scenes`` may carry preloaded SceneSets keyed by split to share them between runs.
    """
    t_start = time.perf_counter()
    cfg.validate()
    tc = cfg.train
    dtype = np.dtype(tc.dtype).type
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    scenes = dict(scenes or {})
    for split in ("train", "val", "test"):
        if split not in scenes:
            scenes[split] = SceneSet(root, manifest[split])
    if len(scenes["train"]) == 0:
        raise ValueError("manifest has an empty train split")
    if tc.crop % cfg.model.patch_multiple:
        raise ValueError(f"crop {tc.crop} must be a multiple of {cfg.model.patch_multiple}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = SegModel(cfg.model, cfg.ablation, seed=tc.seed, dtype=dtype)
    record = RunRecord(cfg.to_dict(), cfg.digest(), tc.seed, cfg.ablation.row_name)
    rng = SplitMix64(tc.seed)
    params = dict(model.named_parameters())
    opt = OptimizerState(tc.base_lr, tc.power, max(tc.iters, 1), tc.momentum, tc.weight_decay)
    if cfg.ablation.use_memory:
        _init_bank(model, scenes["train"], rng)

    eval_time = 0.0
    t_train = time.perf_counter()
    for it in range(tc.iters):
        x, y = sample_batch(rng, scenes["train"], tc.batch, tc.crop, dtype)
        queries = sample_queries(rng, y, tc.query_samples) if tc.query_samples else None
        model.zero_grad()
        loss, terms, out = compute_loss(model, x, y, tc.loss_weights, queries)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, value)
        T.backward(loss)
        term_values = {k: float(v.data) for k, v in terms.items()}
        del loss, terms
        grads, _ = clip_grad_norm({k: p.grad for k, p in params.items() if p.grad is not None}, tc.grad_clip)
        sgd_step(params, grads, opt, it)
        if cfg.ablation.use_memory:
            with T.no_grad():
                _update_bank(model, out, y)
        del out
        if it % 50 == 0 or it == tc.iters - 1:
            entry = {"iter": it, "loss": value}
            entry.update(term_values)
            record.loss_trace.append(entry)
            log.info("iter %d loss %.4f", it, value)
        if tc.ckpt_every and out_dir is not None and (it + 1) % tc.ckpt_every == 0:
            checkpoint.save(out_dir / f"ckpt_{it + 1:06d}.ckpt", model, cfg)
        if tc.eval_every and (it + 1) % tc.eval_every == 0 and tc.eval_scenes and len(scenes["val"]):
            t0 = time.perf_counter()
            rep, _ = evaluate(model, scenes["val"], cfg, tc.eval_scenes)
            eval_time += time.perf_counter() - t0
            record.val_history.append({"iter": it + 1, "miou": rep.miou})
            log.info("iter %d val mIoU %.4f", it + 1, rep.miou)
    record.train_time = time.perf_counter() - t_train - eval_time

    model.zero_grad()
    blob = checkpoint.dumps(model, cfg)
    record.checkpoint_sha256 = hashlib.sha256(blob).hexdigest()
    if out_dir is not None:
        (out_dir / "model.ckpt").write_bytes(blob)
    t0 = time.perf_counter()
    test_split = scenes["test"] if len(scenes["test"]) else scenes["val"]
    if len(test_split):
        rep, mem = evaluate(model, test_split, cfg)
        record.test = rep.to_dict()
        record.memory = mem.to_dict() if mem is not None else None
    record.eval_time = eval_time + time.perf_counter() - t0
    record.wall_time = time.perf_counter() - t_start
    if out_dir is not None:
        (out_dir / "run.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return model, record


# ---------------------------------------------------------------- ablations

# model-structure rows: (name, ablation overrides)
STRUCTURE_ROWS = [
    ("Bilinear", dict(upsampler="bilinear", use_m_b=False, use_m_l=False, use_memory=False)),
    ("Ours/-/-", dict(use_m_b=False, use_m_l=False, use_memory=False)),
    ("Ours/M_b/-", dict(use_m_b=True, use_m_l=False, use_memory=False)),
    ("Ours/M_b/M", dict(use_m_b=True, use_m_l=False, use_memory=True)),
    ("Ours/M_b+M_l/-", dict(use_m_b=True, use_m_l=True, use_memory=False)),
    ("Ours/M_b+M_l/M", dict(use_m_b=True, use_m_l=True, use_memory=True)),
]

# memory-strategy rows, all on the full structure
STRATEGY_ROWS = [
    ("no-memory", dict(use_memory=False)),
    ("no-cross-branch", dict(update_source="memory")),
    ("Mean", dict(update_mode="mean")),
    ("Concat", dict(read_mode="concat")),
    ("full", dict()),
]

AXES = {
    "upsampler": ("query", "bilinear"),
    "use_m_b": (False, True),
    "use_m_l": (False, True),
    "use_memory": (False, True),
    "read_mode": ("softmax", "concat"),
    "update_mode": ("cosine", "mean"),
    "update_source": ("semantic", "memory"),
}


def with_ablation(cfg: RunConfig, **overrides) -> RunConfig:
    doc = cfg.to_dict()
    doc["ablation"].update(overrides)
    return RunConfig.from_dict(doc)


def axis_product(cfg: RunConfig, axes: dict) -> list[tuple[str, RunConfig]]:
    """One config per point of the cartesian product of ``axes`` (name -> values)."""
    for k in axes:
        if k not in AXES:
            raise KeyError(f"unknown ablation axis {k!r}; choose from {sorted(AXES)}")
    names = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in names)):
        overrides = dict(zip(names, combo))
        label = ",".join(f"{k}={v}" for k, v in overrides.items()) or cfg.ablation.row_name
        out.append((label, with_ablation(cfg, **overrides)))
    return out


def named_rows(cfg: RunConfig, table: str) -> list[tuple[str, RunConfig]]:
    rows = {"structure": STRUCTURE_ROWS, "strategy": STRATEGY_ROWS}[table]
    return [(name, with_ablation(cfg, **ov)) for name, ov in rows]


def ablation_matrix(rows: list[tuple[str, RunConfig]], manifest_path, out_dir=None,
                    names: list[str] | None = None) -> list[tuple[str, RunRecord]]:
    """Train each (name, config) with shared data; ``names`` selects a subset."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    scenes = {s: SceneSet(manifest_path.parent, manifest[s]) for s in ("train", "val", "test")}
    results = []
    for name, cfg in rows:
        if names is not None and name not in names:
            continue
        sub = Path(out_dir) / _slug(name) if out_dir is not None else None
        log.info("ablation row %s", name)
        _, rec = train(cfg, manifest_path, sub, scenes)
        results.append((name, rec))
    if out_dir is not None:
        Path(out_dir, "ablation.json").write_text(json.dumps(ablation_json(results), indent=2) + "\n")
        Path(out_dir, "ablation.txt").write_text(ablation_text(results))
    return results


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_") or "run"


def ablation_json(results) -> dict:
    return {"rows": [{"name": n, "miou": r.test_miou, "config_hash": r.config_hash,
                      "record_hash": r.digest(), "train_time": r.train_time} for n, r in results]}


def ablation_text(results) -> str:
    width = max([len("row")] + [len(n) for n, _ in results])
    lines = [f"{'row':<{width}}  {'mIoU':>7}  {'train s':>8}"]
    for n, r in results:
        lines.append(f"{n:<{width}}  {100 * r.test_miou:7.2f}  {r.train_time:8.1f}")
    return "\n".join(lines) + "\n"
