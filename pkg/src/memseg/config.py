"""Run configuration: one JSON document with model/train/tiling/data/ablation sections.

Unknown keys are rejected; missing keys take the defaults below and the filled
document is echoed into every output.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"config key '{key}': {msg}")


@dataclass
class ModelConfig:
    feat_dim: int = 32            # D
    num_classes: int = 8          # C
    downscale: int = 4
    semantic_width: int = 96
    spatial_width: int = 16
    n_freqs: int = 4
    hidden: tuple = (128, 128)
    momentum: float = 0.9         # memory bank moving average

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("model.num_classes", "must be >= 2")
        for k in ("feat_dim", "downscale", "semantic_width", "spatial_width", "n_freqs"):
            if getattr(self, k) < 1:
                raise ConfigError(f"model.{k}", "must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("model.momentum", "must lie in [0, 1)")

    @property
    def patch_multiple(self) -> int:
        # semantic branch divides the downscaled input by 4
        return 4 * self.downscale


@dataclass
class AblationConfig:
    upsampler: str = "query"      # query | bilinear
    use_m_b: bool = True
    use_m_l: bool = True
    use_memory: bool = True
    read_mode: str = "softmax"    # softmax | concat
    update_mode: str = "cosine"   # cosine | mean
    update_source: str = "semantic"  # semantic | memory (the no-cross-branch row)

    def validate(self):
        if self.upsampler not in ("query", "bilinear"):
            raise ConfigError("ablation.upsampler", f"unknown value {self.upsampler!r}")
        if self.read_mode not in ("softmax", "concat"):
            raise ConfigError("ablation.read_mode", f"unknown value {self.read_mode!r}")
        if self.update_mode not in ("cosine", "mean"):
            raise ConfigError("ablation.update_mode", f"unknown value {self.update_mode!r}")
        if self.update_source not in ("semantic", "memory"):
            raise ConfigError("ablation.update_source", f"unknown value {self.update_source!r}")
        if self.use_memory and not self.use_m_b:
            raise ConfigError("ablation.use_memory", "requires use_m_b")
        if self.upsampler == "bilinear" and (self.use_m_b or self.use_m_l or self.use_memory):
            raise ConfigError("ablation.upsampler", "bilinear baseline takes no guidance or memory")

    @property
    def row_name(self) -> str:
        if self.upsampler == "bilinear":
            return "Bilinear"
        spa = "+".join(n for n, on in (("M_b", self.use_m_b), ("M_l", self.use_m_l)) if on) or "-"
        mem = "M" if self.use_memory else "-"
        return f"Ours/{spa}/{mem}"


@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 4
    crop: int = 128
    base_lr: float = 1e-2
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0      # global gradient-norm ceiling; 0 disables
    loss_weights: tuple = (1.0, 0.4, 0.4)   # main, M_b, M_l
    query_samples: int = 2048   # query points supervised per crop; 0 = every pixel
    eval_every: int = 200
    eval_scenes: int = 16
    ckpt_every: int = 0
    dtype: str = "float32"
    seed: int = 0

    def validate(self):
        if self.iters < 0:
            raise ConfigError("train.iters", "must be >= 0")
        for k in ("batch", "crop"):
            if getattr(self, k) < 1:
                raise ConfigError(f"train.{k}", "must be positive")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr", "must be positive")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip", "must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype", "must be float32 or float64")
        if len(self.loss_weights) != 3:
            raise ConfigError("train.loss_weights", "needs three weights")


@dataclass
class TilingConfig:
    mode: str = "local"
    patch: int = 128
    overlap: int | None = None    # default patch // 16
    budget_bytes: int = 256 * 2**20
    chunk_rows: int = 32
    workers: int = 1
    target_side: int = 512

    def validate(self):
        if self.mode not in ("local", "global"):
            raise ConfigError("tiling.mode", "must be local or global")
        if self.patch < 1 or self.chunk_rows < 1 or self.workers < 1:
            raise ConfigError("tiling", "patch, chunk_rows and workers must be positive")
        if self.overlap is not None and not 0 <= self.overlap < self.patch:
            raise ConfigError("tiling.overlap", "must satisfy 0 <= overlap < patch")

    @property
    def effective_overlap(self) -> int:
        return self.patch // 16 if self.overlap is None else self.overlap


@dataclass
class DataConfig:
    root: str = "data"
    scenes: int = 200
    size: int = 512
    splits: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def validate(self):
        if abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ConfigError("data.splits", "fractions must be non-negative and sum to 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        for sec in (self.model, self.train, self.tiling, self.data, self.ablation):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version}")
        sections = {f.name: f for f in dataclasses.fields(cls) if f.name != "schema_version"}
        kwargs = {}
        for key, val in doc.items():
            if key not in sections:
                raise ConfigError(key, "unknown section")
            kwargs[key] = _section(sections[key].default_factory, key, val)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(doc)


def _section(factory, name: str, val):
    if not isinstance(val, dict):
        raise ConfigError(name, "section must be an object")
    known = {f.name: f for f in dataclasses.fields(factory)}
    default = factory()
    out = {}
    for key, v in val.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        ref = getattr(default, key)
        if isinstance(ref, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"{name}.{key}", "expected a list")
            v = tuple(v)
        elif isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{key}", "expected a boolean")
        elif isinstance(ref, int) and not isinstance(ref, bool):
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name}.{key}", "expected an integer")
        elif isinstance(ref, float):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{name}.{key}", "expected a number")
            v = float(v)
        elif isinstance(ref, str) and not isinstance(v, str):
            raise ConfigError(f"{name}.{key}", "expected a string")
        out[key] = v
    return factory(**out)
