from __future__ import annotations

import numpy as np

from . import tensor as T
from .branches import BranchOutputs, MemoryBranch, SemanticBranch, SpatialBranch, make_patch_pair
from .config import AblationConfig, ModelConfig
from .memory import ConcatReadHead, MemoryBank, read_refine, read_refine_concat_ablation
from .nn import Module
from .query import PositionalEncoder, QueryHead, bilinear_baseline, query_mask, query_points
from .tensor import Tensor


class SegModel(Module):
    """All learnable state plus the frozen memory bank.

    Every sub-network is always built (and seeded by name) so that configurations
    differing only in ablation flags start from identical weights.
    """

    def __init__(self, cfg: ModelConfig | None = None, ablation: AblationConfig | None = None,
                 seed: int = 0, dtype=np.float64):
        self.cfg = cfg or ModelConfig()
        self.ablation = ablation or AblationConfig()
        self.cfg.validate()
        self.ablation.validate()
        self.seed = seed
        c = self.cfg
        self.semantic = SemanticBranch(c, seed=seed, dtype=dtype)
        self.memory_branch = MemoryBranch(c, seed=seed, dtype=dtype)
        self.spatial = SpatialBranch(c, seed=seed, dtype=dtype)
        self.encoder = PositionalEncoder(c.n_freqs, dtype=dtype)
        self.head = QueryHead(c.feat_dim, c.num_classes, c.n_freqs, c.hidden, seed=seed, dtype=dtype)
        self.concat_read = ConcatReadHead(c.num_classes, dtype=dtype)
        self.bank: MemoryBank | None = None

    @property
    def dtype(self):
        return self.encoder.freqs.dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"load {name}", state[name].shape, p.shape)
            p.data = np.array(state[name], dtype=state[name].dtype)

    def param_bytes(self) -> int:
        return sum(p.data.nbytes for p in self.parameters())

    def encode(self, full: Tensor, use_bank: bool = True) -> BranchOutputs:
        """Run the enabled branches on a batch of full-resolution patches."""
        ab = self.ablation
        pair = make_patch_pair(full, self.cfg.downscale)
        latent = self.semantic(pair.down)
        out = BranchOutputs(latent=latent)
        if ab.upsampler == "bilinear":
            out.sem_logits = self.semantic.cls(latent)
            return out
        if ab.use_m_b:
            out.f_b, out.m_b = self.memory_branch(pair.full)
            probs = T.softmax(out.m_b, axis=1)
            if ab.use_memory and use_bank and self.bank is not None and self.bank.initialized.any():
                if ab.read_mode == "softmax":
                    probs = read_refine(self.bank, out.f_b, probs)
                else:
                    probs = read_refine_concat_ablation(self.bank, out.f_b, probs, self.concat_read)
            out.guide_b = probs
        if ab.use_m_l:
            out.m_l = self.spatial(pair.full)
            out.guide_l = T.softmax(out.m_l, axis=1)
        return out

    def decode(self, out: BranchOutputs, out_h: int, out_w: int, chunk_rows: int | None = None) -> Tensor:
        if self.ablation.upsampler == "bilinear":
            return bilinear_baseline(out.sem_logits, out_h, out_w)
        return query_mask(out.latent, out.guide_b, out.guide_l, out_h, out_w, self.encoder, self.head, chunk_rows)

    def decode_points(self, out: BranchOutputs, xq: np.ndarray, batch_index: np.ndarray) -> Tensor:
        return query_points(out.latent, out.guide_b, out.guide_l, xq, batch_index, self.encoder, self.head)

    def __call__(self, full: Tensor, chunk_rows: int | None = None) -> Tensor:
        out = self.encode(full)
        h, w = full.shape[-2:]
        return self.decode(out, h, w, chunk_rows)
