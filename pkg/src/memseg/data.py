"""Procedural aerial-like scenes with dense labels, plus the dataset layout.

Scenes are generated from a SplitMix64 stream (Steele, Lea & Flood 2014):

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Uniform doubles are (out >> 11) * 2**-53. Everything downstream of the stream
uses only IEEE add/mul/compare and table lookups (no libm calls, no BLAS), so a
port that follows the same draw order reproduces scenes bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

PRNG_NAME = "splitmix64"
GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

CLASS_NAMES = ("background", "building", "road", "river", "field", "forest", "lake", "barren")

# mean RGB per class; a few pairs are deliberately close (road/building, river/lake,
# background/field) so that shape and scale, not colour alone, separate them
CLASS_COLORS = np.array([
    [120, 150, 90],    # background grassland
    [170, 160, 160],   # building roofs
    [150, 145, 140],   # road asphalt
    [60, 90, 150],     # river
    [140, 165, 80],    # field
    [50, 95, 55],      # forest
    [65, 95, 150],     # lake
    [165, 130, 95],    # barren soil
], dtype=np.float64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self.state + steps * GAMMA
            self.state = self.state + np.uint64(n) * GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int = 1) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform1(self) -> float:
        return float(self.uniform(1)[0])

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        return lo + int(self.uniform1() * (hi - lo))


@dataclass
class Scene:
    image: np.ndarray            # (3, H, W) float64 in [0, 1], multiples of 1/255
    labels: np.ndarray           # (H, W) uint8
    seed: int
    class_meta: list = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and int(self.labels.max()) >= len(self.class_meta):
            raise ValueError("label id outside the class list")

    @property
    def num_classes(self) -> int:
        return len(self.class_meta)

    def image_u8(self) -> np.ndarray:
        return np.rint(self.image * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _smooth_field(rng: SplitMix64, h: int, w: int, cells: int) -> np.ndarray:
    """Coarse uniform grid, bilinearly interpolated up to (h, w)."""
    coarse = rng.uniform((cells + 1) * (cells + 1)).reshape(cells + 1, cells + 1)

    def axis(n):
        pos = np.arange(n, dtype=np.float64) * (cells / n)
        i0 = pos.astype(np.int64)
        return i0, pos - i0
    r0, ry = axis(h)
    c0, cx = axis(w)
    top = coarse[r0][:, c0] * (1.0 - cx) + coarse[r0][:, c0 + 1] * cx
    bot = coarse[r0 + 1][:, c0] * (1.0 - cx) + coarse[r0 + 1][:, c0 + 1] * cx
    return top * (1.0 - ry)[:, None] + bot * ry[:, None]


def _paint_segment(mask: np.ndarray, p0, p1, half_width: float):
    h, w = mask.shape
    r0, c0 = p0
    r1, c1 = p1
    lo_r = max(int(min(r0, r1) - half_width) - 1, 0)
    hi_r = min(int(max(r0, r1) + half_width) + 2, h)
    lo_c = max(int(min(c0, c1) - half_width) - 1, 0)
    hi_c = min(int(max(c0, c1) + half_width) + 2, w)
    if lo_r >= hi_r or lo_c >= hi_c:
        return
    rr = np.arange(lo_r, hi_r, dtype=np.float64)[:, None] + 0.5
    cc = np.arange(lo_c, hi_c, dtype=np.float64)[None, :] + 0.5
    dr, dc = r1 - r0, c1 - c0
    length2 = dr * dr + dc * dc
    if length2 == 0:
        t = np.zeros_like(rr * cc)
    else:
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / length2, 0.0, 1.0)
    er = rr - (r0 + t * dr)
    ec = cc - (c0 + t * dc)
    mask[lo_r:hi_r, lo_c:hi_c] |= (er * er + ec * ec) <= half_width * half_width


def _polyline(rng: SplitMix64, h: int, w: int, segments: int, turn: float, half_width: float) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    # start on a random edge heading inwards; directions come from a small lookup
    # table so no trig call is needed
    dirs = np.array([[1, 0], [0.92, 0.38], [0.71, 0.71], [0.38, 0.92], [0, 1], [-0.38, 0.92],
                     [-0.71, 0.71], [-0.92, 0.38], [-1, 0], [-0.92, -0.38], [-0.71, -0.71],
                     [-0.38, -0.92], [0, -1], [0.38, -0.92], [0.71, -0.71], [0.92, -0.38]])
    edge = rng.randint(0, 4)
    u = rng.uniform1()
    if edge == 0:
        p, d = [0.0, u * w], 0
    elif edge == 1:
        p, d = [h - 1.0, u * w], 8
    elif edge == 2:
        p, d = [u * h, 0.0], 4
    else:
        p, d = [u * h, w - 1.0], 12
    d = (d + rng.randint(-2, 3)) % 16
    step = max(h, w) / segments * 1.4
    for _ in range(segments):
        d = (d + int((rng.uniform1() - 0.5) * 2 * turn)) % 16
        q = [p[0] + dirs[d][0] * step, p[1] + dirs[d][1] * step]
        _paint_segment(mask, p, q, half_width)
        p = q
    return mask


def generate_scene(seed: int, h: int = 512, w: int = 512, num_classes: int = 8) -> Scene:
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_classes > len(CLASS_NAMES):
        raise ValueError(f"only {len(CLASS_NAMES)} class generators are available, asked for {num_classes}")
    rng = SplitMix64(seed)
    labels = np.zeros((h, w), dtype=np.uint8)
    scale = math.sqrt(h * w) / 512.0

    def active(c):
        return c < num_classes

    # large smooth blobs, painted first so thin structures overlay them
    for c, cells, thresh in ((4, 4, 0.62), (5, 5, 0.66), (7, 6, 0.72), (6, 5, 0.76)):
        f = _smooth_field(rng, h, w, cells)
        if active(c):
            labels[f > thresh] = c
    if active(2):
        for _ in range(1 + rng.randint(0, 3)):
            labels[_polyline(rng, h, w, 3, 1.0, 1.5 * max(scale, 0.5))] = 2
    if active(3):
        for _ in range(1 + rng.randint(0, 2)):
            hw = (1.0 + rng.uniform1() * 1.5) * max(scale, 0.5)
            labels[_polyline(rng, h, w, 10, 3.0, hw)] = 3
    if active(1):
        n_build = int((25 + rng.randint(0, 30)) * scale * scale) + 1
        for _ in range(n_build):
            bh = 3 + rng.randint(0, 10)
            bw = 3 + rng.randint(0, 10)
            r = rng.randint(0, max(h - bh, 1))
            c0 = rng.randint(0, max(w - bw, 1))
            labels[r:r + bh, c0:c0 + bw] = 1

    # colours: per-scene class tint, low-frequency shading, per-pixel noise
    tint = (rng.uniform(3 * len(CLASS_NAMES)).reshape(len(CLASS_NAMES), 3) - 0.5) * 24.0
    palette = CLASS_COLORS + tint
    shade = (_smooth_field(rng, h, w, 3) - 0.5) * 30.0
    noise = (rng.uniform(3 * h * w).reshape(3, h, w) - 0.5) * 50.0
    img = palette[labels].transpose(2, 0, 1) + shade[None] + noise
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Scene(img.astype(np.float64) / 255.0, labels, seed, list(CLASS_NAMES[:num_classes]))


# ---------------------------------------------------------------- dataset layout

def scene_seed(base_seed: int, index: int) -> int:
    return int(SplitMix64(base_seed * 1_000_003 + index).next_u64(1)[0])


def write_scene(root, index: int, scene: Scene):
    d = Path(root) / "scenes"
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"{index:04d}"
    netpbm.write_ppm(stem.with_suffix(".ppm"), scene.image_u8())
    netpbm.write_pgm(stem.with_suffix(".pgm"), scene.labels)
    meta = {"seed": scene.seed, "num_classes": scene.num_classes, "class_names": scene.class_meta, "prng": PRNG_NAME}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_scene(root, name: str) -> Scene:
    stem = Path(root) / "scenes" / name
    meta = json.loads(stem.with_suffix(".json").read_text())
    img = netpbm.read_ppm(stem.with_suffix(".ppm"))
    lab = netpbm.read_pgm(stem.with_suffix(".pgm"))
    return Scene(img.transpose(2, 0, 1).astype(np.float64) / 255.0, lab, meta["seed"], meta["class_names"])


def generate_dataset(root, scenes: int, size: int, num_classes: int, seed: int,
                     splits=(0.7, 0.15, 0.15)) -> Path:
    for i in range(scenes):
        write_scene(root, i, generate_scene(scene_seed(seed, i), size, size, num_classes))
    return build_manifest(root, splits, seed)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    """Train and val take floor(f * n); test takes the remainder."""
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_manifest(root, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> Path:
    root = Path(root)
    names = sorted(p.stem for p in (root / "scenes").glob("*.ppm")) if (root / "scenes").is_dir() else []
    if not names:
        raise FileNotFoundError(f"no scenes found under {root / 'scenes'}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three values summing to 1")
    # Fisher-Yates driven by the same generator as the scenes
    rng = SplitMix64(seed)
    order = list(names)
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.uniform1() * (i + 1))
        order[i], order[j] = order[j], order[i]
    n_train, n_val, _ = split_sizes(len(order), fractions)
    manifest = {
        "prng": PRNG_NAME,
        "seed": seed,
        "fractions": list(fractions),
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


class ManifestError(ValueError):
    pass


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    for key in ("train", "val", "test"):
        if not isinstance(doc.get(key), list):
            raise ManifestError(f"{path}: missing list '{key}'")
    return doc
