import inspect
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memseg.config import AblationConfig
from memseg.memtrack import BudgetExceeded
from memseg.tiling import (MergeBuffer, PatchGrid, estimate_peak_memory, global_size, infer_global, infer_local,
                           merge, partition, predict_probs)

from conftest import make_model

BIG = 1 << 40


def one_hot_logits(labels, c):
    return np.eye(c)[labels].transpose(2, 0, 1) * 10.0


# ---------------------------------------------------------------- partition

def test_partition_single():
    g = partition(128, 128, 128, 0)
    assert list(g.placements) == [(0, 0)] and g.stride == 128


def test_partition_large_image():
    g = partition(5000, 5000, 1280, 40)
    assert len(g) == 16
    assert sorted({r for r, _ in g.placements}) == [0, 1240, 2480, 3720]


def test_partition_clamps_last_placement():
    g = partition(100, 70, 32, 8)
    assert max(r for r, _ in g.placements) == 100 - 32
    assert max(c for _, c in g.placements) == 70 - 32
    assert list(g.placements) == sorted(g.placements)


def test_partition_errors():
    with pytest.raises(ValueError, match="global"):
        partition(64, 64, 128, 0)
    with pytest.raises(ValueError):
        partition(64, 64, 32, 32)
    with pytest.raises(ValueError):
        partition(64, 64, 32, -1)


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 120), w=st.integers(1, 120), data=st.data())
def test_partition_covers_every_pixel(h, w, data):
    patch = data.draw(st.integers(1, min(h, w)))
    overlap = data.draw(st.integers(0, patch - 1))
    g = partition(h, w, patch, overlap)
    cover = np.zeros((h, w), dtype=int)
    for r0, c0 in g.placements:
        assert r0 + patch <= h and c0 + patch <= w
        cover[r0:r0 + patch, c0:c0 + patch] += 1
    assert cover.min() >= 1


@settings(max_examples=200, deadline=None)
@given(h=st.integers(2, 60), w=st.integers(2, 60), seed=st.integers(0, 2**31), data=st.data())
def test_partition_merge_identity(h, w, seed, data):
    patch = data.draw(st.integers(1, min(h, w)))
    overlap = data.draw(st.integers(0, patch - 1))
    labels = np.random.default_rng(seed).integers(0, 4, size=(h, w))
    g = partition(h, w, patch, overlap)
    blocks = [one_hot_logits(labels[r:r + patch, c:c + patch], 4) for r, c in g.placements]
    np.testing.assert_array_equal(merge(blocks, g), labels)


# ---------------------------------------------------------------- merge

def test_merge_single_patch_is_argmax(rng):
    logits = rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(merge([logits], partition(8, 8, 8, 0)), logits.argmax(0))


def test_merge_identical_overlapping_patches(rng):
    logits = rng.normal(size=(3, 4, 4))
    g = PatchGrid(4, 4, 4, 4, [(0, 0), (0, 0)])
    np.testing.assert_array_equal(merge([logits, logits], g), merge([logits], partition(4, 4, 4, 0)))


def test_merge_conflicting_overlap_by_hand():
    # two 1x3 patches overlapping on the middle column of a 1x4 strip
    p1 = np.log(np.array([[[0.6, 0.6, 0.6]], [[0.4, 0.4, 0.4]]]))
    p2 = np.log(np.array([[[0.3, 0.1, 0.1]], [[0.7, 0.9, 0.9]]]))
    g = PatchGrid(1, 4, 3, 1, [(0, 0), (0, 1)])
    # columns: p1 only -> 0; means (0.45, 0.55) -> 1; (0.35, 0.65) -> 1; p2 only -> 1
    np.testing.assert_array_equal(merge([p1, p2], g), [[0, 1, 1, 1]])


def test_merge_tie_goes_to_smaller_class():
    g = partition(2, 2, 2, 0)
    assert (merge([np.zeros((3, 2, 2))], g) == 0).all()


def test_merge_count_mismatch():
    with pytest.raises(ValueError):
        merge([np.zeros((2, 4, 4))], partition(4, 8, 4, 0))


def test_merge_is_order_independent(rng):
    g = partition(30, 30, 12, 3)
    blocks = [rng.normal(size=(4, 12, 12)) for _ in g.placements]
    perm = rng.permutation(len(g))
    shuffled = PatchGrid(g.image_h, g.image_w, g.patch, g.stride, [g.placements[i] for i in perm])
    np.testing.assert_array_equal(merge([blocks[i] for i in perm], shuffled), merge(blocks, g))


def test_merge_buffer_accumulates():
    buf = MergeBuffer(2, 2, 3)
    buf.add(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), 0, 0)
    buf.add(np.array([[[0.2, 0.0]], [[0.8, 1.0]]]), 0, 1)
    buf.add(np.array([[[0.9, 0.4, 0.1]], [[0.1, 0.6, 0.9]]]), 1, 0)
    # (0,1) averages (0, 1) and (0.2, 0.8)
    np.testing.assert_array_equal(buf.labels(), [[0, 1, 1], [0, 1, 1]])


# ---------------------------------------------------------------- inference

@pytest.fixture
def tiny_model(small_cfg):
    return make_model(small_cfg, seed=3)


@pytest.fixture
def image(rng):
    return rng.random((3, 48, 64))


def test_infer_local_shapes_and_report(tiny_model, image):
    labels, rep = infer_local(image, tiny_model, BIG, 32, 8)
    assert labels.shape == (48, 64)
    assert 0 < rep.measured_peak_bytes <= rep.budget_bytes
    assert set(rep.per_stage) >= {"merge", "branches", "query"}


def test_infer_local_chunking_invariance(tiny_model, image):
    a, _ = infer_local(image, tiny_model, BIG, 32, 8, chunk_rows=16)
    b, _ = infer_local(image, tiny_model, BIG, 32, 8, chunk_rows=8)
    c, _ = infer_local(image, tiny_model, BIG, 32, 8, chunk_rows=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_infer_local_workers_match_serial(tiny_model, image):
    a, _ = infer_local(image, tiny_model, BIG, 32, 8, workers=1)
    b, rep = infer_local(image, tiny_model, BIG, 32, 8, workers=3)
    np.testing.assert_array_equal(a, b)
    assert rep.measured_peak_bytes > 0


def test_single_patch_local_equals_global(tiny_model, rng):
    img = rng.random((3, 48, 48))
    a, _ = infer_local(img, tiny_model, BIG, 48, 0)
    b, _ = infer_global(img, tiny_model, 48)
    np.testing.assert_array_equal(a, b)


def test_global_output_has_input_size(tiny_model, rng):
    img = rng.random((3, 70, 50))
    labels, rep = infer_global(img, tiny_model, 32)
    assert labels.shape == (70, 50) and rep.measured_peak_bytes > 0


def test_global_size_rounds_to_multiple():
    assert global_size(512, 512, 128, 16) == (128, 128)
    assert global_size(100, 60, 1000, 16) == (96, 48)
    assert global_size(5000, 2500, 1000, 16) == (992, 496)


def test_patch_must_fit_branch_strides(tiny_model, image):
    with pytest.raises(ValueError):
        infer_local(image, tiny_model, BIG, 24, 0)


def test_budget_exceeded_is_structured(tiny_model, image):
    with pytest.raises(BudgetExceeded) as ei:
        infer_local(image, tiny_model, 100_000, 32, 8)
    err = ei.value
    assert err.budget == 100_000 and err.needed > err.budget
    assert err.stage in {"setup", "merge", "branches", "query"}
    assert "chunk_rows" in str(err)


def test_budget_honesty(tiny_model, image):
    _, rep = infer_local(image, tiny_model, BIG, 32, 8)
    tight = rep.measured_peak_bytes
    _, rep2 = infer_local(image, tiny_model, tight, 32, 8)
    assert rep2.measured_peak_bytes <= tight
    with pytest.raises(BudgetExceeded):
        infer_local(image, tiny_model, tight - 1, 32, 8)


def test_patch_pipeline_sees_only_its_crop(tiny_model, rng):
    # static side: the per-patch function takes the crop and the model, nothing shared
    assert list(inspect.signature(predict_probs).parameters)[:2] == ["model", "crop"]
    # dynamic side: pixels outside a patch do not change that patch's probabilities
    img = rng.random((3, 32, 64))
    a = predict_probs(tiny_model, img[:, :, :32], 32, 32, 8)
    img[:, :, 32:] = rng.random((3, 32, 32))
    b = predict_probs(tiny_model, img[:, :, :32], 32, 32, 8)
    np.testing.assert_array_equal(a, b)


def test_local_labels_depend_only_on_covering_patches(tiny_model, rng):
    img = rng.random((3, 32, 64))
    a, _ = infer_local(img, tiny_model, BIG, 32, 0)
    img2 = img.copy()
    img2[:, :, 32:] = rng.random((3, 32, 32))
    b, _ = infer_local(img2, tiny_model, BIG, 32, 0)
    np.testing.assert_array_equal(a[:, :32], b[:, :32])


def test_measured_peak_decreases_with_patch(tiny_model, rng):
    img = rng.random((3, 96, 96))
    peaks = [infer_local(img, tiny_model, BIG, p, 0)[1].measured_peak_bytes for p in (96, 64, 32)]
    assert peaks[0] > peaks[1] > peaks[2]


# ---------------------------------------------------------------- estimate

def test_estimate_close_to_measured(tiny_model, image):
    _, rep = infer_local(image, tiny_model, BIG, 32, 8, chunk_rows=8)
    assert 0.8 <= rep.estimated_peak_bytes / rep.measured_peak_bytes <= 1.2


def test_estimate_unbounded_chunk_equals_full_height(tiny_model):
    assert estimate_peak_memory(tiny_model, 64, None) == estimate_peak_memory(tiny_model, 64, 64)
    assert estimate_peak_memory(tiny_model, 64, None) == estimate_peak_memory(tiny_model, 64, 10 ** 6)


def test_estimate_grows_quadratically(tiny_model):
    ratio = estimate_peak_memory(tiny_model, 512, None) / estimate_peak_memory(tiny_model, 256, None)
    assert 3.5 <= ratio <= 4.5


@pytest.mark.parametrize("ablation", [AblationConfig(upsampler="bilinear", use_m_b=False, use_m_l=False,
                                                     use_memory=False),
                                      AblationConfig(use_m_b=False, use_m_l=False, use_memory=False),
                                      AblationConfig(read_mode="concat")])
def test_estimate_tracks_measured_for_ablations(small_cfg, ablation, image):
    m = make_model(small_cfg, ablation, seed=3)
    _, rep = infer_local(image, m, BIG, 32, 8, chunk_rows=8)
    assert 0.8 <= rep.estimated_peak_bytes / rep.measured_peak_bytes <= 1.2


def test_report_serializes(tiny_model, image):
    _, rep = infer_local(image, tiny_model, BIG, 32, 8)
    d = rep.to_dict()
    assert d["within_budget"] is True and d["budget_bytes"] == BIG
    assert replace(rep, measured_peak_bytes=BIG + 1).within_budget is False
