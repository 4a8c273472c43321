import json

import pytest

from memseg.config import AblationConfig, ConfigError, RunConfig


def test_defaults_round_trip():
    cfg = RunConfig()
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()


def test_partial_document_fills_defaults():
    cfg = RunConfig.from_dict({"train": {"iters": 5}})
    assert cfg.train.iters == 5 and cfg.train.batch == RunConfig().train.batch


def test_digest_changes_with_content():
    assert RunConfig.from_dict({"train": {"seed": 1}}).digest() != RunConfig().digest()


@pytest.mark.parametrize("doc,key", [
    ({"nope": {}}, "nope"),
    ({"train": {"lr": 1}}, "train.lr"),
    ({"train": {"iters": "10"}}, "train.iters"),
    ({"train": {"iters": -1}}, "train.iters"),
    ({"train": {"grad_clip": -1.0}}, "train.grad_clip"),
    ({"model": {"num_classes": 1}}, "model.num_classes"),
    ({"model": {"momentum": 1.0}}, "model.momentum"),
    ({"model": {"hidden": 128}}, "model.hidden"),
    ({"tiling": {"mode": "tiled"}}, "tiling.mode"),
    ({"tiling": {"patch": 64, "overlap": 64}}, "tiling.overlap"),
    ({"data": {"splits": [0.5, 0.5, 0.5]}}, "data.splits"),
    ({"ablation": {"use_m_b": False}}, "ablation.use_memory"),
    ({"ablation": {"upsampler": "bilinear"}}, "ablation.upsampler"),
    ({"ablation": {"use_m_l": 1}}, "ablation.use_m_l"),
    ({"schema_version": 2}, "schema_version"),
])
def test_invalid_documents_name_the_key(doc, key):
    with pytest.raises(ConfigError) as ei:
        RunConfig.from_dict(doc)
    assert ei.value.key == key and key in str(ei.value)


def test_load_from_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"tiling": {"patch": 64}}))
    assert RunConfig.load(p).tiling.patch == 64
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    p.write_text("{broken")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_default_overlap_is_a_sixteenth():
    assert RunConfig.from_dict({"tiling": {"patch": 128}}).tiling.effective_overlap == 8


@pytest.mark.parametrize("flags,name", [
    (dict(upsampler="bilinear", use_m_b=False, use_m_l=False, use_memory=False), "Bilinear"),
    (dict(use_m_b=False, use_m_l=False, use_memory=False), "Ours/-/-"),
    (dict(use_m_l=False), "Ours/M_b/M"),
    (dict(), "Ours/M_b+M_l/M"),
])
def test_row_names(flags, name):
    assert AblationConfig(**flags).row_name == name
