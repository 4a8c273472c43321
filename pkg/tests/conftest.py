import numpy as np
import pytest

from memseg.config import AblationConfig, ModelConfig
from memseg.data import generate_dataset
from memseg.memory import MemoryBank
from memseg.model import SegModel

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(feat_dim=6, num_classes=3, downscale=4, semantic_width=5, spatial_width=4,
                       n_freqs=2, hidden=(8, 8))


def make_model(cfg, ablation=None, seed=0, with_bank=True):
    m = SegModel(cfg, ablation or AblationConfig(), seed=seed, dtype=np.float64)
    if with_bank:
        r = np.random.default_rng(seed + 99)
        m.bank = MemoryBank(r.normal(size=(cfg.feat_dim, cfg.num_classes)),
                            np.ones(cfg.num_classes, dtype=bool), cfg.momentum)
    return m


@pytest.fixture
def small_model(small_cfg):
    return make_model(small_cfg)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, 10, 64, 8, 3, (0.6, 0.2, 0.2))
    return root


def load_schema(name: str) -> dict:
    import json
    from importlib import resources
    return json.loads(resources.files("memseg").joinpath("schemas", f"{name}.json").read_text())


def assert_valid(doc, name: str):
    import jsonschema
    jsonschema.validate(doc, load_schema(name))
