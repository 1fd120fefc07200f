# tests/conftest.py

import numpy as np
import pytest

from scene_text_pipeline.config import ModelConfig, RenderRanges, RenderSettings
from scene_text_pipeline.nn import numeric
from scene_text_pipeline.nn.gradcheck import TINY_MODEL
from scene_text_pipeline.services.synthgen import Vocabulary, generate_dataset, save_glyph_atlas
from scene_text_pipeline.tools.procedural_atlas import build_procedural_atlas, write_backgrounds


@pytest.fixture(autouse=True)
def restore_numeric_state():
    mode, checked = numeric.numeric_mode(), numeric.is_checked()
    yield
    numeric.set_numeric_mode(mode)
    numeric.set_checked(checked)


@pytest.fixture
def f64():
    with numeric.numeric("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def atlas():
    return build_procedural_atlas()


@pytest.fixture(scope="session")
def atlas_dir(tmp_path_factory, atlas):
    directory = tmp_path_factory.mktemp("atlas")
    save_glyph_atlas(atlas, directory)
    return directory


@pytest.fixture(scope="session")
def backgrounds_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("backgrounds")
    write_backgrounds(directory, count=3, seed=5)
    return directory


@pytest.fixture
def vocab_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("cab\nbad\nhold\nrope\ntext\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_config():
    """Height-16 hybrid model small enough for finite differences and quick training."""
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def small_dataset(tmp_path, atlas):
    """Six mildly distorted renders over a five-word vocabulary."""
    vocab = Vocabulary(("cab", "bad", "hold", "rope", "text"))
    ranges = RenderRanges.fixed(skew_deg=3.0, noise_sigma=0.01)
    manifest = generate_dataset(vocab, 6, 11, tmp_path / "data", atlas, ranges, RenderSettings(punctuation=""))
    return manifest
