import numpy as np
import pytest

from _corpus import build_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """240 mixed RGB / grayscale 48x48 PNGs (2160 tiles at k=16)."""
    return build_corpus(tmp_path_factory.mktemp("corpus"), 240)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 images (216 tiles at k=16) for quick runs."""
    return build_corpus(tmp_path_factory.mktemp("small_corpus"), 24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
