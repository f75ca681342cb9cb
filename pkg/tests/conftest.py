import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from corpus import build_ablation_corpus, build_convergent_corpus, build_small_corpus


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    return build_small_corpus(tmp_path_factory.mktemp("small-corpus"))


@pytest.fixture(scope="session")
def ablation_manifest(tmp_path_factory):
    return build_ablation_corpus(tmp_path_factory.mktemp("ablation-corpus"))


@pytest.fixture(scope="session")
def convergent_manifest(tmp_path_factory):
    return build_convergent_corpus(tmp_path_factory.mktemp("convergent-corpus"))
