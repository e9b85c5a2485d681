import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import build_tiny_bundle, make_dataset


@pytest.fixture(scope="session")
def tiny_models_dir(tmp_path_factory):
    return build_tiny_bundle(tmp_path_factory.mktemp("models"))


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("data"))
