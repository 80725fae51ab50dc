import numpy as np
import pytest
from PIL import Image

from memesent.dataset import Label, Sample, load_manifest, stratified_split
from memesent.synthetic import make_bimodal_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def write_png(tmp_path):
    def _write(name="img.png", size=(32, 32), color=(128, 128, 128), array=None):
        path = tmp_path / name
        if array is None:
            array = np.zeros((size[1], size[0], 3), dtype=np.uint8) + np.array(color, dtype=np.uint8)
        Image.fromarray(array).save(path)
        return str(path)

    return _write


@pytest.fixture
def make_samples(write_png):
    """Samples sharing one small valid image, for tests that never read pixels."""

    def _make(labels, captions=None):
        path = write_png("shared.png")
        captions = captions or [f"caption {i}" for i in range(len(labels))]
        return [Sample(f"s{i:04d}", path, c, Label.parse(l)) for i, (l, c) in enumerate(zip(labels, captions))]

    return _make


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    path = make_bimodal_dataset(tmp_path_factory.mktemp("synthetic"), n_per_combo=40, seed=0)
    return path


@pytest.fixture(scope="session")
def synthetic_data(synthetic_manifest):
    manifest = load_manifest(synthetic_manifest)
    return manifest, stratified_split(manifest, seed=0)
