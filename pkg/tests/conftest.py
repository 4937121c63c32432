import pytest

from aaecls import dataset as ds


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """90 synthetic images at 48 px, shared by training/evaluation/CLI tests."""
    root = tmp_path_factory.mktemp("smalldata")
    config = ds.SynthConfig(image_size=48, seed=11)
    manifest = ds.generate_synthetic(config, 90, root)
    return root / "manifest.csv", manifest
