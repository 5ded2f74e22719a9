import numpy as np
import pytest
import torch

from msdistill.rasterstore import BandMeta, Modality, RasterPatch, default_bands, generate_synthetic_dataset

torch.set_num_threads(1)


def random_patch(rng: np.random.Generator, n_ms=10, n_sar=2, size=8, labels=True) -> RasterPatch:
    bands = default_bands(n_ms, n_sar)
    data = rng.normal(size=(len(bands), size, size)).astype(np.float32)
    label_map = rng.integers(0, 4, size=(size, size)) if labels else None
    class_label = int(rng.integers(0, 4)) if labels else None
    return RasterPatch(bands, data, label_map, class_label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """64 patches of 16x16 px, shared read-only by tests."""
    return generate_synthetic_dataset(tmp_path_factory.mktemp("small"), 64, 4, 16, 10, 2, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
