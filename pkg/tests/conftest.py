import numpy as np
import pytest

from stackad.mock import MockSpec, MockTextStore, generate_mock_dataset
from stackad.store import Dims

BENCH_GROUPS = {
    "metalware": ["boltz", "gearix", "rivetta"],
    "fabrix": ["weavon", "feltra", "clothen"],
}


def benchmark_spec(seed: int = 7) -> MockSpec:
    """The 2-group, 40-train / 16-test desk-scale benchmark dataset."""
    return MockSpec(
        groups=BENCH_GROUPS,
        train_categories=["boltz", "gearix", "weavon", "feltra"],
        test_categories=["rivetta", "clothen"],
        images_per_category=10,
        test_images_per_category=8,
        anomaly_fraction=0.5,
        dims=Dims(D_img=16, D_txt=8, G=8, H=64, W=64),
        seed=seed,
        flaw_bias=0.04,
    )


@pytest.fixture(scope="session")
def bench_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    spec = benchmark_spec()
    manifest = generate_mock_dataset(spec, str(root))
    store = MockTextStore(spec.seed, spec.dims.D_txt, groups=spec.groups, delta=spec.delta)
    return {"root": str(root), "spec": spec, "manifest": manifest, "store": store}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
