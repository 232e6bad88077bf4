import os

import numpy as np
import pytest
from PIL import Image

from sclp_extractor import load_backbone


@pytest.fixture(scope="session")
def toy_model():
    return load_backbone("toy:3")


@pytest.fixture(scope="session")
def image_tree(tmp_path_factory):
    """Small RGB images under <root>/<category>/ for list-mode extraction."""
    root = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    paths = []
    for cat in ("boltz", "weavon"):
        d = root / cat
        d.mkdir()
        for i in range(2):
            p = d / f"im{i}.png"
            Image.fromarray(rng.integers(0, 255, (64, 64, 3), dtype=np.uint8), "RGB").save(p)
            paths.append(str(p))
    listing = root / "list.txt"
    listing.write_text("\n".join(paths) + "\n")
    return {"root": str(root), "paths": paths, "list": str(listing)}
