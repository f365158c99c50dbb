import numpy as np
import pytest
from PIL import Image, ImageDraw

from iseg_extractor import build_toy_bundle


@pytest.fixture(scope="session")
def bundle():
    return build_toy_bundle(seed=0, image_size=128)


@pytest.fixture(scope="session")
def sample_image(tmp_path_factory):
    """Deterministic synthetic photo: two colored shapes on a gradient."""
    img = Image.new("RGB", (200, 160))
    px = img.load()
    for y in range(160):
        for x in range(200):
            px[x, y] = (x * 255 // 200, y * 255 // 160, 120)
    draw = ImageDraw.Draw(img)
    draw.rectangle([30, 30, 90, 110], fill=(200, 60, 50))
    draw.ellipse([120, 60, 180, 130], fill=(60, 180, 80))
    path = tmp_path_factory.mktemp("images") / "sample.png"
    img.save(path)
    return path
