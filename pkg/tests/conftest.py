import os

import pytest
from hypothesis import settings

from cfgtune.backend import solid_png

settings.register_profile("ci", max_examples=50, deadline=None)
settings.register_profile("dev", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def png64():
    return solid_png(64, 64, (120, 130, 140))


@pytest.fixture
def image_file(tmp_path, png64):
    path = tmp_path / "input.png"
    path.write_bytes(png64)
    return path


@pytest.fixture
def fixtures_dir():
    return FIXTURES
