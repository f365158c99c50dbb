import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dumpbuild import build_dump  # noqa: E402


@pytest.fixture
def small_dump():
    return build_dump(seed=3)
