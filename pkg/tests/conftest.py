import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mockfixtures import ten_item_fixture, write_fixture  # noqa: E402


@pytest.fixture
def ten_items(tmp_path):
    """(dataset path, mock script path) for the ten-item audit fixture."""
    return write_fixture(ten_item_fixture(), tmp_path / "fx")
