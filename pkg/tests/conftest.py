from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vidannot.backends import DetectionNoise


@pytest.fixture
def zero_noise() -> DetectionNoise:
    return DetectionNoise()
