import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sargnn import autodiff  # noqa: E402

autodiff.set_debug(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
