import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from soundlm.experiments import Lab, LabConfig  # noqa: E402


def cache_root():
    return os.environ.get("UALM_DATA_DIR") or str(
        Path(__file__).resolve().parent.parent / ".cache" / "soundlm"
    )


@pytest.fixture(scope="session")
def lab():
    """The full desk-scale pipeline; artifacts cached across runs."""
    return Lab(LabConfig(), cache_dir=cache_root(), verbose=True)
