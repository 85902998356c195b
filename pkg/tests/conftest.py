import numpy as np
import pytest

from emofuse import numerics
from emofuse.audio import Waveform, write_wav


@pytest.fixture
def f64():
    """Run a test in float64 verification mode."""
    with numerics.precision("float64"):
        yield


def make_wav_bytes(samples, sample_rate=16_000) -> bytes:
    return write_wav(Waveform(np.asarray(samples, dtype=np.float32), sample_rate))
