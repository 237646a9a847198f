import numpy as np
import pytest

from audiomark.audio import Waveform


def sine(freq, duration_s=1.0, rate=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(duration_s * rate))) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def noise_burst(seed, duration_s=1.0, rate=16000, amp=0.2):
    rng = np.random.default_rng(seed)
    return Waveform(amp * rng.standard_normal(int(round(duration_s * rate))), rate)


@pytest.fixture(scope="session")
def speech_corpus_dir(tmp_path_factory):
    """Small deterministic synthetic corpus shared by the slower tests."""
    from audiomark.harness import generate_synthetic_corpus

    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(16, out, seed=1234, duration_s=1.0)
    return out, manifest
