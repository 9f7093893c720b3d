import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epg2s import signal_io

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
warnings.filterwarnings("ignore", message=".*requires_grad.*")


@pytest.fixture(scope="session")
def small_corpus():
    return signal_io.synth_corpus(signal_io.SyntheticSpec(seed=3, n_utterances=12, split=(0.5, 0.25, 0.25)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def harmonic(f0, n_harmonics, seconds=0.6, ramp_s=0.05, rate=16000):
    """Harmonic tone burst with raised-cosine onset and offset ramps."""
    t = np.arange(int(seconds * rate)) / rate
    x = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, n_harmonics + 1))
    r = int(ramp_s * rate)
    env = np.ones_like(t)
    env[:r] = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    env[-r:] = env[:r][::-1]
    return 0.3 * x * env / np.max(np.abs(x))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; reraises failures."""

    class _Recorder:
        def __call__(self, number, title):
            self.number, self.title, self.detail = number, title, ""
            return self

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"criterion {self.number:>2} {status}: {self.title}"
            if self.detail:
                line += f" ({self.detail})"
            ACCEPTANCE_LINES.append(line)
            print(line)
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
