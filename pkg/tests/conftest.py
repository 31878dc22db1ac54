import numpy as np
import pytest

from tcresnet.audio_io import AudioClip, write_wav

WORDS_FOR_FIXTURE = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "bed", "cat")


def max_rel_error(a, b, floor=1e-10):
    """Largest elementwise |a-b| / max(|a|, |b|); pairs both below ``floor`` count as equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    err = np.where(denom > floor, np.abs(a - b) / np.maximum(denom, floor), 0.0)
    return float(err.max()) if err.size else 0.0


def numerical_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at float64 array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _tone(rng, n=16000):
    t = np.arange(n) / 16000
    f0 = rng.uniform(200, 3000)
    return np.clip(0.3 * np.sin(2 * np.pi * f0 * t) + 0.02 * rng.normal(size=n), -1, 1)


@pytest.fixture(scope="session")
def speech_root(tmp_path_factory):
    """A miniature Speech Commands tree: 12 words x 12 speakers plus two noise files."""
    root = tmp_path_factory.mktemp("speech_commands")
    rng = np.random.default_rng(1234)
    for word in WORDS_FOR_FIXTURE:
        (root / word).mkdir()
        for spk in range(12):
            for take in range(2):
                n = int(rng.integers(12000, 16001))
                write_wav(root / word / f"{spk:08x}_nohash_{take}.wav", AudioClip(_tone(rng, n)))
    noise = root / "_background_noise_"
    noise.mkdir()
    for i in range(2):
        write_wav(noise / f"noise{i}.wav", AudioClip(np.clip(0.2 * rng.normal(size=40000), -1, 1)))
    return root


# (criterion number, passed or None when skipped, summary) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, summary in sorted(ACCEPTANCE, key=lambda row: row[0]):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {summary}")
