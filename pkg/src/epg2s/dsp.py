"""STFT analysis, feature normalization, noise mixing and Griffin-Lim.

All framing uses a 512-sample periodic Hann window with a 160-sample hop
at 16 kHz, giving 257 frequency bins and 100 frames per second.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import FormatError, ShapeError

SAMPLE_RATE = 16000
HOP = 160
WIN = 512
N_BINS = WIN // 2 + 1
FRAME_RATE = SAMPLE_RATE / HOP

NOISE_KINDS = ("vehicular", "engine", "street", "babble")

_WINDOW = signal.get_window("hann", WIN)  # periodic
_WINDOW.setflags(write=False)


@dataclass
class Waveform:
    """Mono audio. ``meta`` carries bookkeeping such as mixing gains."""

    samples: np.ndarray
    rate_hz: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self):
        return len(self.samples) / self.rate_hz


@dataclass
class Spectrogram:
    mag: np.ndarray
    hop: int = HOP
    win: int = WIN
    rate_hz: int = SAMPLE_RATE
    phase: np.ndarray | None = None

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=np.float64)
        if self.mag.ndim != 2 or self.mag.shape[1] != self.win // 2 + 1:
            raise ShapeError(f"expected [T x {self.win // 2 + 1}] magnitudes, got {self.mag.shape}")
        if np.any(self.mag < 0):
            raise ValueError("spectrogram magnitudes must be non-negative")

    @property
    def n_frames(self):
        return self.mag.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-5

    @property
    def stats_id(self):
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.mean, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.std, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class NormalizedFeatures:
    feat: np.ndarray
    stats_id: str


def _as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def _reflect_index(n_samples: int) -> np.ndarray:
    """Source sample of every position in the reflect-padded signal."""
    return np.pad(np.arange(n_samples), WIN // 2, mode="reflect")


def _overlap_add(spec: np.ndarray, n_samples: int) -> np.ndarray:
    """Least-squares inverse of the centred STFT for a signal of ``n_samples``.

    The adjoint of reflect padding folds every padded position back onto its
    source sample; the normal operator stays diagonal, so this is the exact
    orthogonal projection onto consistent spectrograms.
    """
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=WIN, axis=1) * _WINDOW
    length = (n_frames - 1) * HOP + WIN
    acc = np.zeros(length)
    norm = np.zeros(length)
    win_sq = _WINDOW**2
    for t in range(n_frames):
        acc[t * HOP : t * HOP + WIN] += frames[t]
        norm[t * HOP : t * HOP + WIN] += win_sq
    idx = _reflect_index(n_samples)[:length]
    num = np.bincount(idx, weights=acc, minlength=n_samples)
    den = np.bincount(idx, weights=norm, minlength=n_samples)
    out = np.zeros(n_samples)
    nz = den > 1e-10
    out[nz] = num[nz] / den[nz]
    return out


def stft_complex(w) -> np.ndarray:
    """Complex STFT [T x 257] with centered reflect padding."""
    x = _as_samples(w)
    if x.size == 0:
        raise ValueError("cannot analyse an empty waveform")
    n_frames = len(x) // HOP + 1
    padded = np.pad(x, WIN // 2, mode="reflect")
    frames = sliding_window_view(padded, WIN)[::HOP][:n_frames]
    return np.fft.rfft(frames * _WINDOW, axis=1)


def stft(w) -> Spectrogram:
    spec = stft_complex(w)
    return Spectrogram(np.abs(spec), phase=np.angle(spec))


def istft(spec: np.ndarray, length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft_complex`; ``length`` defaults to ``(T - 1) * HOP``."""
    if length is None:
        length = (spec.shape[0] - 1) * HOP
    if length // HOP + 1 != spec.shape[0]:
        raise ShapeError(f"{spec.shape[0]} frames cannot come from {length} samples")
    return _overlap_add(spec, length)


# ---------------------------------------------------------------------------
# normalization


def compute_norm_stats(spectrograms: Iterable[Spectrogram], eps: float = 1e-5) -> NormStats:
    """Per-bin mean/std of ``log1p(mag)`` pooled over every frame of the training split."""
    logs = [np.log1p(s.mag) for s in spectrograms]
    if not logs:
        raise ValueError("need at least one spectrogram to compute statistics")
    stacked = np.concatenate(logs, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), eps)
    return NormStats(mean=mean, std=std, eps=eps)


def _check_stats(width: int, stats: NormStats):
    if stats.mean.shape != (width,) or stats.std.shape != (width,):
        raise ShapeError(f"stats of width {stats.mean.shape} do not match features of width {width}")


def normalize(s: Spectrogram, stats: NormStats) -> NormalizedFeatures:
    _check_stats(s.mag.shape[1], stats)
    feat = (np.log1p(s.mag) - stats.mean) / stats.std
    return NormalizedFeatures(feat=feat, stats_id=stats.stats_id)


def denormalize(f: NormalizedFeatures | np.ndarray, stats: NormStats) -> Spectrogram:
    feat = f.feat if isinstance(f, NormalizedFeatures) else np.asarray(f, dtype=np.float64)
    _check_stats(feat.shape[1], stats)
    mag = np.expm1(feat * stats.std + stats.mean)
    return Spectrogram(np.maximum(mag, 0.0))


# ---------------------------------------------------------------------------
# noise and mixing


def power(x) -> float:
    x = _as_samples(x)
    return float(np.mean(x * x))


def mix_at_snr(clean, noise, snr_db: float, offset: int | None = None, rng=None) -> Waveform:
    """Add ``noise`` to ``clean`` scaled to the requested SNR.

    The noise is cropped to the clean length starting at ``offset`` (drawn
    from ``rng`` when not given, otherwise 0). The mixture is not rescaled;
    samples beyond [-1, 1] are counted in ``meta["n_clipped"]``.
    """
    c = _as_samples(clean)
    n = _as_samples(noise)
    if len(n) < len(c):
        raise ValueError(f"noise ({len(n)} samples) shorter than clean ({len(c)} samples)")
    if offset is None:
        offset = int(rng.integers(0, len(n) - len(c) + 1)) if rng is not None else 0
    seg = n[offset : offset + len(c)]
    p_clean, p_noise = power(c), power(seg)
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise ValueError("clean and noise must both have non-zero power")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = c + scale * seg
    rate = clean.rate_hz if isinstance(clean, Waveform) else SAMPLE_RATE
    meta = {
        "snr_db": float(snr_db),
        "noise_scale": float(scale),
        "noise_offset": offset,
        "n_clipped": int(np.count_nonzero(np.abs(mixed) > 1.0)),
    }
    return Waveform(mixed, rate, meta)


def _lowpass(x, cutoff, order=4):
    sos = signal.butter(order, cutoff, btype="low", fs=SAMPLE_RATE, output="sos")
    return signal.sosfilt(sos, x)


def _vehicular(rng, n):
    rumble = _lowpass(rng.standard_normal(n), 250.0)
    hiss = _lowpass(rng.standard_normal(n), 2000.0, order=2)
    return rumble + 0.03 * hiss


def _engine(rng, n):
    t = np.arange(n) / SAMPLE_RATE
    f_rot = rng.uniform(25.0, 45.0)
    out = np.zeros(n)
    for h in range(1, 41):
        out += h**-0.7 * np.cos(2 * np.pi * h * f_rot * t + rng.uniform(0, 2 * np.pi))
    am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    out *= am
    return out / np.std(out) + 0.2 * _lowpass(rng.standard_normal(n), 1500.0)


def _street(rng, n):
    bed = signal.sosfilt(
        signal.butter(1, 100.0, btype="high", fs=SAMPLE_RATE, output="sos"), rng.standard_normal(n)
    )
    n_events = rng.poisson(3.0 * n / SAMPLE_RATE)
    decay = np.exp(-np.arange(int(0.02 * SAMPLE_RATE) * 5) / (0.02 * SAMPLE_RATE))
    for start in rng.integers(0, n, size=n_events):
        burst = rng.standard_normal(len(decay)) * decay * rng.uniform(2.0, 4.0)
        stop = min(n, start + len(burst))
        bed[start:stop] += burst[: stop - start]
    return bed


def _babble(rng, n):
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(6):
        f0 = rng.uniform(90.0, 250.0) * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
        phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
        src = np.zeros(n)
        for h in range(1, int(4000 // f0.max()) + 1):
            src += np.cos(h * phase)
        voice = np.zeros(n)
        for fc in (rng.uniform(300, 900), rng.uniform(900, 2500)):
            b, a = signal.iirpeak(fc, 4.0, fs=SAMPLE_RATE)
            voice += signal.lfilter(b, a, src)
        syll = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi)))
        out += voice * syll
    return _lowpass(out, 4000.0)


_GENERATORS = {"vehicular": _vehicular, "engine": _engine, "street": _street, "babble": _babble}


def noise_generator(kind: str, seed: int, length: int) -> Waveform:
    """Deterministic parametric noise, normalized to an RMS of 0.1."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng([int(seed), NOISE_KINDS.index(kind)])
    x = _GENERATORS[kind](rng, int(length))
    rms = np.sqrt(np.mean(x * x))
    if rms > 0:
        x = x * (0.1 / rms)
    return Waveform(x, SAMPLE_RATE, {"kind": kind, "seed": int(seed)})


# ---------------------------------------------------------------------------
# phase reconstruction


def _unit(z: np.ndarray) -> np.ndarray:
    mag = np.abs(z)
    out = np.ones_like(z)
    nz = mag > 0
    out[nz] = z[nz] / mag[nz]
    return out


def griffin_lim(mag, iters: int = 32, momentum: float = 0.99, seed: int = 0, return_errors: bool = False):
    """Fast Griffin-Lim reconstruction of a waveform from STFT magnitudes.

    Iterates ``c_k = P_C(P_M(t_{k-1}))`` and ``t_k = c_k + momentum * (c_k - c_{k-1})``
    where ``P_M`` imposes the target magnitude and ``P_C`` is the least-squares
    STFT inverse followed by re-analysis. Output has ``(T - 1) * HOP`` samples.
    ``momentum=0`` is plain Griffin-Lim.

    With ``return_errors`` also returns ``|| |c_k| - mag ||`` per iteration.
    """
    m = mag.mag if isinstance(mag, Spectrogram) else np.asarray(mag, dtype=np.float64)
    if np.isnan(m).any():
        raise ValueError("magnitude contains NaN")
    if np.any(m < 0):
        raise ValueError("magnitude must be non-negative")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n_samples = (m.shape[0] - 1) * HOP
    if n_samples == 0:
        out = Waveform(np.zeros(0))
        return (out, []) if return_errors else out
    rng = np.random.default_rng(seed)
    t_k = m * np.exp(2j * np.pi * rng.random(m.shape))
    c_prev = None
    errors = []
    x = None
    for _ in range(iters):
        x = _overlap_add(m * _unit(t_k), n_samples)
        c = stft_complex(x)
        errors.append(float(np.linalg.norm(np.abs(c) - m)))
        t_k = c if c_prev is None else c + momentum * (c - c_prev)
        c_prev = c
    if return_errors:
        return Waveform(x), errors
    return Waveform(x)


def spectral_error(w, mag) -> float:
    """Relative L2 distance between ``|STFT(w)|`` and a target magnitude."""
    m = mag.mag if isinstance(mag, Spectrogram) else np.asarray(mag)
    got = stft(w).mag
    n = min(len(got), len(m))
    return float(np.linalg.norm(got[:n] - m[:n]) / np.linalg.norm(m[:n]))


# ---------------------------------------------------------------------------
# spectrogram container

_SPEC_MAGIC = b"EPGSPEC\x00"
_SPEC_VERSION = 1
_SPEC_HEADER = struct.Struct("<8sHIIHHI")


def save_spectrogram(s: Spectrogram, path) -> None:
    """Little-endian container: magic, version, T, bins, hop, win, rate, then float32 data."""
    header = _SPEC_HEADER.pack(_SPEC_MAGIC, _SPEC_VERSION, s.mag.shape[0], s.mag.shape[1], s.hop, s.win, s.rate_hz)
    Path(path).write_bytes(header + s.mag.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _SPEC_HEADER.size:
        raise FormatError(f"{path}: truncated spectrogram header")
    magic, version, t, bins, hop, win, rate = _SPEC_HEADER.unpack_from(raw)
    if magic != _SPEC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _SPEC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SPEC_HEADER.size)
    if data.size != t * bins:
        raise FormatError(f"{path}: expected {t * bins} values, found {data.size}")
    return Spectrogram(data.reshape(t, bins).astype(np.float64), hop=hop, win=win, rate_hz=rate)


def band_energy(x, lo_hz: float, hi_hz: float) -> float:
    spec = np.abs(np.fft.rfft(_as_samples(x))) ** 2
    freqs = np.fft.rfftfreq(len(_as_samples(x)), 1.0 / SAMPLE_RATE)
    sel = (freqs >= lo_hz) & (freqs < hi_hz)
    return float(spec[sel].sum())


def spectral_centroid(x) -> float:
    spec = np.abs(np.fft.rfft(_as_samples(x))) ** 2
    freqs = np.fft.rfftfreq(len(_as_samples(x)), 1.0 / SAMPLE_RATE)
    return float((freqs * spec).sum() / spec.sum())


def frames_for_length(n_samples: int) -> int:
    return n_samples // HOP + 1
