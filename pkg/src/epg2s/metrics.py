"""Objective speech metrics and significance testing.

STOI and ESTOI follow the original 10 kHz, one-third-octave formulation.
MCD compares mel cepstra of paired STFT frames. SSNR is the usual clamped
segmental SNR. PESQ is reached only through an external executable.
"""

from __future__ import annotations

import csv
import io
import math
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats
from scipy.fft import dct

from . import dsp
from .errors import AdapterError, MetricError, ShapeError

EPS = np.finfo(np.float64).eps

# STOI constants
STOI_RATE = 10_000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0

# MCD constants
MCD_FILTERS = 26
MCD_ORDER = 13
MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)

# SSNR constants
SSNR_SEGMENT = 512
SSNR_SHIFT = 256
SSNR_FLOOR_DB = -10.0
SSNR_CEIL_DB = 35.0
SSNR_SILENCE_DB = 40.0

METRIC_ORDER = ("pesq", "stoi", "estoi", "mcd_noisy", "mcd_clean", "mcd", "ssnr")
TAG_ORDER = ("condition", "variant", "combo", "snr_db")


def _pair(ref, deg) -> tuple[np.ndarray, np.ndarray]:
    for w in (ref, deg):
        rate = getattr(w, "rate_hz", dsp.SAMPLE_RATE)
        if rate != dsp.SAMPLE_RATE:
            raise ShapeError(f"metrics expect {dsp.SAMPLE_RATE} Hz audio, got {rate}")
    x = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    y = np.asarray(getattr(deg, "samples", deg), dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeError("metrics expect 1-D waveforms")
    n = min(len(x), len(y))
    return x[:n], y[:n]


# ---------------------------------------------------------------------------
# STOI / ESTOI


def _third_octave_matrix():
    freqs = np.linspace(0, STOI_RATE, STOI_NFFT + 1)[: STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS)
    lo = STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    hi = STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((STOI_BANDS, len(freqs)))
    for i in range(STOI_BANDS):
        a = int(np.argmin(np.abs(freqs - lo[i])))
        b = int(np.argmin(np.abs(freqs - hi[i])))
        obm[i, a:b] = 1.0
    return obm


_OBM = _third_octave_matrix()
_HANN = np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x, hop):
    starts = range(0, len(x) - STOI_FRAME, hop)
    if len(starts) == 0:
        return np.zeros((0, STOI_FRAME))
    return np.stack([x[s : s + STOI_FRAME] for s in starts]) * _HANN


def _drop_silence(x, y):
    """Energy VAD on the reference; rebuilds both signals from kept frames."""
    hop = STOI_FRAME // 2
    xf, yf = _frames(x, hop), _frames(y, hop)
    if len(xf) == 0:
        raise MetricError("signal shorter than one analysis frame")
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE
    if not np.any(np.linalg.norm(xf, axis=1) > 0):
        raise MetricError("reference is silent")
    xf, yf = xf[keep], yf[keep]
    n = (len(xf) - 1) * hop + STOI_FRAME
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(len(xf)):
        xs[i * hop : i * hop + STOI_FRAME] += xf[i]
        ys[i * hop : i * hop + STOI_FRAME] += yf[i]
    return xs, ys


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x, STOI_FRAME // 2), n=STOI_NFFT, axis=1)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _segments(ref, deg):
    x, y = _pair(ref, deg)
    x = signal.resample_poly(x, 5, 8)
    y = signal.resample_poly(y, 5, 8)
    x, y = _drop_silence(x, y)
    xt, yt = _band_envelopes(x), _band_envelopes(y)
    n = xt.shape[1]
    if n < STOI_SEGMENT:
        raise MetricError(f"only {n} speech-active frames; {STOI_SEGMENT} needed")
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n - STOI_SEGMENT + 1)[:, None]
    # (segments, bands, frames)
    return xt[:, idx].transpose(1, 0, 2), yt[:, idx].transpose(1, 0, 2)


def _centre_scale(a, axis):
    a = a - a.mean(axis=axis, keepdims=True)
    return a / (np.linalg.norm(a, axis=axis, keepdims=True) + EPS)


def stoi(ref, deg) -> float:
    """Short-time objective intelligibility of ``deg`` against ``ref``."""
    xs, ys = _segments(ref, deg)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    clip = 10 ** (-STOI_BETA / 20)
    yp = np.minimum(ys * scale, xs * (1 + clip))
    return float(np.mean(np.sum(_centre_scale(xs, 2) * _centre_scale(yp, 2), axis=2)))


def estoi(ref, deg) -> float:
    """Extended STOI: spectral correlation after row then column normalisation."""
    xs, ys = _segments(ref, deg)
    xn = _centre_scale(_centre_scale(xs, 2), 1)
    yn = _centre_scale(_centre_scale(ys, 2), 1)
    return float(np.mean(np.sum(xn * yn, axis=1)))


# ---------------------------------------------------------------------------
# MCD


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int = MCD_FILTERS, n_bins: int = dsp.N_BINS, rate_hz: int = dsp.SAMPLE_RATE):
    """Triangular filters equally spaced on the mel scale, shape (n_filters, n_bins)."""
    freqs = np.linspace(0, rate_hz / 2, n_bins)
    edges = _mel_to_hz(np.linspace(0, _hz_to_mel(rate_hz / 2), n_filters + 2))
    bank = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, mid, hi = edges[i : i + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return bank


_MEL = mel_filterbank()


def mel_cepstra(mag: np.ndarray) -> np.ndarray:
    """Cepstra c0..c12 per frame from a [T x 257] magnitude spectrogram."""
    mel = np.asarray(mag, dtype=np.float64) @ _MEL.T
    return dct(np.log(np.maximum(mel, 1e-12)), type=2, norm="ortho", axis=1)[:, :MCD_ORDER]


def mcd(ref, deg) -> float:
    """Mean mel cepstral distortion in dB over paired frames, c0 excluded."""
    a = _as_mag(ref)
    b = _as_mag(deg)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"frame counts differ: {a.shape[0]} vs {b.shape[0]}")
    diff = mel_cepstra(a)[:, 1:] - mel_cepstra(b)[:, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(np.sum(diff**2, axis=1))))


def _as_mag(x) -> np.ndarray:
    if isinstance(x, dsp.Spectrogram):
        return x.mag
    samples = getattr(x, "samples", x)
    return dsp.stft(np.asarray(samples, dtype=np.float64)).mag


# ---------------------------------------------------------------------------
# SSNR


def ssnr(ref, deg) -> float:
    """Segmental SNR over 32 ms segments with 16 ms shift, clamped to [-10, 35] dB."""
    x, y = _pair(ref, deg)
    if len(x) < SSNR_SEGMENT:
        starts = [0]
    else:
        starts = range(0, len(x) - SSNR_SEGMENT + 1, SSNR_SHIFT)
    sig = np.array([np.sum(x[s : s + SSNR_SEGMENT] ** 2) for s in starts])
    err = np.array([np.sum((x[s : s + SSNR_SEGMENT] - y[s : s + SSNR_SEGMENT]) ** 2) for s in starts])
    if sig.max() <= 0:
        raise MetricError("reference is silent")
    active = sig > sig.max() * 10 ** (-SSNR_SILENCE_DB / 10)
    with np.errstate(divide="ignore"):
        seg = 10 * np.log10(sig[active] / err[active])
    return float(np.mean(np.clip(seg, SSNR_FLOOR_DB, SSNR_CEIL_DB)))


# ---------------------------------------------------------------------------
# Welch t-test


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch(a, b) -> WelchResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise MetricError("each sample needs at least two values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("samples must be finite")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0:
        raise MetricError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return WelchResult(float(t), float(df), float(min(p, 1.0)))


def welch_ttest(a, b) -> float:
    return welch(a, b).p


# ---------------------------------------------------------------------------
# PESQ adapter


class Unavailable:
    """Returned when the external PESQ tool cannot be found."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNAVAILABLE"

    def __bool__(self):
        return False


UNAVAILABLE = Unavailable()


def pesq_external(ref_path, deg_path, tool_cmd, timeout: float = 120.0):
    """Run ``tool_cmd ref deg`` and parse the number on its last output line."""
    if not tool_cmd:
        return UNAVAILABLE
    argv = shlex.split(tool_cmd) if isinstance(tool_cmd, str) else list(tool_cmd)
    if shutil.which(argv[0]) is None:
        return UNAVAILABLE
    try:
        done = subprocess.run(
            argv + [str(ref_path), str(deg_path)], capture_output=True, text=True, timeout=timeout
        )
    except FileNotFoundError:
        return UNAVAILABLE
    except subprocess.TimeoutExpired as exc:
        raise AdapterError(f"PESQ tool timed out after {timeout}s") from exc
    lines = [ln.strip() for ln in done.stdout.splitlines() if ln.strip()]
    if done.returncode != 0 or not lines:
        raise AdapterError(f"PESQ tool failed (exit {done.returncode}): {done.stderr.strip()[:200]}")
    try:
        value = float(lines[-1])
    except ValueError:
        raise AdapterError(f"PESQ tool printed non-numeric output: {lines[-1][:80]!r}") from None
    if not math.isfinite(value):
        raise AdapterError(f"PESQ tool printed {value}")
    return value


# ---------------------------------------------------------------------------
# reports

_RANGES = {
    "stoi": (-1.0, 1.0),
    "estoi": (-1.0, 1.0),
    "mcd": (0.0, math.inf),
    "mcd_noisy": (0.0, math.inf),
    "mcd_clean": (0.0, math.inf),
    "ssnr": (SSNR_FLOOR_DB, SSNR_CEIL_DB),
}


@dataclass(frozen=True)
class MetricRecord:
    uid: str
    tags: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            lo, hi = _RANGES.get(name, (-math.inf, math.inf))
            if not (lo - 1e-9 <= v <= hi + 1e-9):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}] for {self.uid}")


def _ordered(keys, preferred):
    keys = set(keys)
    return [k for k in preferred if k in keys] + sorted(keys - set(preferred))


@dataclass
class MetricReport:
    """Per-utterance metric values, one record per (utterance, condition)."""

    records: list = field(default_factory=list)

    def add(self, uid: str, tags: dict, values: dict) -> None:
        self.records.append(MetricRecord(uid, dict(tags), dict(values)))

    def select(self, **tags) -> list:
        return [r for r in self.records if all(str(r.tags.get(k)) == str(v) for k, v in tags.items())]

    def values(self, metric: str, **tags) -> list:
        rows = sorted(self.select(**tags), key=lambda r: r.uid)
        return [r.values[metric] for r in rows if metric in r.values]

    def columns(self):
        tags = _ordered({k for r in self.records for k in r.tags}, TAG_ORDER)
        metrics = _ordered({k for r in self.records for k in r.values}, METRIC_ORDER)
        return tags, metrics

    def to_delimited(self, delimiter: str = ",") -> str:
        tags, metrics = self.columns()
        out = io.StringIO()
        w = csv.writer(out, delimiter=delimiter, lineterminator="\n")
        w.writerow(["id", *tags, *metrics])
        for r in sorted(self.records, key=lambda r: (tuple(str(r.tags.get(t, "")) for t in tags), r.uid)):
            w.writerow(
                [r.uid]
                + [r.tags.get(t, "") for t in tags]
                + [repr(float(r.values[m])) if m in r.values else "" for m in metrics]
            )
        return out.getvalue()

    @classmethod
    def from_delimited(cls, text: str, delimiter: str = ",") -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text), delimiter=delimiter))
        if not rows:
            return cls()
        header = rows[0]
        metric_cols = {i for i, h in enumerate(header) if h in _RANGES or h == "pesq"}
        report = cls()
        for row in rows[1:]:
            tags, values = {}, {}
            for i, h in enumerate(header[1:], start=1):
                if i in metric_cols:
                    if row[i] != "":
                        values[h] = float(row[i])
                elif row[i] != "":
                    tags[h] = row[i]
            report.add(row[0], tags, values)
        return report


def evaluate_pair(ref, deg, metrics=("stoi", "estoi", "mcd", "ssnr")) -> dict:
    """Compute the named metrics for one reference/degraded pair."""
    fns = {"stoi": stoi, "estoi": estoi, "mcd": mcd, "ssnr": ssnr}
    x, y = _pair(ref, deg)
    return {m: fns[m](x, y) for m in metrics}
