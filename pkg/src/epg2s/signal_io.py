"""EPG/audio ingestion, corpus assembly and the synthetic corpus generator.

On-disk formats
---------------
EPG files are UTF-8 comma-separated text::

    rate_hz=100.0
    e1,e2,...,e124
    0,1,...,0          <- one row per palatogram frame

Audio is 16-bit PCM mono WAV at 16 kHz. A manifest is a CSV of
``id,epg_path,wav_path`` rows (an optional header row is skipped);
relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import SAMPLE_RATE, Waveform
from .errors import FormatError, ManifestError, ShapeError

N_ELECTRODES = 124
DEFAULT_EPG_RATE = 100.0
DURATION_TOLERANCE_S = 0.05
OUTPUT_GAIN = 0.05
DEFAULT_SPLIT = (222 / 319, 27 / 319, 70 / 319)


@dataclass
class EpgSequence:
    frames: np.ndarray
    rate_hz: float = DEFAULT_EPG_RATE

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[1] != N_ELECTRODES:
            raise ShapeError(f"EPG must be [T x {N_ELECTRODES}], got {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError("EPG sequence must contain at least one frame")
        if not np.isin(frames, (0, 1)).all():
            raise ValueError("EPG contacts must be 0 or 1")
        self.frames = frames.astype(np.uint8)

    @property
    def duration_s(self):
        return self.frames.shape[0] / self.rate_hz


@dataclass
class UtterancePair:
    id: str
    epg: EpgSequence
    clean: Waveform
    metadata: dict = field(default_factory=dict)

    def check_durations(self, tolerance_s: float = DURATION_TOLERANCE_S):
        gap = abs(self.epg.duration_s - self.clean.duration_s)
        if gap > tolerance_s:
            raise ValueError(
                f"utterance {self.id!r}: EPG lasts {self.epg.duration_s:.3f}s but audio "
                f"{self.clean.duration_s:.3f}s (tolerance {tolerance_s}s)"
            )


@dataclass(frozen=True)
class Corpus:
    train: tuple
    validation: tuple
    test: tuple
    norm_stats: dsp.NormStats
    info: dict = field(default_factory=dict, compare=False)

    def all_ids(self):
        return [u.id for u in (*self.train, *self.validation, *self.test)]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic EPG/speech corpus.

    Each of ``n_states`` articulation states owns a palatogram template and a
    spectral envelope; utterances are random state sequences.
    """

    seed: int = 0
    n_utterances: int = 32
    duration_s: tuple = (1.0, 1.5)
    n_states: int = 6
    flip_prob: float = 0.01
    f0_range: tuple = (100.0, 140.0)
    state_duration_s: tuple = (0.12, 0.3)
    epg_rate_hz: float = DEFAULT_EPG_RATE
    split: tuple = DEFAULT_SPLIT


# ---------------------------------------------------------------------------
# files


def save_epg_file(epg: EpgSequence, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"rate_hz={epg.rate_hz!r}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"e{i + 1}" for i in range(N_ELECTRODES)])
        writer.writerows(epg.frames.tolist())


def load_epg_file(path, rate_hz: float | None = None) -> EpgSequence:
    """Read an EPG file; ``rate_hz`` is used only when the header lacks one."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty EPG file")
    rate = rate_hz if rate_hz is not None else DEFAULT_EPG_RATE
    if lines[0].startswith("rate_hz="):
        try:
            rate = float(lines[0].split("=", 1)[1])
        except ValueError as exc:
            raise FormatError(f"{path}: bad rate header {lines[0]!r}") from exc
        lines = lines[1:]
    if not lines:
        raise FormatError(f"{path}: missing electrode header")
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    if len(header) != N_ELECTRODES:
        raise FormatError(f"{path}: header has {len(header)} columns, expected {N_ELECTRODES}")
    if not body:
        raise FormatError(f"{path}: no EPG frames")
    frames = np.zeros((len(body), N_ELECTRODES), dtype=np.uint8)
    for r, row in enumerate(body):
        if len(row) != N_ELECTRODES:
            raise FormatError(f"{path}: row {r + 1} has {len(row)} columns, expected {N_ELECTRODES}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ValueError(f"{path}: non-binary value {cell!r} at row {r + 1}, column {c + 1} ({header[c]})")
            frames[r, c] = cell == "1"
    return EpgSequence(frames, rate)


def load_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono audio, found {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, found {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {fh.getframerate()} Hz")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE)


def save_wav(w: Waveform, path) -> None:
    if w.rate_hz != SAMPLE_RATE:
        raise FormatError(f"can only write {SAMPLE_RATE} Hz audio, got {w.rate_hz}")
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# alignment and splitting


def align_epg_to_frames(epg: EpgSequence, n_frames: int, frame_rate_hz: float = dsp.FRAME_RATE) -> np.ndarray:
    """Nearest-row resampling of the EPG onto spectral frame times.

    Frame ``t`` sits at ``t / frame_rate_hz``; it takes the EPG row closest in
    time (the earlier row on exact ties) and holds the first/last row beyond
    the recording.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    pos = np.arange(n_frames) * (epg.rate_hz / frame_rate_hz)
    idx = np.clip(np.ceil(pos - 0.5), 0, epg.frames.shape[0] - 1).astype(int)
    return epg.frames[idx]


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    """Floor the validation and test shares; training takes the remainder."""
    total = float(sum(ratios))
    n_val = int(np.floor(n * ratios[1] / total + 1e-9))
    n_test = int(np.floor(n * ratios[2] / total + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _split(pairs, ratios, seed):
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train, n_val, _ = split_sizes(len(pairs), ratios)
    shuffled = [pairs[i] for i in order]
    return (
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train : n_train + n_val]),
        tuple(shuffled[n_train + n_val :]),
    )


def _assemble(pairs, ratios, seed, info=None) -> Corpus:
    train, val, test = _split(pairs, ratios, seed)
    if not train:
        raise ValueError("training split is empty")
    stats = dsp.compute_norm_stats(dsp.stft(u.clean) for u in train)
    return Corpus(train, val, test, stats, info or {})


def read_manifest(manifest_path) -> list[tuple[str, Path, Path]]:
    base = Path(manifest_path).parent
    entries, seen = [], set()
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip() for c in row] == ["id", "epg_path", "wav_path"]:
                continue
            if len(row) != 3:
                raise ManifestError(f"{manifest_path}:{lineno}: expected id,epg_path,wav_path")
            uid, epg_path, wav_path = (c.strip() for c in row)
            if uid in seen:
                raise ManifestError(f"{manifest_path}:{lineno}: duplicate id {uid!r}")
            seen.add(uid)
            entries.append((uid, base / epg_path, base / wav_path))
    return entries


def build_corpus(
    manifest_path,
    split_ratios=DEFAULT_SPLIT,
    seed: int = 0,
    epg_rate_hz: float | None = None,
    tolerance_s: float = DURATION_TOLERANCE_S,
) -> Corpus:
    pairs = []
    for uid, epg_path, wav_path in read_manifest(manifest_path):
        try:
            epg = load_epg_file(epg_path, epg_rate_hz)
            clean = load_wav(wav_path)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"utterance {uid!r}: {exc}") from exc
        pair = UtterancePair(uid, epg, clean)
        pair.check_durations(tolerance_s)
        pairs.append(pair)
    return _assemble(pairs, split_ratios, seed, {"manifest": str(manifest_path)})


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write every utterance as EPG text + WAV and return the manifest path."""
    out = Path(out_dir)
    (out / "epg").mkdir(parents=True, exist_ok=True)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "epg_path", "wav_path"])
        for u in sorted((*corpus.train, *corpus.validation, *corpus.test), key=lambda u: u.id):
            save_epg_file(u.epg, out / "epg" / f"{u.id}.csv")
            save_wav(u.clean, out / "wav" / f"{u.id}.wav")
            writer.writerow([u.id, f"epg/{u.id}.csv", f"wav/{u.id}.wav"])
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpus


def _state_tables(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.seed, 0])
    templates = (rng.random((spec.n_states, N_ELECTRODES)) < 0.35).astype(np.uint8)
    freqs = np.linspace(0.0, SAMPLE_RATE / 2, 1025)
    envelopes = []
    for k in range(spec.n_states):
        if k % 3 != 2:
            formants = [rng.uniform(250, 900), rng.uniform(900, 2400), rng.uniform(2400, 3800)]
            bandwidths = [rng.uniform(60, 150), rng.uniform(90, 200), rng.uniform(150, 300)]
            env = sum(
                1.0 / (1.0 + ((freqs - fc) / bw) ** 2) * g
                for fc, bw, g in zip(formants, bandwidths, (1.0, 0.5, 0.25))
            )
            env = env + 0.01
        else:
            # sibilant-like: energy above a random cutoff
            cut = rng.uniform(2500, 5000)
            env = 0.3 / (1.0 + np.exp(-(freqs - cut) / 300.0)) + 0.01
        envelopes.append(env * 10 ** (rng.uniform(-12, 0) / 20))
    return templates, np.array(envelopes), freqs


def synth_templates(spec: SyntheticSpec) -> np.ndarray:
    """The per-state palatogram templates used by :func:`synth_corpus`."""
    return _state_tables(spec)[0]


def _filter(x: np.ndarray, env: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Zero-phase filtering by the sampled magnitude response ``env``."""
    n_fft = int(2 ** np.ceil(np.log2(len(x) + 4096)))
    gains = np.interp(np.fft.rfftfreq(n_fft, 1.0 / SAMPLE_RATE), freqs, env)
    return np.fft.irfft(np.fft.rfft(x, n_fft) * gains, n_fft)[: len(x)]


def _synth_utterance(spec, k, rng, templates, envelopes, freqs):
    n = int(round(rng.uniform(*spec.duration_s) * SAMPLE_RATE))
    bounds, states = [0], []
    while bounds[-1] < n:
        choices = [s for s in range(spec.n_states) if not states or s != states[-1]]
        states.append(int(rng.choice(choices)))
        bounds.append(bounds[-1] + int(rng.uniform(*spec.state_duration_s) * SAMPLE_RATE))
    bounds[-1] = n
    # sample-level state weights with 20 ms linear crossfades centred on boundaries
    fade = int(0.02 * SAMPLE_RATE)
    weights = np.zeros((spec.n_states, n))
    for i, s in enumerate(states):
        lo, hi = bounds[i], bounds[i + 1]
        w = np.zeros(n)
        w[lo:hi] = 1.0
        if i > 0:
            ramp_lo, ramp_hi = max(0, lo - fade // 2), min(n, lo + fade // 2)
            w[ramp_lo:ramp_hi] = np.linspace(0.0, 1.0, ramp_hi - ramp_lo, endpoint=False)
        if i < len(states) - 1:
            ramp_lo, ramp_hi = max(0, hi - fade // 2), min(n, hi + fade // 2)
            w[ramp_lo:ramp_hi] = np.linspace(1.0, 0.0, ramp_hi - ramp_lo, endpoint=False)
        weights[s] += w
    f0 = rng.uniform(*spec.f0_range)
    phase = 2 * np.pi * f0 * np.arange(n) / SAMPLE_RATE
    harmonic = np.zeros(n)
    for h in range(1, int(7800 // f0) + 1):
        harmonic += np.cos(h * phase)
    audio = np.zeros(n)
    for s in sorted(set(states)):
        audio += weights[s] * _filter(harmonic, envelopes[s], freqs)
    audio *= OUTPUT_GAIN

    n_epg = max(1, int(round(n / SAMPLE_RATE * spec.epg_rate_hz)))
    epg_times = np.arange(n_epg) / spec.epg_rate_hz
    sample_idx = np.minimum((epg_times * SAMPLE_RATE).astype(int), n - 1)
    state_seq = np.argmax(weights[:, sample_idx], axis=0)
    frames = templates[state_seq].copy()
    flips = rng.random(frames.shape) < spec.flip_prob
    frames[flips] ^= 1
    return UtterancePair(
        id=f"syn{k:04d}",
        epg=EpgSequence(frames, spec.epg_rate_hz),
        clean=Waveform(audio, SAMPLE_RATE),
        metadata={"states": state_seq, "f0": float(f0), "speaker": "synthetic"},
    )


def synth_corpus(spec: SyntheticSpec) -> Corpus:
    """Build a corpus whose EPG-to-spectrum mapping is known by construction."""
    if spec.n_states < 2:
        raise ValueError("need at least two articulation states")
    templates, envelopes, freqs = _state_tables(spec)
    pairs = []
    for k in range(spec.n_utterances):
        rng = np.random.default_rng([spec.seed, 1, k])
        pairs.append(_synth_utterance(spec, k, rng, templates, envelopes, freqs))
    return _assemble(pairs, spec.split, spec.seed, {"templates": templates, "spec": spec})

