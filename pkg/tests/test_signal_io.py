import wave
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from epg2s import dsp, signal_io
from epg2s.errors import FormatError, ManifestError, ShapeError
from epg2s.signal_io import EpgSequence, SyntheticSpec


def nearest_row(t, n_rows, epg_rate, frame_rate=100):
    """Exact-arithmetic oracle: the EPG row nearest frame t, earlier on ties."""
    pos = Fraction(t) * Fraction(epg_rate).limit_denominator() / Fraction(frame_rate)
    lo = pos.numerator // pos.denominator
    idx = lo if pos - lo <= Fraction(1, 2) else lo + 1
    return min(max(idx, 0), n_rows - 1)


binary_frames = hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.just(124)), elements=st.integers(0, 1))


@given(binary_frames, st.sampled_from([100.0, 200.0, 62.5]))
def test_epg_file_round_trip(tmp_path_factory, frames, rate):
    path = tmp_path_factory.mktemp("epg") / "x.csv"
    signal_io.save_epg_file(EpgSequence(frames, rate), path)
    back = signal_io.load_epg_file(path)
    assert back.rate_hz == rate
    assert np.array_equal(back.frames, frames)


def test_epg_file_layout(tmp_path):
    path = tmp_path / "x.csv"
    signal_io.save_epg_file(EpgSequence(np.eye(124, dtype=np.uint8)[:3]), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "rate_hz=100.0"
    assert lines[1].split(",")[:2] == ["e1", "e2"] and len(lines[1].split(",")) == 124
    assert len(lines) == 5


def test_epg_wrong_column_count(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("rate_hz=100\n" + ",".join(f"e{i}" for i in range(123)) + "\n" + ",".join("0" * 123) + "\n")
    with pytest.raises(FormatError):
        signal_io.load_epg_file(path)


def test_epg_non_binary_cell_names_location(tmp_path):
    path = tmp_path / "x.csv"
    row = ["0"] * 124
    row[6] = "2"
    path.write_text("rate_hz=100\n" + ",".join(f"e{i + 1}" for i in range(124)) + "\n" + ",".join(["0"] * 124) + "\n" + ",".join(row) + "\n")
    with pytest.raises(ValueError, match=r"row 2, column 7"):
        signal_io.load_epg_file(path)


def test_epg_sequence_validation():
    with pytest.raises(ShapeError):
        EpgSequence(np.zeros((3, 10)))
    with pytest.raises(ValueError):
        EpgSequence(np.full((3, 124), 2))


@given(hnp.arrays(np.float64, st.integers(1, 400), elements=st.floats(-1.0, 32767 / 32768)))
def test_wav_round_trip_within_quantisation(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("wav") / "x.wav"
    signal_io.save_wav(dsp.Waveform(x), path)
    back = signal_io.load_wav(path)
    assert back.rate_hz == 16000
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768 + 1e-12


def test_wav_clips_out_of_range(tmp_path):
    path = tmp_path / "x.wav"
    signal_io.save_wav(dsp.Waveform(np.array([2.0, -2.0, 0.0])), path)
    assert np.allclose(signal_io.load_wav(path).samples, [32767 / 32768, -1.0, 0.0])


@pytest.mark.parametrize("channels,width,rate", [(2, 2, 16000), (1, 1, 16000), (1, 2, 44100)])
def test_wav_rejects_other_formats(tmp_path, channels, width, rate):
    path = tmp_path / "x.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(b"\x00" * (channels * width * 10))
    with pytest.raises(FormatError):
        signal_io.load_wav(path)


@given(st.integers(1, 60), st.integers(1, 300), st.sampled_from([100.0, 200.0, 50.0, 62.5, 1000.0]))
def test_alignment_matches_exact_oracle(n_rows, n_frames, rate):
    # each row spells its own index in binary, so the chosen row is recoverable
    bits = (np.arange(n_rows)[:, None] >> np.arange(124)[None, :]) & 1
    epg = EpgSequence(bits.astype(np.uint8), rate)
    rows = signal_io.align_epg_to_frames(epg, n_frames)
    assert rows.shape == (n_frames, 124)
    picked = (rows.astype(int) << np.arange(124)[None, :].clip(max=62)).sum(axis=1)
    assert list(picked) == [nearest_row(t, n_rows, rate) for t in range(n_frames)]


def test_split_sizes_examples():
    assert signal_io.split_sizes(319, signal_io.DEFAULT_SPLIT) == (222, 27, 70)
    assert signal_io.split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert signal_io.split_sizes(96, (64, 8, 24)) == (64, 8, 24)


@given(st.integers(0, 500), st.tuples(st.floats(0.05, 1), st.floats(0, 1), st.floats(0, 1)))
def test_split_sizes_partition(n, ratios):
    a, b, c = signal_io.split_sizes(n, ratios)
    assert a + b + c == n and min(a, b, c) >= 0


def test_synth_corpus_deterministic():
    spec = SyntheticSpec(seed=11, n_utterances=6)
    a, b = signal_io.synth_corpus(spec), signal_io.synth_corpus(spec)
    assert a.all_ids() == b.all_ids()
    for u, v in zip((*a.train, *a.validation, *a.test), (*b.train, *b.validation, *b.test)):
        assert np.array_equal(u.clean.samples, v.clean.samples)
        assert np.array_equal(u.epg.frames, v.epg.frames)
    assert np.array_equal(a.norm_stats.mean, b.norm_stats.mean)


def test_synth_corpus_splits_partition_ids(small_corpus):
    ids = small_corpus.all_ids()
    assert len(ids) == len(set(ids)) == 12
    assert (len(small_corpus.train), len(small_corpus.validation), len(small_corpus.test)) == (6, 3, 3)


def test_norm_stats_come_from_train_only(small_corpus):
    expect = dsp.compute_norm_stats(dsp.stft(u.clean) for u in small_corpus.train)
    assert np.array_equal(small_corpus.norm_stats.mean, expect.mean)
    assert np.array_equal(small_corpus.norm_stats.std, expect.std)


def test_synth_without_flips_uses_templates_exactly():
    spec = SyntheticSpec(seed=2, n_utterances=4, flip_prob=0.0)
    templates = signal_io.synth_templates(spec)
    corpus = signal_io.synth_corpus(spec)
    for u in (*corpus.train, *corpus.validation, *corpus.test):
        hits = (u.epg.frames[:, None, :] == templates[None]).all(axis=2)
        assert hits.any(axis=1).all()


def test_nearest_template_recovers_states():
    spec = SyntheticSpec(seed=5, n_utterances=8, n_states=4, flip_prob=0.01)
    templates = signal_io.synth_templates(spec).astype(int)
    corpus = signal_io.synth_corpus(spec)
    right = total = 0
    for u in (*corpus.train, *corpus.validation, *corpus.test):
        dist = np.abs(u.epg.frames[:, None, :].astype(int) - templates[None]).sum(axis=2)
        right += int(np.sum(dist.argmin(axis=1) == u.metadata["states"]))
        total += len(u.metadata["states"])
    assert right / total > 0.99


def test_synth_needs_two_states():
    with pytest.raises(ValueError):
        signal_io.synth_corpus(SyntheticSpec(n_states=1))


def test_synth_durations_pair_up(small_corpus):
    for u in small_corpus.train:
        u.check_durations()
        assert 1.0 <= u.clean.duration_s <= 1.5


def test_manifest_round_trip_keeps_split(tmp_path, small_corpus):
    spec_split = (0.5, 0.25, 0.25)
    manifest = signal_io.write_corpus(small_corpus, tmp_path)
    back = signal_io.build_corpus(manifest, spec_split, seed=3)
    assert [u.id for u in back.train] == [u.id for u in small_corpus.train]
    assert [u.id for u in back.test] == [u.id for u in small_corpus.test]
    u0 = back.train[0]
    orig = next(u for u in small_corpus.train if u.id == u0.id)
    assert np.array_equal(u0.epg.frames, orig.epg.frames)
    assert np.max(np.abs(u0.clean.samples - orig.clean.samples)) <= 0.5 / 32768 + 1e-12


def test_manifest_duplicate_id(tmp_path):
    (tmp_path / "m.csv").write_text("id,epg_path,wav_path\na,x.csv,x.wav\na,y.csv,y.wav\n")
    with pytest.raises(ManifestError):
        signal_io.build_corpus(tmp_path / "m.csv")


def test_manifest_duration_mismatch(tmp_path):
    signal_io.save_epg_file(EpgSequence(np.zeros((100, 124), np.uint8)), tmp_path / "a.csv")
    signal_io.save_wav(dsp.Waveform(np.zeros(16000 * 2)), tmp_path / "a.wav")
    (tmp_path / "m.csv").write_text("a,a.csv,a.wav\n")
    with pytest.raises(ValueError, match="'a'"):
        signal_io.build_corpus(tmp_path / "m.csv")


def test_manifest_missing_file_names_utterance(tmp_path):
    (tmp_path / "m.csv").write_text("u7,nope.csv,nope.wav\n")
    with pytest.raises(OSError, match="u7"):
        signal_io.build_corpus(tmp_path / "m.csv")
