"""Experiment orchestration: generation and enhancement tables with Welch tests.

Significance conventions used by every table:

* ``*`` marks a cell whose within-SNR test (processed column against its
  reference column, same utterances, same SNR) has p < 0.05. Generation
  tables star fused rows that differ from the pure-EPG row.
* ``+`` marks an average-row cell whose across-SNR test (the same column
  pair pooled over every SNR) has p < 0.05.

Each table also carries, per column, the full matrix of pairwise Welch
p-values between its rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dsp, metrics, model, training
from .errors import ConfigError, MetricError
from .model import ModalityBundle, Params, Variant
from .signal_io import Corpus, align_epg_to_frames, save_wav
from .training import Checkpoint, Combo

ALPHA = 0.05
DEFAULT_SNRS = (-10, -5, 0, 5, 10)
TEST_NOISE_SEED = 50_000
GENERATION_ROWS = (("pure_epg", "Pure EPG"), ("ef", "EPG + N (EF)"), ("lf", "EPG + N (LF)"))


@dataclass(frozen=True)
class TestResult:
    label: str
    a: tuple  # (row, column)
    b: tuple
    p: float
    symbol: str = "*"

    @property
    def significant(self) -> bool:
        return self.p < ALPHA


@dataclass
class ExperimentTable:
    """Condition rows x metric columns, backed by per-utterance samples."""

    name: str
    rows: list
    columns: list
    samples: dict = field(default_factory=dict)  # (row, col) -> {uid: value}
    tests: list = field(default_factory=list)

    def values(self, row, col) -> list:
        s = self.samples[(row, col)]
        return [s[k] for k in sorted(s)]

    def mean(self, row, col) -> float:
        return float(np.mean(self.values(row, col)))

    def marks(self, row, col) -> str:
        return "".join(t.symbol for t in self.tests if t.b == (row, col) and t.significant)

    def pvalue_matrix(self, col) -> np.ndarray:
        n = len(self.rows)
        m = np.ones((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = _pvalue(self.values(self.rows[i], col), self.values(self.rows[j], col))
        return m

    def add_test(self, label, a, b, symbol="*") -> TestResult:
        t = TestResult(label, a, b, _pvalue(self.values(*a), self.values(*b)), symbol)
        self.tests.append(t)
        return t

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rows": list(self.rows),
            "columns": list(self.columns),
            "samples": [
                {"row": r, "column": c, "values": {k: self.samples[(r, c)][k] for k in sorted(self.samples[(r, c)])}}
                for r in self.rows
                for c in self.columns
                if (r, c) in self.samples
            ],
            "tests": [
                {"label": t.label, "a": list(t.a), "b": list(t.b), "p": t.p, "symbol": t.symbol} for t in self.tests
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentTable":
        samples = {(s["row"], s["column"]): dict(s["values"]) for s in d["samples"]}
        tests = [TestResult(t["label"], tuple(t["a"]), tuple(t["b"]), t["p"], t["symbol"]) for t in d["tests"]]
        return cls(d["name"], list(d["rows"]), list(d["columns"]), samples, tests)


def _pvalue(a, b) -> float:
    if list(a) == list(b):
        return 1.0
    try:
        return metrics.welch_ttest(a, b)
    except MetricError:
        return math.nan


def save_tables(tables, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tables], indent=1, sort_keys=True) + "\n")


def load_tables(path) -> list:
    return [ExperimentTable.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# inference helpers


def _params(ckpt, name) -> Params:
    if ckpt is None:
        raise ConfigError(f"missing checkpoint for {name!r}")
    if isinstance(ckpt, Checkpoint):
        return ckpt.params
    if isinstance(ckpt, Params):
        return ckpt
    path = Path(ckpt)
    if not path.exists():
        raise ConfigError(f"checkpoint for {name!r} not found: {path}")
    return training.load_checkpoint(path).params


def predict_magnitude(params: Params, bundle: ModalityBundle, stats: dsp.NormStats) -> np.ndarray:
    with torch.no_grad():
        pred, _, _ = model.forward(params, bundle)
    return dsp.denormalize(pred.detach().cpu().numpy().astype(np.float64), stats).mag


def synthesize(params, bundle, stats, gl_iters=32) -> dsp.Waveform:
    """Model prediction -> magnitude -> fast Griffin-Lim waveform."""
    return dsp.griffin_lim(predict_magnitude(params, bundle, stats), iters=gl_iters, seed=0)


def test_noisy(clean: dsp.Waveform, index: int, snr_db: float) -> dsp.Waveform:
    """Evaluation mixture: noise kind and seed fixed by utterance index, independent of SNR."""
    kind = dsp.NOISE_KINDS[index % len(dsp.NOISE_KINDS)]
    noise = dsp.noise_generator(kind, TEST_NOISE_SEED + index, len(clean))
    return dsp.mix_at_snr(clean, noise, snr_db, offset=0)


def _epg(u, n_frames):
    return align_epg_to_frames(u.epg, n_frames).astype(np.float32)


def _feat(w, stats):
    return dsp.normalize(dsp.stft(w), stats).feat


class _Scorer:
    """Computes metrics and writes audio for one (condition, utterance)."""

    def __init__(self, out_dir, pesq_tool):
        self.tmp = None
        if out_dir is None:
            self.tmp = tempfile.TemporaryDirectory()
            out_dir = self.tmp.name
        self.out = Path(out_dir)
        self.pesq_tool = pesq_tool
        self.pesq_ok = bool(pesq_tool)
        self.report = metrics.MetricReport()

    def wav(self, w: dsp.Waveform, condition, uid) -> Path:
        path = self.out / "audio" / condition / f"{uid}.wav"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_wav(w, path)
        return path

    def score(self, ref: dsp.Waveform, deg: dsp.Waveform, condition, uid, tags, extra=None) -> dict:
        n = min(len(ref), len(deg))
        ref_w, deg_w = dsp.Waveform(ref.samples[:n]), dsp.Waveform(deg.samples[:n])
        vals = metrics.evaluate_pair(ref_w, deg_w, ("stoi", "estoi", "ssnr"))
        vals.update(extra or {})
        if self.pesq_ok:
            ref_path = self.wav(ref_w, "reference", uid)
            deg_path = self.wav(deg_w, condition, uid)
            value = metrics.pesq_external(ref_path, deg_path, self.pesq_tool)
            if value is metrics.UNAVAILABLE:
                self.pesq_ok = False
            else:
                vals["pesq"] = value
        else:
            self.wav(deg_w, condition, uid)
        self.report.add(uid, {"condition": condition, **tags}, vals)
        return vals

    def metric_names(self, base):
        return (["pesq"] if self.pesq_ok else []) + list(base)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    tables: list
    report: metrics.MetricReport


def run_generation_experiment(
    corpus: Corpus,
    checkpoints: dict,
    out_dir=None,
    pesq_tool=None,
    reference_snr_db: float = 0.0,
    gl_iters: int = 32,
) -> ExperimentResult:
    """Pure-EPG synthesis with the PURE_EPG, EF and LF checkpoints.

    ``mcd_noisy`` compares the generated audio with the clean reference mixed
    at ``reference_snr_db``; ``mcd_clean`` with the clean reference.
    """
    params = {key: _params(checkpoints.get(key), key) for key, _ in GENERATION_ROWS}
    stats = corpus.norm_stats
    scorer = _Scorer(out_dir, pesq_tool)
    per_row = {label: {} for _, label in GENERATION_ROWS}
    for j, u in enumerate(corpus.test):
        n_frames = dsp.frames_for_length(len(u.clean))
        bundle = ModalityBundle(epg=_epg(u, n_frames))
        noisy_ref = test_noisy(u.clean, j, reference_snr_db)
        for key, label in GENERATION_ROWS:
            out = synthesize(params[key], bundle, stats, gl_iters)
            n = min(len(u.clean), len(out))
            extra = {
                "mcd_noisy": metrics.mcd(noisy_ref.samples[:n], out.samples[:n]),
                "mcd_clean": metrics.mcd(u.clean.samples[:n], out.samples[:n]),
            }
            tags = {"variant": key, "combo": Combo.PURE_EPG.value, "snr_db": ""}
            per_row[label][u.id] = scorer.score(u.clean, out, f"generate_{key}", u.id, tags, extra)

    columns = scorer.metric_names(("stoi", "estoi", "ssnr", "mcd_noisy", "mcd_clean"))
    table = ExperimentTable("generation", [label for _, label in GENERATION_ROWS], columns)
    for label, by_uid in per_row.items():
        for col in columns:
            table.samples[(label, col)] = {uid: v[col] for uid, v in by_uid.items()}
    first = GENERATION_ROWS[0][1]
    for _, label in GENERATION_ROWS[1:]:
        for col in columns:
            table.add_test(f"{label} vs {first}: {col}", (first, col), (label, col))
    return ExperimentResult([table], scorer.report)


def snr_label(snr) -> str:
    return f"{snr:g} dB"


def run_enhancement_experiment(
    corpus: Corpus,
    checkpoints: dict,
    snr_list=DEFAULT_SNRS,
    out_dir=None,
    pesq_tool=None,
    gl_iters: int = 32,
) -> ExperimentResult:
    """Enhancement of noisy test speech at each SNR.

    Returns two tables. The baseline table has unprocessed-noisy columns and
    audio-only baseline columns. The fusion table has EF and LF columns, both
    fed EPG plus noisy speech. An extra test compares LF against the
    baseline at every SNR.
    """
    base = _params(checkpoints.get("baseline"), "baseline")
    ef = _params(checkpoints.get("ef"), "ef")
    lf = _params(checkpoints.get("lf"), "lf")
    stats = corpus.norm_stats
    scorer = _Scorer(out_dir, pesq_tool)
    snrs = sorted(snr_list, reverse=True)
    raw = {}  # (snr, system) -> {uid: metrics}
    for snr in snrs:
        for j, u in enumerate(corpus.test):
            noisy = test_noisy(u.clean, j, snr)
            n_frames = dsp.frames_for_length(len(u.clean))
            feat = _feat(noisy, stats)
            epg = _epg(u, n_frames)
            outputs = {
                "noisy": noisy,
                "baseline": synthesize(base, ModalityBundle(audio_feat=feat), stats, gl_iters),
                "ef": synthesize(ef, ModalityBundle(epg=epg, audio_feat=feat), stats, gl_iters),
                "lf": synthesize(lf, ModalityBundle(epg=epg, audio_feat=feat), stats, gl_iters),
            }
            for system, out in outputs.items():
                combo = Combo.PURE_SPEECH if system in ("noisy", "baseline") else Combo.BOTH
                tags = {"variant": system, "combo": combo.value, "snr_db": f"{snr:g}"}
                vals = scorer.score(u.clean, out, f"enhance_{system}_snr{snr:g}", u.id, tags)
                raw.setdefault((snr, system), {})[u.id] = vals

    names = scorer.metric_names(("stoi", "estoi"))
    layout = {
        "enhancement_baseline": (("noisy", "unprocessed"), ("baseline", "enhanced")),
        "enhancement_fusion": (("ef", "ef"), ("lf", "lf")),
    }
    tables = []
    for tname, ((sys_a, pre_a), (sys_b, pre_b)) in layout.items():
        rows = [snr_label(s) for s in snrs] + ["Avg"]
        columns = [f"{pre}_{m}" for m in names for pre in (pre_a, pre_b)]
        table = ExperimentTable(tname, rows, columns)
        for m in names:
            for system, pre in ((sys_a, pre_a), (sys_b, pre_b)):
                pooled = {}
                for snr in snrs:
                    cell = {uid: v[m] for uid, v in raw[(snr, system)].items()}
                    table.samples[(snr_label(snr), f"{pre}_{m}")] = cell
                    pooled.update({f"{uid}@{snr:g}": x for uid, x in cell.items()})
                table.samples[("Avg", f"{pre}_{m}")] = pooled
            for snr in snrs:
                r = snr_label(snr)
                table.add_test(f"{r}: {pre_b} vs {pre_a} {m}", (r, f"{pre_a}_{m}"), (r, f"{pre_b}_{m}"), "*")
            table.add_test(f"across SNRs: {pre_b} vs {pre_a} {m}", ("Avg", f"{pre_a}_{m}"), ("Avg", f"{pre_b}_{m}"), "+")
        tables.append(table)

    fusion = tables[1]
    baseline_table = tables[0]
    for m in names:
        for snr in snrs:
            r = snr_label(snr)
            a = baseline_table.values(r, f"enhanced_{m}")
            b = fusion.values(r, f"lf_{m}")
            fusion.tests.append(TestResult(f"{r}: lf vs audio-only baseline {m}", (r, f"baseline_{m}"), (r, f"lf_{m}"), _pvalue(a, b), "#"))
    return ExperimentResult(tables, scorer.report)


# ---------------------------------------------------------------------------
# report emission

REPORT_TITLE = "# EPG2S experiment report"
DELIMITED_HEADER = ("table", "row", "column", "value", "marks")


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3f}"


def _records(tables):
    """Flat (table, row, column, value, marks) records in emission order."""
    out = []
    for t in tables:
        for r in t.rows:
            for c in t.columns:
                if (r, c) in t.samples:
                    out.append((t.name, r, c, _fmt(t.mean(r, c)), t.marks(r, c)))
        for test in t.tests:
            mark = test.symbol if test.significant else ""
            out.append((t.name, f"test: {test.label}", "p", _fmt(test.p), mark))
    return out


def emit_report(tables, fmt: str = "markdown", path=None) -> str:
    """Render tables as markdown or delimited text; byte-stable for equal input."""
    if fmt == "markdown":
        lines = [REPORT_TITLE, ""]
        for t in tables:
            lines += [f"## {t.name}", ""]
            lines.append("| condition | " + " | ".join(t.columns) + " |")
            lines.append("|" + "---|" * (len(t.columns) + 1))
            for r in t.rows:
                cells = [_fmt(t.mean(r, c)) + t.marks(r, c) if (r, c) in t.samples else "" for c in t.columns]
                lines.append(f"| {r} | " + " | ".join(cells) + " |")
            lines.append("")
            if t.tests:
                lines += ["| test | p | significant |", "|---|---|---|"]
                for test in t.tests:
                    lines.append(f"| {test.label} | {_fmt(test.p)} | {test.symbol if test.significant else ''} |")
                lines.append("")
        text = "\n".join(lines).rstrip("\n") + "\n"
    elif fmt == "delimited":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DELIMITED_HEADER)
        w.writerows(_records(tables))
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _split_cell(cell: str):
    body = cell.rstrip("*+#")
    return body, cell[len(body):]


def parse_report(text: str) -> list:
    """Parse either report format back into (table, row, column, value, marks) records."""
    lines = text.splitlines()
    if lines and lines[0] == ",".join(DELIMITED_HEADER):
        return [tuple(r) for r in csv.reader(io.StringIO("\n".join(lines[1:]) + "\n")) if r]
    records, table, columns, in_tests = [], None, None, False
    for line in lines:
        if line.startswith("## "):
            table, columns, in_tests = line[3:], None, False
            continue
        if not line.startswith("|") or line.startswith("|---"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if cells[0] == "condition":
            columns, in_tests = cells[1:], False
        elif cells[0] == "test":
            in_tests = True
        elif in_tests:
            records.append((table, f"test: {cells[0]}", "p", cells[1], cells[2]))
        else:
            for col, cell in zip(columns, cells[1:]):
                if cell:
                    records.append((table, cells[0], col, *_split_cell(cell)))
    return records
