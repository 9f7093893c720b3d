"""Command line entry point: ``epg2s <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness, metrics, signal_io, training
from .errors import ConfigError

log = logging.getLogger("epg2s")


def _snr_list(text: str):
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def _load_config(args) -> dict:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "pesq_tool", None):
        cfg["eval.pesq_tool"] = args.pesq_tool
    if getattr(args, "latent_substitution", False):
        cfg["model.latent_substitution"] = True
    if getattr(args, "snr", None):
        cfg["eval.snr"] = args.snr
    return cfg


def _corpus(cfg):
    if cfg["data.manifest"]:
        return signal_io.build_corpus(cfg["data.manifest"], cfgmod._tuple(cfg["data.split"]), seed=cfg["seed"])
    return signal_io.synth_corpus(cfgmod.synthetic_spec(cfg))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(args, cfg):
    corpus = signal_io.synth_corpus(cfgmod.synthetic_spec(cfg))
    manifest = signal_io.write_corpus(corpus, _out(args))
    cfg["data.manifest"] = str(manifest.resolve())
    (manifest.parent / "config.txt").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    print(manifest)


def cmd_train(args, cfg):
    if args.variant:
        cfg["model.variant"] = args.variant
    if args.audio_only:
        cfg["train.combo_probs"] = (0.0, 1.0, 0.0)
    model_cfg = cfgmod.model_config(cfg)
    train_cfg = cfgmod.train_config(cfg)
    name = args.name or ("baseline" if args.audio_only else model_cfg.variant.value)
    ckpt = training.train(_corpus(cfg), model_cfg, train_cfg)
    out = _out(args)
    path = out / f"{name}.ckpt"
    training.save_checkpoint(ckpt, path)
    with open(out / f"{name}.loss.txt", "w", encoding="utf-8") as fh:
        for i, row in enumerate(ckpt.loss_trace):
            fh.write(f"{i}\t{row['l_spec']!r}\t{row['l_join']!r}\t{row['total']!r}\n")
    (out / f"{name}.config.txt").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    print(path)


def _checkpoints(cfg):
    return {k: cfg[f"checkpoints.{k}"] for k in ("pure_epg", "ef", "lf", "baseline")}


def _write_result(result, out, stem):
    harness.save_tables(result.tables, out / f"{stem}.json")
    (out / f"{stem}_metrics.csv").write_text(result.report.to_delimited(), encoding="utf-8")
    print(harness.emit_report(result.tables, "markdown"), end="")


def cmd_generate(args, cfg):
    out = _out(args)
    result = harness.run_generation_experiment(
        _corpus(cfg),
        _checkpoints(cfg),
        out_dir=out,
        pesq_tool=cfg["eval.pesq_tool"],
        reference_snr_db=float(cfg["eval.reference_snr_db"]),
        gl_iters=int(cfg["eval.gl_iters"]),
    )
    _write_result(result, out, "generation")


def cmd_enhance(args, cfg):
    out = _out(args)
    result = harness.run_enhancement_experiment(
        _corpus(cfg),
        _checkpoints(cfg),
        snr_list=cfgmod._tuple(cfg["eval.snr"]),
        out_dir=out,
        pesq_tool=cfg["eval.pesq_tool"],
        gl_iters=int(cfg["eval.gl_iters"]),
    )
    _write_result(result, out, "enhancement")


def _wav_pairs(ref: Path, deg: Path):
    if ref.is_file() and deg.is_file():
        return [(ref.stem, ref, deg)]
    if ref.is_dir() and deg.is_dir():
        pairs = [(p.stem, p, deg / p.name) for p in sorted(ref.glob("*.wav")) if (deg / p.name).exists()]
        if pairs:
            return pairs
    raise ConfigError(f"no matching WAV files between {ref} and {deg}")


def cmd_evaluate(args, cfg):
    report = metrics.MetricReport()
    for uid, ref_path, deg_path in _wav_pairs(Path(args.ref), Path(args.deg)):
        ref, deg = signal_io.load_wav(ref_path), signal_io.load_wav(deg_path)
        values = metrics.evaluate_pair(ref, deg)
        pesq = metrics.pesq_external(ref_path, deg_path, cfg["eval.pesq_tool"])
        if pesq is not metrics.UNAVAILABLE:
            values["pesq"] = pesq
        report.add(uid, {"condition": args.condition}, values)
    out = _out(args)
    (out / "metrics.csv").write_text(report.to_delimited(), encoding="utf-8")
    _, names = report.columns()
    for m in names:
        print(f"{m}\t{np.mean(report.values(m)):.3f}")


def cmd_report(args, cfg):
    out = _out(args)
    paths = [Path(p) for p in args.tables] if args.tables else sorted(out.glob("*.json"))
    tables = [t for p in paths for t in harness.load_tables(p)]
    harness.emit_report(tables, "markdown", out / "report.md")
    harness.emit_report(tables, "delimited", out / "report.csv")
    print(out / "report.md")


COMMANDS = {
    "synth-data": (cmd_synth_data, "write a synthetic EPG/speech corpus"),
    "train": (cmd_train, "train one model variant"),
    "generate": (cmd_generate, "pure-EPG speech generation experiment"),
    "enhance": (cmd_enhance, "noisy speech enhancement experiment"),
    "evaluate": (cmd_evaluate, "score degraded WAV files against references"),
    "report": (cmd_report, "render saved tables as markdown and delimited text"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epg2s", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config; created with defaults if missing")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--pesq-tool", help="external PESQ command, called as '<cmd> ref.wav deg.wav'")
        if name == "train":
            p.add_argument("--latent-substitution", action="store_true", help="LF: copy the present latent into the missing one")
            p.add_argument("--variant", choices=["pure_epg", "ef", "lf"])
            p.add_argument("--audio-only", action="store_true", help="train only on the pure-speech combination")
            p.add_argument("--name", help="checkpoint file stem")
        if name == "enhance":
            p.add_argument("--snr", type=_snr_list, help="comma-separated SNRs in dB")
        if name == "evaluate":
            p.add_argument("--ref", required=True, help="reference WAV file or directory")
            p.add_argument("--deg", required=True, help="degraded WAV file or directory")
            p.add_argument("--condition", default="eval")
        if name == "report":
            p.add_argument("--tables", nargs="*", help="table JSON files (default: every *.json in --out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command][0](args, cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"epg2s {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
