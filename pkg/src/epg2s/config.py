"""Flat ``key = value`` experiment configs.

Keys are dotted paths (``model.size_scale``, ``train.lr``). A config file
that does not exist yet is created with every default written out, so a run
can always be archived together with the exact settings it used.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig, format_value, parse_value
from .signal_io import DEFAULT_SPLIT, SyntheticSpec
from .training import TrainConfig


def defaults() -> dict:
    d = {"seed": 0, "data.manifest": None, "data.split": DEFAULT_SPLIT}
    syn = SyntheticSpec()
    for name in ("n_utterances", "duration_s", "n_states", "flip_prob", "f0_range", "state_duration_s", "epg_rate_hz"):
        d[f"data.synthetic.{name}"] = getattr(syn, name)
    d.update({f"model.{k}": v for k, v in ModelConfig().to_dict().items()})
    d.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items() if k != "seed"})
    d.update(
        {
            "eval.snr": (-10, -5, 0, 5, 10),
            "eval.reference_snr_db": 0.0,
            "eval.gl_iters": 32,
            "eval.pesq_tool": None,
            "checkpoints.pure_epg": None,
            "checkpoints.ef": None,
            "checkpoints.lf": None,
            "checkpoints.baseline": None,
        }
    )
    return d


def dumps(cfg: dict) -> str:
    return "".join(f"{k} = {'none' if v is None else format_value(v)}\n" for k, v in cfg.items())


def loads(text: str, base: dict | None = None) -> dict:
    cfg = dict(defaults() if base is None else base)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in cfg:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = parse_value(value)
    return cfg


def load(path) -> dict:
    """Read ``path``; if it is missing, write the defaults there first."""
    path = Path(path)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(defaults()), encoding="utf-8")
    return loads(path.read_text(encoding="utf-8"))


def section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _tuple(v):
    return v if isinstance(v, tuple) else (v,)


def model_config(cfg: dict) -> ModelConfig:
    d = section(cfg, "model")
    d["decoder_fc"] = _tuple(d["decoder_fc"])
    d["conv_filters"] = _tuple(d["conv_filters"])
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model settings: {exc}") from exc


def train_config(cfg: dict) -> TrainConfig:
    d = section(cfg, "train")
    for k in ("betas", "combo_probs", "snr_grid", "noise_kinds"):
        d[k] = _tuple(d[k])
    d["seed"] = cfg["seed"]
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = section(cfg, "data.synthetic")
    return SyntheticSpec(seed=cfg["seed"], split=_tuple(cfg["data.split"]), **d)
