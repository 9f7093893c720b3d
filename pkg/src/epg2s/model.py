"""Encoder_E, Encoder_A, Decoder and the early/late fusion graphs.

Parameters are plain ``{name: tensor}`` dicts. The ``nn.Module`` classes only
describe structure; every forward goes through
:func:`torch.func.functional_call` with explicitly supplied parameters.

Parameter counts at ``size_scale=1``:

========  ==========
variant   parameters
========  ==========
PURE_EPG  4,331,265
EF        2,231,166
LF        5,608,449
========  ==========
"""

from __future__ import annotations

import enum
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

from .dsp import N_BINS
from .errors import FormatError, InputError, ShapeError
from .signal_io import N_ELECTRODES

POOL_WIDTH = 4


class Variant(str, enum.Enum):
    PURE_EPG = "pure_epg"
    EF = "ef"
    LF = "lf"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.LF
    bilstm_hidden: int = 256
    encoder_e_out: int = 512
    decoder_lstm_hidden: int = 384
    decoder_fc: tuple = (512, N_BINS)
    conv_filters: tuple = (16, 32, 64, 128)
    kernel: int = 3
    leaky_slope: float = 0.01
    ef_epg_projection: int = N_BINS
    size_scale: int = 1
    latent_substitution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "decoder_fc", tuple(int(v) for v in self.decoder_fc))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        if self.size_scale < 1:
            raise ValueError("size_scale must be >= 1")

    def _div(self, width):
        return int(math.ceil(width / self.size_scale))

    @property
    def filters(self) -> tuple:
        return tuple(self._div(c) for c in self.conv_filters)

    @property
    def latent_dim(self) -> int:
        """Per-frame width of both encoders' outputs (512 at full size)."""
        if self.encoder_e_out == POOL_WIDTH * self.conv_filters[-1]:
            return POOL_WIDTH * self.filters[-1]
        return self._div(self.encoder_e_out)

    @property
    def hidden(self) -> dict:
        return {
            "bilstm": self._div(self.bilstm_hidden),
            "decoder_lstm": self._div(self.decoder_lstm_hidden),
            "decoder_fc": self._div(self.decoder_fc[0]),
        }

    @property
    def decoder_in(self) -> int:
        return 2 * self.latent_dim if self.variant is Variant.LF else self.latent_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModalityBundle:
    epg: np.ndarray | torch.Tensor | None = None
    audio_feat: np.ndarray | torch.Tensor | None = None

    def __post_init__(self):
        if self.epg is None and self.audio_feat is None:
            raise InputError("at least one modality is required")
        if self.epg is not None and self.audio_feat is not None and len(self.epg) != len(self.audio_feat):
            raise ShapeError(f"EPG has {len(self.epg)} frames but audio has {len(self.audio_feat)}")

    @property
    def n_frames(self):
        return len(self.epg) if self.epg is not None else len(self.audio_feat)


# ---------------------------------------------------------------------------
# structure

_sign_log: list | None = None


def leaky_relu(x, slope):
    if _sign_log is not None:
        _sign_log.append(x.detach() > 0)
    return F.leaky_relu(x, slope)


@contextmanager
def record_activation_signs():
    """Collect the sign pattern of every leaky-ReLU input during a forward pass.

    Finite-difference checks use this to spot perturbations that cross a
    kink, where the difference quotient is not a derivative estimate.
    """
    global _sign_log
    previous, _sign_log = _sign_log, []
    try:
        yield _sign_log
    finally:
        _sign_log = previous


class FrameNorm(nn.Module):
    """Layer normalization over (channels, frequency) separately for each frame."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):  # x: (B, C, T, F)
        mean = x.mean(dim=(1, 3), keepdim=True)
        var = x.var(dim=(1, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class EncoderE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden["bilstm"]
        self.lstm = nn.LSTM(N_ELECTRODES, h, num_layers=2, bidirectional=True, batch_first=True)
        self.linear = nn.Linear(2 * h, cfg.latent_dim)
        self.norm = nn.LayerNorm(cfg.latent_dim)
        self.slope = cfg.leaky_slope

    def forward(self, epg):  # (B, T, 124)
        out, _ = self.lstm(epg)
        return leaky_relu(self.norm(self.linear(out)), self.slope)


class EncoderA(nn.Module):
    """Four conv blocks; the first conv of each halves the frequency axis."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        c_in = 1
        for c_out in cfg.filters:
            for j in range(3):
                stride = (1, 2) if j == 0 else (1, 1)
                layers.append(nn.Conv2d(c_in, c_out, cfg.kernel, stride=stride, padding=cfg.kernel // 2))
                layers.append(FrameNorm(c_out))
                c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.slope = cfg.leaky_slope

    def forward(self, feat):  # (B, T, F)
        x = feat[:, None]
        for i in range(0, len(self.layers), 2):
            x = leaky_relu(self.layers[i + 1](self.layers[i](x)), self.slope)
        x = F.adaptive_avg_pool2d(x, (x.shape[2], POOL_WIDTH))  # (B, C, T, 4)
        return x.permute(0, 2, 1, 3).reshape(x.shape[0], x.shape[2], -1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hid = cfg.hidden
        self.in_dim = cfg.decoder_in
        self.lstm = nn.LSTM(cfg.decoder_in, hid["decoder_lstm"], batch_first=True)
        self.fc1 = nn.Linear(hid["decoder_lstm"], hid["decoder_fc"])
        self.fc2 = nn.Linear(hid["decoder_fc"], cfg.decoder_fc[1])
        self.slope = cfg.leaky_slope

    def forward(self, latent):
        out, _ = self.lstm(latent)
        return self.fc2(leaky_relu(self.fc1(out), self.slope))


class EPG2SNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant in (Variant.PURE_EPG, Variant.LF):
            self.encoder_e = EncoderE(cfg)
        if cfg.variant is Variant.EF:
            self.epg_proj = nn.Linear(N_ELECTRODES, cfg.ef_epg_projection)
        if cfg.variant in (Variant.EF, Variant.LF):
            self.encoder_a = EncoderA(cfg)
        self.decoder = Decoder(cfg)


@lru_cache(maxsize=None)
def build_network(cfg: ModelConfig) -> EPG2SNet:
    with torch.device("meta"):
        return EPG2SNet(cfg)


def param_shapes(cfg: ModelConfig) -> dict:
    return {name: tuple(p.shape) for name, p in build_network(cfg).named_parameters()}


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if ".norm" in name or _is_frame_norm(cfg, name):
            t = torch.ones(shape, dtype=dtype) if leaf == "weight" else torch.zeros(shape, dtype=dtype)
        elif leaf.startswith("bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            if leaf.startswith("weight_hh"):
                fan_in = shape[1]
            else:
                fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            t = t.to(dtype)
        params[name] = t
    return params


def _is_frame_norm(cfg, name):
    if not name.startswith("encoder_a.layers."):
        return False
    return int(name.split(".")[2]) % 2 == 1


def cast_params(params: dict, dtype) -> dict:
    return {k: v.detach().to(dtype).clone() for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward passes


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _dtype(params):
    return next(iter(params.values())).dtype


def _as_batch(x, dtype):
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)
    if t.ndim != 2:
        raise ShapeError(f"expected a [T x F] matrix, got shape {tuple(t.shape)}")
    return t[None]


def _cfg_of(params) -> ModelConfig:
    if not isinstance(params, Params):
        raise TypeError("forward functions need Params carrying their ModelConfig")
    return params.cfg


class Params(dict):
    """Named tensors plus the configuration they were built for."""

    def __init__(self, cfg: ModelConfig, tensors: dict, seed: int | None = None):
        super().__init__(tensors)
        self.cfg = cfg
        self.seed = seed

    def replace(self, tensors: dict) -> "Params":
        return Params(self.cfg, tensors, self.seed)


def make_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Params:
    return Params(cfg, init_params(cfg, seed, dtype), seed)


def encoder_e_forward(p: Params, epg) -> torch.Tensor:
    cfg = _cfg_of(p)
    x = _as_batch(epg, _dtype(p))
    if x.shape[2] != N_ELECTRODES:
        raise ShapeError(f"EPG width must be {N_ELECTRODES}, got {x.shape[2]}")
    return functional_call(_net(cfg).encoder_e, _sub(p, "encoder_e"), (x,))[0]


def encoder_a_forward(p: Params, feat) -> torch.Tensor:
    cfg = _cfg_of(p)
    x = _as_batch(feat, _dtype(p))
    if x.shape[2] not in (N_BINS, 2 * N_BINS):
        raise ShapeError(f"spectral width must be {N_BINS} or {2 * N_BINS}, got {x.shape[2]}")
    return functional_call(_net(cfg).encoder_a, _sub(p, "encoder_a"), (x,))[0]


def decoder_forward(p: Params, latent) -> torch.Tensor:
    cfg = _cfg_of(p)
    x = _as_batch(latent, _dtype(p))
    if x.shape[2] != cfg.decoder_in:
        raise ShapeError(f"{cfg.variant.value} decoder expects width {cfg.decoder_in}, got {x.shape[2]}")
    return functional_call(_net(cfg).decoder, _sub(p, "decoder"), (x,))[0]


def ef_forward(p: Params, b: ModalityBundle) -> torch.Tensor:
    cfg = _cfg_of(p)
    if cfg.variant is not Variant.EF:
        raise InputError(f"ef_forward needs EF parameters, got {cfg.variant.value}")
    dtype = _dtype(p)
    n = b.n_frames
    epg = _tensor(b.epg, dtype) if b.epg is not None else torch.zeros(n, N_ELECTRODES, dtype=dtype)
    audio = _tensor(b.audio_feat, dtype) if b.audio_feat is not None else torch.zeros(n, N_BINS, dtype=dtype)
    proj = F.linear(epg, p["epg_proj.weight"], p["epg_proj.bias"])
    return decoder_forward(p, encoder_a_forward(p, torch.cat([audio, proj], dim=1)))


def lf_forward(p: Params, b: ModalityBundle):
    """Late fusion; returns ``(prediction, s_A, s_E)`` with absent latents as ``None``."""
    cfg = _cfg_of(p)
    if cfg.variant is not Variant.LF:
        raise InputError(f"lf_forward needs LF parameters, got {cfg.variant.value}")
    s_e = encoder_e_forward(p, b.epg) if b.epg is not None else None
    s_a = encoder_a_forward(p, b.audio_feat) if b.audio_feat is not None else None
    present = s_e if s_e is not None else s_a
    fill = present if cfg.latent_substitution else torch.zeros_like(present)
    fused = torch.cat([s_a if s_a is not None else fill, s_e if s_e is not None else fill], dim=1)
    return decoder_forward(p, fused), s_a, s_e


def pure_epg_forward(p: Params, b: ModalityBundle) -> torch.Tensor:
    if b.epg is None:
        raise InputError("the pure-EPG model needs EPG input")
    return decoder_forward(p, encoder_e_forward(p, b.epg))


def forward(p: Params, b: ModalityBundle):
    """Dispatch on variant; always returns ``(prediction, s_A, s_E)``."""
    variant = _cfg_of(p).variant
    if variant is Variant.LF:
        return lf_forward(p, b)
    if variant is Variant.EF:
        return ef_forward(p, b), None, None
    return pure_epg_forward(p, b), None, None


def _tensor(x, dtype):
    return (x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))).to(dtype)


@lru_cache(maxsize=None)
def _net(cfg: ModelConfig) -> EPG2SNet:
    # functional_call swaps parameters in; the module only provides structure.
    return EPG2SNet(cfg)


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"EPG2SCKP"
_VERSION = 1


def save_container(path, header: dict, tensors: dict) -> None:
    """Write ``header`` as key=value text and ``tensors`` as little-endian float32.

    Layout: magic, u32 version, u32 header length, header text, u32 index
    length, index text (``name<TAB>shape<TAB>offset`` lines), raw data.
    """
    head = "".join(f"{k}={format_value(v)}\n" for k, v in header.items()).encode()
    index_lines, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        index_lines.append(f"{name}\t{shape}\t{offset}\n")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    index = "".join(index_lines).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(head)) + head)
        fh.write(struct.pack("<I", len(index)) + index)
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    try:
        return _parse_container(raw)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_container(raw: bytes):
    version, head_len = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    header = {}
    for line in raw[pos : pos + head_len].decode().splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    pos += head_len
    (index_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    index = raw[pos : pos + index_len].decode().splitlines()
    data_start = pos + index_len
    tensors = {}
    for line in index:
        name, shape, offset = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        arr = np.frombuffer(raw, dtype="<f4", count=math.prod(dims), offset=data_start + int(offset))
        tensors[name] = torch.from_numpy(arr.reshape(dims).copy())
    return header, tensors


def format_value(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(text: str):
    """Best-effort scalar parsing for key=value headers and config files."""
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    if "," in text:
        return tuple(parse_value(t) for t in text.split(","))
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def save_params(p: Params, path) -> None:
    header = {f"model.{k}": v for k, v in p.cfg.to_dict().items()}
    header["seed"] = p.seed
    save_container(path, header, dict(p))


def config_from_header(header: dict, prefix: str = "model.") -> ModelConfig:
    return ModelConfig.from_dict({k[len(prefix) :]: parse_value(v) for k, v in header.items() if k.startswith(prefix)})


def load_params(path) -> Params:
    header, tensors = load_container(path)
    cfg = config_from_header(header)
    seed = parse_value(header.get("seed", "None"))
    expected = param_shapes(cfg)
    params = {k: v for k, v in tensors.items() if k in expected}
    if set(params) != set(expected):
        raise FormatError(f"{path}: parameter names do not match a {cfg.variant.value} model")
    return Params(cfg, params, seed)
