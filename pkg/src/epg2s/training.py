"""Loss, modality sampling, the optimisation loop and gradient checking."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from . import dsp, model
from .errors import DivergenceError, ShapeError
from .model import ModalityBundle, ModelConfig, Params, Variant
from .signal_io import Corpus, UtterancePair, align_epg_to_frames

log = logging.getLogger(__name__)

SNR_GRID = (-10, -5, 0, 5, 10)


class Combo(str, enum.Enum):
    PURE_EPG = "pure_epg"
    PURE_SPEECH = "pure_speech"
    BOTH = "both"


COMBOS = (Combo.PURE_EPG, Combo.PURE_SPEECH, Combo.BOTH)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    combo_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    smooth_l1_beta: float = 1.0
    snr_grid: tuple = SNR_GRID
    noise_kinds: tuple = dsp.NOISE_KINDS
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "combo_probs", tuple(float(p) for p in self.combo_probs))
        object.__setattr__(self, "snr_grid", tuple(self.snr_grid))
        object.__setattr__(self, "noise_kinds", tuple(self.noise_kinds))
        if len(self.combo_probs) != 3 or not math.isclose(sum(self.combo_probs), 1.0, abs_tol=1e-9):
            raise ValueError(f"combo_probs must be three probabilities summing to 1, got {self.combo_probs}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossBreakdown:
    l_spec: torch.Tensor
    l_join: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_spec", "l_join", "total")}


def compute_loss(pred, target, s_a=None, s_e=None, cfg: TrainConfig = TrainConfig()) -> LossBreakdown:
    """``total = l_spec + lam * l_join``; ``l_join`` is 0 unless both latents exist."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target).to(pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l_spec = F.mse_loss(pred, target)
    if s_a is not None and s_e is not None:
        if s_a.shape != s_e.shape:
            raise ShapeError(f"latent shapes differ: {tuple(s_a.shape)} vs {tuple(s_e.shape)}")
        l_join = F.smooth_l1_loss(s_a, s_e, beta=cfg.smooth_l1_beta)
    else:
        l_join = torch.zeros((), dtype=pred.dtype)
    total = l_spec + cfg.lam * l_join
    return LossBreakdown(l_spec, l_join, cfg.lam, total)


def sample_modality_combo(rng: np.random.Generator, probs=(1 / 3, 1 / 3, 1 / 3)) -> Combo:
    return COMBOS[int(rng.choice(3, p=np.asarray(probs, dtype=float)))]


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Prepared:
    """Per-utterance tensors reused across steps."""

    uid: str
    clean: dsp.Waveform
    epg: np.ndarray  # aligned [T x 124]
    target: np.ndarray  # normalized clean features [T x 257]


def prepare(u: UtterancePair, stats: dsp.NormStats) -> Prepared:
    spec = dsp.stft(u.clean)
    epg = align_epg_to_frames(u.epg, spec.n_frames)
    return Prepared(u.id, u.clean, epg.astype(np.float32), dsp.normalize(spec, stats).feat)


def noisy_version(clean: dsp.Waveform, snr_db: float, kind: str, noise_seed: int) -> dsp.Waveform:
    noise = dsp.noise_generator(kind, noise_seed, len(clean))
    return dsp.mix_at_snr(clean, noise, snr_db, offset=0)


def noisy_features(prep: Prepared, snr_db, kind, noise_seed, stats) -> np.ndarray:
    return dsp.normalize(dsp.stft(noisy_version(prep.clean, snr_db, kind, noise_seed)), stats).feat


def make_bundle(prep: Prepared, combo: Combo, audio_feat=None) -> ModalityBundle:
    epg = prep.epg if combo in (Combo.PURE_EPG, Combo.BOTH) else None
    audio = audio_feat if combo in (Combo.PURE_SPEECH, Combo.BOTH) else None
    return ModalityBundle(epg=epg, audio_feat=audio)


def allowed_combos(model_cfg: ModelConfig, train_cfg: TrainConfig):
    if model_cfg.variant is Variant.PURE_EPG:
        return [Combo.PURE_EPG]
    return [c for c, p in zip(COMBOS, train_cfg.combo_probs) if p > 0]


def evaluate_l_spec(params: Params, preps, stats, combos, snr_grid=SNR_GRID, kinds=dsp.NOISE_KINDS) -> float:
    """Mean ``l_spec`` over utterances x combos with a fixed noise condition per utterance."""
    losses = []
    with torch.no_grad():
        for j, prep in enumerate(preps):
            noisy = None
            for combo in combos:
                if combo is not Combo.PURE_EPG and noisy is None:
                    noisy = noisy_features(prep, snr_grid[j % len(snr_grid)], kinds[j % len(kinds)], 10_000 + j, stats)
                pred, _, _ = model.forward(params, make_bundle(prep, combo, noisy))
                losses.append(float(F.mse_loss(pred, torch.as_tensor(prep.target).to(pred.dtype))))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr, betas, eps) -> None:
    """In-place Adam step with bias correction."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    params: Params
    adam: AdamState
    rng_state: dict
    epoch: int = 0
    step: int = 0
    bad_epochs: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: Params | None = None
    val_history: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)


@dataclass
class Checkpoint:
    params: Params
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    epoch: int
    val_history: list
    loss_trace: list
    state: TrainState | None = None

    @property
    def seed(self):
        return self.train_cfg.seed


def _fresh_state(model_cfg, train_cfg) -> TrainState:
    params = model.make_params(model_cfg, train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    return TrainState(params=params, adam=AdamState(), rng_state=rng.bit_generator.state)


def _clone(p: Params) -> Params:
    return p.replace({k: v.detach().clone() for k, v in p.items()})


def train_step(params: Params, adam: AdamState, prep: Prepared, combo, audio_feat, train_cfg) -> LossBreakdown:
    live = params.replace({k: v.detach().requires_grad_(True) for k, v in params.items()})
    pred, s_a, s_e = model.forward(live, make_bundle(prep, combo, audio_feat))
    loss = compute_loss(pred, prep.target, s_a, s_e, train_cfg)
    names = list(live)
    grads = torch.autograd.grad(loss.total, [live[n] for n in names], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(live[n])) for n, g in zip(names, grads)}
    adam_update(params, grads, adam, train_cfg.lr, train_cfg.betas, train_cfg.eps)
    return loss


def train(
    corpus: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    resume: TrainState | None = None,
) -> Checkpoint:
    """Train one variant; returns the checkpoint with the lowest validation ``l_spec``.

    Each epoch visits the training split in a fresh random order. Every step
    draws a modality combination, an SNR from the grid, a noise kind and a
    noise seed, then takes one Adam step on a single utterance.
    """
    if not corpus.train or not corpus.validation:
        raise ValueError("training needs non-empty train and validation splits")
    stats = corpus.norm_stats
    train_preps = [prepare(u, stats) for u in corpus.train]
    val_preps = [prepare(u, stats) for u in corpus.validation]
    combos = allowed_combos(model_cfg, train_cfg)
    pure_epg_model = model_cfg.variant is Variant.PURE_EPG

    st = resume if resume is not None else _fresh_state(model_cfg, train_cfg)
    rng = np.random.default_rng()
    rng.bit_generator.state = st.rng_state

    done = False
    while st.epoch < train_cfg.max_epochs and not done:
        for i in rng.permutation(len(train_preps)):
            combo = sample_modality_combo(rng, train_cfg.combo_probs)
            snr = float(rng.choice(train_cfg.snr_grid))
            kind = str(rng.choice(train_cfg.noise_kinds))
            noise_seed = int(rng.integers(2**31))
            if pure_epg_model:
                combo = Combo.PURE_EPG
            prep = train_preps[i]
            audio = None
            if combo is not Combo.PURE_EPG:
                audio = noisy_features(prep, snr, kind, noise_seed, stats)
            loss = train_step(st.params, st.adam, prep, combo, audio, train_cfg)
            values = loss.as_floats()
            if not math.isfinite(values["total"]):
                raise DivergenceError(st.step, values["total"])
            st.loss_trace.append(values)
            st.step += 1
            if train_cfg.max_steps is not None and st.step >= train_cfg.max_steps:
                done = True
                break
        val = evaluate_l_spec(st.params, val_preps, stats, combos, train_cfg.snr_grid, train_cfg.noise_kinds)
        st.val_history.append(val)
        log.info("epoch %d step %d val l_spec %.4f", st.epoch, st.step, val)
        if val < st.best_val:
            st.best_val, st.best_epoch, st.bad_epochs = val, st.epoch, 0
            st.best_params = _clone(st.params)
        else:
            st.bad_epochs += 1
        st.epoch += 1
        st.rng_state = rng.bit_generator.state
        if st.bad_epochs >= train_cfg.patience:
            break

    best = st.best_params if st.best_params is not None else _clone(st.params)
    return Checkpoint(
        params=best,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        epoch=st.best_epoch,
        val_history=list(st.val_history),
        loss_trace=list(st.loss_trace),
        state=st,
    )


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Model container plus a ``.history.txt`` sidecar of validation losses."""
    header = {f"model.{k}": v for k, v in ckpt.model_cfg.to_dict().items()}
    header.update({f"train.{k}": v for k, v in ckpt.train_cfg.to_dict().items()})
    header["seed"] = ckpt.seed
    header["epoch"] = ckpt.epoch
    tensors = {f"param.{k}": v for k, v in ckpt.params.items()}
    st = ckpt.state
    if st is not None:
        header["state.epoch"] = st.epoch
        header["state.step"] = st.step
        header["state.bad_epochs"] = st.bad_epochs
        header["state.best_val"] = repr(st.best_val)
        header["state.best_epoch"] = st.best_epoch
        header["state.adam_step"] = st.adam.step
        header["state.rng"] = json.dumps(st.rng_state, sort_keys=True)
        header["state.val_history"] = json.dumps([repr(v) for v in st.val_history])
        tensors.update({f"last.{k}": v for k, v in st.params.items()})
        tensors.update({f"adam.m.{k}": v for k, v in st.adam.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in st.adam.v.items()})
    model.save_container(path, header, tensors)
    with open(f"{path}.history.txt", "w", encoding="utf-8") as fh:
        fh.write("epoch\tval_l_spec\n")
        for e, v in enumerate(ckpt.val_history):
            fh.write(f"{e}\t{v!r}\n")


def load_checkpoint(path) -> Checkpoint:
    header, tensors = model.load_container(path)
    model_cfg = model.config_from_header(header)
    train_raw = {k[6:]: model.parse_value(v) for k, v in header.items() if k.startswith("train.")}
    if train_raw.get("max_steps") is None:
        train_raw["max_steps"] = None
    for key in ("betas", "combo_probs", "snr_grid", "noise_kinds"):
        if key in train_raw and not isinstance(train_raw[key], tuple):
            train_raw[key] = (train_raw[key],)
    train_cfg = TrainConfig.from_dict(train_raw)

    def group(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}

    params = Params(model_cfg, group("param."), train_cfg.seed)
    state = None
    history = []
    if "state.epoch" in header:
        history = [float(v) for v in json.loads(header["state.val_history"])]
        adam = AdamState(int(header["state.adam_step"]), group("adam.m."), group("adam.v."))
        state = TrainState(
            params=Params(model_cfg, group("last."), train_cfg.seed),
            adam=adam,
            rng_state=json.loads(header["state.rng"]),
            epoch=int(header["state.epoch"]),
            step=int(header["state.step"]),
            bad_epochs=int(header["state.bad_epochs"]),
            best_val=float(header["state.best_val"]),
            best_epoch=int(header["state.best_epoch"]),
            best_params=params.replace(dict(params)),
            val_history=list(history),
        )
    return Checkpoint(params, model_cfg, train_cfg, int(header["epoch"]), history, [], state)


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(loss_fn, params: dict, n_checks: int = 100, step: float = 1e-3, seed: int = 0,
                    sign_probe=None, max_draws: int | None = None) -> dict:
    """Compare autograd gradients of ``loss_fn(params)`` with central differences.

    Coordinates are drawn uniformly over all scalar parameters. Relative
    error is ``|a - n| / max(|a|, |n|, 1e-8)``. When ``sign_probe`` is given
    (a context manager yielding a list of activation sign masks), coordinates
    whose +/- step changes any mask are skipped and redrawn, since the
    difference quotient across a kink of a piecewise-linear activation does
    not estimate the derivative.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    live = {n: params[n].detach().clone().requires_grad_(True) for n in names}
    grads = torch.autograd.grad(loss_fn(live), [live[n] for n in names], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(live[n])) for n, g in zip(names, grads)}

    def evaluate(tensors):
        if sign_probe is None:
            return float(loss_fn(tensors)), None
        with sign_probe() as masks:
            value = float(loss_fn(tensors))
        return value, list(masks)

    errors, skipped, worst = [], 0, None
    order = rng.permutation(total)[: max_draws or total]
    base = {n: params[n].detach().clone() for n in names}
    _, ref_masks = evaluate(base) if sign_probe is not None else (None, None)
    with torch.no_grad():
        for f in order:
            if len(errors) >= n_checks:
                break
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            name, idx = names[k], int(f - offsets[k])
            view = base[name].view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            up, up_masks = evaluate(base)
            view[idx] = orig - step
            down, down_masks = evaluate(base)
            view[idx] = orig
            if sign_probe is not None and not (_same(ref_masks, up_masks) and _same(ref_masks, down_masks)):
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name].view(-1)[idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            errors.append(err)
            if worst is None or err > worst[0]:
                worst = (err, name, idx)
    return {
        "max_rel_err": float(max(errors)),
        "mean_rel_err": float(np.mean(errors)),
        "n_checked": len(errors),
        "n_kink_skipped": skipped,
        "worst": worst[1:] if worst else None,
    }


def _same(masks_a, masks_b):
    return len(masks_a) == len(masks_b) and all(torch.equal(a, b) for a, b in zip(masks_a, masks_b))


def grad_check(model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(), seed: int = 0, n_checks: int = 100,
               step: float = 1e-3) -> dict:
    """Finite-difference check of the full training loss in float64.

    Uses a random input of 3-10 frames with every modality the variant
    accepts, so for LF both encoders and ``l_join`` contribute. Coordinates
    whose perturbation flips a leaky-ReLU are redrawn (see
    :func:`check_gradients`).
    """
    rng = np.random.default_rng(seed)
    n_frames = int(rng.integers(3, 11))
    epg = (rng.random((n_frames, 124)) < 0.4).astype(np.float64)
    audio = rng.standard_normal((n_frames, dsp.N_BINS))
    target = torch.as_tensor(rng.standard_normal((n_frames, dsp.N_BINS)))
    if model_cfg.variant is Variant.PURE_EPG:
        bundle = ModalityBundle(epg=epg)
    else:
        bundle = ModalityBundle(epg=epg, audio_feat=audio)
    params = model.init_params(model_cfg, seed, dtype=torch.float64)

    def loss_fn(tensors):
        pred, s_a, s_e = model.forward(Params(model_cfg, tensors), bundle)
        return compute_loss(pred, target, s_a, s_e, train_cfg).total

    return check_gradients(loss_fn, params, n_checks, step, seed, sign_probe=model.record_activation_signs)
