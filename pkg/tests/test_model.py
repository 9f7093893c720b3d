import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from epg2s import model
from epg2s.errors import FormatError, InputError, ShapeError
from epg2s.model import ModalityBundle, ModelConfig, Variant

TINY = {v: ModelConfig(variant=v, size_scale=16) for v in Variant}


def lstm_params(n_in, hidden, bidirectional=False):
    per_dir = 4 * hidden * (n_in + hidden) + 8 * hidden
    return per_dir * (2 if bidirectional else 1)


def count_by_enumeration(cfg):
    """Layer-shape enumeration independent of the module definitions."""
    s = cfg.size_scale
    h = math.ceil(256 / s)
    e_out = math.ceil(512 / s)
    dec_h = math.ceil(384 / s)
    fc1 = math.ceil(512 / s)
    filters = [math.ceil(f / s) for f in (16, 32, 64, 128)]
    latent = 4 * filters[-1]
    enc_e = lstm_params(124, h, True) + lstm_params(2 * h, h, True) + (2 * h * latent + latent) + 2 * latent
    enc_a, c_in = 0, 1
    for f in filters:
        for _ in range(3):
            enc_a += c_in * f * 9 + f + 2 * f
            c_in = f
    dec_in = 2 * latent if cfg.variant is Variant.LF else latent
    dec = lstm_params(dec_in, dec_h) + (dec_h * fc1 + fc1) + (fc1 * 257 + 257)
    if cfg.variant is Variant.PURE_EPG:
        return enc_e + dec
    if cfg.variant is Variant.EF:
        return (124 * 257 + 257) + enc_a + dec
    assert e_out == latent
    return enc_e + enc_a + dec


@pytest.mark.parametrize("variant,expected", [("pure_epg", 4_331_265), ("ef", 2_231_166), ("lf", 5_608_449)])
def test_documented_parameter_counts(variant, expected):
    cfg = ModelConfig(variant=variant)
    assert model.param_count(cfg) == expected == count_by_enumeration(cfg)


@pytest.mark.parametrize("scale", [2, 4, 8, 16])
@pytest.mark.parametrize("variant", list(Variant))
def test_scaled_counts_match_enumeration(variant, scale):
    cfg = ModelConfig(variant=variant, size_scale=scale)
    assert model.param_count(cfg) == count_by_enumeration(cfg)


def test_size_scale_divides_widths():
    cfg = ModelConfig(size_scale=16)
    assert cfg.filters == (1, 2, 4, 8)
    assert cfg.hidden == {"bilstm": 16, "decoder_lstm": 24, "decoder_fc": 32}
    assert cfg.latent_dim == 32 and cfg.decoder_in == 64
    assert ModelConfig(size_scale=3).hidden["decoder_lstm"] == 128


def test_init_deterministic_and_seeded():
    a = model.make_params(TINY[Variant.LF], seed=5)
    b = model.make_params(TINY[Variant.LF], seed=5)
    c = model.make_params(TINY[Variant.LF], seed=6)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_init_scheme():
    p = model.make_params(ModelConfig(size_scale=4), seed=0)
    for name, t in p.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("encoder_e.norm") or (name.startswith("encoder_a.layers.") and int(name.split(".")[2]) % 2):
            assert torch.all(t == (1 if leaf == "weight" else 0)), name
        elif leaf.startswith("bias"):
            assert torch.all(t == 0), name
        else:
            bound = 1 / math.sqrt(math.prod(t.shape[1:]))
            assert t.abs().max() <= bound and t.abs().max() > 0.5 * bound, name


@given(st.integers(1, 40))
def test_encoder_e_shape(T):
    p = model.make_params(TINY[Variant.LF])
    out = model.encoder_e_forward(p, np.random.default_rng(T).integers(0, 2, (T, 124)))
    assert out.shape == (T, 32)


def test_encoder_e_rejects_width():
    with pytest.raises(ShapeError):
        model.encoder_e_forward(model.make_params(TINY[Variant.LF]), np.zeros((5, 100)))


def test_full_size_widths_are_512():
    p = model.make_params(ModelConfig(), seed=0)
    assert model.encoder_e_forward(p, np.zeros((7, 124))).shape == (7, 512)
    assert model.encoder_a_forward(p, np.zeros((10, 257))).shape == (10, 512)
    ef = model.make_params(ModelConfig(variant="ef"), seed=0)
    assert model.encoder_a_forward(ef, np.zeros((10, 514))).shape == (10, 512)


@given(st.integers(1, 30), st.sampled_from([257, 514]))
def test_encoder_a_preserves_time(T, width):
    p = model.make_params(TINY[Variant.EF])
    assert model.encoder_a_forward(p, np.random.default_rng(T).standard_normal((T, width))).shape == (T, 32)


def test_encoder_a_rejects_width():
    with pytest.raises(ShapeError):
        model.encoder_a_forward(model.make_params(TINY[Variant.EF]), np.zeros((5, 300)))


@pytest.mark.parametrize("variant", [Variant.PURE_EPG, Variant.EF, Variant.LF])
def test_zero_input_is_frame_invariant(variant):
    # the conv stack has no time context at zero input, so every frame matches
    p = model.make_params(TINY[variant], seed=1)
    if variant is not Variant.PURE_EPG:
        width = 514 if variant is Variant.EF else 257
        out = model.encoder_a_forward(p, np.zeros((6, width)))
        assert torch.isfinite(out).all()
        assert torch.allclose(out, out[:1].expand_as(out))
    if variant is not Variant.EF:
        out = model.encoder_e_forward(p, np.zeros((6, 124)))
        assert out.shape == (6, 32) and torch.isfinite(out).all()


def test_decoder_width_checks():
    lf, ef = model.make_params(TINY[Variant.LF]), model.make_params(TINY[Variant.EF])
    assert model.decoder_forward(lf, np.zeros((5, 64))).shape == (5, 257)
    assert model.decoder_forward(ef, np.zeros((5, 32))).shape == (5, 257)
    with pytest.raises(ShapeError):
        model.decoder_forward(ef, np.zeros((5, 64)))


def test_bundle_validation():
    with pytest.raises(InputError):
        ModalityBundle()
    with pytest.raises(ShapeError):
        ModalityBundle(epg=np.zeros((4, 124)), audio_feat=np.zeros((5, 257)))


@given(st.integers(1, 25), st.integers(0, 2))
def test_forward_shapes_and_finiteness(T, which):
    rng = np.random.default_rng(T)
    epg = rng.integers(0, 2, (T, 124)).astype(np.float32)
    feat = rng.standard_normal((T, 257)).astype(np.float32) * 3
    bundle = [ModalityBundle(epg=epg), ModalityBundle(audio_feat=feat), ModalityBundle(epg=epg, audio_feat=feat)][which]
    for variant in (Variant.EF, Variant.LF):
        pred, s_a, s_e = model.forward(model.make_params(TINY[variant]), bundle)
        assert pred.shape == (T, 257) and torch.isfinite(pred).all()


def test_long_sequences_preserve_length():
    p = model.make_params(TINY[Variant.LF])
    pred, _, _ = model.forward(p, ModalityBundle(epg=np.zeros((1000, 124)), audio_feat=np.zeros((1000, 257))))
    assert pred.shape == (1000, 257)


def test_lf_latents_and_zero_fill():
    p = model.make_params(TINY[Variant.LF], seed=2)
    epg = np.random.default_rng(0).integers(0, 2, (8, 124))
    feat = np.random.default_rng(1).standard_normal((8, 257))
    _, s_a, s_e = model.lf_forward(p, ModalityBundle(epg=epg, audio_feat=feat))
    assert s_a.shape == s_e.shape == (8, 32)
    pred, s_a, s_e = model.lf_forward(p, ModalityBundle(epg=epg))
    assert s_a is None
    manual = model.decoder_forward(p, torch.cat([torch.zeros_like(s_e), s_e], dim=1))
    assert torch.equal(pred, manual)


def test_lf_latent_substitution():
    cfg = ModelConfig(variant="lf", size_scale=16, latent_substitution=True)
    p = model.make_params(cfg, seed=2)
    epg = np.random.default_rng(0).integers(0, 2, (8, 124))
    pred, _, s_e = model.lf_forward(p, ModalityBundle(epg=epg))
    assert torch.equal(pred, model.decoder_forward(p, torch.cat([s_e, s_e], dim=1)))


def test_ef_zero_fills_raw_features():
    p = model.make_params(TINY[Variant.EF], seed=4)
    epg = np.random.default_rng(0).integers(0, 2, (6, 124)).astype(np.float32)
    a = model.ef_forward(p, ModalityBundle(epg=epg))
    b = model.ef_forward(p, ModalityBundle(epg=epg, audio_feat=np.zeros((6, 257), np.float32)))
    assert torch.equal(a, b)


def test_variant_mismatch_raises():
    with pytest.raises(InputError):
        model.ef_forward(model.make_params(TINY[Variant.LF]), ModalityBundle(epg=np.zeros((3, 124))))
    with pytest.raises(InputError):
        model.lf_forward(model.make_params(TINY[Variant.EF]), ModalityBundle(epg=np.zeros((3, 124))))
    with pytest.raises(InputError):
        model.forward(model.make_params(TINY[Variant.PURE_EPG]), ModalityBundle(audio_feat=np.zeros((3, 257))))


def test_forward_is_deterministic():
    p = model.make_params(TINY[Variant.LF], seed=9)
    b = ModalityBundle(epg=np.ones((9, 124)), audio_feat=np.full((9, 257), 0.3))
    assert torch.equal(model.forward(p, b)[0], model.forward(p, b)[0])


def test_params_container_round_trip(tmp_path):
    p = model.make_params(ModelConfig(variant="ef", size_scale=8, leaky_slope=0.02), seed=13)
    model.save_params(p, tmp_path / "p.ckpt")
    q = model.load_params(tmp_path / "p.ckpt")
    assert q.cfg == p.cfg and q.seed == 13
    assert all(torch.equal(p[k], q[k]) for k in p)
    raw = (tmp_path / "p.ckpt").read_bytes()
    assert raw[:8] == b"EPG2SCKP"
    assert b"model.variant=ef\n" in raw


def test_container_float32_little_endian(tmp_path):
    model.save_container(tmp_path / "c", {"a": 1}, {"w": torch.tensor([[1.5, -2.0]])})
    raw = (tmp_path / "c").read_bytes()
    assert raw.endswith(np.array([1.5, -2.0], dtype="<f4").tobytes())
    header, tensors = model.load_container(tmp_path / "c")
    assert header == {"a": "1"} and tensors["w"].shape == (1, 2)


def test_container_corruption(tmp_path):
    path = tmp_path / "c"
    model.save_params(model.make_params(TINY[Variant.LF]), path)
    raw = path.read_bytes()
    for bad in (b"XXXXXXXX" + raw[8:], raw[:40], raw[:-8]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            model.load_params(path)


def test_parse_value():
    assert model.parse_value("true") is True
    assert model.parse_value("none") is None
    assert model.parse_value("16,32") == (16, 32)
    assert model.parse_value("0.01") == 0.01
    assert model.parse_value("lf") == "lf"


def test_activation_sign_recording():
    p = model.make_params(TINY[Variant.LF])
    b = ModalityBundle(epg=np.ones((4, 124)), audio_feat=np.ones((4, 257)))
    with model.record_activation_signs() as log:
        model.forward(p, b)
    assert len(log) == 12 + 1 + 1  # conv blocks, Encoder_E output, decoder hidden
    model.forward(p, b)
    assert len(log) == 14
