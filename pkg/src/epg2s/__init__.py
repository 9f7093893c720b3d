"""Multimodal EPG + speech generation and enhancement at desk scale."""

from .dsp import Spectrogram, Waveform, griffin_lim, istft, mix_at_snr, stft
from .errors import (
    AdapterError,
    ConfigError,
    DivergenceError,
    FormatError,
    InputError,
    ManifestError,
    MetricError,
    ShapeError,
)
from .model import ModalityBundle, ModelConfig, Variant
from .signal_io import Corpus, EpgSequence, SyntheticSpec, UtterancePair, synth_corpus
from .training import Combo, TrainConfig, train

__version__ = "0.1.0"
