"""Acoustic model: global factor encoder, phoneme encoder, variance adaptor, mel decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from retts.alignment import Aligner
from retts.layers import (
    Conv1d,
    CrossAttentionModule,
    FFTBlock,
    LayerNorm,
    Linear,
    LinkAttentionBlock,
    Module,
    VariancePredictor,
    param,
    sinusoidal_positions,
)
from retts.numerics import (
    DEFAULT_DTYPE,
    ContractError,
    DimensionError,
    RngStream,
    Tensor,
    take_rows,
)


@dataclass
class ModelConfig:
    m: int = 60
    enc_layers: int = 6
    dec_layers: int = 6
    gfe_layers: int = 3
    d_model: int = 384
    ffn_hidden: int = 1536
    gfe_channels: int = 192
    gfe_ffn_hidden: int = 512
    n_heads: int = 2
    n_mels: int = 20
    phoneme_vocab: int = 40
    max_duration: int = 30
    feature_dim: int = 32
    predictor_channels: int = 256
    predictor_dropout: float = 0.1
    aligner_dim: int = 32

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "predictor_dropout":
                if not 0.0 <= value < 1.0:
                    raise ValueError(f"predictor_dropout must lie in [0, 1), got {value}")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        if self.d_model % self.n_heads or self.gfe_channels % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} and gfe_channels={self.gfe_channels} "
                f"must be divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    word_index: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.word_index = np.asarray(self.word_index, dtype=np.int64)
        if self.ids.shape != self.word_index.shape or self.ids.ndim != 1:
            raise ValueError("ids and word_index must be 1-d and of equal length")
        if len(self.ids):
            steps = np.diff(self.word_index)
            if self.word_index[0] != 0 or np.any((steps != 0) & (steps != 1)):
                raise ValueError(f"word_index must start at 0 and grow by 0 or 1: {self.word_index}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_words(self) -> int:
        return int(self.word_index[-1]) + 1 if len(self.ids) else 0

    @classmethod
    def from_words(cls, words) -> "PhonemeSequence":
        ids, widx = [], []
        for w, word in enumerate(words):
            ids.extend(word)
            widx.extend([w] * len(word))
        return cls(np.array(ids, dtype=np.int64), np.array(widx, dtype=np.int64))

    def words(self) -> list[list[int]]:
        return [self.ids[self.word_index == w].tolist() for w in range(self.n_words)]

    def word_span(self, first: int, last: int) -> tuple[int, int]:
        """Phoneme range [start, end) covering words first..last inclusive."""
        idx = np.flatnonzero((self.word_index >= first) & (self.word_index <= last))
        return int(idx[0]), int(idx[-1]) + 1


@dataclass
class ProsodyTrack:
    duration: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        self.duration = np.asarray(self.duration, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        if not (self.duration.shape == self.pitch.shape == self.energy.shape):
            raise ValueError("duration, pitch and energy tracks differ in length")
        if np.any(self.duration < 0):
            raise ValueError("durations must be non-negative")

    def __len__(self) -> int:
        return len(self.duration)

    @property
    def n_frames(self) -> int:
        return int(self.duration.sum())


@dataclass
class ProsodyContext:
    """Known prosody around a region to fill in; ``mask`` true marks unknown phonemes."""

    duration: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.duration = np.array(self.duration, dtype=np.float64)
        self.pitch = np.array(self.pitch, dtype=np.float64)
        self.energy = np.array(self.energy, dtype=np.float64)
        if self.mask is None:
            self.mask = np.zeros(self.duration.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        for track in (self.duration, self.pitch, self.energy):
            track[self.mask] = 0.0

    @classmethod
    def from_track(cls, track: ProsodyTrack, mask=None) -> "ProsodyContext":
        return cls(track.duration.astype(np.float64), track.pitch.copy(), track.energy.copy(), mask)

    @classmethod
    def fully_masked(cls, n: int) -> "ProsodyContext":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.ones(n, dtype=bool))

    def __len__(self) -> int:
        return len(self.duration)


@dataclass
class VarianceOutput:
    hidden: Tensor          # length-regulated [T, d_model]
    log_duration: Tensor    # predicted log(1 + d) per phoneme
    pitch: Tensor
    energy: Tensor
    durations: np.ndarray   # durations actually used for length regulation


def length_regulate(H: Tensor, durations) -> Tensor:
    d = np.asarray(durations, dtype=np.int64)
    if d.shape != (H.shape[0],):
        raise DimensionError(f"{d.shape[0] if d.ndim else d} durations for {H.shape[0]} rows")
    if np.any(d < 0):
        raise ValueError(f"negative duration in {d}")
    if d.sum() < 1:
        raise ContractError("all durations are zero; nothing to regulate")
    return take_rows(H, np.repeat(np.arange(len(d)), d))


def discretize_durations(log_duration: np.ndarray, max_duration: int) -> np.ndarray:
    frames = np.rint(np.exp(np.asarray(log_duration, dtype=np.float64)) - 1.0)
    return np.clip(frames, 1, max_duration).astype(np.int64)


def _column(values, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype).reshape(-1, 1))


class InsertionTTS(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        c = config
        rng = RngStream(seed, "init")
        # global factor encoder
        self.prototypes = param(rng, (c.m, c.gfe_channels), 1.0)
        self.gfe = [CrossAttentionModule(c.gfe_channels, c.feature_dim, c.m, c.gfe_ffn_hidden,
                                         c.n_heads, rng) for _ in range(c.gfe_layers)]
        self.gfe_proj = Linear(c.gfe_channels, c.d_model, rng)
        # phoneme encoder
        self.phoneme_embedding = param(rng, (c.phoneme_vocab, c.d_model), 1.0 / math.sqrt(c.d_model))
        self.encoder = [FFTBlock(c.d_model, c.ffn_hidden, c.n_heads, rng) for _ in range(c.enc_layers)]
        self.encoder_norm = LayerNorm(c.d_model)
        # variance adaptor
        self.duration_predictor = VariancePredictor(c.d_model, c.predictor_channels, rng, c.predictor_dropout)
        self.pitch_predictor = VariancePredictor(c.d_model, c.predictor_channels, rng, c.predictor_dropout)
        self.energy_predictor = VariancePredictor(c.d_model, c.predictor_channels, rng, c.predictor_dropout)
        self.duration_embedding = Conv1d(1, c.d_model, rng)
        self.pitch_embedding = Conv1d(1, c.d_model, rng)
        self.energy_embedding = Conv1d(1, c.d_model, rng)
        # mel decoder
        self.link_keys = param(rng, (c.m, c.d_model), 1.0)
        self.decoder = [LinkAttentionBlock(c.d_model, c.ffn_hidden, c.n_heads, rng)
                        for _ in range(c.dec_layers)]
        self.decoder_norm = LayerNorm(c.d_model)
        self.mel_proj = Linear(c.d_model, c.n_mels, rng)
        # jointly trained alignment
        self.aligner = Aligner(c.phoneme_vocab, c.n_mels, c.aligner_dim, rng)
        if dtype != DEFAULT_DTYPE:
            self.to(dtype)

    @property
    def dtype(self):
        return self.prototypes.dtype

    # -- global factors ---------------------------------------------------------
    def encode_global_factors(self, features) -> Tensor:
        """Global factor tokens S [m, d_model]; row i descends from prototype i."""
        F = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=self.dtype))
        if F.ndim != 2 or F.shape[0] < 1:
            raise ContractError(f"reference feature must be a non-empty [T_F, c_F] matrix, got {F.shape}")
        if F.shape[1] != self.config.feature_dim:
            raise DimensionError(f"feature dim {F.shape[1]} != configured {self.config.feature_dim}")
        z = self.prototypes
        for block in self.gfe:
            z = block(z, F)
        return self.gfe_proj(z)

    # -- phoneme encoder --------------------------------------------------------
    def encode_phonemes(self, text: PhonemeSequence, tokens: Tensor) -> Tensor:
        ids = np.asarray(text.ids)
        if len(ids) == 0:
            raise ValueError("empty phoneme sequence")
        if ids.min() < 0 or ids.max() >= self.config.phoneme_vocab:
            raise ValueError(f"phoneme id outside [0, {self.config.phoneme_vocab}): {ids}")
        n, d = len(ids), self.config.d_model
        x = take_rows(self.phoneme_embedding, ids)
        x = x + Tensor(sinusoidal_positions(n, d, self.dtype))
        x = x + tokens[0].broadcast_to((n, d))
        for block in self.encoder:
            x = block(x)
        return self.encoder_norm(x)

    # -- variance adaptor -------------------------------------------------------
    def embed_context(self, ctx: ProsodyContext) -> Tensor:
        keep = (~ctx.mask).astype(self.dtype)[:, None]
        emb = (self.duration_embedding(_column(np.log1p(ctx.duration), self.dtype))
               + self.pitch_embedding(_column(ctx.pitch, self.dtype))
               + self.energy_embedding(_column(ctx.energy, self.dtype)))
        return emb * Tensor(np.broadcast_to(keep, emb.shape))

    def variance_adapt(self, H: Tensor, ctx: ProsodyContext | None = None,
                       teacher: ProsodyTrack | None = None, mode: str = "infer",
                       rng: RngStream | None = None, predict_mask=None) -> VarianceOutput:
        """Predict prosody, add pitch/energy embeddings, and length-regulate.

        ``mode='train'`` conditions on ``teacher`` everywhere. In ``'infer'``
        mode predictions are used, except that when ``teacher`` is given with
        ``predict_mask`` the teacher values are kept wherever the mask is false.
        """
        n = H.shape[0]
        if ctx is not None:
            if len(ctx) != n:
                raise DimensionError(f"prosody context has {len(ctx)} entries for {n} phonemes")
            H = H + self.embed_context(ctx)
        log_dur = self.duration_predictor(H, rng)
        pitch = self.pitch_predictor(H, rng)
        energy = self.energy_predictor(H, rng)

        if mode == "train":
            if teacher is None:
                raise ContractError("train mode needs teacher prosody")
            if len(teacher) != n:
                raise DimensionError(f"teacher prosody has {len(teacher)} entries for {n} phonemes")
            durations = teacher.duration
            pitch_used, energy_used = teacher.pitch, teacher.energy
        elif mode == "infer":
            durations = discretize_durations(log_dur.data, self.config.max_duration)
            pitch_used = pitch.data.astype(np.float64)
            energy_used = energy.data.astype(np.float64)
            if teacher is not None:
                use_pred = np.ones(n, dtype=bool) if predict_mask is None else np.asarray(predict_mask, bool)
                if len(teacher) != n or use_pred.shape != (n,):
                    raise DimensionError("teacher/predict_mask length does not match the phonemes")
                durations = np.where(use_pred, durations, teacher.duration)
                pitch_used = np.where(use_pred, pitch_used, teacher.pitch)
                energy_used = np.where(use_pred, energy_used, teacher.energy)
            if durations.sum() < 1:
                raise ContractError("predicted durations sum to zero")
        else:
            raise ValueError(f"unknown mode {mode!r}")

        H = (H + self.pitch_embedding(_column(pitch_used, self.dtype))
             + self.energy_embedding(_column(energy_used, self.dtype)))
        return VarianceOutput(length_regulate(H, durations), log_dur, pitch, energy,
                              np.asarray(durations, dtype=np.int64))

    # -- mel decoder ------------------------------------------------------------
    def decode_mel(self, hidden: Tensor, tokens: Tensor, link_keys: Tensor | None = None) -> Tensor:
        K = self.link_keys if link_keys is None else link_keys
        if tokens.shape[0] != K.shape[0]:
            raise DimensionError(f"{tokens.shape[0]} global tokens but {K.shape[0]} linking keys")
        t, d = hidden.shape
        x = hidden + Tensor(sinusoidal_positions(t, d, self.dtype))
        for block in self.decoder:
            x = block(x, tokens, K)
        return self.mel_proj(self.decoder_norm(x))
