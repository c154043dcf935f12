"""Losses, prosody masking, discriminator, LAMB, and the two-stage training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from retts.alignment import extract_durations, forward_sum_loss, pool_phoneme_prosody, soft_alignment
from retts.layers import Conv1d, Module
from retts.model import PhonemeSequence, ProsodyContext, ProsodyTrack, InsertionTTS
from retts.numerics import (
    NumericError,
    RngStream,
    Tensor,
    concat,
    leaky_relu,
    mean,
    relu,
    tabs,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.98
    lamb_eps: float = 1e-6
    stage1_lr: float = 0.1
    stage1_power: float = 0.5
    stage1_warmup: int = 1000
    stage1_total: int = 80000
    stage2_lr_model: float = 1e-4
    stage2_lr_disc: float = 5e-5
    stage2_steps: int = 20000
    alpha_dur: float = 0.1
    alpha_pitch: float = 0.1
    alpha_energy: float = 0.1
    alpha_align: float = 1.0
    lambda_feat: float = 10.0
    mask_probability: float = 0.5
    mask_span_max: int = 3
    disc_chunk: int = 32
    disc_channels: tuple = (64, 128, 256, 256)
    disc_kernel: int = 5
    disc_stride: int = 2
    grad_clip: float = 1.0
    duration_source: str = "align"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if isinstance(self.disc_channels, str):
            self.disc_channels = tuple(int(c) for c in self.disc_channels.split(","))
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ValueError(f"mask_probability must lie in [0, 1], got {self.mask_probability}")
        if self.duration_source not in ("align", "oracle"):
            raise ValueError(f"duration_source must be 'align' or 'oracle', got {self.duration_source!r}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("mask_probability", "duration_source", "disc_channels"):
                continue
            if f.name == "weight_decay" and value == 0:
                continue
            if value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        if self.stage1_total <= self.stage1_warmup:
            raise ValueError("stage1_total must exceed stage1_warmup")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_channels"] = ",".join(str(c) for c in self.disc_channels)
        return d


# -- stage-1 loss --------------------------------------------------------------

@dataclass
class Stage1LossBreakdown:
    mel_mse: Tensor
    dur_mse: Tensor
    pitch_mse: Tensor
    energy_mse: Tensor
    align_loss: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).data) for f in fields(self)}


def _compose(mel, dur, pitch, energy, align, cfg: TrainConfig) -> Stage1LossBreakdown:
    total = (mel + dur * cfg.alpha_dur + pitch * cfg.alpha_pitch + energy * cfg.alpha_energy
             + align * cfg.alpha_align)
    return Stage1LossBreakdown(mel, dur, pitch, energy, align, total)


def _mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - Tensor(target)
    return mean(diff * diff)


@dataclass
class Stage1Prediction:
    mel: Tensor
    log_duration: Tensor
    pitch: Tensor
    energy: Tensor


@dataclass
class Stage1Target:
    mel: np.ndarray
    prosody: ProsodyTrack


def stage1_loss(pred: Stage1Prediction, target: Stage1Target, log_A: Tensor | None,
                cfg: TrainConfig) -> Stage1LossBreakdown:
    mel = _mse(pred.mel, target.mel)
    dur = _mse(pred.log_duration, np.log1p(target.prosody.duration))
    pitch = _mse(pred.pitch, target.prosody.pitch)
    energy = _mse(pred.energy, target.prosody.energy)
    if log_A is None:
        align = Tensor(np.zeros((), dtype=mel.dtype))
    else:
        align = forward_sum_loss(log_A)
    return _compose(mel, dur, pitch, energy, align, cfg)


def average_breakdowns(items: Sequence[Stage1LossBreakdown], cfg: TrainConfig) -> Stage1LossBreakdown:
    k = 1.0 / len(items)
    parts = []
    for name in ("mel_mse", "dur_mse", "pitch_mse", "energy_mse", "align_loss"):
        acc = getattr(items[0], name)
        for item in items[1:]:
            acc = acc + getattr(item, name)
        parts.append(acc * k)
    return _compose(*parts, cfg)


# -- prosody smoothing mask ----------------------------------------------------

@dataclass
class MaskSpec:
    apply: bool
    word_span: tuple[int, int] | None
    phoneme_mask: np.ndarray


def sample_prosody_mask(text: PhonemeSequence, rng: RngStream,
                        probability: float = 0.5, max_span: int = 3) -> MaskSpec:
    """Mask a span of 1..max_span whole words with the given probability."""
    n_words = text.n_words
    if n_words < 1:
        raise ValueError("cannot mask an empty phoneme sequence")
    g = rng.generator()
    apply = bool(g.random() < probability)
    span = min(int(g.integers(1, max_span + 1)), n_words)
    start = int(g.integers(0, n_words - span + 1))
    if not apply:
        return MaskSpec(False, None, np.zeros(len(text), dtype=bool))
    end = start + span - 1
    mask = (text.word_index >= start) & (text.word_index <= end)
    return MaskSpec(True, (start, end), mask)


# -- adversarial losses ----------------------------------------------------------

def hinge_d_loss(d_real, d_fake) -> Tensor:
    d_real = d_real if isinstance(d_real, Tensor) else Tensor(np.float64(d_real))
    d_fake = d_fake if isinstance(d_fake, Tensor) else Tensor(np.float64(d_fake))
    return relu(1.0 - d_real) + relu(1.0 + d_fake)


def feature_matching_loss(feats_real: Sequence[Tensor], feats_fake: Sequence[Tensor]) -> Tensor:
    """Layer-averaged, size-normalized L1 distance between discriminator features."""
    if len(feats_real) != len(feats_fake) or not feats_real:
        raise ValueError(f"feature lists differ in length: {len(feats_real)} vs {len(feats_fake)}")
    total = None
    for real, fake in zip(feats_real, feats_fake):
        real = real if isinstance(real, Tensor) else Tensor(np.asarray(real, dtype=np.float64))
        fake = fake if isinstance(fake, Tensor) else Tensor(np.asarray(fake, dtype=np.float64))
        if real.shape != fake.shape:
            raise ValueError(f"feature shape mismatch {real.shape} vs {fake.shape}")
        term = mean(tabs(real - fake))
        total = term if total is None else total + term
    return total * (1.0 / len(feats_real))


def stage2_loss(stage1_total, feat, lam: float = 10.0):
    return stage1_total + feat * lam


class Discriminator(Module):
    """Strided 1-d conv critic over fixed-length mel chunks."""

    def __init__(self, n_mels: int, chunk: int, channels: Sequence[int], rng: RngStream,
                 kernel: int = 5, stride: int = 2, slope: float = 0.2):
        self.chunk = chunk
        self.slope = slope
        widths = [n_mels, *channels]
        self.convs = [Conv1d(widths[i], widths[i + 1], rng, kernel, stride, kernel // 2)
                      for i in range(len(channels))]
        self.head = Conv1d(widths[-1], 1, rng, 3)
        # scores start at 0, inside the hinge margin, so the untrained loss is exactly 2
        self.head.weight.data[...] = 0
        self.feature_dims = []
        t = chunk
        for c in channels:
            t = (t + 2 * (kernel // 2) - kernel) // stride + 1
            self.feature_dims.append(t * c)

    def __call__(self, chunk: Tensor) -> tuple[Tensor, list[Tensor]]:
        if chunk.shape[0] != self.chunk:
            raise ValueError(f"discriminator takes {self.chunk}-frame chunks, got {chunk.shape[0]}")
        feats = []
        h = chunk
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
            feats.append(h)
        score = mean(self.head(h))
        return score, feats


def sample_chunk(n_frames: int, chunk: int, rng: RngStream) -> int:
    """Start frame of a chunk lying inside the utterance (0 when it is too short)."""
    g = rng.generator()
    if n_frames <= chunk:
        return 0
    return int(g.integers(0, n_frames - chunk + 1))


def take_chunk(mel: Tensor, start: int, chunk: int) -> Tensor:
    piece = mel[start:start + chunk]
    if piece.shape[0] < chunk:
        pad = Tensor(np.zeros((chunk - piece.shape[0], mel.shape[1]), dtype=mel.dtype))
        piece = concat([piece, pad], axis=0)
    return piece


# -- optimization --------------------------------------------------------------

@dataclass
class LambState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def lamb_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: LambState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6,
              weight_decay: float = 0.0, max_trust: float = 10.0) -> LambState:
    """One LAMB update in place. Raises NumericError (nothing changed) on non-finite grads."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        v = state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        w_norm = float(np.linalg.norm(p.data))
        u_norm = float(np.linalg.norm(update))
        trust = 1.0 if w_norm == 0.0 or u_norm == 0.0 else min(w_norm / u_norm, max_trust)
        p.data = (p.data - lr * trust * update).astype(p.dtype)
    return state


class Lamb:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = LambState()

    def step(self, lr: float) -> None:
        c = self.cfg
        lamb_step(self.params, [p.grad for p in self.params], self.state, lr,
                  c.beta1, c.beta2, c.lamb_eps, c.weight_decay)

    def state_arrays(self, prefix: str, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for i, name in enumerate(names):
            if self.state.m:
                out[f"{prefix}.m.{name}"] = self.state.m[i]
                out[f"{prefix}.v.{name}"] = self.state.v[i]
        return out

    def load_arrays(self, prefix: str, names: Sequence[str], arrays: dict, step: int) -> None:
        self.state.step = step
        if f"{prefix}.m.{names[0]}" in arrays:
            self.state.m = [np.array(arrays[f"{prefix}.m.{n}"]) for n in names]
            self.state.v = [np.array(arrays[f"{prefix}.v.{n}"]) for n in names]


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def poly_lr(step: int, lr: float = 0.1, power: float = 0.5, warmup: int = 1000,
            total: int = 80000) -> float:
    if step < warmup:
        return lr * step / warmup
    frac = 1.0 - (step - warmup) / (total - warmup)
    return lr * max(frac, 0.0) ** power


# -- training loop ---------------------------------------------------------------

def teacher_prosody(utt, log_A: Tensor | None, source: str) -> ProsodyTrack:
    """Ground-truth phoneme prosody, from the alignment or the corpus oracle."""
    if source == "oracle" or log_A is None:
        return utt.prosody
    d = extract_durations(log_A)
    pitch, energy = pool_phoneme_prosody(utt.frame_pitch, utt.frame_energy, d)
    return ProsodyTrack(d, pitch, energy)


def forward_stage1(model: InsertionTTS, utt, mask: MaskSpec, cfg: TrainConfig,
                   dropout_rng: RngStream | None = None):
    """Teacher-forced forward pass for one utterance; returns (prediction, target, log_A)."""
    dtype = model.dtype
    mel = Tensor(np.asarray(utt.mel, dtype=dtype))
    tokens = model.encode_global_factors(np.asarray(utt.ref_feature, dtype=dtype))
    hidden = model.encode_phonemes(utt.phonemes, tokens)
    align = soft_alignment(mel, model.aligner.embed(utt.phonemes.ids), model.aligner)
    teacher = teacher_prosody(utt, align.log_A, cfg.duration_source)
    ctx = ProsodyContext.from_track(teacher, mask.phoneme_mask)
    out = model.variance_adapt(hidden, ctx, teacher, "train", rng=dropout_rng)
    mel_hat = model.decode_mel(out.hidden, tokens)
    pred = Stage1Prediction(mel_hat, out.log_duration, out.pitch, out.energy)
    return pred, Stage1Target(utt.mel, teacher), align.log_A


def _fmt(value: float) -> str:
    return repr(float(value))


class Trainer:
    """Owns the model, optimizers, random streams and the metrics log for one stage."""

    STREAMS = ("data", "mask", "dropout", "chunk")

    def __init__(self, model: InsertionTTS, cfg: TrainConfig, data: Sequence, stage: int = 1,
                 seed: int = 0, log_path: str | Path | None = None):
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if not data:
            raise ValueError("training data is empty")
        mc = model.config
        for utt in data:
            if utt.mel.shape[1] != mc.n_mels or utt.ref_feature.shape[1] != mc.feature_dim:
                raise ValueError(f"utterance {utt.id} does not match the model config "
                                 f"(n_mels={mc.n_mels}, feature_dim={mc.feature_dim})")
            if utt.phonemes.ids.max() >= mc.phoneme_vocab:
                raise ValueError(f"utterance {utt.id} uses phonemes beyond the vocabulary")
        self.model = model
        self.cfg = cfg
        self.data = list(data)
        self.stage = stage
        self.seed = seed
        self.step = 0
        self.rngs = {name: RngStream(seed, f"{name}/stage{stage}") for name in self.STREAMS}
        self.param_names = [n for n, _ in model.named_parameters()]
        self.opt = Lamb(model.parameters(), cfg)
        self.disc = None
        self.disc_opt = None
        if stage == 2:
            self.disc = Discriminator(mc.n_mels, cfg.disc_chunk, cfg.disc_channels,
                                      RngStream(seed, "init/disc"), cfg.disc_kernel, cfg.disc_stride)
            self.disc_opt = Lamb(self.disc.parameters(), cfg)
            self.disc_names = [n for n, _ in self.disc.named_parameters()]
        self.log_path = Path(log_path) if log_path else None
        self._warned_short = set()

    # -- bookkeeping --------------------------------------------------------------
    def _batch(self) -> list:
        g = self.rngs["data"].generator()
        k = min(self.cfg.batch_size, len(self.data))
        idx = g.choice(len(self.data), size=k, replace=False)
        return [self.data[i] for i in sorted(idx)]

    def _write_log(self, record: dict) -> None:
        line = "\t".join(f"{k}={v}" for k, v in record.items())
        log.debug(line)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def current_lr(self) -> float:
        c = self.cfg
        if self.stage == 1:
            return poly_lr(self.step + 1, c.stage1_lr, c.stage1_power, c.stage1_warmup, c.stage1_total)
        return c.stage2_lr_model

    # -- steps ----------------------------------------------------------------------
    def _stage1_batch_loss(self, batch):
        items = []
        fakes = []
        for utt in batch:
            mask = sample_prosody_mask(utt.phonemes, self.rngs["mask"], self.cfg.mask_probability,
                                       self.cfg.mask_span_max)
            pred, target, log_A = forward_stage1(self.model, utt, mask, self.cfg, self.rngs["dropout"])
            items.append(stage1_loss(pred, target, log_A, self.cfg))
            fakes.append((utt, pred.mel))
        return average_breakdowns(items, self.cfg), fakes

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        self.model.train()
        batch = self._batch()
        lr = self.current_lr()
        self.model.zero_grad()
        breakdown, fakes = self._stage1_batch_loss(batch)
        record = {"step": self.step, "stage": self.stage, "lr": _fmt(lr)}
        if self.stage == 1:
            breakdown.total.backward()
            clip_grad_norm(self.opt.params, self.cfg.grad_clip)
            self.opt.step(lr)
            record.update({k: _fmt(v) for k, v in breakdown.values().items()})
        else:
            record.update(self._adversarial_update(breakdown, fakes, lr))
        self.step += 1
        record["wall"] = f"{time.perf_counter() - t0:.4f}"
        self._write_log(record)
        return record

    def _adversarial_update(self, breakdown: Stage1LossBreakdown, fakes, lr: float) -> dict:
        cfg = self.cfg
        chunks = []
        for utt, mel_hat in fakes:
            n = utt.mel.shape[0]
            if n < cfg.disc_chunk and utt.id not in self._warned_short:
                self._warned_short.add(utt.id)
                log.info("utterance %s has %d < %d frames; zero-padding its chunk", utt.id, n, cfg.disc_chunk)
            start = sample_chunk(n, cfg.disc_chunk, self.rngs["chunk"])
            real = take_chunk(Tensor(np.asarray(utt.mel, dtype=mel_hat.dtype)), start, cfg.disc_chunk)
            chunks.append((real, take_chunk(mel_hat, start, cfg.disc_chunk)))

        # discriminator update on detached generator output
        self.disc.train()
        self.disc.zero_grad()
        d_loss = None
        for real, fake in chunks:
            s_real, _ = self.disc(real)
            s_fake, _ = self.disc(fake.detach())
            term = hinge_d_loss(s_real, s_fake)
            d_loss = term if d_loss is None else d_loss + term
        d_loss = d_loss * (1.0 / len(chunks))
        d_loss.backward()
        clip_grad_norm(self.disc_opt.params, cfg.grad_clip)
        self.disc_opt.step(cfg.stage2_lr_disc)

        # model update: stage-1 loss plus feature matching
        feat = None
        for real, fake in chunks:
            _, f_real = self.disc(real)
            _, f_fake = self.disc(fake)
            term = feature_matching_loss([f.detach() for f in f_real], f_fake)
            feat = term if feat is None else feat + term
        feat = feat * (1.0 / len(chunks))
        total = stage2_loss(breakdown.total, feat, cfg.lambda_feat)
        total.backward()
        self.disc.zero_grad()
        clip_grad_norm(self.opt.params, cfg.grad_clip)
        self.opt.step(lr)
        record = {"lr_disc": _fmt(cfg.stage2_lr_disc)}
        record.update({k: _fmt(v) for k, v in breakdown.values().items()})
        record.update({"d_loss": _fmt(d_loss.data), "feat_loss": _fmt(feat.data),
                       "stage2_total": _fmt(total.data)})
        return record

    def run(self, until_step: int, checkpoint_every: int | None = None,
            checkpoint_dir: str | Path | None = None) -> list[dict]:
        from retts.io import save_checkpoint

        records = []
        every = checkpoint_every or self.cfg.checkpoint_every
        while self.step < until_step:
            records.append(self.train_step())
            if checkpoint_dir is not None and (self.step % every == 0 or self.step == until_step):
                path = Path(checkpoint_dir) / f"stage{self.stage}_step{self.step:06d}.ckpt"
                save_checkpoint(path, self.checkpoint())
        return records

    # -- checkpoint state ---------------------------------------------------------
    def checkpoint(self):
        from retts.io import Checkpoint

        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update(self.opt.state_arrays("opt.model", self.param_names))
        meta = {
            "stage": self.stage,
            "step": self.step,
            "seed": self.seed,
            "opt_step": self.opt.state.step,
            "rng": {k: r.state() for k, r in self.rngs.items()},
        }
        if self.disc is not None:
            tensors.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
            tensors.update(self.disc_opt.state_arrays("opt.disc", self.disc_names))
            meta["disc_opt_step"] = self.disc_opt.state.step
        return Checkpoint(model_config=self.model.config.to_dict(), train_config=self.cfg.to_dict(),
                          meta=meta, tensors=tensors)

    def restore(self, ckpt) -> None:
        """Resume from a checkpoint written by a trainer of the same stage."""
        if ckpt.meta.get("stage") != self.stage:
            raise ValueError(f"checkpoint is stage {ckpt.meta.get('stage')}, trainer is stage {self.stage}")
        self.model.load_state_dict(ckpt.model_state())
        self.opt.load_arrays("opt.model", self.param_names, ckpt.tensors, ckpt.meta["opt_step"])
        if self.disc is not None:
            self.disc.load_state_dict({k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("disc.")})
            self.disc_opt.load_arrays("opt.disc", self.disc_names, ckpt.tensors, ckpt.meta["disc_opt_step"])
        self.step = int(ckpt.meta["step"])
        self.seed = int(ckpt.meta["seed"])
        for name, counter in ckpt.meta["rng"].items():
            self.rngs[name] = RngStream(self.seed, f"{name}/stage{self.stage}", counter)
