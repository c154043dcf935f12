"""Soft phoneme/frame alignment, forward-sum likelihood, and hard durations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from retts.layers import Conv1d, Linear, Module, param
from retts.numerics import (
    ContractError,
    RngStream,
    Tensor,
    log_softmax_lastdim,
    matmul,
    relu,
    take_rows,
    tsum,
)


@dataclass
class AlignmentMatrix:
    """Per-frame log-distributions over phonemes, shape [T_mel, N]."""

    log_A: Tensor

    @property
    def A(self) -> np.ndarray:
        return np.exp(self.log_A.data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_A.shape


class Aligner(Module):
    """Projects mel frames and phoneme embeddings into a shared space."""

    def __init__(self, vocab: int, n_mels: int, dim: int, rng: RngStream):
        self.embedding = param(rng, (vocab, dim), 1.0)
        self.text_conv = Conv1d(dim, dim, rng)
        self.text_out = Linear(dim, dim, rng)
        self.mel_conv = Conv1d(n_mels, dim, rng)
        self.mel_out = Linear(dim, dim, rng)

    def embed(self, ids) -> Tensor:
        return take_rows(self.embedding, ids)

    def project_text(self, phon_emb: Tensor) -> Tensor:
        return self.text_out(relu(self.text_conv(phon_emb)))

    def project_mel(self, mel: Tensor) -> Tensor:
        return self.mel_out(relu(self.mel_conv(mel)))


def soft_alignment(mel: Tensor, phon_emb: Tensor, aligner: Aligner) -> AlignmentMatrix:
    T, N = mel.shape[0], phon_emb.shape[0]
    if N < 1 or T < N:
        raise ContractError(f"need T >= N >= 1 for a monotonic alignment, got T={T}, N={N}")
    a = aligner.project_mel(mel)
    b = aligner.project_text(phon_emb)
    a2 = tsum(a * a, axis=1, keepdims=True).broadcast_to((T, N))
    b2 = tsum(b * b, axis=1, keepdims=True).reshape(1, N).broadcast_to((T, N))
    sq_dist = a2 + b2 - 2.0 * matmul(a, b.T)
    return AlignmentMatrix(log_softmax_lastdim(-sq_dist))


def _check_sizes(log_A: np.ndarray) -> tuple[int, int]:
    T, N = log_A.shape
    if N < 1 or T < N:
        raise ContractError(f"no monotonic path covers {N} phonemes in {T} frames")
    return T, N


def _forward_log(lA: np.ndarray) -> np.ndarray:
    T, N = lA.shape
    alpha = np.full((T, N), -np.inf)
    alpha[0, 0] = lA[0, 0]
    for t in range(1, T):
        prev = alpha[t - 1]
        shifted = np.concatenate(([-np.inf], prev[:-1]))
        alpha[t] = np.logaddexp(prev, shifted) + lA[t]
    return alpha


def _backward_log(lA: np.ndarray) -> np.ndarray:
    T, N = lA.shape
    beta = np.full((T, N), -np.inf)
    beta[T - 1, N - 1] = 0.0
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1] + lA[t + 1]
        advance = np.concatenate((stay[1:], [-np.inf]))
        beta[t] = np.logaddexp(stay, advance)
    return beta


def forward_sum_loss(log_A: Tensor, T: int | None = None, N: int | None = None) -> Tensor:
    """Negative log of the summed probability of all monotonic covering paths.

    Gradient w.r.t. ``log_A`` is minus the path-posterior occupancy.
    """
    if T is not None or N is not None:
        log_A = log_A[: (T or log_A.shape[0]), : (N or log_A.shape[1])]
    lA = log_A.data.astype(np.float64)
    _check_sizes(lA)
    with np.errstate(invalid="ignore"):
        alpha = _forward_log(lA)
        log_z = alpha[-1, -1]

    def backward(g):
        with np.errstate(invalid="ignore"):
            beta = _backward_log(lA)
            post = np.exp(alpha + beta - log_z)
        post = np.nan_to_num(post, nan=0.0)
        return (-(g * post).astype(log_A.dtype),)

    return Tensor._make(np.asarray(-log_z, dtype=log_A.dtype), (log_A,), backward)


def extract_durations(log_A) -> np.ndarray:
    """Segment lengths of the best monotonic covering path (Viterbi).

    Ties prefer staying on the current phoneme while tracing back, so each
    boundary, taken from last to first, lands on the earliest optimal frame.
    """
    lA = np.asarray(log_A.data if isinstance(log_A, Tensor) else log_A, dtype=np.float64)
    T, N = _check_sizes(lA)
    delta = np.full((T, N), -np.inf)
    delta[0, 0] = lA[0, 0]
    for t in range(1, T):
        prev = delta[t - 1]
        shifted = np.concatenate(([-np.inf], prev[:-1]))
        delta[t] = np.maximum(prev, shifted) + lA[t]
    durations = np.zeros(N, dtype=np.int64)
    j = N - 1
    for t in range(T - 1, 0, -1):
        durations[j] += 1
        if j > 0 and not (delta[t - 1, j] >= delta[t - 1, j - 1]):
            j -= 1
        elif j > 0 and j > t - 1:
            # staying would leave too few frames for the remaining phonemes
            j -= 1
    durations[j] += 1
    return durations


def pool_phoneme_prosody(frame_pitch, frame_energy, durations) -> tuple[np.ndarray, np.ndarray]:
    """Mean of frame-level pitch and energy over each phoneme's span."""
    frame_pitch = np.asarray(frame_pitch, dtype=np.float64)
    frame_energy = np.asarray(frame_energy, dtype=np.float64)
    d = np.asarray(durations, dtype=np.int64)
    if d.sum() != frame_pitch.shape[0] or frame_pitch.shape != frame_energy.shape:
        raise ValueError(
            f"durations sum to {d.sum()} but frame tracks have {frame_pitch.shape[0]}/"
            f"{frame_energy.shape[0]} frames")
    if np.any(d < 1):
        raise ValueError("every phoneme needs at least one frame to pool over")
    starts = np.concatenate(([0], np.cumsum(d)[:-1]))
    pitch = np.add.reduceat(frame_pitch, starts) / d
    energy = np.add.reduceat(frame_energy, starts) / d
    return pitch, energy
