"""Neural building blocks: attention, transformer blocks, Conv-FFN, predictors."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from retts.numerics import (
    DEFAULT_DTYPE,
    ContractError,
    DimensionError,
    RngStream,
    Tensor,
    conv1d,
    dropout,
    layer_norm,
    masked_fill,
    matmul,
    relu,
    softmax_lastdim,
)


class Module:
    """Parameter container. Parameters are Tensor attributes with requires_grad set."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {state[name].shape}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)


def param(rng: RngStream, shape, std: float, dtype=DEFAULT_DTYPE) -> Tensor:
    data = rng.generator().standard_normal(shape) * std
    return Tensor(data.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True):
        self.weight = param(rng, (d_in, d_out), math.sqrt(2.0 / (d_in + d_out)))
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias.broadcast_to(y.shape)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones_param((d,))
        self.beta = zeros_param((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng: RngStream, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None):
        self.weight = param(rng, (kernel_size, c_in, c_out),
                            math.sqrt(2.0 / (kernel_size * c_in + c_out)))
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query/key/value input widths.

    Projections carry no bias, so with a single key every query receives
    ``value @ W_v @ W_o`` exactly.
    """

    def __init__(self, d_q: int, d_k: int, d_v: int, d_model: int, n_heads: int, rng: RngStream):
        if d_model % n_heads:
            raise DimensionError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.W_q = Linear(d_q, d_model, rng, bias=False)
        self.W_k = Linear(d_k, d_model, rng, bias=False)
        self.W_v = Linear(d_v, d_model, rng, bias=False)
        self.W_o = Linear(d_model, d_model, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        return x.reshape(t, self.n_heads, self.head_dim).transpose(1, 0, 2)

    def weights(self, q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Attention weights [heads, T_q, T_k]; ``mask`` true marks a blocked key."""
        Q = self._split(self.W_q(q))
        K = self._split(self.W_k(k))
        logits = matmul(Q, K.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (q.shape[0], k.shape[0]):
                raise DimensionError(f"mask {mask.shape} vs attention {(q.shape[0], k.shape[0])}")
            if np.any(mask.all(axis=1)):
                raise ContractError("attention mask blocks every key for some query")
            logits = masked_fill(logits, np.broadcast_to(mask, logits.shape), -np.inf)
        return softmax_lastdim(logits)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if k.shape[0] != v.shape[0]:
            raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
        attn = self.weights(q, k, mask)
        V = self._split(self.W_v(v))
        out = matmul(attn, V).transpose(1, 0, 2).reshape(q.shape[0], self.n_heads * self.head_dim)
        return self.W_o(out)


class ConvFFN(Module):
    def __init__(self, d: int, hidden: int, rng: RngStream, kernel_size: int = 3):
        self.conv1 = Conv1d(d, hidden, rng, kernel_size)
        self.conv2 = Conv1d(hidden, d, rng, kernel_size)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(x)))


class FFTBlock(Module):
    """Pre-norm feed-forward transformer block: self-attention then Conv-FFN."""

    def __init__(self, d: int, ffn_hidden: int, n_heads: int, rng: RngStream):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, d, d, d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = ConvFFN(d, ffn_hidden, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, mask)
        return x + self.ffn(self.norm2(x))


class LinkAttentionBlock(Module):
    """Self-attention, then attention over global tokens through linking keys, then Conv-FFN."""

    def __init__(self, d: int, ffn_hidden: int, n_heads: int, rng: RngStream):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, d, d, d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.link_attn = MultiHeadAttention(d, d, d, d, n_heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = ConvFFN(d, ffn_hidden, rng)

    def __call__(self, x: Tensor, tokens: Tensor, link_keys: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        if tokens.shape[0] != link_keys.shape[0]:
            raise DimensionError(
                f"global tokens {tokens.shape} and linking keys {link_keys.shape} differ in count")
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, mask)
        x = x + self.link_attn(self.norm2(x), link_keys, tokens)
        return x + self.ffn(self.norm3(x))


class CrossAttentionModule(Module):
    """Post-norm: tokens attend to features, mix across tokens, then an MLP."""

    def __init__(self, channels: int, feature_dim: int, m: int, ffn_hidden: int, n_heads: int,
                 rng: RngStream):
        self.cross_attn = MultiHeadAttention(channels, feature_dim, feature_dim, channels, n_heads, rng)
        self.norm1 = LayerNorm(channels)
        self.token_mixer = param(rng, (m, m), math.sqrt(1.0 / m))
        self.norm2 = LayerNorm(channels)
        self.mlp_in = Linear(channels, ffn_hidden, rng)
        self.mlp_out = Linear(ffn_hidden, channels, rng)
        self.norm3 = LayerNorm(channels)

    def __call__(self, z: Tensor, features: Tensor) -> Tensor:
        if z.shape[0] != self.token_mixer.shape[0]:
            raise DimensionError(f"{z.shape[0]} tokens but mixer is {self.token_mixer.shape}")
        z = self.norm1(z + self.cross_attn(z, features, features))
        z = self.norm2(z + matmul(self.token_mixer, z))
        return self.norm3(z + self.mlp_out(relu(self.mlp_in(z))))


class VariancePredictor(Module):
    """Three kernel-3 convolutions producing one scalar per position.

    The first two convolutions are followed by ReLU, LayerNorm and dropout;
    the last one is a plain 1-channel projection.
    """

    def __init__(self, d: int, channels: int, rng: RngStream, dropout_p: float = 0.1):
        self.conv1 = Conv1d(d, channels, rng)
        self.norm1 = LayerNorm(channels)
        self.conv2 = Conv1d(channels, channels, rng)
        self.norm2 = LayerNorm(channels)
        self.conv3 = Conv1d(channels, 1, rng)
        self.dropout_p = dropout_p

    def __call__(self, x: Tensor, rng: RngStream | None = None) -> Tensor:
        h = self.norm1(relu(self.conv1(x)))
        h = self._drop(h, rng)
        h = self.norm2(relu(self.conv2(h)))
        h = self._drop(h, rng)
        return self.conv3(h).reshape(x.shape[0])

    def _drop(self, h: Tensor, rng: RngStream | None) -> Tensor:
        if not self.training or self.dropout_p <= 0:
            return h
        if rng is None:
            raise ContractError("training-mode dropout needs an RngStream")
        return dropout(h, self.dropout_p, rng)


def sinusoidal_positions(length: int, d: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((length, d))
    table[:, 0:2 * (d // 2):2] = np.sin(angle)
    table[:, 1:2 * (d // 2):2] = np.cos(angle)
    return table.astype(dtype)
