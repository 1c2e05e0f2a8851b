"""Encoder building blocks: standard and transposed attention heads, the dual
(spatial/spectral) multi-head layer, feed-forward network, encoder layer and
sinusoidal positional encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    UsageError,
    as_tensor,
    gelu,
    layer_norm,
    linear,
    masked_fill,
    matmul,
    softmax,
    stack,
)

HEAD_POLICIES = ("none", "alternate_spatial_spectral", "spectral_only")
RESIDUAL_FORMS = ("literal", "standard_preln")


class ConfigError(ValueError):
    """Inconsistent layer configuration."""


@dataclass(frozen=True)
class AttentionConfig:
    """Shape of one encoder layer.

    ``transposed_head_policy`` selects which heads attend over the projected
    feature axis instead of the sequence axis:

    * ``"none"``: every head is a standard (sequence-axis) head.
    * ``"alternate_spatial_spectral"``: heads 0, 2, 4, ... are standard,
      heads 1, 3, 5, ... are transposed. Needs an even head count.
    * ``"spectral_only"``: every head is transposed.

    ``residual`` picks the encoder wiring: ``"literal"`` is
    ``H' = LN(MHSA(LN(X) + LN(X)))``; ``"standard_preln"`` is
    ``H' = LN(MHSA(LN(X)) + X)``. Both finish with ``H = LN(FFN(H') + H')``.
    """

    d_model: int
    n_heads: int
    d_head: int
    ffn_hidden: int
    transposed_head_policy: str = "none"
    residual: str = "literal"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_head", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.ffn_hidden < self.d_model:
            raise ConfigError("ffn_hidden must be >= d_model")
        if self.transposed_head_policy not in HEAD_POLICIES:
            raise ConfigError(f"unknown transposed_head_policy {self.transposed_head_policy!r}")
        if self.transposed_head_policy == "alternate_spatial_spectral" and self.n_heads % 2:
            raise ConfigError("alternate_spatial_spectral needs an even number of heads")
        if self.residual not in RESIDUAL_FORMS:
            raise ConfigError(f"unknown residual form {self.residual!r}")

    @property
    def qkv_dim(self) -> int:
        return self.n_heads * self.d_head

    def head_kinds(self) -> list[str]:
        """'spatial' (standard) or 'spectral' (transposed) for each head index."""
        if self.transposed_head_policy == "none":
            return ["spatial"] * self.n_heads
        if self.transposed_head_policy == "spectral_only":
            return ["spectral"] * self.n_heads
        return ["spatial" if i % 2 == 0 else "spectral" for i in range(self.n_heads)]


# -- parameter containers ------------------------------------------------------

class Module:
    """Holds named parameter tensors and child modules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = uniform_weight(rng, d_in, d_out, dtype)
        self.bias = zeros_param((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = ones_param((d,), dtype)
        self.beta = zeros_param((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


# -- attention kernels ----------------------------------------------------------

def _key_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n:
        raise DimensionError(f"mask length {mask.shape[-1]} does not match sequence length {n}")
    if not mask.any(axis=-1).all():
        raise UsageError("every sequence needs at least one unmasked position")
    return mask


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the sequence axis (second to last).

    ``mask`` is a boolean validity array over key positions, broadcastable to
    ``(..., n)``; invalid keys get a logit of -1e9 and therefore zero weight.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    d_k = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        keep = _key_mask(mask, k.shape[-2])
        # (..., n_keys) -> (..., 1, n_keys) so every query row shares the key mask
        scores = masked_fill(scores, keep[..., None, :])
    return matmul(softmax(scores, axis=-1), v)


def transposed_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attention across the feature axis: ``A = softmax(q^T k / sqrt(d_k))``
    is ``(d_k, d_k)`` and the result ``(A v^T)^T = v A^T`` keeps ``v``'s shape.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"transposed attention needs equal shapes: q{q.shape} k{k.shape} v{v.shape}")
    d_k = q.shape[-1]
    scores = matmul(q.swapaxes(-1, -2), k) * (1.0 / np.sqrt(d_k))
    attn = softmax(scores, axis=-1)
    return matmul(v, attn.swapaxes(-1, -2))


class DualMultiHeadAttention(Module):
    """Multi-head self-attention whose heads may attend over either axis.

    Input ``(..., n, d_model)``; queries/keys/values are projected to
    ``n_heads * d_head`` and split per head. Standard heads treat the ``n``
    rows (e.g. channels) as the sequence; transposed heads attend over the
    ``d_head`` projected features (e.g. frequency bands). Head outputs are
    concatenated in head order and projected back to ``d_model``.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.q = Linear(cfg.d_model, cfg.qkv_dim, rng, dtype)
        self.k = Linear(cfg.d_model, cfg.qkv_dim, rng, dtype)
        self.v = Linear(cfg.d_model, cfg.qkv_dim, rng, dtype)
        self.out = Linear(cfg.qkv_dim, cfg.d_model, rng, dtype)
        self.kinds = cfg.head_kinds()

    def _heads(self, x: Tensor, sl: slice) -> Tensor:
        *lead, n, _ = x.shape
        x = x.reshape(*lead, n, self.cfg.n_heads, self.cfg.d_head)
        if sl != slice(None):
            x = x[..., sl, :]
        return x.swapaxes(-2, -3)  # (..., heads, n, d_head)

    def _attend(self, q, k, v, kind: str, sl: slice, mask) -> Tensor:
        q, k, v = self._heads(q, sl), self._heads(k, sl), self._heads(v, sl)
        if kind == "spatial":
            head_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
            out = scaled_attention(q, k, v, head_mask)
        else:
            if mask is not None:
                raise UsageError("transposed heads do not support padding masks")
            out = transposed_attention(q, k, v)
        return out.swapaxes(-2, -3)  # (..., n, heads, d_head)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"expected last axis {self.cfg.d_model}, got {x.shape}")
        q, k, v = self.q(x), self.k(x), self.v(x)
        if self.cfg.transposed_head_policy == "alternate_spatial_spectral":
            even = self._attend(q, k, v, "spatial", slice(0, None, 2), mask)
            odd = self._attend(q, k, v, "spectral", slice(1, None, 2), mask)
            # (..., n, H/2, 2, d_head) flattens to head order 0, 1, 2, ...
            heads = stack([even, odd], axis=-2)
        else:
            heads = self._attend(q, k, v, self.kinds[0], slice(None), mask)
        *lead, n = x.shape[:-1]
        return self.out(heads.reshape(*lead, n, self.cfg.qkv_dim))


def dual_mhsa(X: Tensor, mha: DualMultiHeadAttention, mask=None) -> Tensor:
    return mha(X, mask)


def feed_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """``GeLU(x W1 + b1) W2 + b2`` applied identically at every position."""
    return linear(gelu(linear(x, W1, b1)), W2, b2)


class FeedForward(Module):
    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.up = Linear(d_model, d_hidden, rng, dtype)
        self.down = Linear(d_hidden, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.up.weight, self.up.bias, self.down.weight, self.down.bias)


class EncoderLayer(Module):
    """One encoder layer; see :class:`AttentionConfig` for the residual forms."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.attn = DualMultiHeadAttention(cfg, rng, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, rng, dtype)
        self.ln_in = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.ln_attn = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.ln_ffn = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = as_tensor(x)
        normed = self.ln_in(x)
        if self.cfg.residual == "literal":
            h = self.ln_attn(self.attn(normed + normed, mask))
        else:
            h = self.ln_attn(self.attn(normed, mask) + x)
        return self.ln_ffn(self.ffn(h) + h)


def encoder_layer(X: Tensor, layer: EncoderLayer, mask=None) -> Tensor:
    return layer(X, mask)


def positional_encoding(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: even columns ``sin(pos / 10000^(2i/d))``, odd columns the cosine."""
    if d_model % 2:
        raise ConfigError("positional encoding needs an even d_model")
    if max_len < 1:
        raise ConfigError("max_len must be positive")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((max_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe.astype(dtype)
