"""Composable layers shared by teacher and student captioners.

Everything here is a pure function of (input tensors, parameter
tensors); parameters can be shared read-only across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Layer configuration violates a structural constraint."""


class TokenLookupError(IndexError):
    """Token id outside the embedding table."""


class LengthError(ValueError):
    """Sequence longer than the positional table covers."""


@dataclass
class AttentionConfig:
    num_heads: int
    model_dim: int
    causal: bool = False

    def __post_init__(self):
        if self.num_heads < 1 or self.model_dim < 1:
            raise ConfigError("heads and model_dim must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"num_heads={self.num_heads} must divide model_dim={self.model_dim}"
            )


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvNextBlockParams:
    """Depthwise 7x7, channel norm, 4x MLP, and a residual scale vector."""

    dim: int
    dw_weight: Tensor  # [d, 1, 7, 7]
    norm: NormParams
    expand: tuple[Tensor, Tensor]  # weight [d, 4d], bias [4d]
    project: tuple[Tensor, Tensor]  # weight [4d, d], bias [d]
    layer_scale: Tensor  # [d]


@dataclass
class EmbeddingTable:
    tokens: Tensor  # [vocab, d]
    positions: Tensor  # [max_len, d]

    @property
    def vocab_size(self):
        return self.tokens.shape[0]

    @property
    def max_len(self):
        return self.positions.shape[0]


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: -inf strictly above the diagonal."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: AttentionParams,
    cfg: AttentionConfig,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over heads, then output projection.

    q_in: [Lq, d] or [B, Lq, d]; kv_in likewise with Lk. An additive
    mask of shape [Lq, Lk] (use -inf to forbid) broadcasts over batch
    and heads. With cfg.causal and no explicit mask, a causal mask is
    built from Lq (self-attention use).
    """
    d = cfg.model_dim
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise ConfigError(f"inputs must have model_dim={d} features")
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = q_in.reshape((1,) + q_in.shape)
        kv_in = kv_in.reshape((1,) + kv_in.shape)
    b, lq = q_in.shape[0], q_in.shape[1]
    lk = kv_in.shape[1]
    if mask is None and cfg.causal:
        if lq != lk:
            raise ConfigError("causal self-attention needs matching query/key lengths")
        mask = causal_mask(lq, dtype=q_in.dtype)
    if mask is not None and mask.shape != (lq, lk):
        raise ConfigError(f"mask shape {mask.shape} != ({lq}, {lk})")

    h, dh = cfg.num_heads, d // cfg.num_heads

    def split(x, l):
        # [B, L, d] -> [B, h, L, dh]
        return x.reshape((b, l, h, dh)).transpose((0, 2, 1, 3))

    q = split(T.matmul(q_in, params.wq) + params.bq, lq)
    k = split(T.matmul(kv_in, params.wk) + params.bk, lk)
    v = split(T.matmul(kv_in, params.wv) + params.bv, lk)

    # scale q rather than the much larger score tensor
    scores = T.matmul(q * (1.0 / np.sqrt(dh)), k.transpose((0, 1, 3, 2)))
    if mask is not None:
        scores = scores + mask
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # [B, h, Lq, dh]
    ctx = ctx.transpose((0, 2, 1, 3)).reshape((b, lq, d))
    out = T.matmul(ctx, params.wo) + params.bo
    return out.reshape((lq, d)) if squeeze else out


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    return T.matmul(T.gelu(T.matmul(x, params.w1) + params.b1), params.w2) + params.b2


def channel_norm(x: Tensor, norm: NormParams, eps: float = 1e-6) -> Tensor:
    """Layer norm over the channel axis of [*, C, H, W] data."""
    perm = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1, x.ndim - 3)
    inv = np.argsort(perm)
    y = T.layer_norm(x.transpose(perm), norm.gamma, norm.beta, eps=eps)
    return y.transpose(tuple(inv))


def pointwise_linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Apply a linear map over channels of [*, C, H, W] data."""
    perm = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1, x.ndim - 3)
    y = T.matmul(x.transpose(perm), weight)
    if bias is not None:
        y = y + bias
    return y.transpose(tuple(int(i) for i in np.argsort(perm)))


def convnext_block(x: Tensor, p: ConvNextBlockParams) -> Tensor:
    """x + layer_scale * project(gelu(expand(norm(depthwise7x7(x)))))."""
    if x.shape[-3] != p.dim:
        raise ConfigError(f"block expects {p.dim} channels, got {x.shape[-3]}")
    y = T.conv2d(x, p.dw_weight, stride=1, padding=3, groups=p.dim)
    perm = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1, x.ndim - 3)
    y = y.transpose(perm)  # channels-last
    y = T.layer_norm(y, p.norm.gamma, p.norm.beta, eps=1e-6)
    y = T.matmul(y, p.expand[0]) + p.expand[1]
    y = T.gelu(y)
    y = T.matmul(y, p.project[0]) + p.project[1]
    y = y * p.layer_scale
    y = y.transpose(tuple(int(i) for i in np.argsort(perm)))
    return x + y


def grid_to_tokens(x: Tensor) -> Tensor:
    """[d, 7, 7] -> [49, d] row-major flatten (batched variant allowed)."""
    if x.shape[-2:] != (7, 7):
        raise ConfigError(f"token grid must be 7x7, got {x.shape[-2:]}")
    if x.ndim == 3:
        d = x.shape[0]
        return x.reshape((d, 49)).transpose((1, 0))
    if x.ndim == 4:
        b, d = x.shape[0], x.shape[1]
        return x.reshape((b, d, 49)).transpose((0, 2, 1))
    raise ConfigError(f"expected [d,7,7] or [B,d,7,7], got {x.shape}")


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """Inverse of grid_to_tokens."""
    if tokens.shape[-2] != 49:
        raise ConfigError(f"expected 49 tokens, got {tokens.shape[-2]}")
    if tokens.ndim == 2:
        d = tokens.shape[1]
        return tokens.transpose((1, 0)).reshape((d, 7, 7))
    b, _, d = tokens.shape
    return tokens.transpose((0, 2, 1)).reshape((b, d, 7, 7))


def embed(ids: np.ndarray, table: EmbeddingTable) -> Tensor:
    """Token row plus positional row for every position."""
    ids = np.asarray(ids)
    length = ids.shape[-1]
    if length > table.max_len:
        raise LengthError(f"sequence length {length} exceeds table max {table.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise TokenLookupError(
            f"token id out of range [0, {table.vocab_size})"
        )
    tok = T.gather_rows(table.tokens, ids)
    pos = T.gather_rows(table.positions, np.arange(length))
    return tok + pos


# ---------------------------------------------------------------------
# initialization


def init_attention(rng: np.random.Generator, d: int, dtype=np.float32) -> AttentionParams:
    def w():
        return Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True)

    def bias():
        return Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    return AttentionParams(w(), bias(), w(), bias(), w(), bias(), w(), bias())


def init_feed_forward(rng: np.random.Generator, d: int, dtype=np.float32) -> FeedForwardParams:
    return FeedForwardParams(
        Tensor(rng.normal(0.0, 0.02, (d, 4 * d)).astype(dtype), requires_grad=True),
        Tensor(np.zeros(4 * d, dtype=dtype), requires_grad=True),
        Tensor(rng.normal(0.0, 0.02, (4 * d, d)).astype(dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def init_norm(d: int, dtype=np.float32) -> NormParams:
    return NormParams(
        Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def init_embedding(
    rng: np.random.Generator, vocab_size: int, max_len: int, d: int, dtype=np.float32
) -> EmbeddingTable:
    return EmbeddingTable(
        Tensor(rng.normal(0.0, 0.02, (vocab_size, d)).astype(dtype), requires_grad=True),
        Tensor(rng.normal(0.0, 0.02, (max_len, d)).astype(dtype), requires_grad=True),
    )
