"""Encoder-decoder captioner: spec-driven convolutional backbone, a
49-token transformer encoder, and a causal decoder with cross-attention.

The backbone is interpreted from a NetworkSpec, so structurally reduced
variants plug into the same encoder/decoder without shape changes (the
final projection keeps the model width fixed). Inference is pure given
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import (
    AttentionConfig,
    AttentionParams,
    ConvNextBlockParams,
    EmbeddingTable,
    FeedForwardParams,
    NormParams,
    ConfigError,
    LengthError,
)
from .netspec import LayerSpec, NetworkSpec, validate_or_raise
from .synthdata import BOS_ID, EOS_ID, Vocabulary
from .tensor import Tensor


@dataclass
class CaptionerConfig:
    """Architecture knobs. Defaults mirror the full-size setting
    (hidden 768, 16/12 heads, six layers each side); `toy()` is the
    test-scale variant every experiment here runs at."""

    vocab_size: int
    model_dim: int = 768
    encoder_layers: int = 6
    encoder_heads: int = 16
    decoder_layers: int = 6
    decoder_heads: int = 12
    token_count: int = 49
    max_caption_len: int = 40
    input_channels: int = 6

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError("vocab must cover the four special ids plus content")
        if self.token_count != 49:
            raise ConfigError("encoder memory is fixed at 49 tokens")
        if self.model_dim % self.encoder_heads:
            raise ConfigError(
                f"encoder heads {self.encoder_heads} must divide model_dim {self.model_dim}"
            )
        if self.model_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder heads {self.decoder_heads} must divide model_dim {self.model_dim}"
            )
        if self.input_channels not in (3, 6):
            raise ConfigError("input_channels must be 3 (plain) or 6 (edge-fused)")

    @classmethod
    def toy(cls, vocab_size: int, input_channels: int = 3, model_dim: int = 64) -> "CaptionerConfig":
        # narrow heads: 12 does not divide the toy width, and 16 heads
        # of dim 4 would quadruple the attention score tensors
        return cls(
            vocab_size=vocab_size,
            model_dim=model_dim,
            encoder_heads=4,
            decoder_heads=4,
            max_caption_len=24,
            input_channels=input_channels,
        )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "model_dim": self.model_dim,
            "encoder_layers": self.encoder_layers,
            "encoder_heads": self.encoder_heads,
            "decoder_layers": self.decoder_layers,
            "decoder_heads": self.decoder_heads,
            "token_count": self.token_count,
            "max_caption_len": self.max_caption_len,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionerConfig":
        return cls(**d)


@dataclass
class EncoderLayerParams:
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    ff: FeedForwardParams


@dataclass
class DecoderLayerParams:
    norm1: NormParams
    self_attn: AttentionParams
    norm2: NormParams
    cross_attn: AttentionParams
    norm3: NormParams
    ff: FeedForwardParams


@dataclass
class CaptionerParams:
    cfg: CaptionerConfig
    backbone_spec: NetworkSpec
    backbone: dict[str, Tensor]
    enc_layers: list[EncoderLayerParams]
    enc_norm: NormParams
    embedding: EmbeddingTable
    dec_layers: list[DecoderLayerParams]
    dec_norm: NormParams
    lm_weight: Tensor
    lm_bias: Tensor
    vocab: Vocabulary | None = None


@dataclass
class GenerationResult:
    ids: list[int]
    text: str
    logprobs: list[float]


# ---------------------------------------------------------------------
# parameter assembly
#
# Flat names drive serialization:
#   backbone.<leaf>.<entry>
#   encoder.layer<i>.{norm1,norm2}.{gamma,beta}
#   encoder.layer<i>.attn.{wq,bq,...,wo,bo}
#   encoder.layer<i>.ff.{w1,b1,w2,b2}
#   encoder.final_norm.{gamma,beta}
#   decoder.embed.{tokens,positions}
#   decoder.layer<i>.{norm1,norm2,norm3}.*, .self_attn.*, .cross_attn.*, .ff.*
#   decoder.final_norm.{gamma,beta}
#   lm_head.{weight,bias}


def _assemble(cfg: CaptionerConfig, spec: NetworkSpec, fetch, vocab=None) -> CaptionerParams:
    d = cfg.model_dim

    def norm(prefix):
        return NormParams(fetch(f"{prefix}.gamma", (d,)), fetch(f"{prefix}.beta", (d,)))

    def attn(prefix):
        return AttentionParams(
            fetch(f"{prefix}.wq", (d, d)), fetch(f"{prefix}.bq", (d,)),
            fetch(f"{prefix}.wk", (d, d)), fetch(f"{prefix}.bk", (d,)),
            fetch(f"{prefix}.wv", (d, d)), fetch(f"{prefix}.bv", (d,)),
            fetch(f"{prefix}.wo", (d, d)), fetch(f"{prefix}.bo", (d,)),
        )

    def ff(prefix):
        return FeedForwardParams(
            fetch(f"{prefix}.w1", (d, 4 * d)), fetch(f"{prefix}.b1", (4 * d,)),
            fetch(f"{prefix}.w2", (4 * d, d)), fetch(f"{prefix}.b2", (d,)),
        )

    backbone = {}
    from .netspec import expected_entries

    for qual, leaf in spec.walk_leaves():
        for entry in expected_entries(qual, leaf):
            backbone[f"backbone.{entry}"] = fetch(f"backbone.{entry}", None)

    enc_layers = [
        EncoderLayerParams(
            norm(f"encoder.layer{i}.norm1"),
            attn(f"encoder.layer{i}.attn"),
            norm(f"encoder.layer{i}.norm2"),
            ff(f"encoder.layer{i}.ff"),
        )
        for i in range(cfg.encoder_layers)
    ]
    dec_layers = [
        DecoderLayerParams(
            norm(f"decoder.layer{i}.norm1"),
            attn(f"decoder.layer{i}.self_attn"),
            norm(f"decoder.layer{i}.norm2"),
            attn(f"decoder.layer{i}.cross_attn"),
            norm(f"decoder.layer{i}.norm3"),
            ff(f"decoder.layer{i}.ff"),
        )
        for i in range(cfg.decoder_layers)
    ]
    embedding = EmbeddingTable(
        fetch("decoder.embed.tokens", (cfg.vocab_size, d)),
        fetch("decoder.embed.positions", (cfg.max_caption_len, d)),
    )
    return CaptionerParams(
        cfg=cfg,
        backbone_spec=spec,
        backbone=backbone,
        enc_layers=enc_layers,
        enc_norm=norm("encoder.final_norm"),
        embedding=embedding,
        dec_layers=dec_layers,
        dec_norm=norm("decoder.final_norm"),
        lm_weight=fetch("lm_head.weight", (d, cfg.vocab_size)),
        lm_bias=fetch("lm_head.bias", (cfg.vocab_size,)),
        vocab=vocab,
    )


def init_captioner(
    cfg: CaptionerConfig,
    spec: NetworkSpec,
    seed: int,
    vocab: Vocabulary | None = None,
    dtype=np.float32,
) -> CaptionerParams:
    """Fresh, seeded parameters for the given backbone spec."""
    validate_or_raise(spec)
    from .netspec import init_weights

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    backbone_arrays = {f"backbone.{k}": v for k, v in init_weights(spec, rng, dtype).items()}

    def fetch(name, shape):
        if name in backbone_arrays:
            return Tensor(backbone_arrays[name], requires_grad=True)
        if name.endswith((".gamma",)) or name.endswith(".beta"):
            arr = np.ones(shape, dtype) if name.endswith(".gamma") else np.zeros(shape, dtype)
        elif name.endswith((".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".bias")):
            arr = np.zeros(shape, dtype)
        else:
            arr = rng.normal(0.0, 0.02, shape).astype(dtype)
        return Tensor(arr, requires_grad=True)

    return _assemble(cfg, spec, fetch, vocab)


def captioner_from_arrays(
    cfg: CaptionerConfig,
    spec: NetworkSpec,
    arrays: dict[str, np.ndarray],
    vocab: Vocabulary | None = None,
    requires_grad: bool = True,
) -> CaptionerParams:
    """Rebuild parameters from a flat name->array mapping."""
    validate_or_raise(spec)

    def fetch(name, shape):
        if name not in arrays:
            raise KeyError(f"weights missing entry {name!r}")
        arr = arrays[name]
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise ConfigError(f"{name}: shape {arr.shape} != expected {tuple(shape)}")
        return Tensor(arr, requires_grad=requires_grad)

    return _assemble(cfg, spec, fetch, vocab)


def params_to_flat(p: CaptionerParams) -> dict[str, Tensor]:
    """Flat name->tensor view of every trainable parameter."""
    flat = dict(p.backbone)

    def put_norm(prefix, n):
        flat[f"{prefix}.gamma"] = n.gamma
        flat[f"{prefix}.beta"] = n.beta

    def put_attn(prefix, a):
        for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            flat[f"{prefix}.{k}"] = getattr(a, k)

    def put_ff(prefix, f):
        flat[f"{prefix}.w1"], flat[f"{prefix}.b1"] = f.w1, f.b1
        flat[f"{prefix}.w2"], flat[f"{prefix}.b2"] = f.w2, f.b2

    for i, layer in enumerate(p.enc_layers):
        put_norm(f"encoder.layer{i}.norm1", layer.norm1)
        put_attn(f"encoder.layer{i}.attn", layer.attn)
        put_norm(f"encoder.layer{i}.norm2", layer.norm2)
        put_ff(f"encoder.layer{i}.ff", layer.ff)
    put_norm("encoder.final_norm", p.enc_norm)
    flat["decoder.embed.tokens"] = p.embedding.tokens
    flat["decoder.embed.positions"] = p.embedding.positions
    for i, layer in enumerate(p.dec_layers):
        put_norm(f"decoder.layer{i}.norm1", layer.norm1)
        put_attn(f"decoder.layer{i}.self_attn", layer.self_attn)
        put_norm(f"decoder.layer{i}.norm2", layer.norm2)
        put_attn(f"decoder.layer{i}.cross_attn", layer.cross_attn)
        put_norm(f"decoder.layer{i}.norm3", layer.norm3)
        put_ff(f"decoder.layer{i}.ff", layer.ff)
    put_norm("decoder.final_norm", p.dec_norm)
    flat["lm_head.weight"] = p.lm_weight
    flat["lm_head.bias"] = p.lm_bias
    return flat


# ---------------------------------------------------------------------
# backbone interpreter


def _scale_channels(x: Tensor, gamma: Tensor) -> Tensor:
    g = gamma.reshape((gamma.shape[0], 1, 1))
    return x * g


def _block_params(layer: LayerSpec, prefix: str, weights: dict[str, Tensor]) -> ConvNextBlockParams:
    kids = layer.children
    if [k.kind for k in kids] != ["conv", "norm", "linear", "linear", "scale_vector"]:
        raise ConfigError(f"{prefix}: convnext_block needs conv/norm/linear/linear/scale children")
    names = [f"{prefix}.{k.name}" for k in kids]
    return ConvNextBlockParams(
        dim=kids[0].in_dim,
        dw_weight=weights[f"{names[0]}.weight"],
        norm=NormParams(weights[f"{names[1]}.gamma"], weights[f"{names[1]}.beta"]),
        expand=(weights[f"{names[2]}.weight"], weights[f"{names[2]}.bias"]),
        project=(weights[f"{names[3]}.weight"], weights[f"{names[3]}.bias"]),
        layer_scale=weights[f"{names[4]}.gamma"],
    )


def backbone_forward(spec: NetworkSpec, weights: dict[str, Tensor], x: Tensor) -> Tensor:
    """Interpret the layer graph on spatial [*, C, H, W] data."""

    def run(layers, prefix, x):
        for layer in layers:
            qual = f"{prefix}{layer.name}"
            if layer.kind == "container":
                if layer.op == "convnext_block":
                    x = nn.convnext_block(x, _block_params(layer, qual, weights))
                else:
                    x = run(layer.children, qual + ".", x)
            elif layer.kind == "conv":
                bias = weights.get(f"{qual}.bias")
                x = T.conv2d(
                    x, weights[f"{qual}.weight"], bias,
                    stride=layer.stride, padding=layer.padding, groups=layer.groups,
                )
            elif layer.kind == "norm":
                x = nn.channel_norm(
                    x, NormParams(weights[f"{qual}.gamma"], weights[f"{qual}.beta"])
                )
            elif layer.kind == "linear":
                x = nn.pointwise_linear(
                    x, weights[f"{qual}.weight"], weights.get(f"{qual}.bias")
                )
            elif layer.kind == "scale_vector":
                x = _scale_channels(x, weights[f"{qual}.gamma"])
            else:
                raise ConfigError(f"{qual}: kind {layer.kind!r} not supported in forward")
        return x

    return run(spec.layers, "backbone.", x)


# ---------------------------------------------------------------------
# encoder / decoder forward


def encode_image(params: CaptionerParams, x) -> Tensor:
    """Backbone -> adaptive 7x7 pool -> 49 tokens -> self-attention stack."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    cfg = params.cfg
    if x.shape[-3] != cfg.input_channels:
        raise ConfigError(
            f"model expects {cfg.input_channels} input channels, image has {x.shape[-3]}"
        )
    y = backbone_forward(params.backbone_spec, params.backbone, x)
    y = T.adaptive_avg_pool2d(y, (7, 7))
    t = nn.grid_to_tokens(y)
    acfg = AttentionConfig(cfg.encoder_heads, cfg.model_dim, causal=False)
    for layer in params.enc_layers:
        h = T.layer_norm(t, layer.norm1.gamma, layer.norm1.beta)
        t = t + nn.multi_head_attention(h, h, layer.attn, acfg)
        h = T.layer_norm(t, layer.norm2.gamma, layer.norm2.beta)
        t = t + nn.feed_forward(h, layer.ff)
    return T.layer_norm(t, params.enc_norm.gamma, params.enc_norm.beta)


def decoder_hidden(params: CaptionerParams, ids: np.ndarray, memory: Tensor) -> Tensor:
    cfg = params.cfg
    ids = np.asarray(ids)
    if ids.shape[-1] > cfg.max_caption_len:
        raise LengthError(
            f"prefix of {ids.shape[-1]} tokens exceeds max_caption_len {cfg.max_caption_len}"
        )
    x = nn.embed(ids, params.embedding)
    self_cfg = AttentionConfig(cfg.decoder_heads, cfg.model_dim, causal=True)
    cross_cfg = AttentionConfig(cfg.decoder_heads, cfg.model_dim, causal=False)
    for layer in params.dec_layers:
        h = T.layer_norm(x, layer.norm1.gamma, layer.norm1.beta)
        x = x + nn.multi_head_attention(h, h, layer.self_attn, self_cfg)
        h = T.layer_norm(x, layer.norm2.gamma, layer.norm2.beta)
        x = x + nn.multi_head_attention(h, memory, layer.cross_attn, cross_cfg)
        h = T.layer_norm(x, layer.norm3.gamma, layer.norm3.beta)
        x = x + nn.feed_forward(h, layer.ff)
    return T.layer_norm(x, params.dec_norm.gamma, params.dec_norm.beta)


def decoder_logits_all(params: CaptionerParams, ids: np.ndarray, memory: Tensor) -> Tensor:
    """Next-token logits at every prefix position: [*, L, vocab]."""
    h = decoder_hidden(params, ids, memory)
    return T.matmul(h, params.lm_weight) + params.lm_bias


def decoder_logits(params: CaptionerParams, prefix: np.ndarray, memory: Tensor) -> Tensor:
    """Logits for the single token following `prefix` (1-d ids)."""
    prefix = np.asarray(prefix)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ConfigError("prefix must be a nonempty 1-d id sequence")
    out = decoder_logits_all(params, prefix, memory)
    return out[prefix.size - 1]


# ---------------------------------------------------------------------
# generation


def _finish(params: CaptionerParams, ids: list[int], logprobs: list[float]) -> GenerationResult:
    words = params.vocab.decode(ids) if params.vocab is not None else [str(i) for i in ids[1:]]
    return GenerationResult(ids=list(ids), text=" ".join(words), logprobs=list(logprobs))


def generate_greedy(params: CaptionerParams, image) -> GenerationResult:
    """Deterministic argmax decoding from <bos> until <eos> or the
    length limit."""
    with T.no_grad():
        memory = encode_image(params, image)
        ids = [BOS_ID]
        logprobs: list[float] = []
        while len(ids) < params.cfg.max_caption_len:
            logits = decoder_logits(params, np.asarray(ids), memory)
            logp = T.log_softmax(logits).numpy()
            nxt = int(np.argmax(logp))
            ids.append(nxt)
            logprobs.append(float(logp[nxt]))
            if nxt == EOS_ID:
                break
    return _finish(params, ids, logprobs)


def generate_beam(params: CaptionerParams, image, beam_width: int) -> GenerationResult:
    """Length-normalized beam search.

    Never returns a hypothesis scoring below the greedy rollout, so
    beam_width=1 is exactly greedy and wider beams can only improve the
    normalized score.
    """
    if beam_width < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam_width}")
    greedy = generate_greedy(params, image)
    if beam_width == 1:
        return greedy
    max_len = params.cfg.max_caption_len
    with T.no_grad():
        memory = encode_image(params, image)
        beams = [([BOS_ID], [], 0.0)]  # ids, logprobs, total
        finished: list[tuple[list[int], list[float], float]] = []
        while beams and len(beams[0][0]) < max_len:
            pool = []
            for ids, lps, total in beams:
                logits = decoder_logits(params, np.asarray(ids), memory)
                logp = T.log_softmax(logits).numpy()
                top = np.argsort(-logp, kind="stable")[:beam_width]
                for tok in top:
                    pool.append((ids + [int(tok)], lps + [float(logp[tok])], total + float(logp[tok])))
            # stable order: best total first, ties to lower token sequence
            pool.sort(key=lambda b: (-b[2], b[0]))
            beams = []
            for cand in pool:
                if cand[0][-1] == EOS_ID:
                    finished.append(cand)
                else:
                    beams.append(cand)
                if len(beams) == beam_width:
                    break
        finished.extend(beams)

    def norm_score(entry):
        ids, lps, total = entry
        return total / max(len(lps), 1)

    finished.sort(key=lambda b: (-norm_score(b), b[0]))
    best = finished[0]
    greedy_score = sum(greedy.logprobs) / max(len(greedy.logprobs), 1)
    if norm_score(best) < greedy_score or best[0] == greedy.ids:
        return greedy
    return _finish(params, best[0], best[1])


def greedy_decode_batch(params: CaptionerParams, images: np.ndarray) -> list[list[int]]:
    """Greedy decode a whole batch in lockstep (validation fast path)."""
    with T.no_grad():
        memory = encode_image(params, Tensor(images))
        bsz = images.shape[0]
        ids = np.full((bsz, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(bsz, dtype=bool)
        while ids.shape[1] < params.cfg.max_caption_len and not done.all():
            logits = decoder_logits_all(params, ids, memory)
            nxt = np.argmax(logits.numpy()[:, -1, :], axis=-1)
            nxt = np.where(done, EOS_ID, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    out = []
    for row in ids:
        seq = list(row)
        if EOS_ID in seq:
            seq = seq[: seq.index(EOS_ID) + 1]
        out.append([int(i) for i in seq])
    return out
