"""Decoder-only transformer with two interchangeable feed-forward shapes.

A layer is RoPE multi-head causal attention followed by either the usual
single wide MLP (``conventional``, SwiGLU, hidden width above d_model) or a
stack of narrow residual SwiGLU sub-blocks (``hourglass``, hidden width below
d_model). Both shapes share the attention module and the surrounding
embedding / final-norm / output-projection plumbing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat_cols, embedding, rmsnorm, rope, softmax

FFN_KINDS = ("conventional", "hourglass")
NORM_PLACEMENTS = ("pre_norm", "post_sublayer_pre_residual")

RMSNORM_EPS = 1e-6
INIT_STD = 0.02
INIT_TRUNC = 3.0  # truncation, in standard deviations
MASKED_SCORE = -1e30  # large enough that adding any real score leaves it bit-unchanged


class ConfigError(ValueError):
    """A model configuration or forward-pass precondition was violated."""


@dataclass(frozen=True)
class ModelConfig:
    """Full shape vector of one model.

    ffn_blocks is the number of stacked FFN sub-blocks per layer; it must be
    1 for the conventional kind. d_h may be any positive width: hourglass
    models are meant to use d_h < d_model and conventional ones d_h > d_model,
    but neither is enforced (the single-block equivalence between the two
    kinds relies on sharing a d_h).
    """

    d_model: int
    d_h: int
    n_layers: int
    n_heads: int
    ffn_kind: str = "conventional"
    ffn_blocks: int = 1
    norm_placement: str = "pre_norm"
    vocab_size: int = 256
    max_seq: int = 2048
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "d_h", "n_layers", "n_heads", "ffn_blocks", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"ffn_kind must be one of {FFN_KINDS}, got {self.ffn_kind!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(
                f"norm_placement must be one of {NORM_PLACEMENTS}, got {self.norm_placement!r}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError(
                f"head dimension {self.d_model // self.n_heads} must be even for rotary embedding"
            )
        if self.ffn_kind == "conventional" and self.ffn_blocks != 1:
            raise ConfigError(f"conventional FFN requires ffn_blocks=1, got {self.ffn_blocks}")
        if self.rope_theta <= 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class FfnBlockWeights:
    """One SwiGLU sub-block: two d_model->d_h projections and one d_h->d_model."""

    w_gate: Tensor  # feeds SiLU
    w_val: Tensor  # linear gate multiplicand
    w_out: Tensor
    gamma: Tensor


@dataclass
class LayerWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    attn_gamma: Tensor
    ffn: list[FfnBlockWeights] = field(default_factory=list)


@dataclass
class LanguageModel:
    config: ModelConfig
    embedding: Tensor  # vocab_size x d_model
    layers: list[LayerWeights]
    final_gamma: Tensor
    head: Tensor  # d_model x vocab_size, untied

    def parameters(self):
        """Yield (name, tensor) in a fixed order shared by optimizer and checkpoints."""
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.attn.w_q", layer.w_q
            yield f"layers.{i}.attn.w_k", layer.w_k
            yield f"layers.{i}.attn.w_v", layer.w_v
            yield f"layers.{i}.attn.w_o", layer.w_o
            yield f"layers.{i}.attn.gamma", layer.attn_gamma
            for j, block in enumerate(layer.ffn):
                yield f"layers.{i}.ffn.{j}.w_gate", block.w_gate
                yield f"layers.{i}.ffn.{j}.w_val", block.w_val
                yield f"layers.{i}.ffn.{j}.w_out", block.w_out
                yield f"layers.{i}.ffn.{j}.gamma", block.gamma
        yield "final_gamma", self.final_gamma
        yield "head", self.head

    def weight_matrix_param_count(self) -> int:
        """Elements in attention/FFN weight matrices, excluding embeddings,
        output projection and norm scales (the non-embedding convention)."""
        total = 0
        for name, p in self.parameters():
            if name in ("embedding", "head") or name.endswith("gamma"):
                continue
            total += p.data.size
        return total


def apply_rope(q: Tensor, k: Tensor, positions, theta: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Rotate per-head query/key rows by their position-dependent angles."""
    return rope(q, positions, theta), rope(k, positions, theta)


def _causal_mask(T: int) -> np.ndarray:
    mask = np.zeros((T, T))
    mask[np.triu_indices(T, k=1)] = MASKED_SCORE
    return mask


def _multi_head_attention(x: Tensor, w: LayerWeights, cfg: ModelConfig) -> Tensor:
    T = x.data.shape[0]
    positions = np.arange(T)
    q = x @ w.w_q
    k = x @ w.w_k
    v = x @ w.w_v
    scale = 1.0 / np.sqrt(cfg.head_dim)
    mask = _causal_mask(T)
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        q_h, k_h = apply_rope(q.cols(lo, hi), k.cols(lo, hi), positions, cfg.rope_theta)
        scores = (q_h @ k_h.t()) * scale
        weights = softmax(scores.add_const(mask), axis=-1)
        heads.append(weights @ v.cols(lo, hi))
    return concat_cols(heads) @ w.w_o


def attention(x: Tensor, w: LayerWeights, cfg: ModelConfig) -> Tensor:
    """Residual multi-head causal self-attention over a (T, d_model) input."""
    T = x.data.shape[0]
    if T > cfg.max_seq:
        raise ConfigError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if cfg.norm_placement == "pre_norm":
        branch = _multi_head_attention(rmsnorm(x, w.attn_gamma, RMSNORM_EPS), w, cfg)
    else:
        branch = rmsnorm(_multi_head_attention(x, w, cfg), w.attn_gamma, RMSNORM_EPS)
    return x + branch


def conventional_ffn(z: Tensor, w: LayerWeights, cfg: ModelConfig) -> Tensor:
    """Single residual SwiGLU MLP, the standard narrow-wide-narrow shape."""
    if cfg.ffn_kind != "conventional":
        raise ConfigError("conventional_ffn called on a non-conventional config")
    block = w.ffn[0]
    if cfg.norm_placement == "pre_norm":
        n = rmsnorm(z, block.gamma, RMSNORM_EPS)
        branch = ((n @ block.w_gate).silu() * (n @ block.w_val)) @ block.w_out
    else:
        branch = rmsnorm(
            ((z @ block.w_gate).silu() * (z @ block.w_val)) @ block.w_out,
            block.gamma,
            RMSNORM_EPS,
        )
    return z + branch


def hourglass_ffn(u: Tensor, w: LayerWeights, cfg: ModelConfig) -> Tensor:
    """Stack of residual SwiGLU sub-blocks, each with its own norm scale."""
    h = u
    for block in w.ffn:
        if cfg.norm_placement == "pre_norm":
            n = rmsnorm(h, block.gamma, RMSNORM_EPS)
            branch = ((n @ block.w_gate).silu() * (n @ block.w_val)) @ block.w_out
        else:
            branch = rmsnorm(
                ((h @ block.w_gate).silu() * (h @ block.w_val)) @ block.w_out,
                block.gamma,
                RMSNORM_EPS,
            )
        h = h + branch
    return h


def lm_forward(tokens, model: LanguageModel) -> Tensor:
    """Next-token logits, (T, vocab_size), for a token-id sequence."""
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ConfigError(f"tokens must be a flat sequence, got shape {ids.shape}")
    T = ids.shape[0]
    if T == 0:
        raise ConfigError("tokens must be non-empty")
    if T > cfg.max_seq:
        raise ConfigError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    bad = np.nonzero((ids < 0) | (ids >= cfg.vocab_size))[0]
    if bad.size:
        pos = int(bad[0])
        raise ConfigError(
            f"token id {int(ids[pos])} at position {pos} is outside vocab of size {cfg.vocab_size}"
        )
    x = embedding(model.embedding, ids)
    ffn = conventional_ffn if cfg.ffn_kind == "conventional" else hourglass_ffn
    for layer in model.layers:
        x = attention(x, layer, cfg)
        x = ffn(x, layer, cfg)
    x = rmsnorm(x, model.final_gamma, RMSNORM_EPS)
    return x @ model.head


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with redraws outside +-INIT_TRUNC standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > INIT_TRUNC
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > INIT_TRUNC
    return out * std


def init_weights(cfg: ModelConfig, seed: int) -> LanguageModel:
    """Deterministic initialization: truncated normal projections, with the
    residual-branch outputs (w_o and every w_out) damped by
    1/sqrt(2 * n_layers * ffn_blocks); all norm scales start at 1."""
    rng = np.random.default_rng(seed)
    d, dh = cfg.d_model, cfg.d_h
    residual_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers * max(cfg.ffn_blocks, 1))

    def proj(rows, cols, damped=False):
        w = _truncated_normal(rng, (rows, cols), INIT_STD)
        if damped:
            w = w * residual_scale
        return Tensor(w, requires_grad=True)

    layers = []
    for _ in range(cfg.n_layers):
        layer = LayerWeights(
            w_q=proj(d, d),
            w_k=proj(d, d),
            w_v=proj(d, d),
            w_o=proj(d, d, damped=True),
            attn_gamma=Tensor(np.ones(d), requires_grad=True),
        )
        for _ in range(cfg.ffn_blocks):
            layer.ffn.append(
                FfnBlockWeights(
                    w_gate=proj(d, dh),
                    w_val=proj(d, dh),
                    w_out=proj(dh, d, damped=True),
                    gamma=Tensor(np.ones(d), requires_grad=True),
                )
            )
        layers.append(layer)
    return LanguageModel(
        config=cfg,
        embedding=proj(cfg.vocab_size, d),
        layers=layers,
        final_gamma=Tensor(np.ones(d), requires_grad=True),
        head=proj(d, cfg.vocab_size),
    )
