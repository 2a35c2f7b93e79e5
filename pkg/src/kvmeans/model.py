"""GPTAlpha-2 style transformer backbone.

Attention weight preparation applies, in order: value residual toward the
first layer's values, non-data-dependent token shift, query/key LayerNorm,
and partial RoPE. Each layer's attention engine is selectable per layer:
full causal, block sliding window (bswa), or kvm. Channel mixing is a
token-shifted squared-ReLU MLP. Blocks are pre-norm residual with a final
LayerNorm before the untied output head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .kvm import (KvmConfig, KvmLayerParams, bswa_forward, full_attention_forward,
                  kvm_forward)
from .tensor import Tensor

ATTENTION_MODES = ("full", "bswa", "kvm")


@dataclass
class GptAlphaConfig:
    d: int = 128
    n_heads: int = 4
    n_layers: int = 4
    vocab_size: int = 258
    rotary_width: int = 16
    layer_modes: tuple[str, ...] = ("kvm", "kvm", "kvm", "kvm")
    kvm: KvmConfig = field(default_factory=KvmConfig)
    d_ff: int = 0
    tie_embeddings: bool = False
    dtype: str = "float64"

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.d

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def validate(self) -> None:
        if self.d % self.n_heads != 0:
            raise ValueError(f"model width {self.d} not divisible by "
                             f"{self.n_heads} heads")
        if len(self.layer_modes) != self.n_layers:
            raise ValueError(f"need {self.n_layers} layer modes, got "
                             f"{len(self.layer_modes)}")
        for mode in self.layer_modes:
            if mode not in ATTENTION_MODES:
                raise ValueError(f"unknown attention mode {mode!r}; expected "
                                 f"one of {ATTENTION_MODES}")
        if self.rotary_width % 2 != 0:
            raise ValueError("rotary_width must be even")
        if self.rotary_width > self.d_head:
            raise ValueError(f"rotary_width {self.rotary_width} exceeds head "
                             f"dim {self.d_head}")
        if self.kvm.rotary_width != self.rotary_width:
            raise ValueError("kvm.rotary_width must match the model rotary_width")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        self.kvm.validate(self.d_head)


# ---------------------------------------------------------------------------
# Parameters

@dataclass
class LayerParams:
    ln_attn_gain: Tensor
    ln_attn_bias: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    shift_q: Tensor
    shift_k: Tensor
    shift_v: Tensor
    lam: Tensor
    ln_q_gain: Tensor
    ln_q_bias: Tensor
    ln_k_gain: Tensor
    ln_k_bias: Tensor
    kvm: KvmLayerParams
    ln_mix_gain: Tensor
    ln_mix_bias: Tensor
    mix_shift: Tensor
    w_up: Tensor
    w_down: Tensor

    def named_parameters(self, prefix: str = ""):
        for name in ("ln_attn_gain", "ln_attn_bias", "w_q", "w_k", "w_v", "w_o",
                     "shift_q", "shift_k", "shift_v", "lam",
                     "ln_q_gain", "ln_q_bias", "ln_k_gain", "ln_k_bias"):
            yield prefix + name, getattr(self, name)
        yield from self.kvm.named_parameters(prefix + "kvm.")
        for name in ("ln_mix_gain", "ln_mix_bias", "mix_shift", "w_up", "w_down"):
            yield prefix + name, getattr(self, name)


@dataclass
class GptAlphaParams:
    embed: Tensor
    layers: list[LayerParams]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    head: Tensor | None  # None when tied to the embedding

    def named_parameters(self):
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}.")
        yield "ln_f_gain", self.ln_f_gain
        yield "ln_f_bias", self.ln_f_bias
        if self.head is not None:
            yield "head", self.head

    def tensors(self):
        return [t for _, t in self.named_parameters()]


# Matrix parameters receive weight decay; scalars/vectors are exempt.
DECAY_SUFFIXES = ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down", "w_gate",
                  "embed", "head")


def is_decay_param(name: str) -> bool:
    return name.split(".")[-1] in DECAY_SUFFIXES


def init_params(config: GptAlphaConfig, seed: int = 0) -> GptAlphaParams:
    """Scaled-normal init (std 1/sqrt(fan_in)) for matrices; neutral elsewhere."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, n_heads, d_h = config.d, config.n_heads, config.d_head
    d_ff = config.ff_width
    dt = config.np_dtype

    def mat(fan_out, fan_in):
        return tt.randn(rng, (fan_in, fan_out), std=1.0 / np.sqrt(fan_in),
                        dtype=dt, requires_grad=True)

    def vec_zeros(shape):
        return tt.zeros(shape, dtype=dt, requires_grad=True)

    def vec_ones(shape):
        return tt.ones(shape, dtype=dt, requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        kvm_params = KvmLayerParams.init(d, n_heads, d_h, dtype=dt)
        layers.append(LayerParams(
            ln_attn_gain=vec_ones((d,)), ln_attn_bias=vec_zeros((d,)),
            w_q=mat(d, d), w_k=mat(d, d), w_v=mat(d, d), w_o=mat(d, d),
            shift_q=vec_zeros((n_heads, 1, d_h)),
            shift_k=vec_zeros((n_heads, 1, d_h)),
            shift_v=vec_zeros((n_heads, 1, d_h)),
            lam=Tensor(np.full((n_heads, 1, d_h), 0.5, dtype=dt),
                       requires_grad=True),
            ln_q_gain=vec_ones((n_heads, 1, d_h)),
            ln_q_bias=vec_zeros((n_heads, 1, d_h)),
            ln_k_gain=vec_ones((n_heads, 1, d_h)),
            ln_k_bias=vec_zeros((n_heads, 1, d_h)),
            kvm=kvm_params,
            ln_mix_gain=vec_ones((d,)), ln_mix_bias=vec_zeros((d,)),
            mix_shift=vec_zeros((d,)),
            w_up=mat(d_ff, d), w_down=mat(d, d_ff),
        ))
    return GptAlphaParams(
        embed=tt.randn(rng, (config.vocab_size, d), std=1.0 / np.sqrt(d),
                       dtype=dt, requires_grad=True),
        layers=layers,
        ln_f_gain=vec_ones((d,)), ln_f_bias=vec_zeros((d,)),
        head=None if config.tie_embeddings
        else tt.randn(rng, (d, config.vocab_size), std=1.0 / np.sqrt(d),
                      dtype=dt, requires_grad=True),
    )


# ---------------------------------------------------------------------------
# Blocks

def token_shift(stream: Tensor, alpha: Tensor) -> Tensor:
    """a_t = x_t + alpha * (x_{t-1} - x_t), with x_{-1} taken as x_0."""
    seq_len = stream.shape[-2]
    if seq_len == 1:
        return stream
    prev = tt.concat([tt.narrow(stream, -2, 0, 1),
                      tt.narrow(stream, -2, 0, seq_len - 1)], axis=-2)
    return stream + alpha * (prev - stream)


def to_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., H, T, d_h)."""
    lead = x.shape[:-2]
    seq_len, d = x.shape[-2:]
    d_h = d // n_heads
    x = tt.reshape(x, lead + (seq_len, n_heads, d_h))
    n = len(lead)
    return tt.permute(x, tuple(range(n)) + (n + 1, n, n + 2))


def from_heads(x: Tensor) -> Tensor:
    """(..., H, T, d_h) -> (..., T, d)."""
    lead = x.shape[:-3]
    n_heads, seq_len, d_h = x.shape[-3:]
    n = len(lead)
    x = tt.permute(x, tuple(range(n)) + (n + 1, n, n + 2))
    return tt.reshape(x, lead + (seq_len, n_heads * d_h))


def qkv_prepare(x: Tensor, layer: LayerParams, config: GptAlphaConfig,
                v_first: Tensor | None, position_offset: int = 0):
    """Project and prepare attention streams.

    Returns (q, k, v, v_first) with q/k/v shaped (..., H, T, d_h). On the
    first layer the incoming v_first is None and the freshly projected
    values are returned for the later layers; the residual there is exactly
    the identity for any lam. position_offset shifts the rotary counter
    (with rotary_width 0 there is no positional signal at all).
    """
    n_heads = config.n_heads
    q = to_heads(tt.matmul(x, layer.w_q), n_heads)
    k = to_heads(tt.matmul(x, layer.w_k), n_heads)
    v = to_heads(tt.matmul(x, layer.w_v), n_heads)
    if v_first is None:
        v_first = v
    else:
        v = (1.0 - layer.lam) * v + layer.lam * v_first
    q = token_shift(q, layer.shift_q)
    k = token_shift(k, layer.shift_k)
    v = token_shift(v, layer.shift_v)
    positions = np.arange(q.shape[-2]) + position_offset
    q = tt.rope_partial(tt.layer_norm(q, layer.ln_q_gain, layer.ln_q_bias),
                        positions, config.rotary_width)
    k = tt.rope_partial(tt.layer_norm(k, layer.ln_k_gain, layer.ln_k_bias),
                        positions, config.rotary_width)
    return q, k, v, v_first


def attention_block(x: Tensor, mode: str, layer: LayerParams,
                    config: GptAlphaConfig, v_first: Tensor | None,
                    position_offset: int = 0):
    """Pre-norm attention block; returns (x + attention output, v_first)."""
    x_ln = tt.layer_norm(x, layer.ln_attn_gain, layer.ln_attn_bias)
    q, k, v, v_first = qkv_prepare(x_ln, layer, config, v_first,
                                   position_offset)
    if mode == "kvm":
        heads = kvm_forward(q, k, v, x_ln, config.kvm, layer.kvm,
                            return_state=False)
    elif mode == "bswa":
        heads = bswa_forward(q, k, v, config.kvm, layer.kvm)
    elif mode == "full":
        heads = full_attention_forward(q, k, v, config.kvm, layer.kvm)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    y = tt.matmul(from_heads(heads), layer.w_o)
    return x + y, v_first


def channel_mixer(x: Tensor, layer: LayerParams) -> Tensor:
    """Token-shifted squared-ReLU MLP (pre-norm residual applied by caller)."""
    h = tt.matmul(token_shift(x, layer.mix_shift), layer.w_up)
    return tt.matmul(tt.relu_squared(h), layer.w_down)


def model_forward(params: GptAlphaParams, ids: np.ndarray,
                  config: GptAlphaConfig, position_offset: int = 0) -> Tensor:
    """Token ids (..., T) -> logits (..., T, vocab)."""
    x = tt.embedding(params.embed, np.asarray(ids))
    v_first = None
    for mode, layer in zip(config.layer_modes, params.layers):
        x, v_first = attention_block(x, mode, layer, config, v_first,
                                     position_offset)
        x_ln = tt.layer_norm(x, layer.ln_mix_gain, layer.ln_mix_bias)
        x = x + channel_mixer(x_ln, layer)
    x = tt.layer_norm(x, params.ln_f_gain, params.ln_f_bias)
    head = params.head if params.head is not None \
        else tt.transpose_last(params.embed)
    return tt.matmul(x, head)


def sequence_loss(params: GptAlphaParams, ids: np.ndarray,
                  config: GptAlphaConfig) -> Tensor:
    """Mean next-token cross entropy in nats over one or more sequences."""
    ids = np.asarray(ids)
    logits = model_forward(params, ids, config)
    seq_len = ids.shape[-1]
    inputs = tt.narrow(logits, -2, 0, seq_len - 1)
    flat = tt.reshape(inputs, (-1, config.vocab_size))
    targets = ids[..., 1:].reshape(-1)
    return tt.cross_entropy(flat, targets)


def positional_losses(params: GptAlphaParams, ids: np.ndarray,
                      config: GptAlphaConfig) -> np.ndarray:
    """Per-position next-token loss (nats); entry t scores predicting ids[t+1]."""
    with tt.no_grad():
        logits = model_forward(params, np.asarray(ids), config).data
    zmax = logits.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(logits - zmax).sum(axis=-1))
    picked = np.take_along_axis(logits[..., :-1, :],
                                np.asarray(ids)[..., 1:, None], axis=-1)[..., 0]
    return lse[..., :-1] - picked


def greedy_decode(params: GptAlphaParams, prompt: np.ndarray,
                  n_new: int, config: GptAlphaConfig) -> np.ndarray:
    """Greedy continuation by rerunning the full forward per new token."""
    ids = list(np.asarray(prompt))
    out = []
    for _ in range(n_new):
        with tt.no_grad():
            logits = model_forward(params, np.asarray(ids), config).data
        nxt = int(np.argmax(logits[-1]))
        ids.append(nxt)
        out.append(nxt)
    return np.asarray(out)
