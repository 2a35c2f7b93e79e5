"""Block sliding-window attention with a compressive, growable KV state.

The sequence is processed in chunks of C tokens. A window of
`n_bswa_chunks * C` tokens advances one chunk at a time; the chunk that
falls off the back ("overflow block") is folded into a per-head state of
key/value rows. Each overflow token is either appended as a new state row
(the least redundant ones, up to the budget schedule) or merged into its
most similar existing row, winner-take-all. Queries attend jointly over
the state and the live window in one softmax.

State rows drift in norm as rows absorb merges, so readout renormalizes
just in time: keys through the shared per-head LayerNorm, values rescaled
to the radius captured when the row was created.

All public entry points accept per-head streams shaped (..., H, T, d_h)
and a model-width stream x (..., T, d); leading batch axes are optional.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class StateSchedule:
    """Target state size as a function of sequence position.

    kinds: "fixed" (budget(e) = size), "power_law" (coefficient * e**exponent),
    "saturating" (min(cap, power law)), "unbounded" (inf; the full-attention
    limit where every overflow token is appended).
    """

    kind: str = "fixed"
    size: int = 0
    coefficient: float = 0.0
    exponent: float = 0.5
    cap: int = 0

    @staticmethod
    def fixed(size: int) -> "StateSchedule":
        return StateSchedule(kind="fixed", size=size)

    @staticmethod
    def power_law(coefficient: float, exponent: float = 0.5) -> "StateSchedule":
        return StateSchedule(kind="power_law", coefficient=coefficient,
                             exponent=exponent)

    @staticmethod
    def saturating(cap: int, coefficient: float,
                   exponent: float = 0.5) -> "StateSchedule":
        return StateSchedule(kind="saturating", cap=cap, coefficient=coefficient,
                             exponent=exponent)

    @staticmethod
    def unbounded() -> "StateSchedule":
        return StateSchedule(kind="unbounded")

    def budget(self, e: int) -> float:
        """Budget at sequence position e; non-negative, possibly inf."""
        if self.kind == "fixed":
            return float(self.size)
        if self.kind == "power_law":
            return self.coefficient * float(e) ** self.exponent
        if self.kind == "saturating":
            return min(float(self.cap),
                       self.coefficient * float(e) ** self.exponent)
        if self.kind == "unbounded":
            return math.inf
        raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class AblationFlags:
    """Feature toggles; everything on is the full mechanism."""

    sink_protection: bool = True
    head_temperatures: bool = True
    value_length_norm: bool = True
    merge_gate: bool = True


@dataclass(frozen=True)
class KvmConfig:
    chunk_len: int = 32
    n_bswa_chunks: int = 2
    rotary_width: int = 16
    sink_count: int = 1
    eps_norm: float = 1e-6
    schedule: StateSchedule = field(default_factory=lambda: StateSchedule.fixed(32))
    ablations: AblationFlags = field(default_factory=AblationFlags)

    @property
    def window(self) -> int:
        return self.n_bswa_chunks * self.chunk_len

    def validate(self, d_h: int | None = None) -> None:
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be positive")
        if self.n_bswa_chunks < 1:
            raise ValueError("n_bswa_chunks must be positive")
        if not 0 <= self.sink_count < self.chunk_len:
            raise ValueError("sink_count must satisfy 0 <= S < chunk_len")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")
        if self.rotary_width % 2 != 0:
            raise ValueError("rotary_width must be even")
        if d_h is not None and self.rotary_width > d_h:
            raise ValueError(f"rotary_width {self.rotary_width} exceeds head "
                             f"dim {d_h}")


@dataclass
class KvmLayerParams:
    """Learned KVM quantities for one attention layer.

    w_gate: (d, H) merge-gate projection, one scalar per head.
    tau_state / tau_bswa: (H, 1, 1) per-head key temperatures.
    ln_s_gain / ln_s_bias: (H, 1, d_h) shared state-key LayerNorm, used for
    memory-key preparation, merge targeting, and readout alike.
    """

    w_gate: Tensor
    tau_state: Tensor
    tau_bswa: Tensor
    ln_s_gain: Tensor
    ln_s_bias: Tensor

    @staticmethod
    def init(d: int, n_heads: int, d_h: int, dtype=np.float64) -> "KvmLayerParams":
        return KvmLayerParams(
            w_gate=tt.zeros((d, n_heads), dtype=dtype, requires_grad=True),
            tau_state=tt.ones((n_heads, 1, 1), dtype=dtype, requires_grad=True),
            tau_bswa=tt.ones((n_heads, 1, 1), dtype=dtype, requires_grad=True),
            ln_s_gain=tt.ones((n_heads, 1, d_h), dtype=dtype, requires_grad=True),
            ln_s_bias=tt.zeros((n_heads, 1, d_h), dtype=dtype, requires_grad=True),
        )

    def named_parameters(self, prefix: str = ""):
        yield prefix + "w_gate", self.w_gate
        yield prefix + "tau_state", self.tau_state
        yield prefix + "tau_bswa", self.tau_bswa
        yield prefix + "ln_s_gain", self.ln_s_gain
        yield prefix + "ln_s_bias", self.ln_s_bias


@dataclass
class KvmState:
    """Per-head compressive memory.

    sk/sv: (G, m, d_h) accumulated gated memory keys / values, where G is
    the flattened batch*head count. rho: (G, m, 1) value readout radii,
    fixed at row creation. Rows [0, sink_count) are merge-protected sinks.
    """

    sk: Tensor
    sv: Tensor
    rho: Tensor
    sink_count: int

    @property
    def m(self) -> int:
        return self.sk.shape[-2]

    @property
    def groups(self) -> int:
        return self.sk.shape[0]


@dataclass(frozen=True)
class ChunkPlan:
    """Geometry of one query chunk within a sequence of length T."""

    start: int          # s: first query position
    end: int            # e: one past the last query position (<= T)
    nominal_end: int    # chunk-aligned end, end of a full chunk
    window_start: int   # b: first visible window position
    overflow_start: int  # start of the evicted block, or -1 when none
    init_state: bool    # this chunk creates the state from chunk 0

    @property
    def overflow(self) -> tuple[int, int] | None:
        if self.overflow_start < 0:
            return None
        return (self.overflow_start, self.overflow_start + (self.nominal_end - self.start))


def plan_chunks(seq_len: int, config: KvmConfig) -> list[ChunkPlan]:
    """Chunk geometry for a full sequence.

    Positions [0, min(T, L)) fall in chunks whose window start clamps to 0,
    which makes them exact causal attention over the prefix. The first KVM
    chunk initializes the state from chunk 0 instead of evicting it;
    overflow blocks then cover [C, ...) one chunk at a time, each exactly
    once. A final partial chunk attends but never evicts.
    """
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    C = config.chunk_len
    L = config.window
    n_window = config.n_bswa_chunks
    plans = []
    for c in range(0, (seq_len + C - 1) // C):
        s = c * C
        e_nom = s + C
        e = min(e_nom, seq_len)
        b = max(0, e_nom - L)
        init = c == n_window
        overflow = (c - n_window) * C if c > n_window else -1
        plans.append(ChunkPlan(start=s, end=e, nominal_end=e_nom, window_start=b,
                               overflow_start=overflow, init_state=init))
    return plans


# ---------------------------------------------------------------------------
# State lifecycle

def prepare_memory_keys(k: Tensor, params: KvmLayerParams,
                        config: KvmConfig) -> Tensor:
    """Position-independent memory keys: zero the rotary subspace, LayerNorm.

    k: (G, n, d_h) keys as delivered by the backbone (already token-shifted,
    normalized, and partially rotated).
    """
    d_h = k.shape[-1]
    r = config.rotary_width
    if r > 0:
        keep = np.ones((d_h,), dtype=k.dtype)
        keep[:r] = 0.0
        k = k * Tensor(keep)
    return _ln_s(k, params)


def _ln_s(x: Tensor, params: KvmLayerParams) -> Tensor:
    """Shared state-key LayerNorm, broadcast per head over grouped rows."""
    gain, bias = params.ln_s_gain, params.ln_s_bias
    groups = x.shape[0]
    n_heads = gain.shape[0]
    if groups != n_heads:
        # batched path: groups = batch * heads, tile the per-head affine
        reps = groups // n_heads
        gain = tt.concat([gain] * reps, axis=0)
        bias = tt.concat([bias] * reps, axis=0)
    return tt.layer_norm(x, gain, bias)


def merge_gate(x: Tensor, params: KvmLayerParams, config: KvmConfig,
               n_heads: int) -> Tensor:
    """Per-head positive scalars g = 1 + ELU(x @ w_gate), shaped (G, n, 1).

    x: (..., n, d) model-width stream for the overflow block. With the
    merge_gate ablation off, returns ones.
    """
    lead = x.shape[:-2]
    n = x.shape[-2]
    groups = int(np.prod(lead, dtype=int)) * n_heads if lead else n_heads
    if not config.ablations.merge_gate:
        return tt.ones((groups, n, 1), dtype=x.dtype)
    logits = tt.matmul(x, params.w_gate)              # (..., n, H)
    g = 1.0 + tt.elu(logits)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    g = tt.permute(g, axes)                           # (..., H, n)
    return tt.reshape(g, (groups, n, 1))


def init_state(kbar: Tensor, v: Tensor, config: KvmConfig) -> KvmState:
    """State from the first chunk: keys/values copied, radii = value norms.

    The stored sink_count is the protection actually in force: zero when
    the sink_protection ablation is off.
    """
    if kbar.shape[-2] != config.chunk_len:
        raise ValueError(f"state init needs exactly {config.chunk_len} rows, "
                         f"got {kbar.shape[-2]}")
    rho = tt.l2norm(v, keepdims=True)
    sinks = config.sink_count if config.ablations.sink_protection else 0
    return KvmState(sk=kbar, sv=v, rho=rho, sink_count=sinks)


def readout_views(state: KvmState, params: KvmLayerParams,
                  config: KvmConfig) -> tuple[Tensor, Tensor]:
    """Transient normalized views (khat, vhat); the state is not modified.

    Keys go through the shared LayerNorm; values are rescaled back to their
    stored radius (skipped when the value_length_norm ablation is off).
    """
    khat = _ln_s(state.sk, params)
    if config.ablations.value_length_norm:
        norms = tt.clamp_min(tt.l2norm(state.sv, keepdims=True), config.eps_norm)
        vhat = state.rho * state.sv / norms
    else:
        vhat = state.sv
    return khat, vhat


def plan_budget(schedule: StateSchedule, e: int, m: int, chunk_len: int) -> int:
    """Rows to append from an overflow block of size chunk_len.

    Desired size is max(m, min(budget(e), m + chunk_len)): non-decreasing
    and capped so it never exceeds the rows actually available.
    """
    b_plus = m + chunk_len
    target = max(float(m), min(schedule.budget(e), float(b_plus)))
    n_append = int(min(math.floor(target) - m, chunk_len))
    return max(0, n_append)


def select_append(kbar_overflow: np.ndarray, khat_state: np.ndarray,
                  n_append: int) -> tuple[np.ndarray, np.ndarray]:
    """Split overflow indices into (append, merge) sets per group.

    Redundancy score of token j is its max dot product against the
    normalized state keys; the n_append smallest scores are appended, ties
    broken by lower sequence position. Returns int arrays (G, n_append) and
    (G, C - n_append), each sorted by position.
    """
    groups, count, _ = kbar_overflow.shape
    if n_append <= 0:
        empty = np.zeros((groups, 0), dtype=np.intp)
        return empty, np.tile(np.arange(count, dtype=np.intp), (groups, 1))
    if n_append >= count:
        full = np.tile(np.arange(count, dtype=np.intp), (groups, 1))
        return full, np.zeros((groups, 0), dtype=np.intp)
    scores = np.einsum("gcd,gmd->gcm", kbar_overflow, khat_state).max(axis=-1)
    order = np.argsort(scores, axis=-1, kind="stable")
    append_idx = np.sort(order[:, :n_append], axis=-1)
    merge_idx = np.sort(order[:, n_append:], axis=-1)
    return append_idx, merge_idx


def append_rows(state: KvmState, kbar: Tensor, v: Tensor) -> KvmState:
    """Grow the state; new radii are the appended values' norms."""
    if kbar.shape[-2] == 0:
        return state
    rho_new = tt.l2norm(v, keepdims=True)
    return KvmState(sk=tt.concat([state.sk, kbar], axis=-2),
                    sv=tt.concat([state.sv, v], axis=-2),
                    rho=tt.concat([state.rho, rho_new], axis=-2),
                    sink_count=state.sink_count)


def merge_targets(kbar_merge: np.ndarray, state: KvmState,
                  params: KvmLayerParams, config: KvmConfig) -> np.ndarray:
    """Winner-take-all target row per merged token, (G, n) ints.

    Targets maximize the dot product against the normalized post-append
    state keys; rows below the state's protected sink count are excluded.
    The gate is omitted here since positive scaling cannot change an
    argmax. Ties go to the lowest row index.
    """
    sinks = state.sink_count
    if state.m <= sinks:
        raise ValueError(f"no legal merge target: state has {state.m} rows, "
                         f"{sinks} protected sinks")
    with tt.no_grad():
        khat = _ln_s(state.sk, params).data
    logits = np.einsum("gnd,gmd->gnm", kbar_merge, khat)
    if sinks > 0:
        logits[..., :sinks] = NEG_INF
    return np.argmax(logits, axis=-1).astype(np.intp)


def merge_rows(state: KvmState, k_gated: Tensor, v_gated: Tensor,
               targets: np.ndarray) -> KvmState:
    """Add gated keys/values into their target rows. Radii never change."""
    sinks = state.sink_count
    if targets.size:
        if targets.min() < 0 or targets.max() >= state.m:
            raise ValueError("merge target out of range")
        if sinks > 0 and targets.min() < sinks:
            raise ValueError("merge target hits a protected sink row")
    if targets.shape[-1] == 0:
        return state
    return KvmState(sk=tt.scatter_add_rows(state.sk, targets, k_gated),
                    sv=tt.scatter_add_rows(state.sv, targets, v_gated),
                    rho=state.rho, sink_count=state.sink_count)


def absorb_overflow(state: KvmState, kbar_ov: Tensor, v_ov: Tensor,
                    gates: Tensor, e: int, params: KvmLayerParams,
                    config: KvmConfig) -> KvmState:
    """One eviction: budget -> append the most novel rows -> merge the rest."""
    n_append = plan_budget(config.schedule, e, state.m, config.chunk_len)
    with tt.no_grad():
        khat_pre = _ln_s(state.sk, params).data
    append_idx, merge_idx = select_append(kbar_ov.data, khat_pre, n_append)
    if append_idx.shape[-1]:
        state = append_rows(state,
                            tt.gather_rows(kbar_ov, append_idx),
                            tt.gather_rows(v_ov, append_idx))
    if merge_idx.shape[-1]:
        kbar_m = tt.gather_rows(kbar_ov, merge_idx)
        v_m = tt.gather_rows(v_ov, merge_idx)
        g_m = tt.gather_rows(gates, merge_idx)
        targets = merge_targets(kbar_m.data, state, params, config)
        state = merge_rows(state, g_m * kbar_m, g_m * v_m, targets)
    return state


# ---------------------------------------------------------------------------
# Attention

def build_mask(chunk_start: int, chunk_end: int, m: int, window_start: int,
               dtype=np.float64) -> np.ndarray:
    """Additive mask (queries, m + window columns).

    State columns stay visible to every query; window column t is visible
    to query u iff t <= u.
    """
    qpos = np.arange(chunk_start, chunk_end)[:, None]
    kpos = np.arange(window_start, chunk_end)[None, :]
    win = np.where(kpos <= qpos, 0.0, NEG_INF).astype(dtype)
    if m == 0:
        return win
    return np.concatenate(
        [np.zeros((chunk_end - chunk_start, m), dtype=dtype), win], axis=-1)


def attend_chunk(q: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray) -> Tensor:
    """y = softmax(q keys^T / sqrt(d_h) + mask) values, per group."""
    d_h = q.shape[-1]
    logits = tt.matmul(q, tt.transpose_last(keys)) * (1.0 / math.sqrt(d_h))
    probs = tt.masked_softmax(logits, mask)
    return tt.matmul(probs, values)


def _scaled_window_keys(k: Tensor, params: KvmLayerParams, config: KvmConfig,
                        n_heads: int) -> Tensor:
    if not config.ablations.head_temperatures:
        return k
    tau = params.tau_bswa
    if k.shape[0] != n_heads:
        tau = tt.concat([tau] * (k.shape[0] // n_heads), axis=0)
    return k * tau


def _scaled_state_keys(khat: Tensor, params: KvmLayerParams, config: KvmConfig,
                       n_heads: int) -> Tensor:
    if not config.ablations.head_temperatures:
        return khat
    tau = params.tau_state
    if khat.shape[0] != n_heads:
        tau = tt.concat([tau] * (khat.shape[0] // n_heads), axis=0)
    return khat * tau


def _flatten_heads(t: Tensor) -> tuple[Tensor, tuple[int, ...], int]:
    """(..., H, T, d_h) -> (G, T, d_h); returns (flat, lead shape, H)."""
    if t.ndim == 3:
        return t, (), t.shape[0]
    lead = t.shape[:-3]
    n_heads = t.shape[-3]
    groups = int(np.prod(lead, dtype=int)) * n_heads
    return tt.reshape(t, (groups,) + t.shape[-2:]), lead, n_heads


def _unflatten_heads(t: Tensor, lead: tuple[int, ...], n_heads: int) -> Tensor:
    if not lead:
        return t
    return tt.reshape(t, lead + (n_heads,) + t.shape[-2:])


def kvm_forward(q: Tensor, k: Tensor, v: Tensor, x: Tensor,
                config: KvmConfig, params: KvmLayerParams,
                return_state: bool = True):
    """Chunked recurrence over a whole sequence.

    q/k/v: (..., H, T, d_h) prepared streams; x: (..., T, d) block input for
    the merge gate. Returns (outputs with q's shape, final KvmState or None
    when the sequence never outgrew the window).
    """
    qf, lead, n_heads = _flatten_heads(q)
    kf, _, _ = _flatten_heads(k)
    vf, _, _ = _flatten_heads(v)
    seq_len = qf.shape[-2]
    plans = plan_chunks(seq_len, config)
    C = config.chunk_len

    gates_all: Tensor | None = None
    state: KvmState | None = None
    outs = []
    for plan in plans:
        if plan.init_state:
            kbar0 = prepare_memory_keys(tt.narrow(kf, -2, 0, C), params, config)
            state = init_state(kbar0, tt.narrow(vf, -2, 0, C), config)
        elif plan.overflow is not None:
            lo, hi = plan.overflow
            kbar_ov = prepare_memory_keys(tt.narrow(kf, -2, lo, hi - lo),
                                          params, config)
            v_ov = tt.narrow(vf, -2, lo, hi - lo)
            if gates_all is None:
                gates_all = merge_gate(x, params, config, n_heads)
            g_ov = tt.narrow(gates_all, -2, lo, hi - lo)
            state = absorb_overflow(state, kbar_ov, v_ov, g_ov,
                                    plan.nominal_end, params, config)

        q_chunk = tt.narrow(qf, -2, plan.start, plan.end - plan.start)
        win_k = _scaled_window_keys(
            tt.narrow(kf, -2, plan.window_start, plan.end - plan.window_start),
            params, config, n_heads)
        win_v = tt.narrow(vf, -2, plan.window_start, plan.end - plan.window_start)
        if state is None:
            keys, values, m = win_k, win_v, 0
        else:
            khat, vhat = readout_views(state, params, config)
            keys = tt.concat([_scaled_state_keys(khat, params, config, n_heads),
                              win_k], axis=-2)
            values = tt.concat([vhat, win_v], axis=-2)
            m = state.m
        mask = build_mask(plan.start, plan.end, m, plan.window_start,
                          dtype=qf.dtype)
        outs.append(attend_chunk(q_chunk, keys, values, mask))

    y = _unflatten_heads(tt.concat(outs, axis=-2), lead, n_heads)
    if return_state:
        return y, state
    return y


def bswa_forward(q: Tensor, k: Tensor, v: Tensor, config: KvmConfig,
                 params: KvmLayerParams) -> Tensor:
    """Window-only attention: the same chunk geometry with no state."""
    qf, lead, n_heads = _flatten_heads(q)
    kf, _, _ = _flatten_heads(k)
    vf, _, _ = _flatten_heads(v)
    outs = []
    for plan in plan_chunks(qf.shape[-2], config):
        q_chunk = tt.narrow(qf, -2, plan.start, plan.end - plan.start)
        win_k = _scaled_window_keys(
            tt.narrow(kf, -2, plan.window_start, plan.end - plan.window_start),
            params, config, n_heads)
        win_v = tt.narrow(vf, -2, plan.window_start, plan.end - plan.window_start)
        mask = build_mask(plan.start, plan.end, 0, plan.window_start,
                          dtype=qf.dtype)
        outs.append(attend_chunk(q_chunk, win_k, win_v, mask))
    return _unflatten_heads(tt.concat(outs, axis=-2), lead, n_heads)


def full_attention_forward(q: Tensor, k: Tensor, v: Tensor, config: KvmConfig,
                           params: KvmLayerParams) -> Tensor:
    """Exact causal attention over the whole prefix (one masked softmax)."""
    qf, lead, n_heads = _flatten_heads(q)
    kf, _, _ = _flatten_heads(k)
    vf, _, _ = _flatten_heads(v)
    seq_len = qf.shape[-2]
    keys = _scaled_window_keys(kf, params, config, n_heads)
    mask = build_mask(0, seq_len, 0, 0, dtype=qf.dtype)
    out = attend_chunk(qf, keys, vf, mask)
    return _unflatten_heads(out, lead, n_heads)


def fused_prefill(q: Tensor, k: Tensor, v: Tensor, x: Tensor,
                  config: KvmConfig, params: KvmLayerParams) -> Tensor:
    """Single-attention-call prefill.

    Runs the state recurrence first, stashing each chunk's normalized state
    snapshot, then answers every query with one masked softmax over
    [snapshot rows for all chunks; the full key stream]. Equivalent to
    kvm_forward; the dense mask makes it practical for short sequences and
    testing rather than long-context use.
    """
    qf, lead, n_heads = _flatten_heads(q)
    kf, _, _ = _flatten_heads(k)
    vf, _, _ = _flatten_heads(v)
    seq_len = qf.shape[-2]
    plans = plan_chunks(seq_len, config)
    C = config.chunk_len

    gates_all: Tensor | None = None
    state: KvmState | None = None
    snapshots: list[tuple[Tensor, Tensor] | None] = []
    for plan in plans:
        if plan.init_state:
            kbar0 = prepare_memory_keys(tt.narrow(kf, -2, 0, C), params, config)
            state = init_state(kbar0, tt.narrow(vf, -2, 0, C), config)
        elif plan.overflow is not None:
            lo, hi = plan.overflow
            kbar_ov = prepare_memory_keys(tt.narrow(kf, -2, lo, hi - lo),
                                          params, config)
            if gates_all is None:
                gates_all = merge_gate(x, params, config, n_heads)
            state = absorb_overflow(state, kbar_ov, tt.narrow(vf, -2, lo, hi - lo),
                                    tt.narrow(gates_all, -2, lo, hi - lo),
                                    plan.nominal_end, params, config)
        if state is None:
            snapshots.append(None)
        else:
            khat, vhat = readout_views(state, params, config)
            snapshots.append((_scaled_state_keys(khat, params, config, n_heads),
                              vhat))

    key_parts, value_parts = [], []
    for snap in snapshots:
        if snap is not None:
            key_parts.append(snap[0])
            value_parts.append(snap[1])
    key_parts.append(_scaled_window_keys(kf, params, config, n_heads))
    value_parts.append(vf)
    keys = tt.concat(key_parts, axis=-2)
    values = tt.concat(value_parts, axis=-2)

    snap_sizes = [0 if s is None else s[0].shape[-2] for s in snapshots]
    total_snap = sum(snap_sizes)
    mask = np.full((seq_len, total_snap + seq_len), NEG_INF, dtype=qf.dtype)
    col = 0
    for plan, size in zip(plans, snap_sizes):
        rows = slice(plan.start, plan.end)
        if size:
            mask[rows, col:col + size] = 0.0
        for u in range(plan.start, plan.end):
            mask[u, total_snap + plan.window_start:total_snap + u + 1] = 0.0
        col += size
    out = attend_chunk(qf, keys, values, mask)
    return _unflatten_heads(out, lead, n_heads)


# ---------------------------------------------------------------------------
# Incremental decoding

@dataclass
class DecodeBuffers:
    """Rolling context for one sequence decoded token by token."""

    pos: int = 0
    window_k: list[Tensor] = field(default_factory=list)
    window_v: list[Tensor] = field(default_factory=list)
    window_x: list[Tensor] = field(default_factory=list)
    state: KvmState | None = None


def decode_step(q_t: Tensor, k_t: Tensor, v_t: Tensor, x_t: Tensor,
                buffers: DecodeBuffers, config: KvmConfig,
                params: KvmLayerParams) -> tuple[Tensor, DecodeBuffers]:
    """Process one token; output matches kvm_forward on the full prefix.

    q_t/k_t/v_t: (G, 1, d_h); x_t: (1, d). State updates fire only when a
    chunk boundary is crossed. Buffers are mutated and returned.
    """
    t = buffers.pos
    C = config.chunk_len
    L = config.window
    n_window = config.n_bswa_chunks
    c = t // C
    n_heads = params.tau_state.shape[0]

    if t % C == 0 and c >= n_window:
        if c == n_window:
            kbar0 = prepare_memory_keys(tt.concat(buffers.window_k[:C], axis=-2),
                                        params, config)
            v0 = tt.concat(buffers.window_v[:C], axis=-2)
            buffers.state = init_state(kbar0, v0, config)
        else:
            kbar_ov = prepare_memory_keys(tt.concat(buffers.window_k[:C], axis=-2),
                                          params, config)
            v_ov = tt.concat(buffers.window_v[:C], axis=-2)
            x_ov = tt.concat(buffers.window_x[:C], axis=-2)
            gates = merge_gate(x_ov, params, config, n_heads)
            buffers.state = absorb_overflow(buffers.state, kbar_ov, v_ov, gates,
                                            (c + 1) * C, params, config)
        del buffers.window_k[:C]
        del buffers.window_v[:C]
        del buffers.window_x[:C]

    buffers.window_k.append(k_t)
    buffers.window_v.append(v_t)
    buffers.window_x.append(x_t)

    win_k = _scaled_window_keys(tt.concat(buffers.window_k, axis=-2),
                                params, config, n_heads)
    win_v = tt.concat(buffers.window_v, axis=-2)
    if buffers.state is None:
        keys, values, m = win_k, win_v, 0
    else:
        khat, vhat = readout_views(buffers.state, params, config)
        keys = tt.concat([_scaled_state_keys(khat, params, config, n_heads),
                          win_k], axis=-2)
        values = tt.concat([vhat, win_v], axis=-2)
        m = buffers.state.m
    mask = np.zeros((1, m + len(buffers.window_k)), dtype=q_t.dtype)
    y = attend_chunk(q_t, keys, values, mask)
    buffers.pos += 1
    return y, buffers


# ---------------------------------------------------------------------------
# State snapshot serialization
#
# Byte layout (all little-endian):
#   magic   4 bytes  b"KVMS"
#   version u32      1
#   m       u32      state rows per group
#   S       u32      protected sink rows
#   d_h     u32      head channels
#   G       u32      groups (batch * heads; plain heads for one sequence)
#   sk      G*m*d_h  float32
#   sv      G*m*d_h  float32
#   rho     G*m      float32

_SNAP_MAGIC = b"KVMS"
_SNAP_VERSION = 1


def save_state_snapshot(state: KvmState) -> bytes:
    groups, m, d_h = state.sk.shape
    buf = io.BytesIO()
    buf.write(_SNAP_MAGIC)
    buf.write(struct.pack("<IIIII", _SNAP_VERSION, m, state.sink_count, d_h,
                          groups))
    buf.write(state.sk.data.astype("<f4").tobytes())
    buf.write(state.sv.data.astype("<f4").tobytes())
    buf.write(state.rho.data.reshape(groups, m).astype("<f4").tobytes())
    return buf.getvalue()


def load_state_snapshot(blob: bytes) -> KvmState:
    if blob[:4] != _SNAP_MAGIC:
        raise ValueError("not a state snapshot (bad magic)")
    version, m, sinks, d_h, groups = struct.unpack_from("<IIIII", blob, 4)
    if version != _SNAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = 4 + 20
    count = groups * m * d_h
    sk = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    off += count * 4
    sv = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    off += count * 4
    rho = np.frombuffer(blob, dtype="<f4", count=groups * m, offset=off)
    return KvmState(
        sk=Tensor(sk.reshape(groups, m, d_h).astype(np.float64)),
        sv=Tensor(sv.reshape(groups, m, d_h).astype(np.float64)),
        rho=Tensor(rho.reshape(groups, m, 1).astype(np.float64)),
        sink_count=sinks)
