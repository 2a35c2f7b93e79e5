"""Slow reference implementations used to check the production path.

Everything here is plain float64 numpy written as unbatched loops: one
query position at a time, state views recomputed from scratch for every
query, no caching. The only thing shared with the production code is the
configuration/parameter dataclasses; the math is reimplemented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kvm import KvmConfig, KvmLayerParams

LN_EPS = 1e-5


@dataclass
class OracleReport:
    """Outcome of comparing a production result against a reference."""

    name: str
    max_abs_diff: float
    max_rel_diff: float
    first_mismatch: tuple | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max_abs={self.max_abs_diff:.3e} "
                f"tol={self.tolerance:.1e}")


def compare(name: str, produced: np.ndarray, expected: np.ndarray,
            tolerance: float) -> OracleReport:
    produced = np.asarray(produced, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    diff = np.abs(produced - expected)
    max_abs = float(diff.max()) if diff.size else 0.0
    denom = np.maximum(np.abs(expected), 1e-12)
    max_rel = float((diff / denom).max()) if diff.size else 0.0
    first = None
    if max_abs > tolerance:
        first = tuple(int(i) for i in np.unravel_index(int(diff.argmax()),
                                                       diff.shape))
    return OracleReport(name=name, max_abs_diff=max_abs, max_rel_diff=max_rel,
                        first_mismatch=first, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Shared little helpers (reference implementations, not the production ops)

def _layer_norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                     eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _softmax_row(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def exact_causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                           temperature: np.ndarray | float = 1.0) -> np.ndarray:
    """Textbook causal attention, one query row at a time.

    q/k/v: (H, T, d_h); temperature scales keys, scalar or per-head.
    """
    n_heads, seq_len, d_h = q.shape
    tau = np.asarray(temperature, dtype=np.float64).reshape(-1)
    if tau.size == 1:
        tau = np.full(n_heads, float(tau[0]))
    out = np.zeros_like(q, dtype=np.float64)
    for h in range(n_heads):
        keys = k[h] * tau[h]
        for u in range(seq_len):
            probs = _softmax_row(keys[:u + 1] @ q[h, u] / math.sqrt(d_h))
            out[h, u] = probs @ v[h, :u + 1]
    return out


def brute_force_merge_assign(overflow_keys: np.ndarray,
                             state_keys_normalized: np.ndarray,
                             sink_count: int) -> np.ndarray:
    """Exhaustive merge targets: best row index >= sink_count per token.

    Ties resolve to the lowest row index (strict > comparison while
    scanning upward).
    """
    n_tokens = overflow_keys.shape[0]
    m = state_keys_normalized.shape[0]
    targets = np.zeros(n_tokens, dtype=np.intp)
    for j in range(n_tokens):
        best_i = -1
        best = -np.inf
        for i in range(sink_count, m):
            score = float(overflow_keys[j] @ state_keys_normalized[i])
            if score > best:
                best = score
                best_i = i
        if best_i < 0:
            raise ValueError("no legal merge target")
        targets[j] = best_i
    return targets


# ---------------------------------------------------------------------------
# Per-token reference of the full mechanism

class _RefState:
    """Mutable per-head state for the reference recurrence."""

    def __init__(self, sk, sv, rho):
        self.sk = sk      # list of (m, d_h) arrays, one per head-group
        self.sv = sv
        self.rho = rho    # list of (m,) arrays

    @property
    def m(self) -> int:
        return self.sk[0].shape[0]


def naive_kvm_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      x: np.ndarray, config: KvmConfig,
                      params: KvmLayerParams) -> np.ndarray:
    """Per-position reference of the chunked recurrence.

    q/k/v: (H, T, d_h); x: (T, d). Recomputes the normalized state views for
    every single query. Double precision throughout.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_heads, seq_len, d_h = q.shape
    C = config.chunk_len
    L = config.window
    n_window = config.n_bswa_chunks
    r = config.rotary_width
    eps = config.eps_norm
    sinks = config.sink_count if config.ablations.sink_protection else 0

    gain = params.ln_s_gain.data.reshape(n_heads, d_h)
    bias = params.ln_s_bias.data.reshape(n_heads, d_h)
    w_gate = params.w_gate.data
    tau_state = params.tau_state.data.reshape(n_heads)
    tau_bswa = params.tau_bswa.data.reshape(n_heads)
    if not config.ablations.head_temperatures:
        tau_state = np.ones(n_heads)
        tau_bswa = np.ones(n_heads)

    def memory_key(h: int, key_row: np.ndarray) -> np.ndarray:
        masked = key_row.copy()
        masked[:r] = 0.0
        return _layer_norm_rows(masked, gain[h], bias[h])

    def gate_of(h: int, pos: int) -> float:
        if not config.ablations.merge_gate:
            return 1.0
        z = float(x[pos] @ w_gate[:, h])
        return 1.0 + (z if z >= 0.0 else math.exp(z) - 1.0)

    state: _RefState | None = None
    out = np.zeros_like(q)

    for u in range(seq_len):
        c = u // C
        if u % C == 0 and c >= n_window:
            if c == n_window:
                sk, sv, rho = [], [], []
                for h in range(n_heads):
                    rows_k = np.stack([memory_key(h, k[h, j]) for j in range(C)])
                    rows_v = v[h, :C].copy()
                    sk.append(rows_k)
                    sv.append(rows_v)
                    rho.append(np.array([np.linalg.norm(rows_v[i])
                                         for i in range(C)]))
                state = _RefState(sk, sv, rho)
            else:
                lo = (c - n_window) * C
                block = list(range(lo, lo + C))
                e_nom = (c + 1) * C
                budget = config.schedule.budget(e_nom)
                b_plus = state.m + C
                target_size = max(float(state.m), min(budget, float(b_plus)))
                n_append = max(0, min(int(math.floor(target_size)) - state.m, C))
                for h in range(n_heads):
                    kbars = [memory_key(h, k[h, j]) for j in block]
                    khat = _layer_norm_rows(state.sk[h], gain[h], bias[h])
                    scores = [float((kb @ khat.T).max()) for kb in kbars]
                    order = sorted(range(C), key=lambda j: (scores[j], j))
                    appends = sorted(order[:n_append])
                    merges = sorted(order[n_append:])
                    for j in appends:
                        pos = block[j]
                        state.sk[h] = np.vstack([state.sk[h], kbars[j]])
                        state.sv[h] = np.vstack([state.sv[h], v[h, pos]])
                        state.rho[h] = np.append(state.rho[h],
                                                 np.linalg.norm(v[h, pos]))
                    khat_plus = _layer_norm_rows(state.sk[h], gain[h], bias[h])
                    for j in merges:
                        pos = block[j]
                        row = kbars[j] @ khat_plus.T
                        best_i = sinks + int(np.argmax(row[sinks:]))
                        g = gate_of(h, pos)
                        state.sk[h][best_i] += g * kbars[j]
                        state.sv[h][best_i] += g * v[h, pos]

        b = max(0, (c + 1) * C - L)
        for h in range(n_heads):
            if state is not None:
                khat = _layer_norm_rows(state.sk[h], gain[h], bias[h])
                if config.ablations.value_length_norm:
                    norms = np.maximum(
                        np.linalg.norm(state.sv[h], axis=-1, keepdims=True), eps)
                    vhat = state.rho[h][:, None] * state.sv[h] / norms
                else:
                    vhat = state.sv[h]
                keys = np.vstack([tau_state[h] * khat, tau_bswa[h] * k[h, b:u + 1]])
                values = np.vstack([vhat, v[h, b:u + 1]])
            else:
                keys = tau_bswa[h] * k[h, b:u + 1]
                values = v[h, b:u + 1]
            probs = _softmax_row(keys @ q[h, u] / math.sqrt(d_h))
            out[h, u] = probs @ values
    return out
