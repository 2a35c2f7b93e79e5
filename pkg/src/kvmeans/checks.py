"""Correctness check suites: oracle equivalence, invariants, gradients.

Both the `check` CLI command and the acceptance tests run these; the
functions return OracleReport rows so failures name the responsible
operation.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kvm
from . import tensor as tt
from .kvm import AblationFlags, KvmConfig, StateSchedule
from .model import GptAlphaConfig, init_params, sequence_loss
from .oracle import OracleReport, compare, exact_causal_attention, naive_kvm_forward
from .tensor import Tensor
from .train import grad_check

TOL_ORACLE = 1e-10
TOL_FUSED = 1e-12
TOL_DECODE = 1e-10
TOL_WARMUP = 1e-12
TOL_GRAD = 1e-4


@dataclass(frozen=True)
class MatrixCase:
    chunk_len: int
    n_bswa_chunks: int
    n_heads: int
    d_h: int
    seq_len: int
    schedule: StateSchedule
    ablations: AblationFlags

    def config(self) -> KvmConfig:
        return KvmConfig(chunk_len=self.chunk_len,
                         n_bswa_chunks=self.n_bswa_chunks,
                         rotary_width=self.d_h // 2,
                         sink_count=1,
                         schedule=self.schedule,
                         ablations=self.ablations)


def _ablation_grid():
    combos = []
    for bits in itertools.product((True, False), repeat=4):
        combos.append(AblationFlags(sink_protection=bits[0],
                                    head_temperatures=bits[1],
                                    value_length_norm=bits[2],
                                    merge_gate=bits[3]))
    return combos


def iter_matrix(level: str = "full"):
    """The equivalence test matrix; `fast` is a small diagonal slice."""
    if level == "fast":
        chunk_lens, n_chunks, heads, dims = (2, 3), (1, 2), (2,), (4,)
        seq_of = lambda C, L: (1, L + 1, 24)
        schedules = [StateSchedule.fixed, lambda C: StateSchedule.power_law(2.0, 0.5)]
        ablations = [AblationFlags(), AblationFlags(False, False, False, False)]
    else:
        chunk_lens, n_chunks, heads, dims = (2, 3, 4), (1, 2, 3), (1, 2, 4), (4, 8)
        seq_of = lambda C, L: (1, C - 1, L, L + 1, L + 3 * C, 64)
        schedules = [StateSchedule.fixed,
                     lambda C: StateSchedule.power_law(2.0, 0.5),
                     lambda C: StateSchedule.saturating(cap=C + 4, coefficient=2.0)]
        ablations = _ablation_grid()
    for C in chunk_lens:
        for n in n_chunks:
            L = C * n
            seq_lens = sorted({t for t in seq_of(C, L) if t >= 1})
            for n_heads in heads:
                for d_h in dims:
                    for seq_len in seq_lens:
                        for mk_sched in schedules:
                            sched = mk_sched(C) if callable(mk_sched) else mk_sched
                            for abl in ablations:
                                yield MatrixCase(C, n, n_heads, d_h, seq_len,
                                                 sched, abl)


class _CaseInputs:
    """Streams/params cached across matrix cases that share shapes."""

    def __init__(self):
        self._streams = {}
        self._params = {}

    def streams(self, n_heads, d_h, seq_len, d=8):
        key = (n_heads, d_h)
        if key not in self._streams:
            rng = np.random.default_rng([7, n_heads, d_h])
            self._streams[key] = (rng.standard_normal((n_heads, 64, d_h)),
                                  rng.standard_normal((n_heads, 64, d_h)),
                                  rng.standard_normal((n_heads, 64, d_h)),
                                  rng.standard_normal((64, d)))
        q, k, v, x = self._streams[key]
        return q[:, :seq_len], k[:, :seq_len], v[:, :seq_len], x[:seq_len]

    def params(self, n_heads, d_h, d=8):
        key = (n_heads, d_h)
        if key not in self._params:
            rng = np.random.default_rng([11, n_heads, d_h])
            p = kvm.KvmLayerParams.init(d, n_heads, d_h)
            p.w_gate.data[:] = 0.5 * rng.standard_normal(p.w_gate.shape)
            p.tau_state.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, 1))
            p.tau_bswa.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, 1))
            p.ln_s_gain.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, d_h))
            p.ln_s_bias.data[:] = 0.2 * rng.standard_normal((n_heads, 1, d_h))
            self._params[key] = p
        return self._params[key]


def check_oracle_equivalence(level: str = "full",
                             tolerance: float = TOL_ORACLE) -> OracleReport:
    """kvm_forward vs the per-token reference over the whole matrix."""
    inputs = _CaseInputs()
    worst = OracleReport("kvm_forward vs naive oracle", 0.0, 0.0, None, tolerance)
    cases = 0
    for case in iter_matrix(level):
        q, k, v, x = inputs.streams(case.n_heads, case.d_h, case.seq_len)
        params = inputs.params(case.n_heads, case.d_h)
        config = case.config()
        y, _ = kvm.kvm_forward(Tensor(q), Tensor(k), Tensor(v), Tensor(x),
                               config, params)
        ref = naive_kvm_forward(q, k, v, x, config, params)
        rep = compare(f"kvm vs naive {case}", y.data, ref, tolerance)
        cases += 1
        if rep.max_abs_diff > worst.max_abs_diff:
            worst = replace(rep, name="kvm_forward vs naive oracle")
    return replace(worst, name=f"{worst.name} ({cases} cases)")


def check_fused_and_decode(level: str = "full",
                           tol_fused: float = TOL_FUSED,
                           tol_decode: float = TOL_DECODE):
    """fused_prefill and token-by-token decode vs kvm_forward, same matrix."""
    inputs = _CaseInputs()
    worst_f = OracleReport("fused_prefill vs kvm_forward", 0.0, 0.0, None, tol_fused)
    worst_d = OracleReport("decode_step vs kvm_forward", 0.0, 0.0, None, tol_decode)
    cases = 0
    for case in iter_matrix(level):
        q, k, v, x = inputs.streams(case.n_heads, case.d_h, case.seq_len)
        params = inputs.params(case.n_heads, case.d_h)
        config = case.config()
        y, _ = kvm.kvm_forward(Tensor(q), Tensor(k), Tensor(v), Tensor(x),
                               config, params)
        yf = kvm.fused_prefill(Tensor(q), Tensor(k), Tensor(v), Tensor(x),
                               config, params)
        rep = compare("fused", yf.data, y.data, tol_fused)
        if rep.max_abs_diff > worst_f.max_abs_diff:
            worst_f = replace(rep, name="fused_prefill vs kvm_forward")
        buf = kvm.DecodeBuffers()
        outs = []
        for t in range(case.seq_len):
            yt, buf = kvm.decode_step(Tensor(q[:, t:t + 1]), Tensor(k[:, t:t + 1]),
                                      Tensor(v[:, t:t + 1]), Tensor(x[t:t + 1]),
                                      buf, config, params)
            outs.append(yt.data)
        rep = compare("decode", np.concatenate(outs, axis=1), y.data, tol_decode)
        if rep.max_abs_diff > worst_d.max_abs_diff:
            worst_d = replace(rep, name="decode_step vs kvm_forward")
        cases += 1
    return (replace(worst_f, name=f"{worst_f.name} ({cases} cases)"),
            replace(worst_d, name=f"{worst_d.name} ({cases} cases)"))


def check_warmup_equivalence(tolerance: float = TOL_WARMUP) -> OracleReport:
    """T <= L must be exact causal attention, across geometries and ablations."""
    inputs = _CaseInputs()
    worst = OracleReport("warm-up vs exact causal", 0.0, 0.0, None, tolerance)
    for C, n, n_heads, d_h in itertools.product((2, 3, 4), (1, 2, 3), (1, 2), (4, 8)):
        L = C * n
        for seq_len in {1, L - 1, L} - {0}:
            for abl in (AblationFlags(), AblationFlags(head_temperatures=False)):
                case = MatrixCase(C, n, n_heads, d_h, seq_len,
                                  StateSchedule.fixed(C), abl)
                q, k, v, x = inputs.streams(n_heads, d_h, seq_len)
                params = inputs.params(n_heads, d_h)
                config = case.config()
                y, state = kvm.kvm_forward(Tensor(q), Tensor(k), Tensor(v),
                                           Tensor(x), config, params)
                assert state is None
                tau = params.tau_bswa.data.reshape(-1) \
                    if abl.head_temperatures else 1.0
                ref = exact_causal_attention(q, k, v, tau)
                rep = compare("warmup", y.data, ref, tolerance)
                if rep.max_abs_diff > worst.max_abs_diff:
                    worst = replace(rep, name="warm-up vs exact causal")
    return worst


def check_mask_rule() -> OracleReport:
    """build_mask against the independently stated visibility rule."""
    worst = 0.0
    for C, n, m in itertools.product((2, 3, 4), (1, 2, 3), (0, 1, 5)):
        L = C * n
        for chunk_idx in range(n, n + 3):
            s, e_nom = chunk_idx * C, (chunk_idx + 1) * C
            b = e_nom - L
            mask = kvm.build_mask(s, e_nom, m, b)
            for row, u in enumerate(range(s, e_nom)):
                for col in range(m + (e_nom - b)):
                    if col < m:
                        visible = True
                    else:
                        visible = (b + col - m) <= u
                    want = 0.0 if visible else float("-inf")
                    if mask[row, col] != want:
                        worst = max(worst, 1.0)
    return OracleReport("build_mask visibility rule", worst, worst, None, 0.0)


def check_merge_invariance(n_trials: int = 10_000, seed: int = 0) -> OracleReport:
    """Positive rescaling of an overflow key must not move its merge target."""
    rng = np.random.default_rng(seed)
    config = KvmConfig(chunk_len=8, sink_count=1, rotary_width=2)
    params = kvm.KvmLayerParams.init(8, 1, 4)
    params.ln_s_gain.data[:] = 1.0 + 0.2 * rng.standard_normal((1, 1, 4))
    params.ln_s_bias.data[:] = 0.2 * rng.standard_normal((1, 1, 4))
    violations = 0
    for _ in range(n_trials):
        m = int(rng.integers(2, 9))
        sk = rng.standard_normal((1, m, 4))
        state = kvm.KvmState(sk=Tensor(sk), sv=Tensor(sk.copy()),
                             rho=Tensor(np.ones((1, m, 1))), sink_count=1)
        kbar = rng.standard_normal((1, 1, 4))
        scale = float(np.exp(rng.uniform(-6, 6)))
        base = kvm.merge_targets(kbar, state, params, config)
        scaled = kvm.merge_targets(scale * kbar, state, params, config)
        if not np.array_equal(base, scaled):
            violations += 1
    return OracleReport(f"merge argmax scale invariance ({n_trials} trials)",
                        float(violations), float(violations), None, 0.0)


def check_state_invariants(n_steps: int = 1000, seed: int = 0) -> OracleReport:
    """Radius immutability, JIT norm, sink protection, bounded monotone growth."""
    rng = np.random.default_rng(seed)
    failures = 0
    steps_done = 0
    scenario = 0
    while steps_done < n_steps:
        C = int(rng.integers(2, 5))
        n_heads = int(rng.integers(1, 3))
        d_h = 4
        sched = [StateSchedule.fixed(C), StateSchedule.power_law(2.0, 0.5),
                 StateSchedule.unbounded()][scenario % 3]
        scenario += 1
        config = KvmConfig(chunk_len=C, n_bswa_chunks=2, rotary_width=2,
                           sink_count=1, schedule=sched)
        params = kvm.KvmLayerParams.init(8, n_heads, d_h)
        params.ln_s_gain.data[:] = 1.0 + 0.1 * rng.standard_normal(
            params.ln_s_gain.shape)
        kbar0 = kvm.prepare_memory_keys(
            Tensor(rng.standard_normal((n_heads, C, d_h))), params, config)
        state = kvm.init_state(kbar0,
                               Tensor(rng.standard_normal((n_heads, C, d_h))),
                               config)
        rho0 = state.rho.data.copy()
        sink_k = state.sk.data[:, 0].copy()
        sink_v = state.sv.data[:, 0].copy()
        prev_m = state.m
        for step in range(int(rng.integers(5, 30))):
            e = (config.n_bswa_chunks + 1 + step) * C
            kbar = kvm.prepare_memory_keys(
                Tensor(rng.standard_normal((n_heads, C, d_h))), params, config)
            v_ov = Tensor(rng.standard_normal((n_heads, C, d_h)))
            gates = Tensor(1.0 + np.abs(rng.standard_normal((n_heads, C, 1))))
            state = kvm.absorb_overflow(state, kbar, v_ov, gates, e, params,
                                        config)
            steps_done += 1
            ok = np.array_equal(state.rho.data[:, :C], rho0)
            ok &= np.array_equal(state.sk.data[:, 0], sink_k)
            ok &= np.array_equal(state.sv.data[:, 0], sink_v)
            ok &= state.m >= prev_m
            if sched.kind != "unbounded":
                ok &= state.m <= max(C, int(np.floor(sched.budget(e))))
            _, vhat = kvm.readout_views(state, params, config)
            norms = np.linalg.norm(vhat.data, axis=-1)
            live = np.linalg.norm(state.sv.data, axis=-1) > config.eps_norm
            ok &= bool(np.abs(norms[live] - state.rho.data[..., 0][live]).max()
                       <= 1e-9)
            prev_m = state.m
            if not ok:
                failures += 1
    return OracleReport(f"state invariants ({steps_done} recurrence steps)",
                        float(failures), float(failures), None, 0.0)


def check_model_gradients(tolerance: float = TOL_GRAD,
                          samples_per_tensor: int = 3) -> OracleReport:
    """Analytic vs finite-difference gradients on a 2-layer d=16 KVM model."""
    config = GptAlphaConfig(
        d=16, n_heads=2, n_layers=2, vocab_size=48, rotary_width=4,
        layer_modes=("kvm", "kvm"),
        kvm=KvmConfig(chunk_len=2, n_bswa_chunks=2, rotary_width=4,
                      schedule=StateSchedule.power_law(2.0, 0.5)))
    params = init_params(config, seed=3)
    ids = np.random.default_rng(4).integers(0, 48, size=14)

    report = grad_check(lambda: sequence_loss(params, ids, config),
                        params.named_parameters(),
                        samples_per_tensor=samples_per_tensor, seed=5)
    worst = max(report, key=lambda r: r["worst_rel_err"])
    return OracleReport(
        f"model gradients vs finite differences (worst: {worst['name']})",
        worst["worst_rel_err"], worst["worst_rel_err"], None, tolerance)


def run_checks(level: str = "fast", verbose: bool = True) -> list[OracleReport]:
    """The `check` command body: returns one report row per check."""
    reports = []

    def run(fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as err:  # a crashed check is a failed check
            result = OracleReport(f"{fn.__name__} crashed: {err}",
                                  float("inf"), float("inf"), None, 0.0)
        rows = result if isinstance(result, tuple) else (result,)
        for row in rows:
            reports.append(row)
            if verbose:
                print(f"{row.line()}  [{time.perf_counter() - t0:.1f}s]")

    run(check_mask_rule)
    run(check_oracle_equivalence, level)
    run(check_fused_and_decode, level)
    run(check_warmup_equivalence)
    run(check_merge_invariance, 1000 if level == "fast" else 10_000)
    run(check_state_invariants, 200 if level == "fast" else 1000)
    run(check_model_gradients, samples_per_tensor=1 if level == "fast" else 3)
    return reports
