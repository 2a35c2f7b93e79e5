"""Analytic cost accounting for state schedules.

Replays the chunk/budget bookkeeping without touching any tensors: state
rows per sequence length, total prefill work (key visibilities summed over
every query), and per-token decode work at the end of the sequence. Log-log
slopes fitted over the top decade of N verify the asymptotic regime a
schedule lands in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvm import KvmConfig, StateSchedule, plan_budget, plan_chunks


@dataclass
class SimRow:
    seq_len: int
    state_rows: int
    prefill_cost: int
    decode_cost: int


def simulate_sequence(schedule: StateSchedule, chunk_len: int,
                      n_bswa_chunks: int, seq_len: int) -> SimRow:
    """Account one prefill of seq_len tokens under the schedule."""
    config = KvmConfig(chunk_len=chunk_len, n_bswa_chunks=n_bswa_chunks,
                       rotary_width=0, schedule=schedule)
    m = 0
    prefill = 0
    for plan in plan_chunks(seq_len, config):
        if plan.init_state:
            m = chunk_len
        elif plan.overflow is not None:
            m += plan_budget(schedule, plan.nominal_end, m, chunk_len)
        # each query u sees m state rows plus window positions [b, u]
        count = plan.end - plan.start
        first = plan.start - plan.window_start + 1
        last = plan.end - 1 - plan.window_start + 1
        prefill += count * m + (first + last) * count // 2
    decode = m + min(seq_len, config.window)
    return SimRow(seq_len=seq_len, state_rows=m, prefill_cost=prefill,
                  decode_cost=decode)


def simulate_schedule(schedule: StateSchedule, chunk_len: int,
                      n_bswa_chunks: int, seq_lens: list[int]) -> list[SimRow]:
    return [simulate_sequence(schedule, chunk_len, n_bswa_chunks, n)
            for n in sorted(seq_lens)]


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log10(y) vs log10(x) over the top decade of x."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    keep = xs >= xs.max() / 10.0
    xs, ys = xs[keep], ys[keep]
    if len(xs) < 2:
        raise ValueError("need at least two points in the top decade")
    ys = np.maximum(ys, 1e-12)
    return float(np.polyfit(np.log10(xs), np.log10(ys), 1)[0])


def fitted_exponents(rows: list[SimRow]) -> dict[str, float]:
    ns = [r.seq_len for r in rows]
    return {
        "state": fit_loglog_slope(ns, [max(r.state_rows, 1) for r in rows]),
        "prefill": fit_loglog_slope(ns, [r.prefill_cost for r in rows]),
        "decode": fit_loglog_slope(ns, [r.decode_cost for r in rows]),
    }


DEFAULT_SEQ_LENS = [2 ** k for k in range(10, 18)]


def schedule_by_name(name: str, chunk_len: int) -> StateSchedule:
    """The named schedules used across docs and the CLI."""
    if name == "fixed":
        return StateSchedule.fixed(chunk_len)
    if name == "sqrt":
        return StateSchedule.power_law(16.0, 0.5)
    if name == "saturating":
        return StateSchedule.saturating(cap=1024, coefficient=16.0)
    if name == "unbounded":
        return StateSchedule.unbounded()
    raise ValueError(f"unknown schedule name {name!r}; expected fixed, sqrt, "
                     "saturating, or unbounded")
