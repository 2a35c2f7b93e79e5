"""Shared builders for randomized KVM configurations and streams."""

import numpy as np
import pytest

from kvmeans import kvm
from kvmeans.tensor import Tensor


def make_params(d, n_heads, d_h, seed=0, randomize=True):
    """Layer params; randomized slightly off their neutral init by default."""
    params = kvm.KvmLayerParams.init(d, n_heads, d_h)
    if randomize:
        rng = np.random.default_rng(seed)
        params.w_gate.data[:] = rng.standard_normal(params.w_gate.shape) * 0.5
        params.tau_state.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, 1))
        params.tau_bswa.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, 1))
        params.ln_s_gain.data[:] = 1.0 + 0.2 * rng.standard_normal((n_heads, 1, d_h))
        params.ln_s_bias.data[:] = 0.2 * rng.standard_normal((n_heads, 1, d_h))
    return params


def make_streams(n_heads, seq_len, d_h, d, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_heads, seq_len, d_h))
    k = rng.standard_normal((n_heads, seq_len, d_h))
    v = rng.standard_normal((n_heads, seq_len, d_h))
    x = rng.standard_normal((seq_len, d))
    return q, k, v, x


def as_tensors(*arrays):
    return tuple(Tensor(a) for a in arrays)


@pytest.fixture
def small_config():
    return kvm.KvmConfig(chunk_len=2, n_bswa_chunks=2, rotary_width=2,
                         sink_count=1,
                         schedule=kvm.StateSchedule.power_law(3.0, 0.5))
