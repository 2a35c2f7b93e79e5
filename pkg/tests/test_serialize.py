"""Checkpoint container and config round trips."""

import numpy as np
import pytest

from kvmeans import kvm
from kvmeans import model as M
from kvmeans import serialize as S


class TestCheckpointContainer:
    def test_round_trip_mixed_dtypes(self, tmp_path):
        path = tmp_path / "t.kvmc"
        tensors = {
            "a": np.arange(12, dtype=np.float64).reshape(3, 4),
            "b.c": np.float32(np.random.default_rng(0).standard_normal((2, 1, 5))),
            "scalar": np.array([7.0]),
        }
        S.save_checkpoint(path, tensors, '{"hello": 1}')
        back, text = S.load_checkpoint(path)
        assert text == '{"hello": 1}'
        assert set(back) == set(tensors)
        for name in tensors:
            assert back[name].dtype == tensors[name].dtype
            assert np.array_equal(back[name], tensors[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            S.load_checkpoint(path)


def small_config(**kw):
    cfg = M.GptAlphaConfig(
        d=8, n_heads=2, n_layers=2, vocab_size=16, rotary_width=2,
        layer_modes=("kvm", "bswa"),
        kvm=kvm.KvmConfig(chunk_len=2, n_bswa_chunks=2, rotary_width=2,
                          schedule=kvm.StateSchedule.saturating(
                              cap=64, coefficient=4.0),
                          ablations=kvm.AblationFlags(merge_gate=False)),
        **kw)
    cfg.validate()
    return cfg


class TestConfigJson:
    def test_round_trip_preserves_everything(self):
        cfg = small_config(dtype="float32", tie_embeddings=True)
        text = S.model_config_to_json(cfg)
        back = S.model_config_from_json(text)
        assert back == cfg

    def test_schedule_variants_round_trip(self):
        for sched in (kvm.StateSchedule.fixed(32),
                      kvm.StateSchedule.power_law(16.0, 0.5),
                      kvm.StateSchedule.saturating(cap=9, coefficient=2.0),
                      kvm.StateSchedule.unbounded()):
            back = S.schedule_from_dict(S.schedule_to_dict(sched))
            assert back == sched


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_config()
        params = M.init_params(cfg, seed=1)
        path = tmp_path / "model.kvmc"
        S.save_model(path, params, cfg, extra={"adam.m.embed": np.ones(3)})
        back, back_cfg, extras = S.load_model(path)
        assert back_cfg == cfg
        for (name, a), (_, b) in zip(params.named_parameters(),
                                     back.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        assert list(extras) == ["adam.m.embed"]

    def test_logits_identical_after_reload(self, tmp_path):
        cfg = small_config()
        params = M.init_params(cfg, seed=2)
        ids = np.random.default_rng(3).integers(0, 16, size=9)
        want = M.model_forward(params, ids, cfg).data
        path = tmp_path / "model.kvmc"
        S.save_model(path, params, cfg)
        back, back_cfg, _ = S.load_model(path)
        got = M.model_forward(back, ids, back_cfg).data
        assert np.array_equal(got, want)

    def test_missing_parameter_rejected(self, tmp_path):
        cfg = small_config()
        params = M.init_params(cfg, seed=4)
        tensors = {n: p.data for n, p in params.named_parameters()}
        tensors.pop("embed")
        path = tmp_path / "broken.kvmc"
        S.save_checkpoint(path, tensors, S.model_config_to_json(cfg))
        with pytest.raises(ValueError, match="embed"):
            S.load_model(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = small_config()
        params = M.init_params(cfg, seed=5)
        tensors = {n: p.data for n, p in params.named_parameters()}
        tensors["embed"] = np.zeros((4, 4))
        path = tmp_path / "broken.kvmc"
        S.save_checkpoint(path, tensors, S.model_config_to_json(cfg))
        with pytest.raises(ValueError, match="shape"):
            S.load_model(path)
