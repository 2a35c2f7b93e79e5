"""Optimizer, schedule, trainer determinism/resume, gradient checker."""

import numpy as np
import pytest

from kvmeans import kvm
from kvmeans import model as M
from kvmeans import tensor as tt
from kvmeans.tensor import Tape, Tensor
from kvmeans.train import (AdamState, TrainConfig, grad_check, lr_at,
                           load_training_checkpoint, optimizer_step,
                           sample_batch, train)


def tconf(**kw):
    base = dict(total_steps=400, warmup_steps=200, base_lr=2e-3,
                batch_tokens=128, ctx_len=32)
    base.update(kw)
    return TrainConfig(**base)


class TestLrSchedule:
    def test_half_warmup(self):
        assert lr_at(100, tconf()) == pytest.approx(0.5 * 2e-3)

    def test_peak_at_warmup_end(self):
        assert lr_at(200, tconf()) == pytest.approx(2e-3)

    def test_zero_at_end_and_beyond(self):
        assert lr_at(400, tconf()) == 0.0
        assert lr_at(900, tconf()) == 0.0

    def test_piecewise_linear_and_continuous(self):
        cfg = tconf()
        lrs = [lr_at(s, cfg) for s in range(0, 401)]
        assert max(lrs) == pytest.approx(cfg.base_lr)
        assert lrs.index(max(lrs)) == cfg.warmup_steps
        diffs = np.diff(lrs)
        # one slope up to warmup, another one after
        assert np.allclose(diffs[:200], diffs[0])
        assert np.allclose(diffs[200:], diffs[-1])


class TestOptimizerStep:
    def test_first_step_closed_form(self):
        cfg = tconf(weight_decay=0.0, warmup_steps=1, total_steps=2)
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        g = np.array([0.5, -0.25, 1.0])
        p.grad = g.copy()
        before = p.data.copy()
        optimizer_step([("p", p)], AdamState(), 1, cfg)
        lr = lr_at(1, cfg)
        want = before - lr * g / (np.abs(g) + cfg.adam_eps)
        assert np.abs(p.data - want).max() < 1e-9

    def test_zero_grad_decay_shrinks_matrices(self):
        cfg = tconf(warmup_steps=1, total_steps=2)
        w = Tensor(np.full((2, 2), 4.0), requires_grad=True)
        w.grad = np.zeros((2, 2))
        optimizer_step([("w_q", w)], AdamState(), 1, cfg)
        lr = lr_at(1, cfg)
        shrink = 1.0 - lr * cfg.weight_decay * (lr / cfg.base_lr)
        assert np.allclose(w.data, 4.0 * shrink)

    def test_scalar_parameters_never_decay(self):
        cfg = tconf(warmup_steps=1, total_steps=2)
        tau = Tensor(np.array([3.0]), requires_grad=True)
        tau.grad = np.zeros(1)
        optimizer_step([("layers.0.kvm.tau_state", tau)], AdamState(), 1, cfg)
        assert tau.data[0] == 3.0

    def test_adamc_reduces_to_plain_decay_at_peak_lr(self):
        # at step == warmup the schedule hits base_lr, so the correction
        # factor is exactly 1 and both variants agree
        base = dict(warmup_steps=1, total_steps=2)
        results = []
        for flag in (True, False):
            cfg = tconf(adamc_correction=flag, **base)
            w = Tensor(np.full((2,), 2.0).reshape(1, 2), requires_grad=True)
            w.grad = np.array([[0.3, -0.7]])
            optimizer_step([("w_up", w)], AdamState(), 1, cfg)
            results.append(w.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_nonfinite_gradient_names_parameter(self):
        cfg = tconf()
        p = Tensor(np.ones(3), requires_grad=True)
        p.grad = np.array([1.0, np.nan, 0.0])
        with pytest.raises(ValueError, match="embed"):
            optimizer_step([("embed", p)], AdamState(), 1, cfg)

    def test_quadratic_bowl_convergence(self):
        # 50 steps of Adam on sum((p - target)^2) gets within 1e-3 of the
        # optimum; the schedule's decay-to-zero is what settles the endgame
        cfg = tconf(base_lr=0.4, warmup_steps=3, total_steps=50,
                    weight_decay=0.0)
        rng = np.random.default_rng(0)
        target = rng.standard_normal(2)
        p = Tensor(target + 0.3 * rng.standard_normal(2), requires_grad=True)
        state = AdamState()
        for step in range(1, 51):
            tt.zero_grad([p])
            with Tape() as tape:
                diff = p - Tensor(target)
                loss = (diff * diff).sum()
            tt.backward(loss, tape)
            optimizer_step([("p", p)], state, step, cfg)
        final = float(((p.data - target) ** 2).sum())
        assert final < 1e-3


def tiny_model(seed=0, modes=("full", "full")):
    cfg = M.GptAlphaConfig(
        d=16, n_heads=2, n_layers=len(modes), vocab_size=64, rotary_width=4,
        layer_modes=tuple(modes),
        kvm=kvm.KvmConfig(chunk_len=4, n_bswa_chunks=2, rotary_width=4,
                          schedule=kvm.StateSchedule.fixed(4)))
    return M.init_params(cfg, seed=seed), cfg


class TestTrainLoop:
    def test_same_seed_identical_metrics(self, tmp_path):
        docs = [np.random.default_rng(i).integers(0, 64, size=64)
                for i in range(4)]
        losses = []
        for run in range(2):
            params, cfg = tiny_model(seed=1)
            tc = TrainConfig(total_steps=5, warmup_steps=2, ctx_len=32,
                             batch_tokens=64, seed=7)
            metrics = train(params, cfg, tc, docs,
                            out_dir=tmp_path / f"run{run}")
            losses.append([m["loss"] for m in metrics])
        assert losses[0] == losses[1]
        a = (tmp_path / "run0" / "metrics.csv").read_text().splitlines()
        b = (tmp_path / "run1" / "metrics.csv").read_text().splitlines()
        # identical apart from wall-clock timings
        strip = lambda lines: [",".join(l.split(",")[:4]) for l in lines]
        assert strip(a) == strip(b)

    def test_resume_matches_uninterrupted(self, tmp_path):
        docs = [np.random.default_rng(i).integers(0, 64, size=64)
                for i in range(4)]
        tc = TrainConfig(total_steps=6, warmup_steps=2, ctx_len=32,
                         batch_tokens=64, seed=3, checkpoint_every=3)
        params, cfg = tiny_model(seed=2)
        full_metrics = train(params, cfg, tc, docs, out_dir=tmp_path / "full")
        final_full = {n: p.data.copy() for n, p in params.named_parameters()}

        params2, _ = tiny_model(seed=2)
        train(params2, cfg, tc, docs, out_dir=tmp_path / "half", stop_step=3)
        # resume from the half checkpoint and run the remaining steps
        params3, cfg3, moments, step = load_training_checkpoint(
            tmp_path / "half" / "checkpoint_final.kvmc")
        metrics = train(params3, cfg3, tc, docs, out_dir=tmp_path / "resumed",
                        start_step=step, moments=moments)
        assert [m["step"] for m in metrics] == [4, 5, 6]
        for (name, p) in params3.named_parameters():
            assert np.array_equal(p.data, final_full[name]), name
        assert [m["loss"] for m in metrics] == \
            [m["loss"] for m in full_metrics[3:]]

    def test_memorizes_tiny_corpus(self):
        rng = np.random.default_rng(5)
        doc = np.tile(rng.integers(0, 64, size=128), 8)  # 1k memorizable tokens
        cfg = M.GptAlphaConfig(
            d=32, n_heads=2, n_layers=2, vocab_size=64, rotary_width=8,
            layer_modes=("full", "full"),
            kvm=kvm.KvmConfig(chunk_len=4, n_bswa_chunks=2, rotary_width=8))
        params = M.init_params(cfg, seed=4)
        tc = TrainConfig(total_steps=150, warmup_steps=20, ctx_len=128,
                         batch_tokens=512, seed=1, base_lr=4e-3,
                         weight_decay=0.0)
        metrics = train(params, cfg, tc, [doc], out_dir=None)
        assert np.mean([m["loss"] for m in metrics[-10:]]) < 0.1

    def test_empty_docs_rejected(self):
        params, cfg = tiny_model()
        with pytest.raises(ValueError, match="empty"):
            sample_batch([], 1, TrainConfig(total_steps=2, warmup_steps=1,
                                            ctx_len=8, batch_tokens=8))


class TestGradCheck:
    def test_linear_model_is_exact(self):
        w = Tensor(np.random.default_rng(6).standard_normal((4, 4)),
                   requires_grad=True)
        x = np.random.default_rng(7).standard_normal((3, 4))

        def loss_fn():
            out = tt.matmul(Tensor(x), w)
            return (out * out).sum()

        # central differences are exact for quadratics; with h=1e-2 only
        # float roundoff remains
        report = grad_check(loss_fn, [("w", w)], samples_per_tensor=6, h=1e-2)
        assert report[0]["worst_rel_err"] < 1e-10

    def test_unused_parameter_reports_zero(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)

        def loss_fn():
            return (w * w).sum()

        report = grad_check(loss_fn, [("w", w), ("unused", unused)],
                            samples_per_tensor=3)
        by_name = {r["name"]: r for r in report}
        assert by_name["unused"]["worst_rel_err"] == 0.0

    def test_full_kvm_model_gradients(self):
        params, cfg = tiny_model(seed=8, modes=("kvm", "kvm"))
        cfg.kvm = kvm.KvmConfig(chunk_len=2, n_bswa_chunks=2, rotary_width=4,
                                schedule=kvm.StateSchedule.power_law(2.0, 0.5))
        cfg.validate()
        ids = np.random.default_rng(9).integers(0, 64, size=14)

        def loss_fn():
            return M.sequence_loss(params, ids, cfg)

        report = grad_check(loss_fn, params.named_parameters(),
                            samples_per_tensor=2, seed=10)
        worst = max(r["worst_rel_err"] for r in report)
        assert worst < 1e-4
