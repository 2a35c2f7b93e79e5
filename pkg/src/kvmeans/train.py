"""Toy-scale trainer: Adam with decoupled weight decay and warmup/linear-decay.

The weight-decay term is scaled by lr_t / base_lr by default, which keeps
decay proportional to the schedule and reduces to plain decoupled decay at
constant lr; a flag restores the unscaled behavior. Matrices decay,
scalar/vector parameters (gains, biases, shifts, temperatures) never do.

Batches are a pure function of (seed, step), so a run resumed from a
checkpoint continues bit-identically in double precision.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .model import (GptAlphaConfig, GptAlphaParams, is_decay_param,
                    sequence_loss)
from .serialize import load_checkpoint, save_model
from .tensor import Tape


@dataclass
class TrainConfig:
    total_steps: int = 400
    warmup_steps: int = 200
    base_lr: float = 2e-3
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_tokens: int = 4096
    ctx_len: int = 512
    seed: int = 0
    decay_scalars: bool = False
    adamc_correction: bool = True
    grad_clip: float = 0.0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_every: int = 1

    def validate(self) -> None:
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        for name in ("base_lr", "weight_decay", "beta1", "beta2", "adam_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_tokens < self.ctx_len:
            raise ValueError("batch_tokens must cover at least one context")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear 0 -> base over warmup, then linear base -> 0 at total_steps."""
    if step <= 0:
        return 0.0
    if step <= config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = config.total_steps - config.warmup_steps
    return config.base_lr * (config.total_steps - step) / span


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def buffers(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def optimizer_step(named_params, moments: AdamState, step: int,
                   config: TrainConfig) -> None:
    """One bias-corrected Adam update at `step` (1-based) over (name, Tensor)s."""
    lr = lr_at(step, config)
    bc1 = 1.0 - config.beta1 ** step
    bc2 = 1.0 - config.beta2 ** step
    decay_scale = lr / config.base_lr if config.adamc_correction else 1.0
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter {name!r}")
        if config.grad_clip > 0.0:
            norm = float(np.linalg.norm(g))
            if norm > config.grad_clip:
                g = g * (config.grad_clip / norm)
        m, v = moments.buffers(name, p.data)
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        if config.weight_decay > 0.0 and (config.decay_scalars
                                          or is_decay_param(name)):
            update = update + config.weight_decay * decay_scale * p.data
        p.data = p.data - lr * update.astype(p.data.dtype)


def sample_batch(docs: list[np.ndarray], step: int, config: TrainConfig) -> np.ndarray:
    """Deterministic batch for a step: windows of ctx_len from random docs."""
    if not docs:
        raise ValueError("empty document set")
    rng = np.random.default_rng([config.seed, step])
    per_step = max(1, config.batch_tokens // config.ctx_len)
    rows = []
    for _ in range(per_step):
        doc = docs[int(rng.integers(0, len(docs)))]
        if len(doc) < config.ctx_len:
            doc = np.tile(doc, -(-config.ctx_len // len(doc)))
        off = int(rng.integers(0, len(doc) - config.ctx_len + 1))
        rows.append(doc[off:off + config.ctx_len])
    return np.stack(rows)


def train(params: GptAlphaParams, model_config: GptAlphaConfig,
          config: TrainConfig, docs: list[np.ndarray],
          out_dir: str | Path | None = None,
          start_step: int = 0, moments: AdamState | None = None,
          stop_step: int | None = None, quiet: bool = True) -> list[dict]:
    """Run (or resume) training; returns the per-step metrics rows.

    Metrics go to out_dir/metrics.csv (append-only); checkpoints embed the
    optimizer moments and step so a resumed run continues bit-identically.
    stop_step halts early (same schedule) for resumption tests.
    """
    config.validate()
    model_config.validate()
    moments = moments or AdamState()
    last_step = min(config.total_steps, stop_step or config.total_steps)
    named = list(params.named_parameters())
    out_path = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_path = out_path / "metrics.csv"
        new_file = not csv_path.exists()
        csv_file = open(csv_path, "a", newline="")
        writer = csv.writer(csv_file)
        if new_file:
            writer.writerow(["step", "lr", "loss", "tokens", "wall_ms"])

    metrics = []
    tokens_seen = start_step * config.batch_tokens
    try:
        for step in range(start_step + 1, last_step + 1):
            t0 = time.perf_counter()
            batch = sample_batch(docs, step, config)
            tt.zero_grad([p for _, p in named])
            with Tape() as tape:
                loss = sequence_loss(params, batch, model_config)
            tt.backward(loss, tape)
            optimizer_step(named, moments, step, config)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            tokens_seen += batch.size
            row = {"step": step, "lr": lr_at(step, config),
                   "loss": loss.item(), "tokens": tokens_seen,
                   "wall_ms": wall_ms}
            metrics.append(row)
            if writer is not None and step % config.log_every == 0:
                writer.writerow([row["step"], f"{row['lr']:.8g}",
                                 f"{row['loss']:.8g}", row["tokens"],
                                 f"{row['wall_ms']:.1f}"])
                csv_file.flush()
            if not quiet and step % 20 == 0:
                print(f"step {step} loss {row['loss']:.4f} lr {row['lr']:.2e}")
            if (out_path is not None and config.checkpoint_every > 0
                    and step % config.checkpoint_every == 0):
                _save_training_checkpoint(out_path / f"checkpoint_{step}.kvmc",
                                          params, model_config, moments, step,
                                          config)
    finally:
        if csv_file is not None:
            csv_file.close()
    if out_path is not None:
        _save_training_checkpoint(out_path / "checkpoint_final.kvmc", params,
                                  model_config, moments,
                                  metrics[-1]["step"] if metrics else start_step,
                                  config)
    return metrics


def _save_training_checkpoint(path, params, model_config, moments: AdamState,
                              step: int, config: TrainConfig) -> None:
    extra = {f"adam.m.{k}": v for k, v in moments.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in moments.v.items()})
    extra["trainer.step"] = np.array([float(step)])
    save_model(path, params, model_config, extra=extra)
    state_path = Path(path).with_suffix(".train.json")
    state_path.write_text(json.dumps({"step": step,
                                      "train_config": vars(config)}, indent=2))


def load_training_checkpoint(path):
    """Returns (params, model_config, moments, step) for resuming."""
    from .serialize import load_model
    params, model_config, extras = load_model(path)
    moments = AdamState()
    step = 0
    for name, arr in extras.items():
        if name.startswith("adam.m."):
            moments.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            moments.v[name[len("adam.v."):]] = arr.copy()
        elif name == "trainer.step":
            step = int(arr[0])
    return params, model_config, moments, step


# ---------------------------------------------------------------------------
# Gradient verification

def grad_check(loss_fn, named_params, samples_per_tensor: int = 4,
               h: float = 1e-5, seed: int = 0) -> list[dict]:
    """Analytic vs central finite-difference gradients, subsampled per tensor.

    loss_fn() must rebuild the forward pass from the current parameter
    values. Returns one row per tensor with the worst relative error;
    parameters the loss never touches report zero/zero agreement.
    """
    named_params = list(named_params)
    tt.zero_grad([p for _, p in named_params])
    with Tape() as tape:
        loss = loss_fn()
    tt.backward(loss, tape)
    rng = np.random.default_rng(seed)
    report = []
    for name, p in named_params:
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None
                else np.zeros_like(p.data)).reshape(-1)
        worst = 0.0
        worst_pair = (0.0, 0.0)
        count = min(samples_per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_fn().item()
            flat[idx] = orig - h
            fm = loss_fn().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad[idx])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            err = abs(numeric - analytic) / denom
            if err > worst:
                worst = err
                worst_pair = (analytic, numeric)
        report.append({"name": name, "worst_rel_err": worst,
                       "analytic": worst_pair[0], "numeric": worst_pair[1]})
    return report
