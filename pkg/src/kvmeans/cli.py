"""Command-line entry point.

Commands: train, eval, check, schedule-sim, profile. All read one JSON
config document; precedence is CLI flag > config file > built-in default.
The fully resolved config is written next to the outputs so a run can be
reproduced from it. Exit codes: 0 success, 1 check failure, 2 config error.

KVMEANS_NUM_THREADS limits BLAS threads (set before numpy loads).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import kvm as K
from . import simulate as sim
from .checks import run_checks
from .model import GptAlphaConfig, init_params, model_forward
from .serialize import kvm_config_from_dict, load_model, model_config_to_json
from .tensor import Tensor, no_grad
from .train import TrainConfig, train


class ConfigError(ValueError):
    """Invalid configuration document; exits with status 2."""


# ---------------------------------------------------------------------------
# Config schema, defaults, presets

DEFAULTS = {
    "preset": "",
    "seed": 0,
    "out_dir": "runs/out",
    "model": {
        "d": 128, "n_heads": 4, "n_layers": 3, "vocab_size": D.VOCAB_SIZE,
        "rotary_width": 16, "layer_modes": ["kvm", "kvm", "kvm"],
        "d_ff": 0, "tie_embeddings": False, "dtype": "float32",
    },
    "kvm": {
        "chunk_len": 32, "n_bswa_chunks": 2, "rotary_width": 16,
        "sink_count": 1, "eps_norm": 1e-6,
        "schedule": {"kind": "power_law", "size": 0, "coefficient": 8.0,
                     "exponent": 0.5, "cap": 0},
        "ablations": {"sink_protection": True, "head_temperatures": True,
                      "value_length_norm": True, "merge_gate": True},
    },
    "train": {
        "total_steps": 400, "warmup_steps": 80, "base_lr": 2e-3,
        "weight_decay": 0.2, "beta1": 0.9, "beta2": 0.95, "adam_eps": 1e-8,
        "batch_tokens": 4096, "ctx_len": 512, "decay_scalars": False,
        "adamc_correction": True, "grad_clip": 0.0, "checkpoint_every": 0,
        "log_every": 1,
    },
    "task": {
        "kind": "structured-kv", "n_docs": 512, "doc_len": 512,
        "query_prob": 0.65, "filler_range": [2, 8], "key_len": 2, "val_len": 2,
        "eval": {
            "context_len": 512, "depths": [0.05, 0.25, 0.5, 1.0],
            "n_samples": 50, "distractor": "novel-text",
            "block_size": 64, "eval_doc_len": 4096, "n_eval_docs": 8,
        },
    },
    "sim": {
        "schedules": ["fixed", "sqrt", "unbounded"],
        "seq_lens": sim.DEFAULT_SEQ_LENS, "chunk_len": 32, "n_bswa_chunks": 2,
    },
    "profile": {"seq_lens": [256, 512, 1024, 2048], "decode_tokens": 64},
}

PRESETS = {
    "kvm-fixed": {
        "model": {"layer_modes": ["kvm", "kvm", "kvm"]},
        "kvm": {"schedule": {"kind": "fixed", "size": 32, "coefficient": 0.0}},
    },
    "kvm-sqrt": {
        "model": {"layer_modes": ["kvm", "kvm", "kvm"]},
        "kvm": {"schedule": {"kind": "power_law", "coefficient": 8.0,
                             "exponent": 0.5}},
    },
    "bswa": {
        "model": {"layer_modes": ["bswa", "bswa", "bswa"]},
        "kvm": {"schedule": {"kind": "fixed", "size": 32}},
    },
    "full": {
        "model": {"layer_modes": ["full", "full", "full"]},
        "kvm": {"schedule": {"kind": "fixed", "size": 32}},
    },
    "hybrid": {
        "model": {"layer_modes": ["kvm", "bswa", "kvm"]},
        "kvm": {"schedule": {"kind": "saturating", "cap": 128,
                             "coefficient": 8.0, "exponent": 0.5}},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive override with unknown-field and type errors."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where)
        else:
            if isinstance(base[key], bool) != isinstance(value, bool):
                raise ConfigError(f"{where}: expected {type(base[key]).__name__}")
            if isinstance(base[key], (int, float)) and not isinstance(
                    value, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            if isinstance(base[key], str) and not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string")
            if isinstance(base[key], list) and not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            out[key] = value
    return out


def resolve_config(config_path: str | None, preset: str | None = None,
                   seed: int | None = None, out_dir: str | None = None) -> dict:
    """defaults <- preset <- file <- CLI flags, with validation."""
    from_file: dict = {}
    if config_path:
        try:
            from_file = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"{config_path}: line {err.lineno} column "
                              f"{err.colno}: {err.msg}")
        if not isinstance(from_file, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
    preset_name = preset or from_file.get("preset", "") or ""
    resolved = DEFAULTS
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset_name!r}; "
                              f"available: {sorted(PRESETS)}")
        resolved = _merge(resolved, PRESETS[preset_name])
        resolved["preset"] = preset_name
    resolved = _merge(resolved, from_file)
    if preset:
        resolved["preset"] = preset
    if seed is not None:
        resolved["seed"] = seed
    if out_dir is not None:
        resolved["out_dir"] = out_dir
    return resolved


def build_model_config(cfg: dict) -> GptAlphaConfig:
    kvm_cfg = kvm_config_from_dict(cfg["kvm"])
    m = cfg["model"]
    model_cfg = GptAlphaConfig(
        d=m["d"], n_heads=m["n_heads"], n_layers=m["n_layers"],
        vocab_size=m["vocab_size"], rotary_width=m["rotary_width"],
        layer_modes=tuple(m["layer_modes"]), kvm=kvm_cfg, d_ff=m["d_ff"],
        tie_embeddings=m["tie_embeddings"], dtype=m["dtype"])
    try:
        model_cfg.validate()
    except ValueError as err:
        raise ConfigError(str(err))
    return model_cfg


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    tc = TrainConfig(seed=cfg["seed"], **{k: t[k] for k in (
        "total_steps", "warmup_steps", "base_lr", "weight_decay", "beta1",
        "beta2", "adam_eps", "batch_tokens", "ctx_len", "decay_scalars",
        "adamc_correction", "grad_clip", "checkpoint_every", "log_every")})
    try:
        tc.validate()
    except ValueError as err:
        raise ConfigError(str(err))
    return tc


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def build_corpus(cfg: dict, seed_offset: int = 0, n_docs: int | None = None,
                 doc_len: int | None = None):
    task = cfg["task"]
    return D.gen_corpus(
        seed=cfg["seed"] + seed_offset,
        n_docs=n_docs if n_docs is not None else task["n_docs"],
        min_len=doc_len if doc_len is not None else task["doc_len"],
        kind=task["kind"], query_prob=task["query_prob"],
        filler_range=tuple(task["filler_range"]),
        key_len=task["key_len"], val_len=task["val_len"])


# ---------------------------------------------------------------------------
# Commands

def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _write_resolved(cfg, out_dir)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    docs = [d.ids for d in build_corpus(cfg)]
    params = init_params(model_cfg, seed=cfg["seed"])
    t0 = time.time()
    metrics = train(params, model_cfg, train_cfg, docs, out_dir=out_dir,
                    quiet=False)
    final = np.mean([m["loss"] for m in metrics[-10:]])
    print(f"trained {train_cfg.total_steps} steps in {(time.time() - t0) / 60:.1f} "
          f"min; final loss {final:.4f} nats/byte")
    print(f"checkpoint: {out_dir / 'checkpoint_final.kvmc'}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str, task_name: str) -> int:
    out_dir = Path(cfg["out_dir"])
    _write_resolved(cfg, out_dir)
    params, model_cfg, _ = load_model(checkpoint)
    if cfg["model"]["vocab_size"] != model_cfg.vocab_size:
        raise ConfigError(f"checkpoint vocab {model_cfg.vocab_size} does not "
                          f"match config vocab {cfg['model']['vocab_size']}")
    ev = cfg["task"]["eval"]
    if task_name == "niah":
        rows = []
        for depth in ev["depths"]:
            samples = [D.gen_niah(seed=cfg["seed"] * 10_000 + i,
                                  context_len=ev["context_len"], depth=depth,
                                  distractor_kind=ev["distractor"],
                                  key_len=cfg["task"]["key_len"],
                                  val_len=cfg["task"]["val_len"])
                       for i in range(ev["n_samples"])]
            acc = D.eval_niah(params, model_cfg, samples)
            rows.append((depth, ev["distractor"], len(samples), acc))
            print(f"niah depth={depth:.2f}: accuracy {acc:.3f}")
        path = out_dir / "niah.csv"
        with open(path, "w") as f:
            f.write("depth,distractor,n_samples,accuracy\n")
            for row in rows:
                f.write(f"{row[0]},{row[1]},{row[2]},{row[3]:.6f}\n")
        print(f"wrote {path}")
        return 0
    if task_name == "loss-by-position":
        docs = build_corpus(cfg, seed_offset=1_000_003,
                            n_docs=ev["n_eval_docs"], doc_len=ev["eval_doc_len"])
        starts, means, counts = D.eval_loss_by_position(
            params, model_cfg, [d.ids for d in docs], ev["block_size"])
        path = out_dir / "loss_by_position.csv"
        with open(path, "w") as f:
            f.write("block_start,mean_loss,count\n")
            for s, m, c in zip(starts, means, counts):
                f.write(f"{s},{m:.6f},{int(c)}\n")
        print(f"wrote {path} ({len(starts)} blocks)")
        return 0
    raise ConfigError(f"unknown eval task {task_name!r}; expected niah or "
                      "loss-by-position")


def cmd_check(level: str) -> int:
    if level not in ("fast", "full"):
        raise ConfigError(f"unknown check level {level!r}")
    reports = run_checks(level)
    failed = [r for r in reports if not r.passed]
    print(f"\n{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_schedule_sim(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _write_resolved(cfg, out_dir)
    s = cfg["sim"]
    rows_path = out_dir / "schedule_sim.csv"
    fits_path = out_dir / "schedule_sim_fits.csv"
    with open(rows_path, "w") as rf, open(fits_path, "w") as ff:
        rf.write("schedule,seq_len,state_rows,prefill_cost,decode_cost\n")
        ff.write("schedule,state_slope,prefill_slope,decode_slope\n")
        for name in s["schedules"]:
            sched = sim.schedule_by_name(name, s["chunk_len"])
            rows = sim.simulate_schedule(sched, s["chunk_len"],
                                         s["n_bswa_chunks"], s["seq_lens"])
            for r in rows:
                rf.write(f"{name},{r.seq_len},{r.state_rows},"
                         f"{r.prefill_cost},{r.decode_cost}\n")
            exps = sim.fitted_exponents(rows)
            ff.write(f"{name},{exps['state']:.4f},{exps['prefill']:.4f},"
                     f"{exps['decode']:.4f}\n")
            print(f"{name:11s} state slope {exps['state']:+.3f}  prefill slope "
                  f"{exps['prefill']:+.3f}  decode slope {exps['decode']:+.3f}")
    print(f"wrote {rows_path} and {fits_path}")
    return 0


def cmd_profile(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _write_resolved(cfg, out_dir)
    kvm_cfg = kvm_config_from_dict(cfg["kvm"])
    n_heads = cfg["model"]["n_heads"]
    d_h = cfg["model"]["d"] // n_heads
    d = cfg["model"]["d"]
    params = K.KvmLayerParams.init(d, n_heads, d_h)
    rows = []
    for seq_len in cfg["profile"]["seq_lens"]:
        rng = np.random.default_rng(cfg["seed"])
        q, k, v = (Tensor(rng.standard_normal((n_heads, seq_len, d_h)))
                   for _ in range(3))
        x = Tensor(rng.standard_normal((seq_len, d)))
        t0 = time.perf_counter()
        with no_grad():
            _, state = K.kvm_forward(q, k, v, x, kvm_cfg, params)
        prefill_ms = (time.perf_counter() - t0) * 1000
        measured_m = state.m if state is not None else 0
        sim_row = sim.simulate_sequence(kvm_cfg.schedule, kvm_cfg.chunk_len,
                                        kvm_cfg.n_bswa_chunks, seq_len)
        n_decode = cfg["profile"]["decode_tokens"]
        buf = K.DecodeBuffers()
        with no_grad():
            for t in range(min(seq_len, kvm_cfg.window + kvm_cfg.chunk_len)):
                _, buf = K.decode_step(Tensor(q.data[:, t:t + 1]),
                                       Tensor(k.data[:, t:t + 1]),
                                       Tensor(v.data[:, t:t + 1]),
                                       Tensor(x.data[t:t + 1]), buf, kvm_cfg,
                                       params)
        buf.state = state
        buf.pos = (seq_len // kvm_cfg.chunk_len) * kvm_cfg.chunk_len
        rng2 = np.random.default_rng(1)
        t0 = time.perf_counter()
        with no_grad():
            for t in range(n_decode):
                _, buf = K.decode_step(
                    Tensor(rng2.standard_normal((n_heads, 1, d_h))),
                    Tensor(rng2.standard_normal((n_heads, 1, d_h))),
                    Tensor(rng2.standard_normal((n_heads, 1, d_h))),
                    Tensor(rng2.standard_normal((1, d))), buf, kvm_cfg, params)
        decode_ms = (time.perf_counter() - t0) * 1000 / n_decode
        match = measured_m == sim_row.state_rows
        rows.append((seq_len, prefill_ms, decode_ms, measured_m,
                     sim_row.state_rows, match))
        print(f"T={seq_len:6d} prefill {prefill_ms:8.1f} ms  decode "
              f"{decode_ms:6.2f} ms/token  state rows {measured_m} "
              f"(sim {sim_row.state_rows}, {'ok' if match else 'MISMATCH'})")
    path = out_dir / "profile.csv"
    with open(path, "w") as f:
        f.write("seq_len,prefill_ms,decode_ms_per_token,state_rows,"
                "sim_state_rows,match\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]:.3f},{r[2]:.4f},{r[3]},{r[4]},{int(r[5])}\n")
    print(f"wrote {path}")
    return 0 if all(r[5] for r in rows) else 1


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvmeans",
        description="Train and evaluate compressive-state sliding-window "
                    "attention models at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="train a model from a preset/config")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="architecture family preset")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True,
                   choices=("niah", "loss-by-position"))

    p = sub.add_parser("check", help="run correctness checks")
    common(p)
    p.add_argument("--level", default="fast", choices=("fast", "full"))

    p = sub.add_parser("schedule-sim",
                       help="simulate state/compute scaling of schedules")
    common(p)

    p = sub.add_parser("profile", help="measure real forward/decode cost")
    common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "check":
            return cmd_check(args.level)
        cfg = resolve_config(args.config, getattr(args, "preset", None),
                             args.seed, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.task)
        if args.command == "schedule-sim":
            return cmd_schedule_sim(cfg)
        if args.command == "profile":
            return cmd_profile(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
