#!/usr/bin/env python3
"""Plot CSVs produced by the kvmeans CLI.

Usage:
    python scripts/plot_results.py loss-by-position out.png run1/loss_by_position.csv [run2/... ...]
    python scripts/plot_results.py niah out.png run1/niah.csv [run2/niah.csv ...]
    python scripts/plot_results.py schedule-sim out.png runs/sim/schedule_sim.csv

Each input curve is labeled by its parent directory name.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def plot_loss_by_position(out, paths):
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in paths:
        rows = read_rows(path)
        ax.plot([int(r["block_start"]) for r in rows],
                [float(r["mean_loss"]) for r in rows],
                label=Path(path).parent.name)
    ax.set_xlabel("block start (tokens)")
    ax.set_ylabel("mean loss (nats/byte)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_niah(out, paths):
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in paths:
        rows = read_rows(path)
        ax.plot([float(r["depth"]) for r in rows],
                [float(r["accuracy"]) for r in rows], marker="o",
                label=Path(path).parent.name)
    ax.set_xlabel("needle depth (fraction of context)")
    ax.set_ylabel("recall accuracy")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_schedule_sim(out, paths):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    series = defaultdict(list)
    for path in paths:
        for r in read_rows(path):
            series[r["schedule"]].append(r)
    for name, rows in series.items():
        ns = [int(r["seq_len"]) for r in rows]
        axes[0].loglog(ns, [max(1, int(r["state_rows"])) for r in rows],
                       marker="o", label=name)
        axes[1].loglog(ns, [int(r["prefill_cost"]) for r in rows],
                       marker="o", label=name)
    axes[0].set_title("state rows")
    axes[1].set_title("prefill cost")
    for ax in axes:
        ax.set_xlabel("sequence length")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main(argv):
    if len(argv) < 4:
        print(__doc__)
        return 2
    kind, out, paths = argv[1], argv[2], argv[3:]
    if kind == "loss-by-position":
        plot_loss_by_position(out, paths)
    elif kind == "niah":
        plot_niah(out, paths)
    elif kind == "schedule-sim":
        plot_schedule_sim(out, paths)
    else:
        print(f"unknown plot kind {kind!r}")
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
