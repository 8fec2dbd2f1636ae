"""Render figures and comparison tables from ledger CSV files.

Everything here is downstream of the per-round CSV ledgers: figures are
rendered to PNG files next to a delimited summary, never computed live.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import read_csv


def _acc_column(rows: list[dict]) -> str:
    # local baseline has no global model; fall back to the personalized column
    vals = [r["global_acc"] for r in rows]
    if all(v != v for v in vals):  # all NaN
        return "mean_personalized_acc"
    return "global_acc"


def rounds_to_target(rows: list[dict], target: float, column: str) -> int | None:
    """First round whose accuracy column reaches the target; None if never."""
    for r in rows:
        if r[column] >= target:
            return r["round"]
    return None


def compare_ledgers(paths: list[str], targets: list[float],
                    column: str = "mean_personalized_acc") -> list[dict]:
    if len(paths) < 2:
        raise ValueError("need at least two ledgers to compare")
    out = []
    expected_cols = None
    for path in paths:
        rows = read_csv(path)
        if not rows:
            raise ValueError(f"{path}: empty ledger")
        cols = set(rows[0])
        if expected_cols is None:
            expected_cols = cols
        elif cols != expected_cols:
            raise ValueError(f"{path}: ledger columns incompatible with the first ledger")
        total_rounds = rows[-1]["round"] + 1
        entry = {
            "ledger": os.path.basename(path),
            "rounds": total_rounds,
            "final_acc": rows[-1][column],
            "total_bytes": sum(r["bytes_up"] + r["bytes_down"] for r in rows),
            "total_flops": sum(r["flops_train"] + r["flops_masksearch"] for r in rows),
        }
        for tgt in targets:
            hit = rounds_to_target(rows, tgt, column)
            entry[f"rounds_to_{tgt}"] = hit if hit is not None else f">{total_rounds}"
        out.append(entry)
    return out


def write_comparison(table: list[dict], csv_path, text_stream=None):
    cols = list(table[0].keys())
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(table)
    if text_stream is not None:
        widths = {c: max(len(c), *(len(str(r[c])) for r in table)) for c in cols}
        header = "  ".join(c.ljust(widths[c]) for c in cols)
        text_stream.write(header + "\n")
        text_stream.write("-" * len(header) + "\n")
        for r in table:
            text_stream.write("  ".join(str(r[c]).ljust(widths[c]) for c in cols) + "\n")


def render_report(ledger_paths: list[str], out_dir, labels: list[str] | None = None):
    """Accuracy/communication/churn figures for one or more runs."""
    os.makedirs(out_dir, exist_ok=True)
    runs = [(lbl or os.path.basename(p), read_csv(p))
            for p, lbl in zip(ledger_paths,
                              labels or [None] * len(ledger_paths))]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in runs:
        col = _acc_column(rows)
        ax.plot([r["round"] for r in rows], [r[col] for r in rows], label=label)
    ax.set_xlabel("communication round")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "accuracy_vs_round.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in runs:
        col = _acc_column(rows)
        cum = 0
        xs, ys = [], []
        for r in rows:
            cum += r["bytes_up"] + r["bytes_down"]
            xs.append(cum / 1e6)
            ys.append(r[col])
        ax.plot(xs, ys, label=label)
    ax.set_xlabel("cumulative communication (MB)")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "accuracy_vs_comm.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    if any(any(r["mask_churn_total"] for r in rows) for _, rows in runs):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in runs:
            ax.plot([r["round"] for r in rows],
                    [r["mask_churn_total"] for r in rows], label=label)
        ax.set_xlabel("communication round")
        ax.set_ylabel("changed mask bits")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "mask_churn.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    summary_path = os.path.join(out_dir, "report_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "rounds", "final_accuracy", "total_mb"])
        for label, rows in runs:
            col = _acc_column(rows)
            total = sum(r["bytes_up"] + r["bytes_down"] for r in rows)
            writer.writerow([label, rows[-1]["round"] + 1, rows[-1][col], total / 1e6])
    written.append(summary_path)
    return written
