"""Communication/FLOP accounting, evaluation, mask churn, and ledger export.

The headline byte counters cover transmitted weight values only (4 bytes per
value); mask bits and dense bias values are tracked in their own columns so
the sparse/dense headline ratio stays exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .masks import Mask
from .model import Batch, ModelParams, forward

BYTES_PER_VALUE = 4  # f32 wire format

CSV_COLUMNS = [
    "round", "bytes_up", "bytes_down", "bias_bytes", "mask_overhead_bytes",
    "flops_train", "flops_masksearch", "train_loss",
    "mean_personalized_acc", "global_acc", "mask_churn_total", "p_proxy_max",
]


@dataclass
class RoundLedger:
    round: int
    bytes_up: int = 0
    bytes_down: int = 0
    bias_bytes: int = 0
    mask_overhead_bytes: int = 0
    flops_train: int = 0
    flops_masksearch: int = 0
    train_loss: float = math.nan
    mean_personalized_acc: float = math.nan
    global_acc: float = math.nan
    mask_churn_total: int = 0
    p_proxy_max: float = math.nan
    # per-client detail, JSONL only
    mask_churn: dict = field(default_factory=dict)
    p_proxy: dict = field(default_factory=dict)
    personalized_acc: list = field(default_factory=list)

    def csv_row(self):
        d = asdict(self)
        return [d[c] for c in CSV_COLUMNS]


def comm_bytes(active_values: int, participants: int = 1) -> int:
    """Headline bytes for one direction: transmitted weight values only."""
    return BYTES_PER_VALUE * int(active_values) * participants


def mask_overhead_bytes(total_params: int, participants: int = 1) -> int:
    return ((total_params + 7) // 8) * participants


def evaluate_model(params: ModelParams, mask: Mask, features, labels) -> float:
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    _, _, correct = forward(params, mask, Batch(features, labels))
    return correct / len(labels)


def evaluate_personalized(global_params: ModelParams, client_masks, test_features,
                          test_labels, client_test) -> tuple[list[float], float]:
    """Each client's masked global model on its own test list; unweighted mean."""
    accs = []
    for mask, idx in zip(client_masks, client_test):
        if len(idx) == 0:
            raise ValueError("client has an empty test list")
        accs.append(evaluate_model(global_params, mask, test_features[idx], test_labels[idx]))
    return accs, float(np.mean(accs))


def evaluate_global(global_params: ModelParams, test_features, test_labels) -> float:
    """Unmasked global model on the pooled test set."""
    return evaluate_model(global_params, Mask.all_ones(global_params.layout),
                          test_features, test_labels)


def p_proxy(mask: Mask, grad_traj: np.ndarray, grad_sync: np.ndarray,
            tol: float = 1e-12) -> float | None:
    """||m * (ga - gb)||^2 / ||ga - gb||^2; None when the gradients coincide."""
    diff = np.asarray(grad_traj) - np.asarray(grad_sync)
    den = float(diff @ diff)
    if den <= tol:
        return None
    masked = diff[mask.bits]
    return float(masked @ masked) / den


def mask_churn(prev: Mask, nxt: Mask) -> int:
    """Hamming distance between two masks over the same layout."""
    if prev.layout is not nxt.layout and prev.layout != nxt.layout:
        raise ValueError("mask layouts differ")
    return int(np.count_nonzero(prev.bits != nxt.bits))


def write_csv(path, ledgers: list[RoundLedger]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for led in ledgers:
            writer.writerow(led.csv_row())


def write_jsonl(path, ledgers: list[RoundLedger]):
    with open(path, "w") as fh:
        for led in ledgers:
            fh.write(json.dumps(asdict(led)) + "\n")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for key, val in raw.items():
                if key == "round" or key.startswith(("bytes", "bias", "mask", "flops")):
                    row[key] = int(val)
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows
