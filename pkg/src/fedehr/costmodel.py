"""Host cost-savings model for subject selection.

Symbols: N candidate clients and K selected participants (both counting the
host), data usage fee X per hospital, R communication rounds of L local
epochs, E local-training epochs for the selection model, and per-action
costs C_train, C_model, C_extract, C_average, C_embedding, C_sim. Units are
abstract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class CostLedger:
    N: int
    K: int
    R: int
    L: int
    E: int
    X: float
    C_train: float
    C_model: float
    C_extract: float
    C_average: float
    C_embedding: float
    C_sim: float

    def __post_init__(self):
        if not (1 <= self.K <= self.N):
            raise ValueError("need 1 <= K <= N")
        if min(self.R, self.L, self.E) < 1:
            raise ValueError("R, L and E must be positive integers")
        costs = (self.X, self.C_train, self.C_model, self.C_extract,
                 self.C_average, self.C_embedding, self.C_sim)
        if any(not math.isfinite(c) or c < 0 for c in costs):
            raise ValueError("costs must be finite and non-negative")


def selection_cost(c: CostLedger) -> float:
    """One local training run plus per-client transmission/inference costs."""
    return (c.E * c.C_train
            + c.N * (c.C_model + c.C_extract + c.C_average + c.C_embedding + c.C_sim))


def data_usage_savings(c: CostLedger) -> float:
    """Usage fees avoided for the N - K unselected clients."""
    return (c.N - c.K) * c.X


def compute_savings(c: CostLedger) -> float:
    """Avoided local-training plus two-way weight-transmission costs."""
    return (c.N - c.K) * c.R * (c.L * c.C_train + 2.0 * c.C_model)


def total_net_savings(c: CostLedger) -> float:
    """Closed form; identical to
    data_usage_savings + compute_savings - selection_cost."""
    return ((c.N - c.K) * c.X
            + ((c.N - c.K) * c.R * c.L - c.E) * c.C_train
            + (2.0 * (c.N - c.K) * c.R - c.N) * c.C_model
            - c.N * (c.C_extract + c.C_average + c.C_embedding + c.C_sim))


def cost_report(c: CostLedger) -> dict:
    return {
        "selection_cost": selection_cost(c),
        "data_usage_savings": data_usage_savings(c),
        "compute_savings": compute_savings(c),
        "total_net_savings": total_net_savings(c),
    }


def load_ledger(path: str | Path) -> CostLedger:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return CostLedger(
            N=int(raw["N"]), K=int(raw["K"]), R=int(raw["R"]), L=int(raw["L"]),
            E=int(raw["E"]), X=float(raw["X"]), C_train=float(raw["C_train"]),
            C_model=float(raw["C_model"]), C_extract=float(raw["C_extract"]),
            C_average=float(raw["C_average"]), C_embedding=float(raw["C_embedding"]),
            C_sim=float(raw["C_sim"]),
        )
    except KeyError as exc:
        raise ValueError(f"ledger file is missing symbol {exc}") from exc
