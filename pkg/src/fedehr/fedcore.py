"""Federated training rounds with host-centric early stopping.

Four aggregation behaviours: FedAvg (weighted parameter mean), FedProx
(FedAvg + proximal local objective), FedBN (norm-tagged tensors stay local,
dense tensors averaged), FedPxN (proximal objective + FedBN aggregation).
The host's validation macro AUROC drives early stopping and best-round
checkpoint selection; for the FedBN family the host model is the host's
personalized parameters.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedehr import metrics
from fedehr.linearize import linearize_patient
from fedehr.model import (
    LocalTrainResult,
    ModelConfig,
    OptimizerConfig,
    PackedSplit,
    ProxTerm,
    derive_seed,
    init_params,
    pack_patients,
    score_split,
    train_local,
)
from fedehr.params import ParamSet
from fedehr.synthdata import ClientDataset
from fedehr.vocab import Vocabulary, build_vocab

ALGORITHMS = ("fedavg", "fedprox", "fedbn", "fedpxn")
PROX_FAMILY = frozenset({"fedprox", "fedpxn"})
BN_FAMILY = frozenset({"fedbn", "fedpxn"})


@dataclass
class FLRunConfig:
    algorithm: str
    host: str
    participants: list[str]
    max_rounds: int = 300
    local_epochs: int = 1
    patience: int = 10
    mu: float = 0.01
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.host not in self.participants:
            raise ValueError("the host must be one of the participants")
        if len(set(self.participants)) != len(self.participants):
            raise ValueError("duplicate participant ids")
        if self.max_rounds < 1 or self.patience < 1 or self.local_epochs < 1:
            raise ValueError("max_rounds, patience and local_epochs must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


@dataclass
class RoundLog:
    round: int
    client_losses: dict[str, float]
    host_val_macro_auroc: float
    wall_time: float
    checksum: str

    def to_json(self) -> str:
        # wall time is excluded: the JSONL log is part of the reproducible
        # run record and must be identical across reruns
        return json.dumps({
            "round": self.round,
            "client_losses": self.client_losses,
            "host_val_macro_auroc": self.host_val_macro_auroc,
            "checksum": self.checksum,
        }, sort_keys=True)


@dataclass
class FederationResult:
    best_round: int
    best_host_params: ParamSet
    best_params: ParamSet | dict[str, ParamSet]
    logs: list[RoundLog]
    vocab: Vocabulary


@dataclass
class PreparedRun:
    vocab: Vocabulary
    train: dict[str, PackedSplit]
    valid: dict[str, PackedSplit]
    test: dict[str, PackedSplit]


def aggregate_fedavg(client_params: list[ParamSet], weights) -> ParamSet:
    """Element-wise weighted mean; weights are normalized to sum one."""
    if not client_params:
        raise ValueError("nothing to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(client_params),) or (weights < 0).any():
        raise ValueError("need one non-negative weight per client")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    weights = weights / total
    first = client_params[0]
    for other in client_params[1:]:
        if not first.same_structure(other):
            raise ValueError("client parameter sets differ in structure")
    out = first.zeros_like()
    for w, ps in zip(weights, client_params):
        for name in out.names():
            out.tensors[name] += w * ps[name]
    return out


def aggregate_fedbn(client_params: list[ParamSet], weights) -> list[ParamSet]:
    """Dense tensors replaced by the FedAvg mean; norm tensors stay local."""
    mean = aggregate_fedavg(client_params, weights)
    out = []
    for ps in client_params:
        merged = ps.copy()
        for name, tag in ps.tags.items():
            if tag == "dense":
                merged[name] = mean[name].copy()
        out.append(merged)
    return out


def prepare_run(clients: dict[str, ClientDataset], host: str,
                model_cfg: ModelConfig) -> PreparedRun:
    """Build the shared vocabulary (from the host's training corpus) and
    tokenize every participant's splits with it."""
    host_ds = clients[host]
    corpus = [line.text
              for p in host_ds.split_patients("train")
              for line in linearize_patient(p, host_ds.dictionary)]
    vocab = build_vocab(corpus, model_cfg.vocab_size)
    packs: dict[str, dict[str, PackedSplit]] = {"train": {}, "valid": {}, "test": {}}
    for cid, ds in clients.items():
        for split in ("train", "valid", "test"):
            packs[split][cid] = pack_patients(ds.split_patients(split),
                                              ds.dictionary, vocab, model_cfg)
    return PreparedRun(vocab, packs["train"], packs["valid"], packs["test"])


def evaluate_params(params: ParamSet, model_cfg: ModelConfig,
                    split: PackedSplit) -> metrics.EvalResult:
    scores = score_split(params, model_cfg, split)
    return metrics.eval_result(scores, split.labels)


def _state_checksum(state) -> str:
    if isinstance(state, ParamSet):
        return state.checksum()
    import hashlib
    h = hashlib.blake2s(digest_size=16)
    for cid in sorted(state):
        h.update(cid.encode())
        h.update(state[cid].checksum().encode())
    return h.hexdigest()


def run_federation(cfg: FLRunConfig, clients: list[ClientDataset],
                   parallel: int | None = None,
                   prepared: PreparedRun | None = None,
                   log_path: str | Path | None = None) -> FederationResult:
    """Run up to cfg.max_rounds communication rounds and return the
    checkpoint with the best host validation macro AUROC."""
    cfg.validate()
    by_id = {ds.client_id: ds for ds in clients}
    missing = [cid for cid in cfg.participants if cid not in by_id]
    if missing:
        raise ValueError(f"datasets missing for participants: {missing}")
    if prepared is None:
        prepared = prepare_run({cid: by_id[cid] for cid in cfg.participants},
                               cfg.host, cfg.model)

    order = sorted(cfg.participants)
    train_sizes = {cid: len(prepared.train[cid]) for cid in order}
    params = init_params(cfg.model, len(prepared.vocab), derive_seed(cfg.seed, "init"))
    bn_mode = cfg.algorithm in BN_FAMILY
    per_client = {cid: params.copy() for cid in order} if bn_mode else None

    def run_client(round_index: int, cid: str) -> LocalTrainResult:
        start = per_client[cid] if bn_mode else params
        prox = ProxTerm(cfg.mu, start) if cfg.algorithm in PROX_FAMILY else None
        return train_local(start, cfg.model, prepared.train[cid],
                           cfg.local_epochs, cfg.optimizer, prox,
                           seed=derive_seed(cfg.seed, "round", round_index, cid))

    logs: list[RoundLog] = []
    best_metric = -np.inf
    best_round = 0
    best_host: ParamSet | None = None
    best_state: ParamSet | dict[str, ParamSet] | None = None
    stale = 0
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for round_index in range(1, cfg.max_rounds + 1):
            started = time.perf_counter()
            if parallel and parallel > 1:
                with ThreadPoolExecutor(max_workers=parallel) as pool:
                    futures = {cid: pool.submit(run_client, round_index, cid)
                               for cid in order}
                    results = {cid: futures[cid].result() for cid in order}
            else:
                results = {cid: run_client(round_index, cid) for cid in order}

            updated = [results[cid].params for cid in order]
            weights = [train_sizes[cid] for cid in order]
            if bn_mode:
                merged = aggregate_fedbn(updated, weights)
                per_client = dict(zip(order, merged))
                host_params = per_client[cfg.host]
                state: ParamSet | dict[str, ParamSet] = per_client
            else:
                params = aggregate_fedavg(updated, weights)
                host_params = params
                state = params

            val = evaluate_params(host_params, cfg.model, prepared.valid[cfg.host])
            entry = RoundLog(
                round=round_index,
                client_losses={cid: float(np.mean(results[cid].epoch_losses))
                               for cid in order},
                host_val_macro_auroc=val.macro,
                wall_time=time.perf_counter() - started,
                checksum=_state_checksum(state),
            )
            logs.append(entry)
            if log_fh is not None:
                log_fh.write(entry.to_json() + "\n")

            if val.macro > best_metric:
                best_metric = val.macro
                best_round = round_index
                best_host = host_params.copy()
                best_state = ({cid: ps.copy() for cid, ps in per_client.items()}
                              if bn_mode else params.copy())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()

    assert best_host is not None and best_state is not None
    return FederationResult(best_round, best_host, best_state, logs, prepared.vocab)


def train_single(host: ClientDataset, cfg: FLRunConfig,
                 prepared: PreparedRun | None = None,
                 log_path: str | Path | None = None) -> FederationResult:
    """Local-only baseline: a one-participant federation, so each round is
    one local epoch and the same early stopping applies."""
    solo = replace(cfg, algorithm="fedavg", participants=[host.client_id],
                   host=host.client_id, mu=0.0)
    return run_federation(solo, [host], prepared=prepared, log_path=log_path)
