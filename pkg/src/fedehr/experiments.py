"""Experiment orchestration: dataset generation, the federation sweep over
all participant subsets, the similarity/performance correlation study, and
selection evaluation against the sweep baselines.

Every artifact lands under one output directory:

    data/     per-client JSONL + dictionary + schema profile + metadata
    cells/    one JSON per (algorithm, seed, subset) federation run
    models/   best checkpoints of the Single (host-only) baselines
    logs/     per-round JSONL logs
    reports/  assembled tables (JSON + CSV + plain text)

Cells are content-addressed by name, so re-running a sweep only executes
the missing ones, and all reports are pure functions of the cell files
(no timestamps), so identical configs reproduce identical bytes.
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fedehr import dpselect, fedcore
from fedehr.costmodel import cost_report, load_ledger
from fedehr.dpselect import DPConfig, SimilarityScore
from fedehr.linearize import LinearizeStats, linearize_patient
from fedehr.metrics import kendall, performance_delta, spearman
from fedehr.model import ModelConfig, OptimizerConfig, derive_seed
from fedehr.params import load_params, save_params
from fedehr.synthdata import (
    ClientDataset,
    ClientGenSpec,
    apply_schema_heterogeneity,
    generate_client,
    read_client,
    schema_profile_variant,
    split_dataset,
    write_client,
)


class ConfigError(Exception):
    pass


class RunError(Exception):
    pass


@dataclass
class ClientClause:
    spec: ClientGenSpec
    schema_variant: int = 0


@dataclass
class ExperimentConfig:
    out_dir: str
    host: str
    clients: list[ClientClause]
    gen_seed: int = 1234
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    algorithms: list[str] = field(default_factory=lambda: list(fedcore.ALGORITHMS))
    selection_metrics: list[str] = field(default_factory=lambda: list(dpselect.SIMILARITY_METRICS))
    k_values: list[int] = field(default_factory=lambda: [3])
    dp: DPConfig = field(default_factory=DPConfig)
    max_rounds: int = 60
    patience: int = 10
    mu: float = 0.01
    local_epochs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    workers: int = 1

    def validate(self):
        ids = [c.spec.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate client ids")
        if self.host not in ids:
            raise ConfigError(f"host {self.host!r} is not among the clients")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        bad = [a for a in self.algorithms if a not in fedcore.ALGORITHMS]
        if bad:
            raise ConfigError(f"unknown algorithms: {bad}")
        bad = [m for m in self.selection_metrics if m not in dpselect.SIMILARITY_METRICS]
        if bad:
            raise ConfigError(f"unknown selection metrics: {bad}")
        n = len(self.clients)
        if any(not 1 <= k <= n for k in self.k_values):
            raise ConfigError(f"k values must lie in [1, {n}]")
        tasks = {c.spec.n_tasks for c in self.clients}
        if len(tasks) != 1:
            raise ConfigError("all clients must declare the same task count")

    def candidate_ids(self) -> list[str]:
        return sorted(c.spec.client_id for c in self.clients
                      if c.spec.client_id != self.host)

    def to_dict(self) -> dict:
        doc = {
            "out_dir": self.out_dir,
            "host": self.host,
            "gen_seed": self.gen_seed,
            "seeds": self.seeds,
            "algorithms": self.algorithms,
            "selection_metrics": self.selection_metrics,
            "k_values": self.k_values,
            "workers": self.workers,
            "dp": {"clip_norm": self.dp.clip_norm, "epsilon": self.dp.epsilon,
                   "delta": self.dp.delta},
            "fl": {"max_rounds": self.max_rounds, "patience": self.patience,
                   "mu": self.mu, "local_epochs": self.local_epochs},
            "model": asdict(self.model),
            "optimizer": asdict(self.optimizer),
            "clients": [
                {**asdict(c.spec), "schema_variant": c.schema_variant}
                for c in self.clients
            ],
        }
        return doc


def config_from_dict(doc: dict, out_override: str | None = None) -> ExperimentConfig:
    try:
        clients = []
        for raw in doc["clients"]:
            raw = dict(raw)
            variant = int(raw.pop("schema_variant", 0))
            clients.append(ClientClause(ClientGenSpec(**raw), variant))
        fl = doc.get("fl", {})
        cfg = ExperimentConfig(
            out_dir=out_override or doc["out_dir"],
            host=doc["host"],
            clients=clients,
            gen_seed=int(doc.get("gen_seed", 1234)),
            seeds=[int(s) for s in doc.get("seeds", [1, 2, 3])],
            algorithms=list(doc.get("algorithms", fedcore.ALGORITHMS)),
            selection_metrics=list(doc.get("selection_metrics",
                                           dpselect.SIMILARITY_METRICS)),
            k_values=[int(k) for k in doc.get("k_values", [3])],
            dp=DPConfig(**doc.get("dp", {})),
            max_rounds=int(fl.get("max_rounds", 60)),
            patience=int(fl.get("patience", 10)),
            mu=float(fl.get("mu", 0.01)),
            local_epochs=int(fl.get("local_epochs", 1)),
            model=ModelConfig(**doc.get("model", {})),
            optimizer=OptimizerConfig(**doc.get("optimizer", {})),
            workers=int(doc.get("workers", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path, out_override: str | None = None) -> ExperimentConfig:
    if str(path) == "benchmark":
        cfg = benchmark_config(out_override or "benchmark_out")
        return cfg
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc, out_override)


def benchmark_config(out_dir: str, n_patients: int = 1000,
                     seeds: tuple[int, ...] = (1, 2, 3),
                     max_rounds: int = 60, workers: int = 2) -> ExperimentConfig:
    """The synthetic-shift benchmark: a reference host, one same-distribution
    twin, one mildly shifted client, and two strongly shifted clients, each
    with its own surface schema."""
    shifts = [("hospital_a", 0.0), ("hospital_b", 0.0), ("hospital_c", 0.3),
              ("hospital_d", 0.8), ("hospital_e", 0.8)]
    clients = [
        ClientClause(ClientGenSpec(cid, n_patients=n_patients, n_tasks=4, shift=s),
                     schema_variant=i)
        for i, (cid, s) in enumerate(shifts)
    ]
    cfg = ExperimentConfig(out_dir=out_dir, host="hospital_a", clients=clients,
                           seeds=list(seeds), max_rounds=max_rounds,
                           workers=workers)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Paths and cell identity

def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    base = Path(cfg.out_dir)
    return {name: base / name for name in ("data", "cells", "models", "logs", "reports")}


@dataclass(frozen=True)
class CellKey:
    algorithm: str  # one of fedcore.ALGORITHMS or "single"
    seed: int
    subset: tuple[str, ...]  # sorted candidate ids, empty for single

    def name(self) -> str:
        members = "+".join(self.subset) if self.subset else "none"
        return f"{self.algorithm}__s{self.seed}__{members}"


def sweep_cells(cfg: ExperimentConfig) -> list[CellKey]:
    candidates = cfg.candidate_ids()
    cells = []
    for seed in cfg.seeds:
        cells.append(CellKey("single", seed, ()))
        for algo in cfg.algorithms:
            for size in range(1, len(candidates) + 1):
                for subset in itertools.combinations(candidates, size):
                    cells.append(CellKey(algo, seed, subset))
    return cells


# ---------------------------------------------------------------------------
# Dataset generation and per-seed preparation

def cmd_generate(cfg: ExperimentConfig) -> dict:
    dirs = _dirs(cfg)
    dirs["data"].mkdir(parents=True, exist_ok=True)
    meta = {}
    for clause in cfg.clients:
        ds = generate_client(clause.spec, cfg.gen_seed)
        profile = schema_profile_variant(clause.schema_variant)
        if not profile.is_identity():
            ds = apply_schema_heterogeneity(ds, profile)
        write_client(ds, dirs["data"])
        stats = LinearizeStats()
        for p in ds.patients[:50]:
            linearize_patient(p, ds.dictionary, stats)
        meta[clause.spec.client_id] = {
            "n_patients": clause.spec.n_patients,
            "n_tasks": clause.spec.n_tasks,
            "shift": clause.spec.shift,
            "schema_variant": clause.schema_variant,
            "gen_seed": cfg.gen_seed,
            "unmapped_codes_sample": stats.unmapped_codes,
        }
    with open(dirs["data"] / "generation.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


_seed_cache: dict = {}


def _clients_for_seed(cfg: ExperimentConfig, seed: int) -> dict[str, ClientDataset]:
    """Load the generated clients and re-split them for this seed (each
    experiment seed gets its own data splits and model init)."""
    key = ("clients", cfg.out_dir, seed)
    if key not in _seed_cache:
        data_dir = _dirs(cfg)["data"]
        clients = {}
        for clause in cfg.clients:
            cid = clause.spec.client_id
            if not (data_dir / f"{cid}.jsonl").exists():
                raise RunError(f"missing dataset for {cid!r}; run generate first")
            ds = read_client(data_dir, cid)
            clients[cid] = split_dataset(ds, derive_seed(seed, "split", cid))
        _seed_cache[key] = clients
    return _seed_cache[key]


def _prepared_for_seed(cfg: ExperimentConfig, seed: int) -> fedcore.PreparedRun:
    key = ("prepared", cfg.out_dir, seed)
    if key not in _seed_cache:
        clients = _clients_for_seed(cfg, seed)
        _seed_cache[key] = fedcore.prepare_run(clients, cfg.host, cfg.model)
    return _seed_cache[key]


def _fl_config(cfg: ExperimentConfig, algorithm: str, seed: int,
               participants: list[str]) -> fedcore.FLRunConfig:
    return fedcore.FLRunConfig(
        algorithm=algorithm, host=cfg.host, participants=participants,
        max_rounds=cfg.max_rounds, local_epochs=cfg.local_epochs,
        patience=cfg.patience, mu=cfg.mu, seed=seed,
        model=cfg.model, optimizer=cfg.optimizer)


# ---------------------------------------------------------------------------
# Cell execution

def run_cell(cfg: ExperimentConfig, key: CellKey) -> dict:
    clients = _clients_for_seed(cfg, key.seed)
    prepared = _prepared_for_seed(cfg, key.seed)
    dirs = _dirs(cfg)
    dirs["logs"].mkdir(parents=True, exist_ok=True)
    log_path = dirs["logs"] / f"{key.name()}.jsonl"
    if log_path.exists():
        log_path.unlink()

    if key.algorithm == "single":
        fl = _fl_config(cfg, "fedavg", key.seed, [cfg.host])
        result = fedcore.train_single(clients[cfg.host], fl, prepared=prepared,
                                      log_path=log_path)
        dirs["models"].mkdir(parents=True, exist_ok=True)
        save_params(result.best_host_params,
                    dirs["models"] / f"single.s{key.seed}.params.json")
    else:
        participants = sorted([cfg.host, *key.subset])
        fl = _fl_config(cfg, key.algorithm, key.seed, participants)
        result = fedcore.run_federation(fl, [clients[c] for c in participants],
                                        prepared=prepared, log_path=log_path)

    test = fedcore.evaluate_params(result.best_host_params, cfg.model,
                                   prepared.test[cfg.host])
    val_curve = [log.host_val_macro_auroc for log in result.logs]
    return {
        "host": cfg.host,
        "algorithm": key.algorithm,
        "seed": key.seed,
        "subset": list(key.subset),
        "n_clients": len(key.subset) + 1,
        "rounds_run": len(result.logs),
        "best_round": result.best_round,
        "host_val_macro_auroc": max(val_curve),
        "host_test_macro_auroc": test.macro,
        "per_task_test_auroc": test.per_task,
        "checksum": result.logs[result.best_round - 1].checksum,
        "round_log": [json.loads(log.to_json()) for log in result.logs],
    }


def _cell_path(cfg: ExperimentConfig, key: CellKey) -> Path:
    return _dirs(cfg)["cells"] / f"{key.name()}.json"


def _write_cell(cfg: ExperimentConfig, key: CellKey, cell: dict) -> None:
    path = _cell_path(cfg, key)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(cell, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def _cell_worker(config_doc: dict, key_tuple: tuple) -> str:
    cfg = config_from_dict(config_doc)
    key = CellKey(key_tuple[0], key_tuple[1], tuple(key_tuple[2]))
    _write_cell(cfg, key, run_cell(cfg, key))
    return key.name()


def cmd_sweep(cfg: ExperimentConfig, echo=None) -> dict:
    """Execute all missing sweep cells, then assemble the sweep tables."""
    cells = sweep_cells(cfg)
    missing = [key for key in cells if not _cell_path(cfg, key).exists()]
    if echo:
        echo(f"sweep: {len(cells)} cells, {len(missing)} to run")
    if missing and cfg.workers > 1:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            tasks = [(key, pool.submit(_cell_worker, doc,
                                       (key.algorithm, key.seed, list(key.subset))))
                     for key in missing]
            for key, future in tasks:
                future.result()
                if echo:
                    echo(f"  done {key.name()}")
    else:
        for key in missing:
            _write_cell(cfg, key, run_cell(cfg, key))
            if echo:
                echo(f"  done {key.name()}")
    table = assemble_sweep_table(cfg)
    return {"cells": len(cells), "executed": [k.name() for k in missing],
            "skipped": len(cells) - len(missing), "table": table}


def load_cells(cfg: ExperimentConfig) -> dict[tuple, dict]:
    """All completed cells, keyed by (algorithm, seed, subset)."""
    out = {}
    for key in sweep_cells(cfg):
        path = _cell_path(cfg, key)
        if path.exists():
            with open(path) as fh:
                out[(key.algorithm, key.seed, key.subset)] = json.load(fh)
    return out


def _require_cell(cells: dict, algo: str, seed: int, subset: tuple) -> dict:
    try:
        return cells[(algo, seed, subset)]
    except KeyError:
        raise RunError(f"missing sweep cell {algo}/s{seed}/{subset or 'single'}; "
                       "run sweep first") from None


# ---------------------------------------------------------------------------
# Reports

def _fmt(x: float) -> str:
    return repr(round(float(x), 6))


def assemble_sweep_table(cfg: ExperimentConfig) -> dict:
    cells = load_cells(cfg)
    candidates = cfg.candidate_ids()
    table: dict = {"host": cfg.host, "single": {}, "by_size": {}}

    singles = [_require_cell(cells, "single", seed, ())["host_test_macro_auroc"]
               for seed in cfg.seeds]
    table["single"] = {"mean": float(np.mean(singles)),
                       "per_seed": dict(zip(map(str, cfg.seeds), singles))}

    for size in range(1, len(candidates) + 1):
        subsets = list(itertools.combinations(candidates, size))
        size_block: dict = {}
        for algo in cfg.algorithms:
            per_subset_means = []
            per_seed_avg = {}
            per_seed_best = {}
            for seed in cfg.seeds:
                vals = [_require_cell(cells, algo, seed, s)["host_test_macro_auroc"]
                        for s in subsets]
                per_seed_avg[str(seed)] = float(np.mean(vals))
                per_seed_best[str(seed)] = float(np.max(vals))
            for s in subsets:
                seed_vals = [_require_cell(cells, algo, seed, s)["host_test_macro_auroc"]
                             for seed in cfg.seeds]
                per_subset_means.append(float(np.mean(seed_vals)))
            size_block[algo] = {
                "average": float(np.mean(per_subset_means)),
                "best": float(np.max(per_subset_means)),
                "per_seed_average": per_seed_avg,
                "per_seed_best": per_seed_best,
            }
        size_block["algo_mean"] = {
            "average": float(np.mean([size_block[a]["average"] for a in cfg.algorithms])),
            "best": float(np.mean([size_block[a]["best"] for a in cfg.algorithms])),
        }
        table["by_size"][str(size + 1)] = size_block

    reports = _dirs(cfg)["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / "sweep_table.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["n_clients,method,average,best"]
    lines.append(f"1,single,{_fmt(table['single']['mean'])},{_fmt(table['single']['mean'])}")
    for size_key in sorted(table["by_size"], key=int):
        for algo in cfg.algorithms:
            block = table["by_size"][size_key][algo]
            lines.append(f"{size_key},{algo},{_fmt(block['average'])},{_fmt(block['best'])}")
    (reports / "sweep_table.csv").write_text("\n".join(lines) + "\n")

    txt = [f"Host {cfg.host}: test macro AUROC by number of participating clients",
           f"  1 client  single          {table['single']['mean']:.4f}"]
    for size_key in sorted(table["by_size"], key=int):
        for algo in cfg.algorithms:
            block = table["by_size"][size_key][algo]
            txt.append(f"  {size_key} clients {algo:<8}  average {block['average']:.4f}"
                       f"  best {block['best']:.4f}")
    (reports / "sweep_table.txt").write_text("\n".join(txt) + "\n")
    return table


# ---------------------------------------------------------------------------
# Selection

def _selection_path(cfg: ExperimentConfig, seed: int) -> Path:
    return _dirs(cfg)["reports"] / f"selection.s{seed}.json"


def cmd_select(cfg: ExperimentConfig, echo=None,
               threshold: float | None = None) -> dict:
    """Run the DP selection protocol per seed and metric; reuses the sweep's
    Single checkpoint for the host model when available."""
    dirs = _dirs(cfg)
    out: dict = {}
    for seed in cfg.seeds:
        clients = _clients_for_seed(cfg, seed)
        prepared = _prepared_for_seed(cfg, seed)
        model_path = dirs["models"] / f"single.s{seed}.params.json"
        if model_path.exists():
            host_model = (load_params(model_path), prepared.vocab)
        else:
            fl = _fl_config(cfg, "fedavg", seed, [cfg.host])
            result = fedcore.train_single(clients[cfg.host], fl, prepared=prepared)
            dirs["models"].mkdir(parents=True, exist_ok=True)
            save_params(result.best_host_params, model_path)
            host_model = (result.best_host_params, prepared.vocab)

        candidates = [clients[cid] for cid in cfg.candidate_ids()]
        per_metric = {}
        for metric in cfg.selection_metrics:
            fl = _fl_config(cfg, "fedavg", seed, [cfg.host])
            report = dpselect.run_selection_protocol(
                clients[cfg.host], candidates, metric, min(cfg.k_values), cfg.dp,
                seed, fl, host_model=host_model, threshold=threshold)
            scores = {c.client_id: SimilarityScore(metric, c.score,
                                                   metric == "cosine")
                      for c in report.candidates}
            selected_by_k = {str(k): dpselect.select_top_k(scores, k)
                             for k in cfg.k_values}
            per_metric[metric] = {**report.to_dict(),
                                  "selected_by_k": selected_by_k}
            if echo:
                echo(f"  seed {seed} {metric}: ranking "
                     f"{dpselect.rank_candidates(scores)}")
        out[str(seed)] = per_metric
        dirs["reports"].mkdir(parents=True, exist_ok=True)
        with open(_selection_path(cfg, seed), "w") as fh:
            json.dump(per_metric, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return out


def load_selection(cfg: ExperimentConfig, seed: int) -> dict:
    path = _selection_path(cfg, seed)
    if not path.exists():
        raise RunError(f"missing selection report for seed {seed}; run select first")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Correlation study

def _delta_pairs(cfg: ExperimentConfig, cells: dict, algo: str, seed: int,
                 scores: dict[str, float]) -> dict[int, list[tuple[float, float]]]:
    """(similarity, host-performance delta) pairs grouped by federation size."""
    candidates = cfg.candidate_ids()
    by_size: dict[int, list[tuple[float, float]]] = {}
    for size in range(1, len(candidates) + 1):
        for subset in itertools.combinations(candidates, size):
            with_cell = _require_cell(cells, algo, seed, subset)
            for subject in subset:
                rest = tuple(c for c in subset if c != subject)
                if rest:
                    base_cell = _require_cell(cells, algo, seed, rest)
                else:
                    base_cell = _require_cell(cells, "single", seed, ())
                delta = performance_delta(with_cell, base_cell, subject)
                by_size.setdefault(size + 1, []).append((scores[subject], delta))
    return by_size


def _safe_corr(fn, pairs) -> float | None:
    if len(pairs) < 2:
        return None
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    try:
        return fn(xs, ys)
    except ValueError:
        return None


def cmd_correlate(cfg: ExperimentConfig, echo=None) -> dict:
    """Rank correlation between host-subject similarity and the change in
    host test performance when the subject joins, per metric and federation
    size, averaged across algorithms (per-seed and seed-mean)."""
    cells = load_cells(cfg)
    sizes = [str(s + 1) for s in range(1, len(cfg.candidate_ids()) + 1)]
    columns = sizes + ["overall"]
    report: dict = {"per_seed": {}, "mean": {}}

    for seed in cfg.seeds:
        selection = load_selection(cfg, seed)
        seed_block: dict = {}
        for metric in cfg.selection_metrics:
            scores = {c["client_id"]: c["score"]
                      for c in selection[metric]["candidates"]}
            per_algo: dict = {}
            for algo in cfg.algorithms:
                by_size = _delta_pairs(cfg, cells, algo, seed, scores)
                pooled = [p for pairs in by_size.values() for p in pairs]
                per_algo[algo] = {
                    "spearman": {str(sz): _safe_corr(spearman, by_size[sz])
                                 for sz in sorted(by_size)} | {
                                     "overall": _safe_corr(spearman, pooled)},
                    "kendall": {str(sz): _safe_corr(kendall, by_size[sz])
                                for sz in sorted(by_size)} | {
                                    "overall": _safe_corr(kendall, pooled)},
                }
            averaged = {}
            for stat in ("spearman", "kendall"):
                averaged[stat] = {}
                for col in columns:
                    vals = [per_algo[a][stat][col] for a in cfg.algorithms
                            if per_algo[a][stat].get(col) is not None]
                    averaged[stat][col] = float(np.mean(vals)) if vals else None
            seed_block[metric] = {"averaged": averaged, "per_algorithm": per_algo}
        report["per_seed"][str(seed)] = seed_block

    for metric in cfg.selection_metrics:
        report["mean"][metric] = {}
        for stat in ("spearman", "kendall"):
            report["mean"][metric][stat] = {}
            for col in columns:
                vals = [report["per_seed"][str(seed)][metric]["averaged"][stat][col]
                        for seed in cfg.seeds
                        if report["per_seed"][str(seed)][metric]["averaged"][stat][col]
                        is not None]
                report["mean"][metric][stat][col] = float(np.mean(vals)) if vals else None

    reports = _dirs(cfg)["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / "correlation.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["metric,stat," + ",".join(columns)]
    for metric in cfg.selection_metrics:
        for stat in ("spearman", "kendall"):
            row = report["mean"][metric][stat]
            cellstr = ",".join("" if row[c] is None else _fmt(row[c]) for c in columns)
            lines.append(f"{metric},{stat},{cellstr}")
    (reports / "correlation.csv").write_text("\n".join(lines) + "\n")

    txt = ["Correlation of host-subject similarity vs host performance delta",
           "(averaged across algorithms and seeds)"]
    for metric in cfg.selection_metrics:
        for stat in ("spearman", "kendall"):
            row = report["mean"][metric][stat]
            vals = "  ".join(f"{c}={row[c]:+.3f}" if row[c] is not None else f"{c}=n/a"
                             for c in columns)
            txt.append(f"  {metric:<9} {stat:<8} {vals}")
    (reports / "correlation.txt").write_text("\n".join(txt) + "\n")
    if echo:
        for line in txt:
            echo(line)
    return report


# ---------------------------------------------------------------------------
# Selection evaluation against sweep baselines

def cmd_select_eval(cfg: ExperimentConfig, echo=None) -> dict:
    """Compare the similarity-selected federations to the all-clients run and
    to the Average/Best baselines over same-size subsets (algorithm means)."""
    cells = load_cells(cfg)
    candidates = cfg.candidate_ids()
    all_subset = tuple(candidates)
    report: dict = {"per_seed": {}, "mean": {}}

    def algo_mean(seed: int, subset: tuple) -> float:
        return float(np.mean([
            _require_cell(cells, algo, seed, subset)["host_test_macro_auroc"]
            for algo in cfg.algorithms]))

    for seed in cfg.seeds:
        selection = load_selection(cfg, seed)
        seed_block: dict = {}
        for k in cfg.k_values:
            size = k - 1
            subsets = list(itertools.combinations(candidates, size))
            baseline_vals = [algo_mean(seed, s) for s in subsets]
            average_baseline = float(np.mean(baseline_vals))
            best_baseline = float(np.max(baseline_vals))
            all_n = algo_mean(seed, all_subset)
            k_block = {}
            for metric in cfg.selection_metrics:
                chosen = tuple(sorted(selection[metric]["selected_by_k"][str(k)]))
                perf = algo_mean(seed, chosen)
                k_block[metric] = {
                    "selected": list(chosen),
                    "performance": perf,
                    "all_clients": all_n,
                    "average_baseline": average_baseline,
                    "best_baseline": best_baseline,
                    "ge_all_clients": bool(perf >= all_n - 1e-12),
                    "eq_best": bool(abs(perf - best_baseline) <= 1e-12),
                    "gt_average": bool(perf > average_baseline),
                }
            seed_block[str(k)] = k_block
        report["per_seed"][str(seed)] = seed_block

    for k in cfg.k_values:
        report["mean"][str(k)] = {}
        for metric in cfg.selection_metrics:
            rows = [report["per_seed"][str(seed)][str(k)][metric] for seed in cfg.seeds]
            perf = float(np.mean([r["performance"] for r in rows]))
            all_n = float(np.mean([r["all_clients"] for r in rows]))
            avg_b = float(np.mean([r["average_baseline"] for r in rows]))
            best_b = float(np.mean([r["best_baseline"] for r in rows]))
            report["mean"][str(k)][metric] = {
                "performance": perf,
                "all_clients": all_n,
                "average_baseline": avg_b,
                "best_baseline": best_b,
                "ge_all_clients": bool(perf >= all_n - 1e-12),
                "eq_best": bool(abs(perf - best_b) <= 1e-12),
                "gt_average": bool(perf > avg_b),
            }

    reports = _dirs(cfg)["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / "select_eval.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["k,metric,performance,all_clients,average,best,ge_all,eq_best,gt_average"]
    for k in cfg.k_values:
        for metric in cfg.selection_metrics:
            r = report["mean"][str(k)][metric]
            lines.append(
                f"{k},{metric},{_fmt(r['performance'])},{_fmt(r['all_clients'])},"
                f"{_fmt(r['average_baseline'])},{_fmt(r['best_baseline'])},"
                f"{int(r['ge_all_clients'])},{int(r['eq_best'])},{int(r['gt_average'])}")
    (reports / "select_eval.csv").write_text("\n".join(lines) + "\n")
    if echo:
        for line in lines:
            echo(line)
    return report


# ---------------------------------------------------------------------------
# Cost CLI backing

def cmd_cost(ledger_path: str | Path) -> dict:
    return cost_report(load_ledger(ledger_path))
