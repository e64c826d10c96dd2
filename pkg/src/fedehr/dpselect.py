"""Participant selection from differentially private averaged embeddings.

Protocol: the host trains a local model and shares its weights; every party
extracts patient embeddings with the frozen model and clips them to L2 norm
C; subjects average their clipped embeddings and add Gaussian noise with
per-coordinate sigma = (C / m) * sqrt(2 ln(1.25 / delta)) / epsilon before
sharing; the host averages without noise (its embedding never leaves);
the host then scores each subject against its own average and keeps the
K - 1 most similar. The only artifact that crosses the host/subject
boundary is a PrivateAveragedEmbedding.

For KL divergence the shared artifact is the average of each patient
embedding's softmax (still clipped/averaged/noised the same way), and the
divergence is taken host-first: KL(host || subject).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedehr import fedcore
from fedehr.model import ModelConfig, derive_seed, patient_embeddings
from fedehr.params import ParamSet
from fedehr.synthdata import ClientDataset

SIMILARITY_METRICS = ("cosine", "euclidean", "kl")
_KL_SMOOTHING = 1e-10


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class PrivateAveragedEmbedding:
    """A clipped, averaged, optionally noised embedding plus its DP metadata."""

    values: np.ndarray
    m: int
    dp: DPConfig
    noised: bool

    @property
    def sigma(self) -> float:
        return noise_sigma(self.dp, self.m) if self.noised else 0.0


@dataclass(frozen=True)
class SimilarityScore:
    metric: str
    value: float
    higher_is_more_similar: bool


def noise_sigma(dp: DPConfig, m: int) -> float:
    """Gaussian-mechanism noise scale for the mean of m clipped embeddings."""
    if m < 1:
        raise ValueError("need at least one patient embedding")
    return dp.clip_norm / m * math.sqrt(2.0 * math.log(1.25 / dp.delta)) / dp.epsilon


def clip_embedding(embedding: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale down to L2 norm clip_norm; vectors already inside the ball
    (including the zero vector) pass through unchanged."""
    if clip_norm <= 0:
        raise ValueError("clip norm must be positive")
    embedding = np.asarray(embedding, dtype=np.float64)
    norm = float(np.linalg.norm(embedding))
    if norm <= clip_norm:
        return embedding.copy()
    return embedding * (clip_norm / norm)


def average_embeddings(embeddings) -> np.ndarray:
    stack = np.asarray(embeddings, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ValueError("need a non-empty list of equal-length embeddings")
    return stack.mean(axis=0)


def privatize(avg: np.ndarray, m: int, dp: DPConfig, seed: int) -> PrivateAveragedEmbedding:
    """Add i.i.d. zero-mean Gaussian noise at the calibrated sigma."""
    sigma = noise_sigma(dp, m)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 60017]))
    noise = rng.normal(0.0, sigma, size=np.asarray(avg).shape)
    return PrivateAveragedEmbedding(np.asarray(avg, dtype=np.float64) + noise,
                                    m, dp, noised=True)


def softmax_average(embeddings) -> np.ndarray:
    """Mean of per-embedding softmaxes (max-shifted for stability)."""
    stack = np.asarray(embeddings, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ValueError("need a non-empty list of equal-length embeddings")
    shifted = stack - stack.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs.mean(axis=0)


def cosine(a, b) -> SimilarityScore:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for the zero vector")
    value = float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
    return SimilarityScore("cosine", value, higher_is_more_similar=True)


def euclidean(a, b) -> SimilarityScore:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return SimilarityScore("euclidean", float(np.linalg.norm(a - b)),
                           higher_is_more_similar=False)


def _require_simplex(p: np.ndarray, label: str) -> None:
    if (p < 0).any() or not math.isclose(float(p.sum()), 1.0, abs_tol=1e-6):
        raise ValueError(f"{label} is not a probability vector")


def kl(p, q) -> SimilarityScore:
    """KL(p || q) over probability vectors, smoothed then renormalized."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    _require_simplex(p, "first argument")
    _require_simplex(q, "second argument")
    ps = (p + _KL_SMOOTHING) / (p + _KL_SMOOTHING).sum()
    qs = (q + _KL_SMOOTHING) / (q + _KL_SMOOTHING).sum()
    value = float(np.sum(ps * np.log(ps / qs)))
    return SimilarityScore("kl", max(value, 0.0), higher_is_more_similar=False)


def sanitize_distribution(values: np.ndarray) -> np.ndarray:
    """Project a noised softmax average back onto the simplex: negative
    coordinates are clamped to zero and the vector renormalized."""
    clipped = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    total = clipped.sum()
    if total <= 0:
        return np.full(clipped.shape, 1.0 / clipped.size)
    return clipped / total


def release_embedding(embeddings: np.ndarray, dp: DPConfig, metric: str,
                      noised: bool, seed: int = 0) -> PrivateAveragedEmbedding:
    """Build the single artifact a party shares for similarity scoring.

    Embeddings are clipped at C; for KL the per-patient softmax replaces
    the raw embedding before averaging. Subjects noise the average
    (noised=True); the host does not, since its average never leaves.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    clipped = np.stack([clip_embedding(e, dp.clip_norm) for e in embeddings])
    if metric == "kl":
        avg = softmax_average(clipped)
    else:
        avg = average_embeddings(clipped)
    m = clipped.shape[0]
    if noised:
        return privatize(avg, m, dp, seed)
    return PrivateAveragedEmbedding(avg, m, dp, noised=False)


def score_release(host: PrivateAveragedEmbedding,
                  subject: PrivateAveragedEmbedding, metric: str) -> SimilarityScore:
    if metric == "cosine":
        return cosine(host.values, subject.values)
    if metric == "euclidean":
        return euclidean(host.values, subject.values)
    if metric == "kl":
        return kl(sanitize_distribution(host.values),
                  sanitize_distribution(subject.values))
    raise ValueError(f"unknown similarity metric {metric!r}")


def rank_candidates(scores: dict[str, SimilarityScore]) -> list[str]:
    """Candidate ids from most to least similar; ties broken by id."""
    def key(cid):
        score = scores[cid]
        oriented = score.value if score.higher_is_more_similar else -score.value
        return (-oriented, cid)
    return sorted(scores, key=key)


def select_top_k(scores: dict[str, SimilarityScore], k: int) -> list[str]:
    """Keep the K - 1 most similar candidates (K counts the host)."""
    if k < 1:
        raise ValueError("K must be at least 1")
    if k - 1 > len(scores):
        raise ValueError(f"cannot select {k - 1} of {len(scores)} candidates")
    return sorted(rank_candidates(scores)[: k - 1])


def select_by_threshold(scores: dict[str, SimilarityScore], threshold: float) -> list[str]:
    """Alternative cut: keep candidates at least as similar as the threshold
    (greater-or-equal for similarities, less-or-equal for distances)."""
    kept = []
    for cid, score in scores.items():
        ok = score.value >= threshold if score.higher_is_more_similar else score.value <= threshold
        if ok:
            kept.append(cid)
    return sorted(kept)


@dataclass
class CandidateReport:
    client_id: str
    metric: str
    score: float
    sigma: float
    m: int
    selected: bool


@dataclass
class SelectionReport:
    host: str
    metric: str
    k: int
    dp: DPConfig
    selected: list[str]
    candidates: list[CandidateReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "host": self.host,
            "metric": self.metric,
            "k": self.k,
            "dp": {"clip_norm": self.dp.clip_norm, "epsilon": self.dp.epsilon,
                   "delta": self.dp.delta},
            "selected": self.selected,
            "candidates": [vars(c) for c in self.candidates],
        }


def run_selection_protocol(host: ClientDataset, candidates: list[ClientDataset],
                           metric: str, k: int, dp: DPConfig, seed: int,
                           fl_cfg: fedcore.FLRunConfig,
                           host_model: tuple[ParamSet, object] | None = None,
                           threshold: float | None = None) -> SelectionReport:
    """The nine-step selection protocol over simulated clients.

    ``host_model`` short-circuits step one with an already-trained
    (params, vocab) pair, e.g. the Single baseline of a sweep. Embeddings
    are extracted from each client's training split only.
    """
    if metric not in SIMILARITY_METRICS:
        raise ValueError(f"unknown similarity metric {metric!r}")
    if k - 1 > len(candidates):
        raise ValueError(f"cannot select {k - 1} of {len(candidates)} candidates")

    if host_model is None:
        single = fedcore.train_single(host, replace(fl_cfg, seed=seed))
        params, vocab = single.best_host_params, single.vocab
    else:
        params, vocab = host_model

    model_cfg: ModelConfig = fl_cfg.model

    def extract(ds: ClientDataset) -> np.ndarray:
        from fedehr.model import pack_patients
        pack = pack_patients(ds.split_patients("train"), ds.dictionary, vocab, model_cfg)
        return patient_embeddings(params, model_cfg, pack)

    host_release = release_embedding(extract(host), dp, metric, noised=False)
    releases = {
        ds.client_id: release_embedding(extract(ds), dp, metric, noised=True,
                                        seed=derive_seed(seed, "dp", ds.client_id))
        for ds in candidates
    }
    scores = {cid: score_release(host_release, rel, metric)
              for cid, rel in releases.items()}
    if threshold is not None:
        selected = select_by_threshold(scores, threshold)
    else:
        selected = select_top_k(scores, k)

    report = SelectionReport(host.client_id, metric, k, dp, selected)
    for cid in sorted(scores):
        report.candidates.append(CandidateReport(
            client_id=cid,
            metric=metric,
            score=scores[cid].value,
            sigma=releases[cid].sigma,
            m=releases[cid].m,
            selected=cid in selected,
        ))
    return report
