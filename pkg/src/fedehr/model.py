"""Compact hierarchical patient encoder with hand-written backprop.

Pipeline per patient: token-embedding lookup with a masked mean over each
event's tokens, an event-encoder stage, an event-aggregator stage, a mean
over the patient's events, and one affine head per prediction task. Each
stage is a pair of blocks [affine -> batch normalization with learnable
scale/offset -> ReLU]; aggregator blocks can additionally run single-head
self-attention across the patient's events (off by default).

Everything is float64 and deterministic; gradients are exact and verified
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedehr import kernels
from fedehr.linearize import linearize_patient
from fedehr.params import ParamSet
from fedehr.synthdata import CodeDictionary, PatientRecord, stable_hash
from fedehr.vocab import Vocabulary, tokenize


class NonFiniteLossError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 32
    max_len: int = 32
    vocab_size: int = 2000
    n_tasks: int = 4
    blocks_per_stage: int = 2
    attention: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def block_names(self) -> list[tuple[str, str]]:
        return [(stage, f"{stage}{j}")
                for stage in ("enc", "agg")
                for j in range(1, self.blocks_per_stage + 1)]


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    batch_size: int = 64


@dataclass
class ProxTerm:
    """Proximal pull toward an anchor: adds mu * (w - anchor) to gradients."""

    mu: float
    anchor: ParamSet


def init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 40013]))
    d = cfg.embed_dim
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}

    def add(name, value, tag):
        tensors[name] = value
        tags[name] = tag

    add("embed", rng.normal(0.0, 1.0 / np.sqrt(d), (vocab_size, d)), "dense")
    for stage, name in cfg.block_names():
        if cfg.attention and stage == "agg":
            for proj in ("Wq", "Wk", "Wv"):
                add(f"{name}_{proj}", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), "dense")
        add(f"{name}_W", rng.normal(0.0, np.sqrt(2.0 / d), (d, d)), "dense")
        add(f"{name}_b", np.zeros(d), "dense")
        add(f"{name}_gamma", np.ones(d), "norm")
        add(f"{name}_beta", np.zeros(d), "norm")
        add(f"{name}_rmean", np.zeros(d), "norm")
        add(f"{name}_rvar", np.ones(d), "norm")
    add("head_W", rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.n_tasks)), "dense")
    add("head_b", np.zeros(cfg.n_tasks), "dense")
    return ParamSet(tensors, tags)


# ---------------------------------------------------------------------------
# Batch packing

@dataclass
class PackedSplit:
    """Tokenized patients: one (k_i, max_len) int32 matrix per patient."""

    rows: list[np.ndarray]
    labels: np.ndarray  # (n, t) float64

    def __len__(self) -> int:
        return len(self.rows)


def pack_patients(patients: list[PatientRecord], dictionary: CodeDictionary,
                  vocab: Vocabulary, cfg: ModelConfig) -> PackedSplit:
    rows = []
    labels = []
    for p in patients:
        lines = linearize_patient(p, dictionary)
        rows.append(np.stack([tokenize(r, vocab, cfg.max_len) for r in lines]))
        labels.append(p.labels)
    return PackedSplit(rows, np.asarray(labels, dtype=np.float64))


def pack_batch(split: PackedSplit, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [split.rows[i] for i in indices]
    ids = np.concatenate(rows, axis=0)
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum([r.shape[0] for r in rows], out=offsets[1:])
    return ids, offsets, split.labels[list(indices)]


# ---------------------------------------------------------------------------
# Forward / backward

def _attention_forward(h, offsets, params, name):
    d = h.shape[1]
    scale = 1.0 / np.sqrt(d)
    q = h @ params[f"{name}_Wq"]
    k = h @ params[f"{name}_Wk"]
    v = h @ params[f"{name}_Wv"]
    out = np.empty_like(h)
    probs = []
    for s in range(len(offsets) - 1):
        lo, hi = offsets[s], offsets[s + 1]
        scores = (q[lo:hi] @ k[lo:hi].T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=1, keepdims=True)
        out[lo:hi] = p @ v[lo:hi]
        probs.append(p)
    return out, {"q": q, "k": k, "v": v, "probs": probs, "scale": scale}


def _attention_backward(dout, att, h_in, offsets, params, name, grads):
    q, k, v, probs, scale = att["q"], att["k"], att["v"], att["probs"], att["scale"]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for s in range(len(offsets) - 1):
        lo, hi = offsets[s], offsets[s + 1]
        p = probs[s]
        dv[lo:hi] = p.T @ dout[lo:hi]
        dp = dout[lo:hi] @ v[lo:hi].T
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dq[lo:hi] = (ds @ k[lo:hi]) * scale
        dk[lo:hi] = (ds.T @ q[lo:hi]) * scale
    grads[f"{name}_Wq"] += h_in.T @ dq
    grads[f"{name}_Wk"] += h_in.T @ dk
    grads[f"{name}_Wv"] += h_in.T @ dv
    return (dq @ params[f"{name}_Wq"].T + dk @ params[f"{name}_Wk"].T
            + dv @ params[f"{name}_Wv"].T)


def forward(params: ParamSet, cfg: ModelConfig, ids: np.ndarray,
            offsets: np.ndarray, training: bool) -> dict:
    """Run the full encoder; returns a cache holding every intermediate."""
    if params["embed"].shape[1] != cfg.embed_dim:
        raise ValueError("parameter set does not match the model configuration")
    if ids.size and ids.max() >= params["embed"].shape[0]:
        raise ValueError("token id out of range for the embedding table")
    h, counts = kernels.embedding_bag_forward(params["embed"], ids)
    cache = {"ids": ids, "offsets": offsets, "counts": counts,
             "training": training, "blocks": []}
    for stage, name in cfg.block_names():
        blk = {"name": name, "h_in": h}
        if cfg.attention and stage == "agg":
            att_out, att_cache = _attention_forward(h, offsets, params, name)
            h2 = h + att_out
            blk["att"] = att_cache
        else:
            h2 = h
        a = h2 @ params[f"{name}_W"] + params[f"{name}_b"]
        if training:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
        else:
            mu = params[f"{name}_rmean"]
            var = params[f"{name}_rvar"]
        inv = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (a - mu) * inv
        y = params[f"{name}_gamma"] * xhat + params[f"{name}_beta"]
        h = np.maximum(y, 0.0)
        blk.update(h2=h2, mu=mu, var=var, inv=inv, xhat=xhat, relu_mask=y > 0.0)
        cache["blocks"].append(blk)
        if name == f"enc{cfg.blocks_per_stage}":
            cache["event_vectors"] = h
    cache["h_final"] = h
    cache["pooled"] = kernels.segment_mean_forward(h, offsets)
    cache["logits"] = cache["pooled"] @ params["head_W"] + params["head_b"]
    return cache


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy in the numerically stable form."""
    return np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def batch_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(bce_with_logits(logits, labels).sum(axis=1).mean())


def backward(params: ParamSet, cfg: ModelConfig, cache: dict,
             labels: np.ndarray) -> ParamSet:
    """Exact gradient of the mean batch loss wrt every parameter tensor.

    Running statistics get zero gradient (they do not enter the training
    loss); in inference mode the batch-stat terms drop out.
    """
    grads = params.zeros_like()
    n_batch = labels.shape[0]
    offsets = cache["offsets"]
    dlogits = (_sigmoid(cache["logits"]) - labels) / n_batch
    grads["head_W"] += cache["pooled"].T @ dlogits
    grads["head_b"] += dlogits.sum(axis=0)
    dpooled = dlogits @ params["head_W"].T
    dh = kernels.segment_mean_backward(dpooled, offsets, cache["h_final"].shape[0])
    for blk in reversed(cache["blocks"]):
        name = blk["name"]
        dy = dh * blk["relu_mask"]
        grads[f"{name}_gamma"] += (dy * blk["xhat"]).sum(axis=0)
        grads[f"{name}_beta"] += dy.sum(axis=0)
        dxhat = dy * params[f"{name}_gamma"]
        if cache["training"]:
            da = blk["inv"] * (dxhat - dxhat.mean(axis=0)
                               - blk["xhat"] * (dxhat * blk["xhat"]).mean(axis=0))
        else:
            da = dxhat * blk["inv"]
        grads[f"{name}_W"] += blk["h2"].T @ da
        grads[f"{name}_b"] += da.sum(axis=0)
        dh2 = da @ params[f"{name}_W"].T
        if "att" in blk:
            dh = dh2 + _attention_backward(dh2, blk["att"], blk["h_in"], offsets,
                                           params, name, grads.tensors)
        else:
            dh = dh2
    grads["embed"] += kernels.embedding_bag_backward(
        dh, cache["ids"], cache["counts"], params["embed"].shape[0])
    return grads


def prox_gradient(params: ParamSet, prox: ProxTerm) -> ParamSet:
    """mu * (w - anchor) over trainable tensors; the gradient of
    (mu/2) * ||w - anchor||^2."""
    out = params.zeros_like()
    for name in params.trainable_names():
        out[name] = prox.mu * (params[name] - prox.anchor[name])
    return out


def grad(params: ParamSet, cfg: ModelConfig, ids: np.ndarray, offsets: np.ndarray,
         labels: np.ndarray, prox: ProxTerm | None = None,
         training: bool = True) -> tuple[float, ParamSet, dict]:
    """Loss and exact gradient for one packed batch.

    Returns (data loss, gradients, forward cache). The loss excludes the
    proximal penalty; the gradients include it when ``prox`` is given.
    """
    if labels.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    cache = forward(params, cfg, ids, offsets, training)
    loss = batch_loss(cache["logits"], labels)
    if not np.isfinite(loss):
        bad = [n for n, t in params.tensors.items() if not np.isfinite(t).all()]
        raise NonFiniteLossError(
            f"non-finite training loss ({loss}); non-finite tensors: {bad or 'none'}; "
            f"logit range [{np.nanmin(cache['logits'])}, {np.nanmax(cache['logits'])}]")
    grads = backward(params, cfg, cache, labels)
    if prox is not None:
        pg = prox_gradient(params, prox)
        for name in params.trainable_names():
            grads.tensors[name] += pg[name]
    return loss, grads, cache


def grad_batch(params: ParamSet, cfg: ModelConfig, batch: list[PatientRecord],
               dictionary: CodeDictionary, vocab: Vocabulary,
               prox: ProxTerm | None = None) -> tuple[float, ParamSet]:
    """Convenience wrapper: gradient of the mean loss over raw patients."""
    split = pack_patients(batch, dictionary, vocab, cfg)
    ids, offsets, labels = pack_batch(split, range(len(split)))
    loss, grads, _ = grad(params, cfg, ids, offsets, labels, prox)
    return loss, grads


# ---------------------------------------------------------------------------
# Inference-mode operations on individual pieces of the pipeline

def encode_events(token_rows: np.ndarray, params: ParamSet, cfg: ModelConfig) -> np.ndarray:
    """Event vectors (one per token sequence), inference normalization."""
    token_rows = np.atleast_2d(np.asarray(token_rows, dtype=np.int32))
    offsets = np.array([0, token_rows.shape[0]], dtype=np.int64)
    cache = forward(params, cfg, token_rows, offsets, training=False)
    return cache["event_vectors"]


def aggregate(event_vectors: np.ndarray, params: ParamSet, cfg: ModelConfig) -> np.ndarray:
    """Patient embedding: aggregator blocks then the mean over events."""
    z = np.atleast_2d(np.asarray(event_vectors, dtype=np.float64))
    if z.shape[0] < 1:
        raise ValueError("need at least one event vector")
    h = z
    offsets = np.array([0, z.shape[0]], dtype=np.int64)
    for stage, name in cfg.block_names():
        if stage != "agg":
            continue
        if cfg.attention:
            att_out, _ = _attention_forward(h, offsets, params, name)
            h = h + att_out
        a = h @ params[f"{name}_W"] + params[f"{name}_b"]
        inv = 1.0 / np.sqrt(params[f"{name}_rvar"] + cfg.bn_eps)
        xhat = (a - params[f"{name}_rmean"]) * inv
        h = np.maximum(params[f"{name}_gamma"] * xhat + params[f"{name}_beta"], 0.0)
    return kernels.segment_mean_forward(h, offsets)[0]


def predict(embedding: np.ndarray, params: ParamSet) -> np.ndarray:
    """Per-task logits for one patient embedding."""
    return np.asarray(embedding, dtype=np.float64) @ params["head_W"] + params["head_b"]


def task_loss(logits: np.ndarray, labels) -> float:
    """Sum of per-task binary cross-entropies for one patient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    return float(bce_with_logits(logits, labels).sum())


def patient_embeddings(params: ParamSet, cfg: ModelConfig, split: PackedSplit,
                       batch_size: int = 256) -> np.ndarray:
    """(n, d) matrix of patient embeddings, inference mode."""
    chunks = []
    for start in range(0, len(split), batch_size):
        idx = range(start, min(start + batch_size, len(split)))
        ids, offsets, _ = pack_batch(split, idx)
        cache = forward(params, cfg, ids, offsets, training=False)
        chunks.append(cache["pooled"])
    return np.concatenate(chunks, axis=0)


def score_split(params: ParamSet, cfg: ModelConfig, split: PackedSplit,
                batch_size: int = 256) -> np.ndarray:
    """(n, t) task logits over a packed split, inference mode."""
    chunks = []
    for start in range(0, len(split), batch_size):
        idx = range(start, min(start + batch_size, len(split)))
        ids, offsets, _ = pack_batch(split, idx)
        cache = forward(params, cfg, ids, offsets, training=False)
        chunks.append(cache["logits"])
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# Local training

@dataclass
class LocalTrainResult:
    params: ParamSet
    epoch_losses: list[float] = field(default_factory=list)


def _update_running_stats(params: ParamSet, cache: dict, momentum: float) -> None:
    for blk in cache["blocks"]:
        name = blk["name"]
        params[f"{name}_rmean"] = ((1.0 - momentum) * params[f"{name}_rmean"]
                                   + momentum * blk["mu"])
        params[f"{name}_rvar"] = ((1.0 - momentum) * params[f"{name}_rvar"]
                                  + momentum * blk["var"])


def train_local(params: ParamSet, cfg: ModelConfig, data: PackedSplit,
                epochs: int, opt: OptimizerConfig,
                prox: ProxTerm | None = None, seed: int = 0) -> LocalTrainResult:
    """Plain SGD over shuffled minibatches; deterministic for a fixed seed."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(data) == 0:
        raise ValueError("training split is empty")
    params = params.copy()
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 7001]))
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            ids, offsets, labels = pack_batch(data, idx)
            loss, grads, cache = grad(params, cfg, ids, offsets, labels, prox)
            for name in params.trainable_names():
                params.tensors[name] -= opt.lr * grads[name]
            _update_running_stats(params, cache, cfg.bn_momentum)
            total += loss * len(idx)
        losses.append(total / len(order))
        if not params.allfinite():
            raise TrainingDivergedError(
                f"parameters became non-finite after epoch {epoch + 1}")
    return LocalTrainResult(params, losses)


def derive_seed(*parts) -> int:
    """Stable seed stream derivation for per-(round, client) randomness."""
    return stable_hash(*parts)
