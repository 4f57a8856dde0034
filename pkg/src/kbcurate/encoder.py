"""Desk-scale shared bi-encoder, MultiMargin loss and the training loop.

Text is mapped to hashed unigram+bigram features (sublinear tf), projected
by a single weight matrix and L2-normalized. Queries and documents share
the weights.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .lexical import tokenize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kbcurate-encoder"
CHECKPOINT_VERSION = 1
DISTANCE_SPACES = ("cosine", "angular")
_ZERO_NORM = 1e-12
# keeps d(arccos)/dc finite at c = +-1
_ANGULAR_CLIP = 1.0 - 1e-9


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 8
    learning_rate: float = 0.5
    warmup: float = 0.1
    weight_decay: float = 0.0
    seed: int = 7
    distance_space: str = "cosine"
    # rows longer than this are rescaled after every step; None disables
    max_row_norm: float | None = None
    # rows longer than this multiple of their initial norm are rescaled; None disables
    row_norm_growth: float | None = None

    def __post_init__(self) -> None:
        if self.max_row_norm is not None and self.max_row_norm <= 0:
            raise ValueError("max_row_norm must be > 0")
        if self.row_norm_growth is not None and self.row_norm_growth <= 0:
            raise ValueError("row_norm_growth must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate >= 0 required")
        if not 0 <= self.warmup <= 1 or self.weight_decay < 0:
            raise ValueError("warmup must lie in [0, 1] and weight_decay be >= 0")
        if self.distance_space not in DISTANCE_SPACES:
            raise ValueError(f"distance_space must be one of {DISTANCE_SPACES}")


@dataclass
class EncoderModel:
    n_features: int
    dim: int
    hash_seed: int
    weights: np.ndarray
    _feature_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def init(
        cls,
        n_features: int = 1 << 14,
        dim: int = 64,
        seed: int = 7,
        hash_seed: int = 13,
        scheme: str = "gaussian",
    ) -> "EncoderModel":
        """Fresh weights with unit-scale rows.

        ``gaussian`` draws N(0, 1/d) entries. ``lexical`` maps each unigram
        bucket to its own column (or a random signed column when d is smaller
        than the unigram space) and starts bigram rows at zero, so the
        untrained encoder is a cosine over unigram counts.
        """
        if n_features < 1 or dim < 1:
            raise ValueError("n_features and dim must be >= 1")
        rng = np.random.default_rng(seed)
        if scheme == "gaussian":
            w = rng.standard_normal((n_features, dim)) / math.sqrt(dim)
        elif scheme == "lexical":
            w = np.zeros((n_features, dim))
            n_uni = unigram_buckets(n_features)
            rows = np.arange(n_uni)
            if dim >= n_uni:
                w[rows, rows] = 1.0
            else:
                w[rows, rng.integers(0, dim, n_uni)] = rng.choice([-1.0, 1.0], n_uni)
        elif scheme == "projection":
            w = np.zeros((n_features, dim))
            n_uni = unigram_buckets(n_features)
            w[:n_uni] = rng.standard_normal((n_uni, dim)) / math.sqrt(dim)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        return cls(n_features, dim, hash_seed, w)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.n_features, self.dim, self.hash_seed, self.weights.copy())

    @property
    def fallback(self) -> np.ndarray:
        v = np.zeros(self.dim)
        v[0] = 1.0
        return v

    def features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._feature_cache.get(text)
        if hit is None:
            hit = featurize(text, self.n_features, self.hash_seed)
            if len(self._feature_cache) < 500_000:
                self._feature_cache[text] = hit
        return hit

    def feature_matrix(self, texts: Sequence[str]) -> sp.csr_matrix:
        indptr = [0]
        indices, data = [], []
        for t in texts:
            idx, val = self.features(t)
            indices.append(idx)
            data.append(val)
            indptr.append(indptr[-1] + len(idx))
        return sp.csr_matrix(
            (
                np.concatenate(data) if data else np.zeros(0),
                np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
                np.asarray(indptr),
            ),
            shape=(len(texts), self.n_features),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format=np.array(CHECKPOINT_FORMAT),
                version=np.array(CHECKPOINT_VERSION),
                n_features=np.array(self.n_features),
                dim=np.array(self.dim),
                hash_seed=np.array(self.hash_seed),
                weights=self.weights,
            )

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        with np.load(path) as z:
            if str(z["format"]) != CHECKPOINT_FORMAT or int(z["version"]) != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
            w = z["weights"]
            n, d = int(z["n_features"]), int(z["dim"])
            if w.shape != (n, d):
                raise ValueError(f"{path}: weight shape {w.shape} does not match header ({n}, {d})")
            return cls(n, d, int(z["hash_seed"]), w.copy())


@lru_cache(maxsize=1 << 18)
def _bucket(feature: str, n_features: int, hash_seed: int) -> int:
    key = hash_seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % n_features


def featurize(text: str, n_features: int, hash_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted bucket indices and 1 + ln(tf) values.

    Unigrams hash into the lower half of the feature space and bigrams into
    the upper half, so the far more numerous bigrams never collide with a
    unigram.
    """
    toks = tokenize(text)
    n_uni = unigram_buckets(n_features)
    counts: dict[int, int] = {}
    for t in toks:
        j = _bucket(t, n_uni, hash_seed)
        counts[j] = counts.get(j, 0) + 1
    if n_features > n_uni:
        for a, b in zip(toks, toks[1:]):
            j = n_uni + _bucket(f"{a} {b}", n_features - n_uni, hash_seed)
            counts[j] = counts.get(j, 0) + 1
    idx = np.array(sorted(counts), dtype=np.int64)
    val = np.array([1.0 + math.log(counts[j]) for j in idx], dtype=np.float64)
    return idx, val


def unigram_buckets(n_features: int) -> int:
    return max(1, (n_features + 1) // 2)


def _normalize_rows(z: np.ndarray, fallback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    dead = norms < _ZERO_NORM
    v = z / np.where(dead, 1.0, norms)[:, None]
    v[dead] = fallback
    return v, norms


def scale_by_idf(model: EncoderModel, texts: Sequence[str], power: float = 2.0) -> np.ndarray:
    """Multiply each weight row by idf**power over ``texts``, rescaled so the largest factor is 1.

    Returns the idf vector.

    An unsupervised warm start: frequent features shrink before any training.
    """
    if not texts:
        raise ValueError("need at least one text")
    x = model.feature_matrix(texts)
    df = np.bincount(x.indices, minlength=model.n_features)
    n = len(texts)
    idf = np.log((n - df + 0.5) / (df + 0.5) + 1.0)
    scale = idf**power
    # cosine is scale-free; a unit top row keeps learning rates comparable across powers
    model.weights *= (scale / scale.max())[:, None]
    return idf


def encode(model: EncoderModel, text: str) -> np.ndarray:
    return encode_many(model, [text])[0]


def encode_many(model: EncoderModel, texts: Sequence[str]) -> np.ndarray:
    if not texts:
        return np.zeros((0, model.dim))
    z = model.feature_matrix(texts) @ model.weights
    return _normalize_rows(np.asarray(z), model.fallback)[0]


# -- distance and loss ------------------------------------------------------


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(min(2.0, max(0.0, 1.0 - float(u @ v) / (nu * nv))))


def margin_threshold(mu: float | np.ndarray) -> float | np.ndarray:
    mu_arr = np.asarray(mu, dtype=float)
    if np.any((mu_arr < 0) | (mu_arr > 2)) or np.any(np.isnan(mu_arr)):
        raise ValueError(f"margin mu must lie in [0, 2], got {mu}")
    out = np.arccos(1.0 - mu_arr)
    return float(out) if np.ndim(out) == 0 else out


def multimargin_loss(dist: float, label: int, mu: float) -> float:
    """Squared hinge pulling positives inside, and pushing negatives outside, arccos(1 - mu)."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    theta = margin_threshold(mu)
    if label == 1:
        return max(0.0, dist - theta) ** 2
    return max(0.0, theta - dist) ** 2


@dataclass
class Pair:
    query_text: str
    doc_text: str
    label: int
    mu: float


def _forward_backward(
    model: EncoderModel, batch: Sequence[Pair], distance_space: str = "cosine"
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss plus its gradient restricted to the touched weight rows."""
    b = len(batch)
    x = model.feature_matrix([p.query_text for p in batch] + [p.doc_text for p in batch])
    rows = np.unique(x.indices)
    remap = np.searchsorted(rows, x.indices)
    xs = sp.csr_matrix((x.data, remap, x.indptr), shape=(2 * b, len(rows)))
    w = model.weights[rows]
    z = xs @ w
    v, norms = _normalize_rows(z, model.fallback)
    vq, vd = v[:b], v[b:]
    cos = np.einsum("ij,ij->i", vq, vd)

    labels = np.array([p.label for p in batch], dtype=float)
    theta = margin_threshold(np.array([p.mu for p in batch], dtype=float))
    if distance_space == "angular":
        c = np.clip(cos, -_ANGULAR_CLIP, _ANGULAR_CLIP)
        dist = np.arccos(c)
        ddist_dc = -1.0 / np.sqrt(1.0 - c * c)
    else:
        dist = 1.0 - cos
        ddist_dc = -np.ones(b)
    pos_gap = np.maximum(0.0, dist - theta)
    neg_gap = np.maximum(0.0, theta - dist)
    losses = labels * pos_gap**2 + (1.0 - labels) * neg_gap**2
    dl_ddist = (2.0 * labels * pos_gap - 2.0 * (1.0 - labels) * neg_gap) / b
    g_cos = dl_ddist * ddist_dc

    g_v = np.concatenate([g_cos[:, None] * vd, g_cos[:, None] * vq])
    radial = np.einsum("ij,ij->i", g_v, v)
    g_z = (g_v - radial[:, None] * v) / np.where(norms < _ZERO_NORM, 1.0, norms)[:, None]
    g_z[norms < _ZERO_NORM] = 0.0
    g_rows = xs.T @ g_z
    return float(losses.mean()), rows, np.asarray(g_rows)


def loss_gradient(
    model: EncoderModel, batch: Sequence[Pair], distance_space: str = "cosine"
) -> tuple[float, np.ndarray]:
    if not batch:
        raise ValueError("empty batch")
    loss, rows, g_rows = _forward_backward(model, batch, distance_space)
    grad = np.zeros_like(model.weights)
    grad[rows] = g_rows
    return loss, grad


def batch_loss(model: EncoderModel, batch: Sequence[Pair], distance_space: str = "cosine") -> float:
    return _forward_backward(model, batch, distance_space)[0]


# -- training -----------------------------------------------------------------


def lr_schedule(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warmup to ``peak`` over the first ``warmup`` fraction, then linear decay to 0."""
    if total <= 0:
        return 0.0
    n_warm = int(round(warmup * total))
    if step < n_warm:
        return peak * (step + 1) / n_warm
    return peak * max(0.0, (total - step) / max(1, total - n_warm))


@dataclass
class TraceRow:
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: EncoderModel
    epoch_loss: list[float]
    trace: list[TraceRow]

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "loss", "lr"])
            for r in self.trace:
                w.writerow([r.epoch, r.step, f"{r.loss:.10g}", f"{r.lr:.10g}"])


def train(
    model: EncoderModel,
    examples: Sequence,
    query_texts: Mapping[str, str],
    doc_texts: Mapping[str, str],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch gradient descent on the MultiMargin loss.

    ``examples`` are TrainingExample objects; their texts are resolved through
    ``query_texts`` (query_id -> rendered text) and ``doc_texts``
    (doc_id -> encoder input). The input model is not modified.
    """
    from .sampling import assemble_batches

    model = model.copy()
    limits = None
    if cfg.row_norm_growth is not None:
        limits = cfg.row_norm_growth * np.linalg.norm(model.weights, axis=1)
    if cfg.max_row_norm is not None:
        cap = np.full(model.n_features, cfg.max_row_norm)
        limits = cap if limits is None else np.minimum(limits, cap)
    epoch_batches = [assemble_batches(examples, cfg.batch_size, cfg.seed + e) for e in range(cfg.epochs)]
    total = sum(len(bs) for bs in epoch_batches)
    trace: list[TraceRow] = []
    epoch_loss: list[float] = []
    step = 0
    for epoch, batches in enumerate(epoch_batches):
        weighted, count = 0.0, 0
        for batch in batches:
            pairs = [Pair(query_texts[e.query_id], doc_texts[e.doc_id], e.label, e.mu) for e in batch]
            lr = lr_schedule(step, total, cfg.learning_rate, cfg.warmup)
            loss, rows, g_rows = _forward_backward(model, pairs, cfg.distance_space)
            if not math.isfinite(loss) or not np.all(np.isfinite(g_rows)):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch} step {step}")
            if lr > 0:
                # decay is lazy: only rows the batch touched shrink
                if cfg.weight_decay:
                    model.weights[rows] *= 1.0 - lr * cfg.weight_decay
                model.weights[rows] -= lr * g_rows
                if limits is not None:
                    norms = np.linalg.norm(model.weights[rows], axis=1)
                    over = norms > limits[rows]
                    if over.any():
                        model.weights[rows[over]] *= (limits[rows[over]] / norms[over])[:, None]
            trace.append(TraceRow(epoch, step, loss, lr))
            weighted += loss * len(batch)
            count += len(batch)
            step += 1
        epoch_loss.append(weighted / count if count else 0.0)
        log.info("epoch %d mean loss %.6f", epoch, epoch_loss[-1])
    return TrainResult(model, epoch_loss, trace)


def mean_loss(
    model: EncoderModel,
    examples: Iterable,
    query_texts: Mapping[str, str],
    doc_texts: Mapping[str, str],
    distance_space: str = "cosine",
) -> float:
    pairs = [Pair(query_texts[e.query_id], doc_texts[e.doc_id], e.label, e.mu) for e in examples]
    return batch_loss(model, pairs, distance_space) if pairs else 0.0
