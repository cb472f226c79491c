"""Tag-based retrieval and zero-shot tagging / classification evaluation.

An evaluation manifest is JSON Lines with ``track_id``, ``audio_ref``,
``labels`` and an optional ``single_label``. Label strings are used
verbatim as queries and class names: no case folding, no prompt template.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .audio import AudioClip, read_wav, resolve
from .encoders import TowerModel, encode_features, encode_texts
from .relevance import block_features

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


# --- data -------------------------------------------------------------------


@dataclass
class EvalItem:
    track_id: str
    audio_ref: str
    labels: list[str] = field(default_factory=list)
    single_label: str | None = None


class EvalCollection:
    """Tracks to evaluate on; audio is loaded on first use."""

    def __init__(self, items: Sequence[EvalItem], base_dir: Path | None = None, clips=None):
        ids = [it.track_id for it in items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate track_id in evaluation collection")
        self.items = list(items)
        self.base_dir = base_dir
        self._clips = list(clips) if clips is not None else None

    def __len__(self):
        return len(self.items)

    @property
    def track_ids(self) -> list[str]:
        return [it.track_id for it in self.items]

    @property
    def clips(self) -> list[AudioClip]:
        if self._clips is None:
            self._clips = [read_wav(resolve(it.audio_ref, self.base_dir)) for it in self.items]
        return self._clips

    def relevance_index(self) -> "QueryRelevanceIndex":
        return QueryRelevanceIndex.from_labels({it.track_id: it.labels for it in self.items})


def load_manifest(path) -> EvalCollection:
    path = Path(path)
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                items.append(
                    EvalItem(d["track_id"], d["audio_ref"], list(d.get("labels") or ()), d.get("single_label"))
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    return EvalCollection(items, base_dir=path.parent)


def save_manifest(items: Iterable[EvalItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            d = {"track_id": it.track_id, "audio_ref": it.audio_ref, "labels": it.labels}
            if it.single_label is not None:
                d["single_label"] = it.single_label
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")


@dataclass
class QueryRelevanceIndex:
    queries: dict[str, frozenset[str]]

    @classmethod
    def from_labels(cls, labels: Mapping[str, Iterable[str]]) -> "QueryRelevanceIndex":
        """Each distinct label becomes a query; its relevant tracks carry it verbatim."""
        queries: dict[str, set] = {}
        for track_id, labs in labels.items():
            for lab in labs:
                queries.setdefault(lab, set()).add(track_id)
        return cls({q: frozenset(t) for q, t in sorted(queries.items()) if t})

    def check(self, track_ids: Iterable[str]) -> None:
        known = set(track_ids)
        for q, rel in self.queries.items():
            missing = rel - known
            if missing:
                raise ValueError(f"query {q!r} refers to unknown tracks {sorted(missing)}")


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "metrics_pct": {k: f"{100 * v:.1f}" for k, v in self.metrics.items()},
            "config": self.config,
            "details": self.details,
        }

    def write(self, json_path, tsv_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        if tsv_path is not None:
            with open(tsv_path, "w", encoding="utf-8") as fh:
                fh.write("metric\tvalue\tpercent\n")
                for k, v in self.metrics.items():
                    fh.write(f"{k}\t{v!r}\t{100 * v:.1f}\n")


# --- embedding --------------------------------------------------------------


def embed_block_features(model: TowerModel, per_clip_feats: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of block embeddings per clip, renormalised when there is more than one block."""
    out = []
    for feats in per_clip_feats:
        emb = encode_features(model, feats)
        if len(emb) == 1:
            out.append(emb[0])
        else:
            v = emb.mean(axis=0)
            out.append(v / np.linalg.norm(v))
    return np.stack(out)


def embed_collection(model: TowerModel, clips: Sequence[AudioClip]) -> np.ndarray:
    if not clips:
        raise ValueError("empty collection")
    return embed_block_features(model, [block_features(model, c) for c in clips])


# --- retrieval metrics ------------------------------------------------------


def rank_tracks(scores: np.ndarray, track_ids: Sequence[str]) -> list[int]:
    """Indices by descending score; equal scores fall back to track_id order."""
    id_rank = np.argsort(np.argsort(np.asarray(track_ids, dtype=object), kind="stable"), kind="stable")
    return list(np.lexsort((id_rank, -np.asarray(scores))))


def recall_at_k(ranking: Sequence, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("empty relevant set")
    return len(set(ranking[:k]) & set(relevant)) / len(relevant)


def average_precision_at_k(ranking: Sequence, relevant, k: int) -> float:
    """Sum of precision@r at relevant ranks r <= k, over min(|relevant|, k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("empty relevant set")
    relevant = set(relevant)
    # exact rational sum, rounded once: [1,0,1] at k=3 gives float(5/6) exactly
    hits, total = 0, Fraction(0)
    for r, item in enumerate(ranking[:k], start=1):
        if item in relevant:
            hits += 1
            total += Fraction(hits, r)
    return float(total / min(len(relevant), k))


def retrieval_metrics(
    audio_emb: np.ndarray,
    track_ids: Sequence[str],
    query_emb: np.ndarray,
    queries: Sequence[str],
    index: QueryRelevanceIndex,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[str, float]:
    """Macro-averaged mAP@k and R@k over queries."""
    track_ids = list(track_ids)
    sums = {f"mAP@{k}": 0.0 for k in ks} | {f"R@{k}": 0.0 for k in ks}
    for q, qv in zip(queries, query_emb):
        order = rank_tracks(audio_emb @ qv, track_ids)
        ranking = [track_ids[i] for i in order]
        rel = index.queries[q]
        for k in ks:
            sums[f"mAP@{k}"] += average_precision_at_k(ranking, rel, k)
            sums[f"R@{k}"] += recall_at_k(ranking, rel, k)
    return {name: v / len(queries) for name, v in sums.items()}


def evaluate_retrieval(
    model: TowerModel,
    collection: EvalCollection,
    index: QueryRelevanceIndex | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    audio_emb: np.ndarray | None = None,
) -> MetricsReport:
    index = index or collection.relevance_index()
    index.check(collection.track_ids)
    queries = list(index.queries)
    if not queries:
        raise ValueError("no usable queries")
    if audio_emb is None:
        audio_emb = embed_collection(model, collection.clips)
    query_emb = encode_texts(model, queries)
    metrics = retrieval_metrics(audio_emb, collection.track_ids, query_emb, queries, index, ks)
    return MetricsReport(
        metrics,
        config={"task": "retrieval", "ks": list(ks)},
        details={"n_queries": len(queries), "n_tracks": len(collection)},
    )


# --- zero-shot tagging and classification -----------------------------------


@dataclass
class TagPredictionMatrix:
    scores: np.ndarray
    labels: list[str]
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.truth is not None:
            if self.truth.shape != self.scores.shape:
                raise ValueError("scores and truth shapes differ")
            if not np.isin(self.truth, (0, 1)).all():
                raise ValueError("truth must be binary")


def zero_shot_scores(model: TowerModel, clips, labels: Sequence[str], audio_emb=None) -> TagPredictionMatrix:
    """Audio-to-label-text similarity for every (clip, label) pair."""
    if not labels:
        raise ValueError("no labels")
    if any(not lab.strip() for lab in labels):
        raise ValueError("empty label string")
    if audio_emb is None:
        audio_emb = embed_collection(model, clips)
    scores = np.clip(audio_emb @ encode_texts(model, labels).T, -1.0, 1.0)
    return TagPredictionMatrix(scores, list(labels))


def _check_binary(truth) -> tuple[np.ndarray, int, int]:
    truth = np.asarray(truth).astype(int)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    return truth, n_pos, n_neg


def roc_auc(scores, truth) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    truth, n_pos, n_neg = _check_binary(truth)
    ranks = rankdata(np.asarray(scores, dtype=float))
    return float((ranks[truth == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, truth) -> float:
    """Average precision: precision at each distinct threshold weighted by the recall increment."""
    truth, n_pos, _ = _check_binary(truth)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    # last position of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(t)[cut]
    precision = tp / (cut + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(predictions, truth) -> float:
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    if predictions.shape != truth.shape or predictions.ndim != 1:
        raise ValueError("accuracy needs one prediction per single-label truth")
    return float(np.mean(predictions == truth))


def tagging_metrics(matrix: TagPredictionMatrix) -> tuple[dict[str, float], list[str]]:
    """Macro ROC-AUC / PR-AUC over labels; labels with a single class are skipped."""
    if matrix.truth is None:
        raise ValueError("tagging metrics need ground truth")
    rocs, prs, skipped = [], [], []
    for j, label in enumerate(matrix.labels):
        col = matrix.truth[:, j]
        if col.min() == col.max():
            logger.warning("skipping label %r: only one class present", label)
            skipped.append(label)
            continue
        rocs.append(roc_auc(matrix.scores[:, j], col))
        prs.append(pr_auc(matrix.scores[:, j], col))
    if not rocs:
        raise ValueError("no label has both positives and negatives")
    return {"ROC-AUC": float(np.mean(rocs)), "PR-AUC": float(np.mean(prs))}, skipped


def evaluate_tagging(model, collection: EvalCollection, labels: Sequence[str] | None = None, audio_emb=None) -> MetricsReport:
    labels = list(labels) if labels else sorted({lab for it in collection.items for lab in it.labels})
    matrix = zero_shot_scores(model, collection.clips if audio_emb is None else None, labels, audio_emb)
    truth = np.array([[int(lab in it.labels) for lab in labels] for it in collection.items])
    matrix.truth = truth
    metrics, skipped = tagging_metrics(matrix)
    per_label = {}
    for j, lab in enumerate(labels):
        if lab not in skipped:
            per_label[lab] = roc_auc(matrix.scores[:, j], truth[:, j])
    return MetricsReport(
        metrics,
        config={"task": "tagging", "n_labels": len(labels)},
        details={"skipped_labels": skipped, "per_label_roc_auc": per_label},
    )


def evaluate_classification(
    model, collection: EvalCollection, classes: Sequence[str] | None = None, audio_emb=None
) -> MetricsReport:
    if any(it.single_label is None for it in collection.items):
        raise ValueError("classification needs a single_label on every item")
    classes = list(classes) if classes else sorted({it.single_label for it in collection.items})
    matrix = zero_shot_scores(model, collection.clips if audio_emb is None else None, classes, audio_emb)
    pred = np.argmax(matrix.scores, axis=1)
    truth = np.array([classes.index(it.single_label) for it in collection.items])
    return MetricsReport(
        {"accuracy": accuracy(pred, truth)},
        config={"task": "classification", "n_classes": len(classes)},
        details={"classes": classes},
    )

