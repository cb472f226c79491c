"""Cross-modal relevance scoring and filtering of mined texts.

Every mined text is scored against its own track: the audio is cut into
non-overlapping model-length blocks, each block is compared with the text
by cosine similarity, and the block scores are averaged. Items scoring below
the threshold are removed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .audio import AudioClip, fit_length
from .encoders import TowerModel, encode_features, encode_text, featurize_audio
from .textminer import MinedDescription

logger = logging.getLogger(__name__)


def segment_audio(clip: AudioClip, block_s: float = 10.0) -> list[AudioClip]:
    """Consecutive non-overlapping blocks from offset 0.

    A trailing remainder of at least half a block is zero-padded into a
    final block; shorter remainders are dropped. Clips no longer than one
    block give exactly one padded block.
    """
    if len(clip) == 0:
        raise ValueError("cannot segment an empty clip")
    n = int(round(block_s * clip.sample_rate))
    if len(clip) <= n:
        return [fit_length(clip, n)]
    full, rest = divmod(len(clip), n)
    blocks = [AudioClip(clip.samples[i * n : (i + 1) * n], clip.sample_rate) for i in range(full)]
    if 2 * rest >= n:
        blocks.append(fit_length(AudioClip(clip.samples[full * n :], clip.sample_rate), n))
    return blocks


def block_features(model: TowerModel, clip: AudioClip) -> np.ndarray:
    blocks = segment_audio(clip, model.config.clip_seconds)
    return np.stack([featurize_audio(b, model.config.features) for b in blocks])


def block_embeddings(model: TowerModel, clip: AudioClip) -> np.ndarray:
    return encode_features(model, block_features(model, clip))


def _mean_cosine(blocks: np.ndarray, text_vec: np.ndarray) -> float:
    return float(np.mean(np.clip(blocks @ text_vec, -1.0, 1.0)))


@dataclass
class RelevanceScore:
    track_id: str
    text: str
    score: float
    block_count: int
    kind: str = "aspect"


def score_pair(model: TowerModel, text: str, clip: AudioClip, track_id: str = "") -> RelevanceScore:
    if not text.strip():
        raise ValueError("cannot score an empty text")
    blocks = block_embeddings(model, clip)
    return RelevanceScore(track_id, text, _mean_cosine(blocks, encode_text(model, text)), len(blocks))


@dataclass
class FilterReport:
    items: list[tuple[RelevanceScore, bool]] = field(default_factory=list)
    threshold: float = 0.0
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def kept(self) -> list[RelevanceScore]:
        return [s for s, k in self.items if k]

    @property
    def removed(self) -> list[RelevanceScore]:
        return [s for s, k in self.items if not k]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s, kept in self.items:
                row = {"track_id": s.track_id, "kind": s.kind, "text": s.text, "score": s.score, "kept": kept}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    def summary(self) -> dict:
        return {
            "threshold": self.threshold,
            "kept": len(self.kept),
            "removed": len(self.removed),
            "errors": dict(sorted(self.errors.items())),
        }


def filter_dataset(
    model: TowerModel,
    mined: Mapping[str, MinedDescription],
    audio: Mapping[str, AudioClip] | Callable[[str], AudioClip],
    threshold: float = 0.0,
) -> tuple[dict[str, MinedDescription], FilterReport]:
    """Score every aspect and sentence against its track and drop those below ``threshold``.

    ``audio`` maps track ids to clips (a mapping or a loader function).
    Tracks whose audio cannot be resolved are passed through unfiltered and
    recorded in ``report.errors``. Tracks left with no texts stay in the
    result with empty lists.
    """
    load = audio if callable(audio) else audio.__getitem__
    report = FilterReport(threshold=threshold)
    text_cache: dict[str, np.ndarray] = {}
    out = {}
    for track_id, desc in mined.items():
        try:
            blocks = block_embeddings(model, load(track_id))
        except Exception as exc:  # noqa: BLE001 - any loader failure flags the track
            logger.warning("cannot score %s: %s", track_id, exc)
            report.errors[track_id] = f"{type(exc).__name__}: {exc}"
            out[track_id] = desc
            continue
        kept = MinedDescription(track_id, aspect_scores=[], sentence_scores=[])
        for kind, text, source in desc.items():
            if text not in text_cache:
                text_cache[text] = encode_text(model, text)
            rs = RelevanceScore(track_id, text, _mean_cosine(blocks, text_cache[text]), len(blocks), kind)
            keep = not rs.score < threshold
            report.items.append((rs, keep))
            if keep:
                kept.add(kind, text, source)
                (kept.aspect_scores if kind == "aspect" else kept.sentence_scores).append(rs.score)
        out[track_id] = kept
    return out, report
