"""Corpus data model, ingestion heuristics, persistence and statistics.

A corpus file is UTF-8 JSON Lines with one :class:`CorpusRecord` per line.
"""

from __future__ import annotations

import json
import logging
import statistics
import string
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from .audio import resolve, wav_duration

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
DEFAULT_EXCLUDED_SECTIONS = frozenset({"Music video", "Chart performance", "Covers", "Remixes"})


class DuplicateTrackError(ValueError):
    def __init__(self, offenders):
        self.offenders = sorted(offenders)
        super().__init__(f"duplicate track_id(s): {', '.join(self.offenders)}")


class CorpusFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class CorpusRecord:
    track_id: str
    audio_ref: str
    caption: str = ""
    sections: tuple[tuple[str, str], ...] = ()
    genres: tuple[str, ...] = ()
    instruments: tuple[str, ...] = ()
    split: str = "train"
    file_description: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"{self.track_id}: split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "sections", tuple((str(t), str(x)) for t, x in self.sections))
        object.__setattr__(self, "genres", tuple(self.genres))
        object.__setattr__(self, "instruments", tuple(self.instruments))

    def to_dict(self) -> dict:
        return {
            "track_id": self.track_id,
            "audio_ref": self.audio_ref,
            "caption": self.caption,
            "file_description": self.file_description,
            "sections": [[t, x] for t, x in self.sections],
            "metadata": {"genres": list(self.genres), "instruments": list(self.instruments)},
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusRecord":
        meta = d.get("metadata") or {}
        return cls(
            track_id=d["track_id"],
            audio_ref=d["audio_ref"],
            caption=d.get("caption") or "",
            sections=tuple(tuple(s) for s in d.get("sections") or ()),
            genres=tuple(meta.get("genres") or ()),
            instruments=tuple(meta.get("instruments") or ()),
            split=d.get("split", "train"),
            file_description=d.get("file_description") or "",
        )


@dataclass(frozen=True)
class Corpus:
    records: tuple[CorpusRecord, ...]
    # identity is the record list; naming and timestamps are bookkeeping
    name: str = field(default="corpus", compare=False)
    created_at: datetime = field(
        default_factory=lambda: datetime.now(timezone.utc), compare=False
    )
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        dupes = [k for k, n in Counter(r.track_id for r in self.records).items() if n > 1]
        if dupes:
            raise DuplicateTrackError(dupes)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, CorpusRecord]:
        return {r.track_id: r for r in self.records}

    def split(self, name: str) -> list[CorpusRecord]:
        return [r for r in self.records if r.split == name]

    def audio_path(self, record: CorpusRecord) -> Path:
        return resolve(record.audio_ref, self.base_dir)

    def check_trainable(self) -> None:
        empty = [s for s in SPLITS if not self.split(s)]
        if empty:
            raise ValueError(f"corpus {self.name!r} has empty split(s): {', '.join(empty)}")


class SectionExclusionList:
    """Case-insensitive set of article section titles to drop."""

    def __init__(self, titles: Iterable[str] = DEFAULT_EXCLUDED_SECTIONS):
        self.titles = frozenset(titles)
        self._folded = frozenset(t.strip().casefold() for t in self.titles)

    def __contains__(self, title: str) -> bool:
        return title.strip().casefold() in self._folded

    def __repr__(self):
        return f"SectionExclusionList({sorted(self.titles)!r})"


def ingest_records(
    raw_records: Iterable[Mapping],
    exclusions: SectionExclusionList | None = None,
    *,
    name: str = "corpus",
    base_dir: Path | None = None,
    check_audio: bool = False,
    dropped: list | None = None,
) -> Corpus:
    """Curate raw track records into a :class:`Corpus`.

    Raw records use the corpus file schema plus two optional booleans set by
    whoever produced them: ``music_category`` (audio linked to the music
    category; records with ``False`` are dropped) and ``songs_category``
    (article linked to the songs category; when ``False`` the article
    sections are not used). Sections whose title is on the exclusion list
    are removed. Records without an ``audio_ref`` (or, with
    ``check_audio``, whose file does not exist) are dropped; every drop is
    logged and appended to ``dropped`` as ``(track_id, reason)``.
    """
    exclusions = exclusions if exclusions is not None else SectionExclusionList()
    drops = dropped if dropped is not None else []
    raw_records = list(raw_records)

    ids = Counter(r.get("track_id") for r in raw_records)
    dupes = [k for k, n in ids.items() if n > 1]
    if dupes:
        raise DuplicateTrackError(dupes)

    records = []
    for raw in raw_records:
        track_id = raw.get("track_id")
        if not track_id:
            raise ValueError(f"raw record without track_id: {raw!r}")
        reason = None
        if not raw.get("audio_ref"):
            reason = "missing audio_ref"
        elif raw.get("music_category", True) is False:
            reason = "audio not in music category"
        elif check_audio and not resolve(raw["audio_ref"], base_dir).is_file():
            reason = "audio file not found"
        if reason:
            logger.info("dropping %s: %s", track_id, reason)
            drops.append((track_id, reason))
            continue
        sections = raw.get("sections") or ()
        if raw.get("songs_category", True) is False:
            sections = ()
        kept = [(t, x) for t, x in sections if t not in exclusions]
        rec = CorpusRecord.from_dict({**raw, "sections": kept})
        records.append(rec)
    return Corpus(tuple(records), name=name, base_dir=base_dir)


def write_drop_log(path, dropped) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for track_id, reason in dropped:
            fh.write(f"{track_id}\t{reason}\n")


def extract_metadata_aspects(record: CorpusRecord) -> list[str]:
    """Genres then instruments, first occurrence wins, casing untouched."""
    return list(dict.fromkeys([*record.genres, *record.instruments]))


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise CorpusFormatError(line_no, "expected a JSON object")
            for key in ("track_id", "audio_ref"):
                if not isinstance(d.get(key), str) or not d[key]:
                    raise CorpusFormatError(line_no, f"missing or empty field {key!r}")
            try:
                records.append(CorpusRecord.from_dict(d))
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(line_no, str(exc)) from None
    return Corpus(tuple(records), name=path.stem, base_dir=path.parent)


# --- statistics -------------------------------------------------------------

_EDGE_PUNCT = string.punctuation + "“”‘’–—"


@dataclass
class CorpusStats:
    track_count: int
    duration_mean_s: float | None
    duration_median_s: float | None
    aspects_per_track_mean: float | None
    aspects_per_track_median: float | None
    sentences_per_track_mean: float | None
    sentences_per_track_median: float | None
    vocabulary_size: int
    top_aspects: list[tuple[str, int]]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["top_aspects"] = [list(x) for x in self.top_aspects]
        return d


def vocabulary(texts: Iterable[str]) -> set[str]:
    vocab = set()
    for text in texts:
        for tok in text.lower().split():
            tok = tok.strip(_EDGE_PUNCT)
            if tok:
                vocab.add(tok)
    return vocab


def _mean_median(values):
    if not values:
        return None, None
    return statistics.fmean(values), statistics.median_low(values)


def compute_stats(
    corpus: Corpus,
    mined: Mapping[str, object],
    durations: Mapping[str, float] | None = None,
    top_n: int = 10,
) -> CorpusStats:
    """Descriptive statistics over a corpus and its mined descriptions.

    Tracks without a mined entry count as having no texts. Medians are the
    lower median (an element of the data). When ``durations`` is not given
    they are read from the WAV headers; unreadable files are skipped.
    """
    ids = corpus.by_id()
    unknown = set(mined) - set(ids)
    if unknown:
        raise KeyError(f"mined descriptions for unknown tracks: {sorted(unknown)}")

    if durations is None:
        durations = {}
        for rec in corpus.records:
            try:
                durations[rec.track_id] = wav_duration(corpus.audio_path(rec))
            except Exception as exc:  # noqa: BLE001 - any unreadable header
                logger.debug("no duration for %s: %s", rec.track_id, exc)
    dur = [durations[t] for t in ids if t in durations]

    n_aspects, n_sentences, texts = [], [], []
    counts: Counter = Counter()
    for track_id in ids:
        desc = mined.get(track_id)
        aspects = list(getattr(desc, "aspects", ())) if desc is not None else []
        sentences = list(getattr(desc, "sentences", ())) if desc is not None else []
        n_aspects.append(len(aspects))
        n_sentences.append(len(sentences))
        texts.extend(aspects)
        texts.extend(sentences)
        counts.update(aspects)

    d_mean, d_med = _mean_median(dur)
    a_mean, a_med = _mean_median(n_aspects)
    s_mean, s_med = _mean_median(n_sentences)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return CorpusStats(
        track_count=len(ids),
        duration_mean_s=d_mean,
        duration_median_s=d_med,
        aspects_per_track_mean=a_mean,
        aspects_per_track_median=a_med,
        sentences_per_track_mean=s_mean,
        sentences_per_track_median=s_med,
        vocabulary_size=len(vocabulary(texts)),
        top_aspects=top,
    )
