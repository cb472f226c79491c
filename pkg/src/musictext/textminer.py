"""Span extraction of aspects (short phrases) and sentences from free text.

Each description kind gets its own binary token tagger: a token is either
inside a span of that kind or not. Tagger probabilities are thresholded and
maximal runs of positive tokens become character spans.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import Corpus, extract_metadata_aspects

logger = logging.getLogger(__name__)

KINDS = ("aspect", "sentence")
SOURCES = ("caption", "file_description", "article", "metadata")
# sentences shorter than this many tokens are discarded when decoding
MIN_TOKENS = {"aspect": 1, "sentence": 3}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Token(NamedTuple):
    surface: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Split on whitespace; each punctuation character is its own token."""
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Span(NamedTuple):
    start: int
    end: int
    kind: str


@dataclass
class AnnotatedText:
    text: str
    spans: list[Span] = field(default_factory=list)

    def __post_init__(self):
        self.spans = [Span(int(s), int(e), k) for s, e, k in self.spans]
        for s, e, k in self.spans:
            if k not in KINDS:
                raise ValueError(f"unknown span kind {k!r}")
            if not 0 <= s < e <= len(self.text):
                raise ValueError(f"span ({s}, {e}) out of range for text of length {len(self.text)}")
        for kind in KINDS:
            spans = sorted((s, e) for s, e, k in self.spans if k == kind)
            for (_, e1), (s2, _) in zip(spans, spans[1:]):
                if s2 < e1:
                    raise ValueError(f"overlapping {kind} spans in {self.text!r}")

    def spans_of(self, kind: str) -> list[tuple[int, int]]:
        return sorted((s, e) for s, e, k in self.spans if k == kind)

    def to_dict(self) -> dict:
        return {"text": self.text, "spans": [list(s) for s in self.spans]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnnotatedText":
        return cls(d["text"], [tuple(s) for s in d.get("spans", ())])


def load_annotations(path) -> list[AnnotatedText]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    items.append(AnnotatedText.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{line_no}: {exc}") from None
    return items


def save_annotations(items: Iterable[AnnotatedText], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")


def spans_to_labels(text: AnnotatedText, kind: str, tokens: Sequence[Token]) -> np.ndarray:
    """1 for every token whose character range overlaps a gold span of ``kind``."""
    n = len(text.text)
    spans = text.spans_of(kind)
    labels = np.zeros(len(tokens), dtype=np.int64)
    for i, tok in enumerate(tokens):
        if not 0 <= tok.start < tok.end <= n:
            raise ValueError(f"token {tok!r} lies outside the text")
        labels[i] = any(tok.start < e and s < tok.end for s, e in spans)
    return labels


def decode_spans(
    probabilities: Sequence[float], tokens: Sequence[Token], threshold: float = 0.5
) -> list[tuple[int, int]]:
    """Maximal runs of tokens with probability >= threshold, as char spans."""
    if len(probabilities) != len(tokens):
        raise ValueError(f"{len(probabilities)} probabilities for {len(tokens)} tokens")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    spans = []
    run_start = None
    for i, p in enumerate(probabilities):
        if p >= threshold:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            spans.append((tokens[run_start].start, tokens[i - 1].end))
            run_start = None
    if run_start is not None:
        spans.append((tokens[run_start].start, tokens[-1].end))
    return spans


def _token_count(span, tokens) -> int:
    s, e = span
    return sum(1 for t in tokens if t.start >= s and t.end <= e)


def extract_spans(tagger, text: str, threshold: float = 0.5) -> list[tuple[int, int]]:
    """Run ``tagger`` over ``text`` and decode spans, applying the kind's length floor."""
    tokens = tokenize(text)
    if not tokens:
        return []
    spans = decode_spans(tagger.predict(tokens), tokens, threshold)
    floor = MIN_TOKENS[tagger.kind]
    return [sp for sp in spans if _token_count(sp, tokens) >= floor]


def span_f1(predicted: Sequence[Sequence[tuple]], gold: Sequence[Sequence[tuple]]) -> float:
    """Exact-match span F1 pooled over documents."""
    tp = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        p, g = set(map(tuple, p)), set(map(tuple, g))
        tp += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    return 2 * tp / (n_pred + n_gold)


def token_f1(predicted: np.ndarray, gold: np.ndarray) -> float:
    tp = int(np.sum((predicted == 1) & (gold == 1)))
    denom = int(np.sum(predicted == 1) + np.sum(gold == 1))
    return 1.0 if denom == 0 else 2 * tp / denom


# --- tagger -----------------------------------------------------------------

PAD, UNK = "<pad>", "<unk>"


@dataclass
class TaggerConfig:
    embed_dim: int = 48
    hidden_dim: int = 64
    epochs: int = 150
    batch_size: int = 8
    lr: float = 5e-3
    threshold: float = 0.5


class TaggerModel(nn.Module):
    """Word embeddings, a bidirectional GRU, and a per-token sigmoid."""

    def __init__(self, kind: str, vocab: Sequence[str], config: TaggerConfig | None = None, seed: int = 0):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        self.kind = kind
        self.vocab = list(vocab)
        self.config = config or TaggerConfig()
        self.seed = seed
        self._index = {w: i for i, w in enumerate(self.vocab)}
        c = self.config
        self.embed = nn.Embedding(len(self.vocab), c.embed_dim, padding_idx=0)
        self.rnn = nn.GRU(c.embed_dim, c.hidden_dim, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * c.hidden_dim, 1)

    def ids(self, tokens: Sequence[Token]) -> list[int]:
        unk = self._index[UNK]
        return [self._index.get(t.surface.lower(), unk) for t in tokens]

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        h, _ = self.rnn(packed)
        h, _ = pad_packed_sequence(h, batch_first=True, total_length=ids.shape[1])
        return self.out(h).squeeze(-1)

    @torch.no_grad()
    def predict(self, tokens: Sequence[Token]) -> np.ndarray:
        if not tokens:
            return np.zeros(0)
        self.eval()
        ids = torch.tensor([self.ids(tokens)])
        logits = self(ids, torch.tensor([len(tokens)]))
        return torch.sigmoid(logits[0]).double().numpy()

    def save(self, path) -> None:
        torch.save(
            {
                "format": "musictext-tagger",
                "format_version": 1,
                "kind": self.kind,
                "vocab": self.vocab,
                "config": asdict(self.config),
                "seed": self.seed,
                "state_dict": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "TaggerModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != "musictext-tagger":
            raise ValueError(f"{path} is not a tagger checkpoint")
        model = cls(blob["kind"], blob["vocab"], TaggerConfig(**blob["config"]), blob["seed"])
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return model


def _batch(model, items):
    ids = [model.ids(toks) for toks, _ in items]
    lengths = torch.tensor([len(x) for x in ids])
    width = int(lengths.max())
    id_t = torch.zeros(len(ids), width, dtype=torch.long)
    lab_t = torch.zeros(len(ids), width)
    mask = torch.zeros(len(ids), width, dtype=torch.bool)
    for i, (x, (_, lab)) in enumerate(zip(ids, items)):
        id_t[i, : len(x)] = torch.tensor(x)
        lab_t[i, : len(x)] = torch.as_tensor(lab, dtype=torch.float32)
        mask[i, : len(x)] = True
    return id_t, lengths, lab_t, mask


def _labelled(data: Sequence[AnnotatedText], kind: str):
    items = []
    for item in data:
        tokens = tokenize(item.text)
        if tokens:
            items.append((tokens, spans_to_labels(item, kind, tokens)))
    return items


def _evaluate_token_f1(model, items, threshold) -> float:
    pred = np.concatenate([(model.predict(t) >= threshold).astype(int) for t, _ in items])
    gold = np.concatenate([lab for _, lab in items])
    return token_f1(pred, gold)


def train_tagger(
    data: Sequence[AnnotatedText],
    kind: str,
    config: TaggerConfig | None = None,
    seed: int = 0,
    valid: Sequence[AnnotatedText] | None = None,
) -> TaggerModel:
    """Fit a tagger for ``kind`` and return the epoch with the best validation token F1.

    Without a ``valid`` set the training data doubles as validation data.
    Training ends early once validation token F1 reaches 1.0.
    """
    config = config or TaggerConfig()
    if not data:
        raise ValueError("no training data")
    items = _labelled(data, kind)
    if not items or not any(lab.any() for _, lab in items):
        raise ValueError(f"no positive {kind} labels in the training data")
    valid_items = _labelled(valid, kind) if valid else items

    words = sorted({t.surface.lower() for toks, _ in items for t in toks})
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = TaggerModel(kind, [PAD, UNK, *words], config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")

    best_f1, best_state = -1.0, None
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(items))
        for b in range(0, len(order), config.batch_size):
            ids, lengths, labels, mask = _batch(model, [items[i] for i in order[b : b + config.batch_size]])
            logits = model(ids, lengths)
            loss = loss_fn(logits[mask], labels[mask]) / mask.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        f1 = _evaluate_token_f1(model, valid_items, config.threshold)
        if f1 > best_f1:
            best_f1 = f1
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if best_f1 >= 1.0:
            logger.debug("%s tagger reached token F1 1.0 at epoch %d", kind, epoch + 1)
            break
    model.load_state_dict(best_state)
    model.eval()
    logger.info("%s tagger: best validation token F1 %.4f", kind, best_f1)
    return model


# --- mined descriptions -----------------------------------------------------


@dataclass
class MinedDescription:
    track_id: str
    aspects: list[str] = field(default_factory=list)
    sentences: list[str] = field(default_factory=list)
    aspect_sources: list[str] = field(default_factory=list)
    sentence_sources: list[str] = field(default_factory=list)
    aspect_scores: list[float] | None = None
    sentence_scores: list[float] | None = None

    def add(self, kind: str, text: str, source: str) -> bool:
        """Append unless already present; returns whether it was added."""
        texts, sources = self._lists(kind)
        if text in texts:
            return False
        texts.append(text)
        sources.append(source)
        return True

    def _lists(self, kind):
        if kind == "aspect":
            return self.aspects, self.aspect_sources
        if kind == "sentence":
            return self.sentences, self.sentence_sources
        raise ValueError(f"unknown kind {kind!r}")

    def items(self) -> Iterator[tuple[str, str, str]]:
        """(kind, text, source) for every aspect then every sentence."""
        for text, src in zip(self.aspects, self.aspect_sources):
            yield "aspect", text, src
        for text, src in zip(self.sentences, self.sentence_sources):
            yield "sentence", text, src

    def is_empty(self) -> bool:
        return not self.aspects and not self.sentences

    def to_dict(self) -> dict:
        d = {
            "track_id": self.track_id,
            "aspects": self.aspects,
            "sentences": self.sentences,
            "provenance": {"aspects": self.aspect_sources, "sentences": self.sentence_sources},
        }
        if self.aspect_scores is not None or self.sentence_scores is not None:
            d["scores"] = {"aspects": self.aspect_scores, "sentences": self.sentence_scores}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MinedDescription":
        prov = d.get("provenance") or {}
        scores = d.get("scores") or {}
        aspects = list(d.get("aspects") or ())
        sentences = list(d.get("sentences") or ())
        return cls(
            track_id=d["track_id"],
            aspects=aspects,
            sentences=sentences,
            aspect_sources=list(prov.get("aspects") or ["unknown"] * len(aspects)),
            sentence_sources=list(prov.get("sentences") or ["unknown"] * len(sentences)),
            aspect_scores=scores.get("aspects"),
            sentence_scores=scores.get("sentences"),
        )


def save_mined(mined: Mapping[str, MinedDescription], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for track_id in mined:
            fh.write(json.dumps(mined[track_id].to_dict(), ensure_ascii=False) + "\n")


def load_mined(path) -> dict[str, MinedDescription]:
    mined = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                desc = MinedDescription.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
            mined[desc.track_id] = desc
    return mined


def _source_texts(record):
    yield "caption", record.caption
    yield "file_description", record.file_description
    for _, text in record.sections:
        yield "article", text


def mine_descriptions(
    corpus: Corpus, aspect_tagger, sentence_tagger, threshold: float = 0.5
) -> dict[str, MinedDescription]:
    """Tag caption, file description and article sections of every record.

    Taggers are any objects with a ``kind`` and a ``predict(tokens)`` method
    returning one probability per token. Metadata aspects are appended after
    the mined ones; duplicates keep their first occurrence.
    """
    if aspect_tagger.kind != "aspect" or sentence_tagger.kind != "sentence":
        raise ValueError("taggers passed in the wrong order or trained for the wrong kind")
    mined = {}
    for record in corpus.records:
        desc = MinedDescription(record.track_id)
        for source, text in _source_texts(record):
            if not text:
                continue
            for tagger in (aspect_tagger, sentence_tagger):
                for s, e in extract_spans(tagger, text, threshold):
                    desc.add(tagger.kind, text[s:e], source)
        for aspect in extract_metadata_aspects(record):
            desc.add("aspect", aspect, "metadata")
        mined[record.track_id] = desc
    return mined
