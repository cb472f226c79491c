"""Synthetic learnable corpus: audio is a fixed function of a latent tag set.

Each tag owns a pure tone; a track's audio is the sum of its tags' tones.
Texts enumerate the tags, so a working two-tower model can learn to match
them. Optional noise injects texts naming random tags that the audio does
not contain.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav
from .corpus import Corpus, CorpusRecord, save_corpus
from .evalharness import EvalItem, save_manifest
from .textminer import AnnotatedText, MinedDescription, save_annotations, save_mined

# batch and learning rate that converge within a few epochs on 64 tracks
TRAIN_CONFIG = {"train": {"batch": {"batch_size": 16}, "schedule": {"initial_lr": 1e-3}}}

TAGS = (
    "piano", "guitar", "drums", "bass", "violin", "flute",
    "organ", "trumpet", "cello", "harp", "synth", "choir",
)


def tag_frequencies(n_tags: int = len(TAGS), lo: float = 180.0, hi: float = 5000.0) -> np.ndarray:
    """Geometrically spaced tone frequencies, one per tag."""
    return lo * (hi / lo) ** (np.arange(n_tags) / (n_tags - 1))


def render(tag_ids, duration_s: float, sample_rate: int = 16000) -> AudioClip:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    freqs = tag_frequencies()
    x = sum(np.sin(2 * np.pi * freqs[i] * t) for i in tag_ids) / (2 * len(tag_ids))
    return AudioClip(x, sample_rate)


def pair_label(tag_ids) -> str:
    return " and ".join(TAGS[i] for i in sorted(tag_ids))


def make_toy(
    out_dir,
    n_tracks: int = 64,
    noise_fraction: float = 0.0,
    seed: int = 0,
    sample_rate: int = 16000,
    durations=(8.0, 10.0, 14.0, 20.0, 29.0),
) -> dict:
    """Write a toy corpus, mined texts, evaluation manifest and tagger annotations.

    Every track gets a distinct pair of tags. Its clean texts are the two
    tag names (aspects) and the label ``"<tag> and <tag>"`` (sentence), and
    the evaluation label is that same string, so each query has exactly one
    relevant track. ``noise_fraction`` of all texts are random-tag texts.
    Returns the paths written.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = list(itertools.combinations(range(len(TAGS)), 2))
    if n_tracks > len(pairs):
        raise ValueError(f"at most {len(pairs)} distinct tag pairs")
    chosen = [pairs[i] for i in sorted(rng.choice(len(pairs), size=n_tracks, replace=False))]

    records, mined, manifest = [], {}, []
    for n, tags in enumerate(chosen):
        track_id = f"toy{n:03d}"
        ref = f"audio/{track_id}.wav"
        write_wav(out / ref, render(tags, durations[n % len(durations)], sample_rate))
        label = pair_label(tags)
        records.append(CorpusRecord(track_id, ref, caption=f"A recording of {label}.", split="train"))
        desc = MinedDescription(track_id)
        for i in tags:
            desc.add("aspect", TAGS[i], "caption")
        desc.add("sentence", label, "caption")
        mined[track_id] = desc
        manifest.append(EvalItem(track_id, ref, [label]))

    n_clean = sum(len(d.aspects) + len(d.sentences) for d in mined.values())
    n_noise = int(round(noise_fraction / (1.0 - noise_fraction) * n_clean)) if noise_fraction else 0
    ids = list(mined)
    for _ in range(n_noise):
        desc = mined[ids[rng.integers(len(ids))]]
        own = {TAGS.index(a) for a in desc.aspects if a in TAGS}
        others = [i for i in range(len(TAGS)) if i not in own]
        if rng.random() < 0.5:
            desc.add("aspect", TAGS[others[rng.integers(len(others))]], "caption")
        else:
            a, b = rng.choice(others, size=2, replace=False)
            desc.add("sentence", pair_label((a, b)), "caption")

    paths = {
        "corpus": out / "corpus.jsonl",
        "mined": out / "mined.jsonl",
        "manifest": out / "manifest.jsonl",
        "annotations": out / "annotations.jsonl",
        "config": out / "train_config.json",
    }
    save_corpus(Corpus(records, name="toy"), paths["corpus"])
    save_mined(mined, paths["mined"])
    save_manifest(manifest, paths["manifest"])
    save_annotations(make_annotations(20, seed), paths["annotations"])
    with open(paths["config"], "w") as fh:
        json.dump(TRAIN_CONFIG, fh, indent=2)
    with open(out / "toy.json", "w") as fh:
        json.dump({"n_tracks": n_tracks, "noise_fraction": noise_fraction, "seed": seed, "n_noise": n_noise}, fh)
    return paths


_GENRES = ("cool jazz", "hip hop", "soul", "bossa nova", "punk rock", "ambient", "funk", "reggae")
_ADJECTIVES = ("distorted", "gentle", "bright", "muted", "layered", "soaring", "driving", "sparse")
_INSTRUMENTS = ("guitar", "piano", "drums", "strings", "bass", "saxophone", "vocals", "organ")
_NAMES = ("Blue", "River", "Night", "Echo", "Stone", "Golden", "Paper", "Velvet", "Lucky", "Silver")


def make_annotations(n: int = 20, seed: int = 0):
    """Captions with gold aspect and sentence spans, in the style of the corpus captions.

    Aspects are the genre and two adjective-instrument phrases; the
    sentence is the clause describing the instrumentation.
    """
    rng = np.random.default_rng(seed)
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    items = []
    for _ in range(n):
        title = f"{pick(_NAMES)} {pick(_NAMES)}"
        genre = pick(_GENRES)
        a1, a2 = rng.choice(len(_ADJECTIVES), size=2, replace=False)
        i1, i2 = rng.choice(len(_INSTRUMENTS), size=2, replace=False)
        p1 = f"{_ADJECTIVES[a1]} {_INSTRUMENTS[i1]}"
        p2 = f"{_ADJECTIVES[a2]} {_INSTRUMENTS[i2]}"
        head = f"{title} is a {genre} song by {pick(_NAMES)}. "
        clause = f"It features {p1} and {p2}"
        text = f"{head}{clause}. The single was released in {1960 + int(rng.integers(60))}."
        g0 = head.index(genre)
        c0 = len(head)
        s1 = c0 + clause.index(p1)
        s2 = c0 + clause.rindex(p2)
        spans = [
            (g0, g0 + len(genre), "aspect"),
            (s1, s1 + len(p1), "aspect"),
            (s2, s2 + len(p2), "aspect"),
            (c0, c0 + len(clause), "sentence"),
        ]
        items.append(AnnotatedText(text, spans))
    return items
