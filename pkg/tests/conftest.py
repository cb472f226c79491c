from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch

from musictext.audio import AudioClip
from musictext.encoders import FeatureConfig, TowerConfig, build_tower, build_vocab
from musictext.textminer import MinedDescription

# Small enough that a forward pass takes a millisecond or two.
TINY_FEATURES = FeatureConfig(sample_rate=1600, n_bands=16)
TINY_TOWER = TowerConfig(
    features=TINY_FEATURES, clip_seconds=1.0, audio_dim=16, audio_heads=2, text_dim=16, text_heads=2
)


def tiny_model(vocab=("a", "b", "c", "piano", "guitar"), seed=0, **overrides):
    cfg = replace(TINY_TOWER, **overrides)
    return build_tower(cfg, build_vocab(vocab), seed=seed)


def noise_clip(seconds, sample_rate=1600, seed=0):
    rng = np.random.default_rng(seed)
    return AudioClip(rng.standard_normal(int(round(seconds * sample_rate))) * 0.1, sample_rate)


def mined(track_id, aspects=(), sentences=()):
    d = MinedDescription(track_id)
    for a in aspects:
        d.add("aspect", a, "caption")
    for s in sentences:
        d.add("sentence", s, "caption")
    return d


class StubTower(torch.nn.Module):
    """Fixed vectors instead of learned encoders.

    Audio block i of every clip maps to ``block_vecs[i]``; texts map through
    ``text_vecs``. Vectors are used as given, so unit vectors give exact cosines.
    """

    def __init__(self, block_vecs, text_vecs, config=TINY_TOWER):
        super().__init__()
        self.config = config
        self.block_vecs = torch.as_tensor(np.asarray(block_vecs, dtype=np.float64))
        self.text_vecs = {k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in text_vecs.items()}
        self.calls = 0

    def embed_features(self, feats):
        self.calls += 1
        return self.block_vecs[: feats.shape[0]]

    def embed_texts(self, texts):
        return torch.stack([self.text_vecs[t] for t in texts])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance")
        for line in test_acceptance.VERDICTS:
            terminalreporter.write_line(line)
