"""Audio and text towers projecting into a shared unit-norm embedding space.

The audio tower summarises a log-mel sequence by the first ("CLS") element
of a small transformer's output; the text tower mean-pools token encodings.
Each tower ends in a two-layer adapter and L2 normalisation, so the dot
product of two embeddings is their cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn
from torch.nn import functional as F

from .audio import AudioClip
from .textminer import tokenize

EMBED_DIM = 128
CHECKPOINT_FORMAT = "musictext-tower"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_bands: int = 64
    window_s: float = 0.025
    hop_s: float = 0.010
    log_floor: float = 1e-10

    @property
    def win_length(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()

    def n_frames(self, n_samples: int) -> int:
        return 1 + max(0, n_samples - self.win_length) // self.hop_length


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_bands: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_bands, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_bands + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (centre - lower)
    falling = (upper - fft_freqs) / (upper - centre)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def featurize_audio(clip: AudioClip, config: FeatureConfig | None = None) -> np.ndarray:
    """Log mel-band power frames, shape (T, n_bands), float32."""
    config = config or FeatureConfig()
    if len(clip) == 0:
        raise ValueError("cannot featurize an empty clip")
    if clip.sample_rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    win, hop = config.win_length, config.hop_length
    x = clip.samples
    if len(x) < win:
        x = np.concatenate([x, np.zeros(win - len(x))])
    frames = sliding_window_view(x, win)[::hop] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(config.sample_rate, config.n_fft, config.n_bands).T
    return np.log(np.maximum(mel, config.log_floor)).astype(np.float32)


# --- model ------------------------------------------------------------------

PAD, UNK = "<pad>", "<unk>"


def text_tokens(text: str) -> list[str]:
    """Lower-cased word tokens; punctuation is kept only if nothing else is left."""
    toks = [t.surface.lower() for t in tokenize(text)]
    words = [t for t in toks if t[0].isalnum() or t[0] == "_"]
    return words or toks


def build_vocab(texts) -> list[str]:
    return [PAD, UNK, *sorted({t for text in texts for t in text_tokens(text)})]


@dataclass
class TowerConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    clip_seconds: float = 10.0
    audio_dim: int = 64
    audio_layers: int = 1
    audio_heads: int = 4
    frame_pool: int = 10
    text_encoder: str = "bag"  # "bag" (order-insensitive) or "transformer"
    text_dim: int = 64
    text_layers: int = 1
    text_heads: int = 4
    max_text_tokens: int = 128
    embed_dim: int = EMBED_DIM

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.features.sample_rate))

    @property
    def audio_positions(self) -> int:
        return 1 + math.ceil(self.features.n_frames(self.clip_samples) / self.frame_pool)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TowerConfig":
        d = dict(d)
        d["features"] = FeatureConfig(**d.get("features", {}))
        return cls(**d)


class Adapter(nn.Sequential):
    """Linear -> ReLU -> Linear, both layers ``width`` wide."""

    def __init__(self, in_dim: int, width: int = EMBED_DIM):
        super().__init__(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, width))


class AudioEncoder(nn.Module):
    """Frame-pooled log-mel sequence -> transformer; position 0 is a learned CLS token."""

    def __init__(self, config: TowerConfig):
        super().__init__()
        self.pool = config.frame_pool
        n_bands = config.features.n_bands
        self.norm = nn.LayerNorm(n_bands)
        self.proj = nn.Linear(n_bands, config.audio_dim)
        self.cls = nn.Parameter(torch.randn(1, 1, config.audio_dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, config.audio_positions, config.audio_dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            config.audio_dim, config.audio_heads, 2 * config.audio_dim, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, config.audio_layers, enable_nested_tensor=False)
        self.out_dim = config.audio_dim

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: (B, T, bands)
        x = self.norm(feats)
        x = F.avg_pool1d(x.transpose(1, 2), self.pool, ceil_mode=True).transpose(1, 2)
        x = self.proj(x)
        x = torch.cat([self.cls.expand(len(x), -1, -1), x], dim=1)
        x = x + self.pos[:, : x.shape[1]]
        return self.encoder(x)


class TextEncoder(nn.Module):
    """Token embeddings, optionally contextualised by a transformer."""

    def __init__(self, config: TowerConfig, vocab_size: int):
        super().__init__()
        self.kind = config.text_encoder
        self.embed = nn.Embedding(vocab_size, config.text_dim, padding_idx=0)
        self.out_dim = config.text_dim
        if self.kind == "transformer":
            self.pos = nn.Parameter(torch.randn(1, config.max_text_tokens, config.text_dim) * 0.02)
            layer = nn.TransformerEncoderLayer(
                config.text_dim, config.text_heads, 2 * config.text_dim, dropout=0.0, batch_first=True
            )
            self.encoder = nn.TransformerEncoder(layer, config.text_layers, enable_nested_tensor=False)
        elif self.kind != "bag":
            raise ValueError(f"unknown text encoder {self.kind!r}")

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        if self.kind == "transformer":
            x = self.encoder(x + self.pos[:, : x.shape[1]], src_key_padding_mask=~mask)
        return x


class TowerModel(nn.Module):
    def __init__(self, config: TowerConfig, vocab: Sequence[str]):
        super().__init__()
        self.config = config
        self.vocab = list(vocab)
        if self.vocab[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with the pad and unknown tokens")
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self.audio_encoder = AudioEncoder(config)
        self.text_encoder = TextEncoder(config, len(self.vocab))
        self.audio_adapter = Adapter(self.audio_encoder.out_dim, config.embed_dim)
        self.text_adapter = Adapter(self.text_encoder.out_dim, config.embed_dim)

    # batched, differentiable paths

    def embed_features(self, feats: torch.Tensor) -> torch.Tensor:
        cls = self.audio_encoder(feats)[:, 0]
        return F.normalize(self.audio_adapter(cls), dim=-1)

    def token_ids(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        limit = self.config.max_text_tokens
        rows = []
        for text in texts:
            toks = text_tokens(text)[:limit]
            if not toks:
                raise ValueError(f"text has no tokens: {text!r}")
            row = [self._index.get(t, 1) for t in toks]
            # order carries no information for a bag; a canonical order makes
            # the float32 pooling sum, and so the embedding, bitwise permutation-invariant
            rows.append(sorted(row) if self.config.text_encoder == "bag" else row)
        width = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), width, dtype=torch.long)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
        return ids, ids != 0

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = self.token_ids(texts)
        h = self.text_encoder(ids, mask)
        m = mask.unsqueeze(-1).to(h.dtype)
        pooled = (h * m).sum(dim=1) / m.sum(dim=1)
        return F.normalize(self.text_adapter(pooled), dim=-1)

    # checkpointing

    def save(self, path, extra: dict | None = None) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "format_version": CHECKPOINT_VERSION,
                "config": self.config.to_dict(),
                "vocab": self.vocab,
                "extra": extra or {},
                "state_dict": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "TowerModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a tower checkpoint")
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
        model = cls(TowerConfig.from_dict(blob["config"]), blob["vocab"])
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return model


def build_tower(config: TowerConfig, vocab: Sequence[str], seed: int = 0) -> TowerModel:
    """Fresh model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return TowerModel(config, vocab)


# --- single-item inference --------------------------------------------------


def _unit(v: torch.Tensor) -> np.ndarray:
    # renormalise in float64 so norms hold to ~1e-15 rather than float32 eps
    v = v.double().numpy()
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@torch.no_grad()
def encode_features(model: TowerModel, feats: np.ndarray) -> np.ndarray:
    """Embed a batch of feature matrices (B, T, bands) -> (B, embed_dim)."""
    model.eval()
    return _unit(model.embed_features(torch.as_tensor(feats, dtype=torch.float32)))


def encode_audio(model: TowerModel, clip: AudioClip) -> np.ndarray:
    if len(clip) != model.config.clip_samples:
        raise ValueError(
            f"clip has {len(clip)} samples; the model expects exactly {model.config.clip_samples}"
        )
    feats = featurize_audio(clip, model.config.features)
    return encode_features(model, feats[None])[0]


@torch.no_grad()
def encode_texts(model: TowerModel, texts: Sequence[str]) -> np.ndarray:
    model.eval()
    return _unit(model.embed_texts(list(texts)))


def encode_text(model: TowerModel, text: str) -> np.ndarray:
    return encode_texts(model, [text])[0]


def similarity(a, b) -> float:
    """Dot product of two unit vectors, clipped to [-1, 1]."""
    return float(np.clip(np.dot(a, b), -1.0, 1.0))
