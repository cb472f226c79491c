"""Text-mined music descriptions and a two-tower text-audio model."""

from .audio import AudioClip, read_wav, write_wav
from .contrastive import BatchSpec, LossConfig, TrainSchedule, nt_xent_loss, train
from .corpus import Corpus, CorpusRecord, compute_stats, ingest_records, load_corpus, save_corpus
from .encoders import TowerConfig, TowerModel, build_tower, encode_audio, encode_text, similarity
from .evalharness import evaluate_retrieval, load_manifest
from .relevance import filter_dataset, score_pair, segment_audio
from .textminer import MinedDescription, decode_spans, mine_descriptions, tokenize, train_tagger

__version__ = "0.1.0"
