"""Command-line entry point: ``musictext <command> [options]``.

Every command reads an optional JSON config (``--config``) whose top-level
``seed`` and per-command section provide defaults; command-line flags win.
The effective configuration is written to ``config.json`` in ``--out``.

Exit status: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

logger = logging.getLogger("musictext")


class UsageError(Exception):
    pass


DEFAULTS = {
    "ingest": {"raw": None, "exclude_sections": None, "check_audio": True},
    "mine": {
        "corpus": None,
        "annotations": None,
        "aspect_tagger": None,
        "sentence_tagger": None,
        "threshold": 0.5,
        "tagger": {},
    },
    "train": {
        "corpus": None,
        "mined": None,
        "valid_manifest": None,
        "tower": {},
        "batch": {},
        "schedule": {},
        "loss": {},
        "sentence_mode": "random_subset",
    },
    "filter": {"checkpoint": None, "corpus": None, "mined": None, "threshold": 0.0},
    "eval": {"checkpoint": None, "manifest": None, "task": "retrieval", "ks": [1, 5, 10], "labels": None},
    "query": {"checkpoint": None, "manifest": None, "query": None, "k": 10},
    "toy": {"n_tracks": 64, "noise_fraction": 0.0},
}
TASKS = ("retrieval", "tagging", "classification")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def effective_config(args) -> dict:
    file_cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    cfg = _merge(DEFAULTS[args.command], file_cfg.get(args.command, {}))
    for key in DEFAULTS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    out = args.out if args.out is not None else file_cfg.get("out")
    return {"command": args.command, "seed": int(seed), "out": out, args.command: cfg}


def _require_file(cfg, key, what=None):
    path = cfg.get(key)
    if not path:
        raise UsageError(f"missing required input: --{key.replace('_', '-')}")
    if not Path(path).is_file():
        raise UsageError(f"{what or key} not found: {path}")
    return Path(path)


def _out_dir(run) -> Path:
    if not run["out"]:
        raise UsageError("--out is required")
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, run: dict) -> None:
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build(cls, values: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {what} option(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} configuration: {exc}") from None


# --- commands ---------------------------------------------------------------


def cmd_ingest(run):
    from .corpus import SectionExclusionList, ingest_records, save_corpus, write_drop_log

    cfg = run["ingest"]
    raw_path = _require_file(cfg, "raw", "raw records file")
    out = _out_dir(run)
    raw = []
    with open(raw_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    raw.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise UsageError(f"{raw_path}:{line_no}: invalid JSON ({exc.msg})") from None
    exclusions = SectionExclusionList(cfg["exclude_sections"]) if cfg["exclude_sections"] else None
    dropped = []
    corpus = ingest_records(
        raw, exclusions, name=raw_path.stem, base_dir=raw_path.parent, check_audio=cfg["check_audio"], dropped=dropped
    )
    # audio refs are rewritten relative to the output directory
    corpus = type(corpus)(
        [replace(r, audio_ref=os.path.relpath(corpus.audio_path(r), out)) for r in corpus.records],
        name=corpus.name,
    )
    corpus_path = out / "corpus.jsonl"
    save_corpus(corpus, corpus_path)
    write_drop_log(out / "dropped.tsv", dropped)
    _write_config(out, run)
    print(f"{len(corpus)} records kept, {len(dropped)} dropped -> {corpus_path}")


def cmd_mine(run):
    from .corpus import compute_stats, load_corpus
    from .reports import plot_top_aspects
    from .textminer import TaggerConfig, TaggerModel, load_annotations, mine_descriptions, save_mined, train_tagger

    cfg = run["mine"]
    corpus_path = _require_file(cfg, "corpus", "corpus")
    tagger_cfg = _build(TaggerConfig, cfg["tagger"], "tagger")
    if cfg["aspect_tagger"] and cfg["sentence_tagger"]:
        aspect = TaggerModel.load(_require_file(cfg, "aspect_tagger", "aspect tagger"))
        sentence = TaggerModel.load(_require_file(cfg, "sentence_tagger", "sentence tagger"))
        trained = False
    elif cfg["annotations"]:
        annotations = load_annotations(_require_file(cfg, "annotations", "annotation file"))
        aspect = train_tagger(annotations, "aspect", tagger_cfg, run["seed"])
        sentence = train_tagger(annotations, "sentence", tagger_cfg, run["seed"])
        trained = True
    else:
        raise UsageError("give either --annotations or both --aspect-tagger and --sentence-tagger")
    out = _out_dir(run)
    corpus = load_corpus(corpus_path)
    mined = mine_descriptions(corpus, aspect, sentence, cfg["threshold"])
    save_mined(mined, out / "mined.jsonl")
    if trained:
        aspect.save(out / "aspect_tagger.pt")
        sentence.save(out / "sentence_tagger.pt")
    stats = compute_stats(corpus, mined)
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats.to_dict(), fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    with open(out / "stats.tsv", "w", encoding="utf-8") as fh:
        fh.write("statistic\tvalue\n")
        for k, v in stats.to_dict().items():
            if k != "top_aspects":
                fh.write(f"{k}\t{'' if v is None else v}\n")
        for aspect_text, n in stats.top_aspects:
            fh.write(f"top_aspect:{aspect_text}\t{n}\n")
    if stats.top_aspects:
        plot_top_aspects(stats, out / "top_aspects.png")
    _write_config(out, run)
    print(f"mined {len(mined)} tracks -> {out / 'mined.jsonl'}")


def _load_clips(corpus, track_ids):
    from .audio import read_wav

    by_id = corpus.by_id()
    return {t: read_wav(corpus.audio_path(by_id[t])) for t in track_ids}


def cmd_train(run):
    from .contrastive import BatchSpec, LossConfig, SentenceSampleRule, TrainItem, TrainSchedule, train
    from .corpus import load_corpus
    from .encoders import FeatureConfig, TowerConfig, build_tower, build_vocab
    from .evalharness import EvalCollection, EvalItem, load_manifest
    from .reports import plot_history
    from .textminer import load_mined

    cfg = run["train"]
    corpus_path = _require_file(cfg, "corpus", "corpus")
    mined_path = _require_file(cfg, "mined", "mined descriptions")
    tower_opts = dict(cfg["tower"])
    features = _build(FeatureConfig, tower_opts.pop("features", {}), "features")
    tower_cfg = _build(TowerConfig, {**tower_opts, "features": features}, "tower")
    spec = _build(BatchSpec, cfg["batch"], "batch")
    schedule = _build(TrainSchedule, cfg["schedule"], "schedule")
    loss_cfg = _build(LossConfig, cfg["loss"], "loss")
    rule = _build(SentenceSampleRule, {"mode": cfg["sentence_mode"]}, "sentence sampling")
    valid_path = _require_file(cfg, "valid_manifest", "validation manifest") if cfg["valid_manifest"] else None
    out = _out_dir(run)

    corpus = load_corpus(corpus_path)
    mined = load_mined(mined_path)
    train_ids = [r.track_id for r in corpus.split("train") if r.track_id in mined]
    clips = _load_clips(corpus, train_ids)
    items = [TrainItem(t, clips[t], mined[t]) for t in train_ids]
    if valid_path:
        valid = load_manifest(valid_path)
    else:
        recs = [r for r in corpus.split("valid") if r.track_id in mined]
        valid = EvalCollection(
            [EvalItem(r.track_id, r.audio_ref, list(mined[r.track_id].aspects)) for r in recs],
            base_dir=corpus.base_dir,
        )
        if not len(valid):
            raise UsageError("no validation data: pass --valid-manifest or add a valid split to the corpus")
    texts = [text for t in train_ids for _, text, _ in mined[t].items()]
    model = build_tower(tower_cfg, build_vocab(texts), seed=run["seed"])
    model, history = train(model, items, valid, spec, schedule, run["seed"], loss_cfg, rule)
    model.save(out / "checkpoint.pt", extra={"best_epoch": history.best_epoch})
    history.write(out / "history.jsonl")
    with open(out / "history.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\tval_map10\tlr\n")
        for r in history.epochs:
            fh.write(f"{r.epoch}\t{r.loss!r}\t{r.score!r}\t{r.lr!r}\n")
    plot_history(history, out / "training.png")
    _write_config(out, run)
    print(f"best epoch {history.best_epoch} ({schedule.monitored_metric} {history.best_score}) -> {out / 'checkpoint.pt'}")


def _load_model(cfg):
    from .encoders import TowerModel

    path = _require_file(cfg, "checkpoint", "checkpoint")
    try:
        return TowerModel.load(path)
    except Exception as exc:  # noqa: BLE001 - any unreadable checkpoint is a usage error
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_filter(run):
    from .audio import read_wav
    from .corpus import load_corpus
    from .relevance import filter_dataset
    from .reports import plot_score_histogram
    from .textminer import load_mined, save_mined

    cfg = run["filter"]
    model = _load_model(cfg)
    corpus_path = _require_file(cfg, "corpus", "corpus")
    mined_path = _require_file(cfg, "mined", "mined descriptions")
    out = _out_dir(run)
    corpus = load_corpus(corpus_path)
    by_id = corpus.by_id()
    filtered, report = filter_dataset(
        model, load_mined(mined_path), lambda t: read_wav(corpus.audio_path(by_id[t])), float(cfg["threshold"])
    )
    save_mined(filtered, out / "filtered.jsonl")
    report.write(out / "filter_report.jsonl")
    with open(out / "filter_summary.json", "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2)
        fh.write("\n")
    if report.items:
        plot_score_histogram(report, out / "relevance_scores.png")
    _write_config(out, run)
    print(f"kept {len(report.kept)}, removed {len(report.removed)}, errors {len(report.errors)}")


def cmd_eval(run):
    from .evalharness import evaluate_classification, evaluate_retrieval, evaluate_tagging, load_manifest
    from .reports import plot_metrics

    cfg = run["eval"]
    if cfg["task"] not in TASKS:
        raise UsageError(f"unknown task {cfg['task']!r}; choose from {', '.join(TASKS)}")
    model = _load_model(cfg)
    collection = load_manifest(_require_file(cfg, "manifest", "evaluation manifest"))
    out = _out_dir(run)
    if cfg["task"] == "retrieval":
        report = evaluate_retrieval(model, collection, ks=[int(k) for k in cfg["ks"]])
    elif cfg["task"] == "tagging":
        report = evaluate_tagging(model, collection, cfg["labels"])
    else:
        report = evaluate_classification(model, collection, cfg["labels"])
    report.config.update(
        {"checkpoint": str(cfg["checkpoint"]), "manifest": str(cfg["manifest"]), "seed": run["seed"]}
    )
    report.write(out / "metrics.json", out / "metrics.tsv")
    plot_metrics(report.metrics, out / "metrics.png", title=cfg["task"])
    _write_config(out, run)
    for k, v in report.metrics.items():
        print(f"{k}\t{100 * v:.1f}")


def cmd_query(run):
    import numpy as np

    from .encoders import encode_text
    from .evalharness import embed_collection, load_manifest, rank_tracks

    cfg = run["query"]
    if not cfg["query"] or not str(cfg["query"]).strip():
        raise UsageError("empty query")
    if int(cfg["k"]) < 1:
        raise UsageError("k must be at least 1")
    model = _load_model(cfg)
    collection = load_manifest(_require_file(cfg, "manifest", "collection manifest"))
    audio = embed_collection(model, collection.clips)
    scores = np.clip(audio @ encode_text(model, cfg["query"]), -1.0, 1.0)
    order = rank_tracks(scores, collection.track_ids)[: int(cfg["k"])]
    lines = [f"{r}\t{collection.track_ids[i]}\t{scores[i]:.6f}" for r, i in enumerate(order, start=1)]
    if run["out"]:
        out = _out_dir(run)
        with open(out / "query_results.tsv", "w", encoding="utf-8") as fh:
            fh.write("rank\ttrack_id\tscore\n" + "".join(line + "\n" for line in lines))
        _write_config(out, run)
    print("\n".join(lines))


def cmd_toy(run):
    from .toy import make_toy

    cfg = run["toy"]
    out = _out_dir(run)
    paths = make_toy(out, int(cfg["n_tracks"]), float(cfg["noise_fraction"]), run["seed"])
    _write_config(out, run)
    for name, path in paths.items():
        print(f"{name}\t{path}")


COMMANDS = {
    "ingest": cmd_ingest,
    "mine": cmd_mine,
    "train": cmd_train,
    "filter": cmd_filter,
    "eval": cmd_eval,
    "query": cmd_query,
    "toy": cmd_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="musictext", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="curate raw records into a corpus file")
    p.add_argument("--raw", help="raw records (JSON Lines)")
    p.add_argument("--exclude-sections", dest="exclude_sections", nargs="+", help="section titles to drop")
    p.add_argument("--no-check-audio", dest="check_audio", action="store_const", const=False)

    p = sub.add_parser("mine", parents=[common], help="extract aspects and sentences")
    p.add_argument("--corpus")
    p.add_argument("--annotations", help="annotated texts to train both taggers on")
    p.add_argument("--aspect-tagger", dest="aspect_tagger")
    p.add_argument("--sentence-tagger", dest="sentence_tagger")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("train", parents=[common], help="train the two-tower model")
    p.add_argument("--corpus")
    p.add_argument("--mined")
    p.add_argument("--valid-manifest", dest="valid_manifest")
    p.add_argument("--sentence-mode", dest="sentence_mode", choices=("random_subset", "consecutive_prefix"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)

    p = sub.add_parser("filter", parents=[common], help="drop mined texts with low relevance")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--mined")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("eval", parents=[common], help="retrieval / zero-shot evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--task", help=f"one of {', '.join(TASKS)}")
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--labels", nargs="+", help="label vocabulary (default: all labels in the manifest)")

    p = sub.add_parser("query", parents=[common], help="rank a collection for a text query")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--query")
    p.add_argument("-k", type=int)

    p = sub.add_parser("toy", parents=[common], help="write the synthetic learnable toy dataset")
    p.add_argument("--n-tracks", dest="n_tracks", type=int)
    p.add_argument("--noise-fraction", dest="noise_fraction", type=float)
    return parser


def _apply_train_flags(args, run):
    cfg = run["train"]
    nested = {
        "temperature": ("loss", "temperature"),
        "batch_size": ("batch", "batch_size"),
        "lr": ("schedule", "initial_lr"),
        "max_epochs": ("schedule", "max_epochs"),
    }
    for flag, (section, key) in nested.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section] = {**cfg[section], key: value}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        run = effective_config(args)
        if args.command == "train":
            _apply_train_flags(args, run)
        COMMANDS[args.command](run)
    except UsageError as exc:
        print(f"musictext {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        logger.debug("failure", exc_info=True)
        print(f"musictext {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
