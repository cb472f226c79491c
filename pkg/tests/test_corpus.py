import json
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from musictext.audio import AudioClip, write_wav
from musictext.corpus import (
    Corpus,
    CorpusFormatError,
    CorpusRecord,
    DuplicateTrackError,
    SectionExclusionList,
    compute_stats,
    extract_metadata_aspects,
    ingest_records,
    load_corpus,
    save_corpus,
    vocabulary,
)
from musictext.textminer import MinedDescription


def raw(track_id, **kw):
    return {"track_id": track_id, "audio_ref": f"{track_id}.wav", **kw}


def test_excluded_section_is_dropped():
    rec = raw("t1", sections=[["Composition", "In 5/4 time."], ["Music video", "Shot in a diner."]])
    corpus = ingest_records([rec])
    assert corpus.records[0].sections == (("Composition", "In 5/4 time."),)


def test_record_without_excluded_sections_is_unchanged():
    rec = raw("t1", caption="A saxophone solo.", sections=[["Background", "Recorded in 1959."]], split="valid")
    out = ingest_records([rec]).records[0]
    assert out == CorpusRecord.from_dict(rec)


def test_missing_audio_ref_is_logged_and_dropped():
    dropped = []
    corpus = ingest_records([raw("a"), {"track_id": "b"}, raw("c")], dropped=dropped)
    assert [r.track_id for r in corpus] == ["a", "c"]
    assert dropped == [("b", "missing audio_ref")]


def test_category_flags():
    dropped = []
    corpus = ingest_records(
        [
            raw("a", music_category=False),
            raw("b", songs_category=False, sections=[["Composition", "x"]]),
        ],
        dropped=dropped,
    )
    assert [t for t, _ in dropped] == ["a"]
    assert corpus.records[0].sections == ()


def test_check_audio(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip([0.0] * 160, 16000))
    dropped = []
    corpus = ingest_records([raw("a"), raw("b")], base_dir=tmp_path, check_audio=True, dropped=dropped)
    assert [r.track_id for r in corpus] == ["a"]
    assert dropped == [("b", "audio file not found")]


def test_duplicates_are_rejected_with_offenders():
    with pytest.raises(DuplicateTrackError) as err:
        ingest_records([raw("a"), raw("b"), raw("a")])
    assert err.value.offenders == ["a"]
    with pytest.raises(DuplicateTrackError):
        Corpus([CorpusRecord("x", "x.wav"), CorpusRecord("x", "y.wav")])


def test_exclusion_list_ignores_case_and_padding():
    ex = SectionExclusionList()
    assert " music VIDEO " in ex
    assert "Composition" not in ex
    assert "Live" in SectionExclusionList(["live"])


def test_ingest_is_idempotent():
    recs = [raw("a", sections=[["Covers", "..."], ["Reception", "Praised."]]), raw("b", caption="c")]
    once = ingest_records(recs)
    twice = ingest_records([r.to_dict() for r in once])
    assert once == twice


def test_ingest_never_rewrites_kept_text():
    text = "  Odd   spacing, “quotes” and ünïcode  "
    rec = raw("a", caption=text, sections=[["Composition", text]])
    out = ingest_records([rec]).records[0]
    assert out.caption == text and out.sections[0][1] == text


def test_metadata_aspects():
    assert extract_metadata_aspects(CorpusRecord("a", "a.wav", genres=["jazz"], instruments=["piano"])) == ["jazz", "piano"]
    assert extract_metadata_aspects(CorpusRecord("a", "a.wav")) == []
    assert extract_metadata_aspects(CorpusRecord("a", "a.wav", genres=["pop", "pop"])) == ["pop"]


def test_round_trip(tmp_path):
    corpus = Corpus(
        [
            CorpusRecord("a", "a.wav", caption="Cap", sections=[("Composition", "x")], genres=["jazz"]),
            CorpusRecord("b", "b.wav", split="test", file_description="Live take", instruments=["sax"]),
        ]
    )
    save_corpus(corpus, tmp_path / "c.jsonl")
    loaded = load_corpus(tmp_path / "c.jsonl")
    assert loaded == corpus
    assert loaded.name == "c" and loaded.base_dir == tmp_path


def test_missing_track_id_reports_line_1(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"audio_ref": "a.wav"}) + "\n" + json.dumps(raw("b")) + "\n")
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(path)
    assert err.value.line_no == 1
    assert "track_id" in str(err.value)


def test_invalid_json_reports_its_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(raw("a")) + "\n{not json\n")
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(path)
    assert err.value.line_no == 2


def test_empty_file_gives_empty_corpus(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert len(load_corpus(tmp_path / "e.jsonl")) == 0


def test_check_trainable():
    corpus = Corpus([CorpusRecord("a", "a.wav"), CorpusRecord("b", "b.wav", split="valid")])
    with pytest.raises(ValueError, match="test"):
        corpus.check_trainable()


def _desc(track_id, n_aspects, n_sentences=0):
    d = MinedDescription(track_id)
    for i in range(n_aspects):
        d.add("aspect", f"{track_id} aspect {i}", "caption")
    for i in range(n_sentences):
        d.add("sentence", f"{track_id} says thing {i}", "caption")
    return d


def test_stats_hand_computed():
    corpus = Corpus([CorpusRecord(t, f"{t}.wav") for t in "abc"])
    mined = {"a": _desc("a", 1), "b": _desc("b", 2, 1), "c": _desc("c", 6)}
    stats = compute_stats(corpus, mined, durations={"a": 30.0, "b": 10.0, "c": 20.0})
    assert stats.track_count == 3
    assert stats.aspects_per_track_mean == 3.0
    assert stats.aspects_per_track_median == 2
    assert stats.duration_mean_s == 20.0 and stats.duration_median_s == 20.0
    assert stats.sentences_per_track_median == 0


def test_stats_empty_corpus():
    stats = compute_stats(Corpus([]), {})
    assert stats.track_count == 0
    assert stats.aspects_per_track_mean is None and stats.duration_median_s is None
    assert stats.vocabulary_size == 0 and stats.top_aspects == []


def test_stats_missing_mined_counts_as_zero():
    corpus = Corpus([CorpusRecord("a", "a.wav"), CorpusRecord("b", "b.wav")])
    stats = compute_stats(corpus, {"a": _desc("a", 4)}, durations={})
    assert stats.aspects_per_track_mean == 2.0


def test_stats_reject_unknown_tracks():
    with pytest.raises(KeyError):
        compute_stats(Corpus([]), {"zz": _desc("zz", 1)}, durations={})


def test_stats_reads_wav_durations(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip([0.0] * 16000 * 3, 16000))
    corpus = Corpus([CorpusRecord("a", "a.wav"), CorpusRecord("b", "missing.wav")], base_dir=tmp_path)
    assert compute_stats(corpus, {}).duration_mean_s == 3.0


def test_top_aspects_order():
    corpus = Corpus([CorpusRecord(t, f"{t}.wav") for t in "abc"])
    mined = {}
    for t, aspects in {"a": ["jazz", "piano"], "b": ["jazz", "bass"], "c": ["bass", "alto"]}.items():
        mined[t] = MinedDescription(t)
        for a in aspects:
            mined[t].add("aspect", a, "caption")
    stats = compute_stats(corpus, mined, durations={}, top_n=3)
    assert stats.top_aspects == [("bass", 2), ("jazz", 2), ("alto", 1)]


def test_vocabulary():
    assert vocabulary(["Cool jazz, Piano!", "piano (solo)"]) == {"cool", "jazz", "piano", "solo"}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=30))
def test_median_is_lower_middle_element(counts):
    corpus = Corpus([CorpusRecord(f"t{i}", "x.wav") for i in range(len(counts))])
    mined = {f"t{i}": _desc(f"t{i}", n) for i, n in enumerate(counts)}
    stats = compute_stats(corpus, mined, durations={})
    assert stats.aspects_per_track_median == sorted(counts)[(len(counts) - 1) // 2]
    assert stats.aspects_per_track_mean == pytest.approx(statistics.mean(counts))


_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)
_record = st.builds(
    CorpusRecord,
    track_id=st.text(min_size=1, max_size=8),
    audio_ref=st.text(min_size=1, max_size=8),
    caption=_text,
    sections=st.lists(st.tuples(_text, _text), max_size=3),
    genres=st.lists(_text, max_size=3),
    instruments=st.lists(_text, max_size=3),
    split=st.sampled_from(["train", "valid", "test"]),
    file_description=_text,
)


@settings(max_examples=50, deadline=None)
@given(st.lists(_record, max_size=6, unique_by=lambda r: r.track_id))
def test_round_trip_property(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    corpus = Corpus(records)
    save_corpus(corpus, path)
    assert load_corpus(path) == corpus
