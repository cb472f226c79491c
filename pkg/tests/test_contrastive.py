import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import mined, noise_clip, tiny_model
from musictext.audio import AudioClip
from musictext.contrastive import (
    BatchSpec,
    LossConfig,
    PlateauTracker,
    SentenceSampleRule,
    TrainingAborted,
    TrainItem,
    TrainSchedule,
    crop_audio,
    nt_xent_loss,
    retrieval_evaluator,
    sample_text,
    train,
)
from musictext.evalharness import EvalCollection, EvalItem

square = st.integers(2, 6).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-1, 1, allow_nan=False))
)


def test_identity_two_by_two():
    assert nt_xent_loss(np.eye(2), LossConfig(1.0)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)


def test_single_pair_is_zero():
    for s in (-1.0, 0.0, 0.7):
        assert nt_xent_loss([[s]], LossConfig(0.07)) == 0.0


def test_symmetric_equals_average_of_directions():
    s = np.random.default_rng(0).uniform(-1, 1, (5, 5))
    one = nt_xent_loss(s)
    other = nt_xent_loss(s.T)
    assert nt_xent_loss(s, LossConfig(direction="symmetric")) == pytest.approx((one + other) / 2, abs=1e-12)


def test_tensor_in_tensor_out():
    s = torch.eye(3, requires_grad=True)
    loss = nt_xent_loss(s)
    assert isinstance(loss, torch.Tensor) and loss.requires_grad


def test_loss_errors():
    with pytest.raises(ValueError):
        nt_xent_loss(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(direction="text_to_audio")


@settings(max_examples=60, deadline=None)
@given(square, st.floats(0.05, 2.0))
def test_loss_positive_for_two_or_more(s, tau):
    assert nt_xent_loss(s, LossConfig(tau)) > 0


@settings(max_examples=60, deadline=None)
@given(square, st.floats(-3, 3), st.floats(0.05, 2.0))
def test_row_shift_invariance(s, c, tau):
    shifted = s.copy()
    shifted[0] += c
    assert nt_xent_loss(shifted, LossConfig(tau)) == pytest.approx(nt_xent_loss(s, LossConfig(tau)), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(square, st.floats(0.0, 1.0), st.floats(0.05, 2.0))
def test_lowering_diagonal_never_lowers_loss(s, drop, tau):
    lowered = s.copy()
    lowered[0, 0] -= drop
    assert nt_xent_loss(lowered, LossConfig(tau)) >= nt_xent_loss(s, LossConfig(tau)) - 1e-12


def test_sample_text_rules():
    rng = np.random.default_rng(0)
    spec, rule = BatchSpec(), SentenceSampleRule()
    seven = mined("t", aspects=[f"a{i}" for i in range(7)])
    for _ in range(50):
        parts = sample_text(seven, rule, spec, rng).split(", ")
        assert len(set(parts)) == len(parts) == 5
    assert sample_text(mined("t", ["jazz"]), rule, spec, rng) == "jazz"


def test_consecutive_prefix():
    rng = np.random.default_rng(1)
    d = mined("t", sentences=["s1.", "s2.", "s3."])
    rule = SentenceSampleRule("consecutive_prefix")
    seen = {sample_text(d, rule, BatchSpec(), rng) for _ in range(200)}
    assert seen == {"s1.", "s1. s2.", "s1. s2. s3."}


def test_sample_text_uses_both_kinds():
    rng = np.random.default_rng(2)
    d = mined("t", ["jazz"], ["A long smoky ballad."])
    seen = {sample_text(d, SentenceSampleRule(), BatchSpec(), rng) for _ in range(100)}
    assert seen == {"jazz", "A long smoky ballad."}


def test_sample_text_needs_texts():
    with pytest.raises(ValueError):
        sample_text(mined("t"), SentenceSampleRule(), BatchSpec(), np.random.default_rng())


def test_batch_and_rule_validation():
    with pytest.raises(ValueError):
        BatchSpec(batch_size=1)
    with pytest.raises(ValueError):
        SentenceSampleRule("shuffle")
    with pytest.raises(ValueError):
        TrainSchedule(lr_decay_factor=1.0)


def test_crop_of_long_clip():
    sr = 100
    clip = AudioClip(np.arange(29 * sr, dtype=float), sr)
    rng = np.random.default_rng(3)
    starts = set()
    for _ in range(300):
        c = crop_audio(clip, 10.0, rng)
        assert len(c) == 10 * sr
        start = int(c.samples[0])
        np.testing.assert_array_equal(c.samples, np.arange(start, start + 10 * sr))
        starts.add(start)
    assert min(starts) >= 0 and max(starts) <= 19 * sr
    assert min(starts) < 2 * sr and max(starts) > 17 * sr


def test_crop_of_exact_and_short_clips():
    exact = AudioClip(np.ones(1000), 100)
    assert crop_audio(exact, 10.0) == exact
    short = crop_audio(AudioClip(np.ones(300), 100), 10.0)
    assert len(short) == 1000
    assert short.samples[:300].sum() == 300 and not short.samples[300:].any()


def run_tracker(scores, **kw):
    tracker = PlateauTracker(TrainSchedule(**kw))
    lrs = []
    for s in scores:
        lrs.append(tracker.lr)
        tracker.update(s)
        if tracker.stopped:
            break
    return tracker, lrs


def test_plateau_stops_and_remembers_best():
    tracker, _ = run_tracker([0.1, 0.2, 0.2] + [0.15] * 20)
    assert tracker.epoch == 12 and tracker.best_epoch == 2 and tracker.stopped
    with pytest.raises(RuntimeError):
        tracker.update(1.0)


def test_plateau_decays_once_after_five_flat():
    tracker, lrs = run_tracker([0.1, 0.2, 0.3] + [0.3] * 5 + [0.4])
    assert tracker.decay_epochs == [8]
    assert lrs[-1] == pytest.approx(1e-5)
    assert not tracker.stopped


def test_plateau_decay_restarts_patience():
    tracker, _ = run_tracker([0.5] + [0.1] * 30)
    # epochs 6 and 11 would both be decay points, but 11 is the stop epoch
    assert tracker.decay_epochs == [6] and tracker.epoch == 11


# --- training loop ------------------------------------------------------------


def _items(n=4):
    words = ["piano", "guitar", "a", "b"]
    return [TrainItem(f"t{i}", noise_clip(1.0 + 0.3 * i, seed=i), mined(f"t{i}", [words[i % 4]])) for i in range(n)]


def _scripted(scores):
    feed = iter(scores)
    return lambda model: next(feed)


def test_train_restores_best_epoch_weights():
    model = tiny_model()
    snapshots = {}

    def keep(m, rec):
        snapshots[rec.epoch] = {k: v.clone() for k, v in m.state_dict().items()}

    scores = [0.1, 0.2, 0.2] + [0.1] * 20
    model, hist = train(model, _items(), None, BatchSpec(batch_size=4), TrainSchedule(initial_lr=1e-2),
                        evaluator=_scripted(scores), on_epoch_end=keep)  # fmt: skip
    assert len(hist.epochs) == 12 and hist.best_epoch == 2 and hist.stopped_early
    for k, v in model.state_dict().items():
        assert torch.equal(v, snapshots[2][k])
    assert not all(torch.equal(v, snapshots[12][k]) for k, v in model.state_dict().items())


def test_train_history_is_deterministic(tmp_path):
    def run(path):
        model, hist = train(tiny_model(), _items(), None, BatchSpec(batch_size=2), TrainSchedule(max_epochs=3),
                            seed=7, evaluator=_scripted([0.1, 0.2, 0.3]))  # fmt: skip
        hist.write(path)
        return model

    a = run(tmp_path / "a.jsonl")
    b = run(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(va, vb)


def test_train_actually_learns():
    model = tiny_model()
    schedule = TrainSchedule(initial_lr=3e-3, max_epochs=25)
    _, hist = train(model, _items(), None, BatchSpec(batch_size=4), schedule, evaluator=_scripted(range(25)))
    assert hist.epochs[-1].loss < hist.epochs[0].loss


def test_train_needs_two_tracks_and_validation():
    with pytest.raises(ValueError):
        train(tiny_model(), _items(1), None, evaluator=_scripted([0.0]))
    with pytest.raises(ValueError):
        train(tiny_model(), _items(), None)


def test_failed_validation_keeps_partial_history():
    def flaky(model, calls=[]):
        calls.append(1)
        if len(calls) == 3:
            raise RuntimeError("disk gone")
        return 0.5

    with pytest.raises(TrainingAborted) as err:
        train(tiny_model(), _items(), None, BatchSpec(batch_size=2), evaluator=flaky)
    assert len(err.value.history.epochs) == 2


def test_retrieval_evaluator_on_tiny_collection():
    model = tiny_model()
    clips = [noise_clip(1.0, seed=i) for i in range(3)]
    coll = EvalCollection([EvalItem(f"t{i}", f"t{i}.wav", [w]) for i, w in enumerate(["piano", "guitar", "a"])], clips=clips)
    score = retrieval_evaluator(model, coll)(model)
    assert 0.0 <= score <= 1.0
