import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retts.config import load_config
from retts.data import SyntheticWorld
from retts.inference import (
    InsertionRequest,
    SplicePlan,
    generate_full,
    insert_words,
    make_insertion_request,
    splice,
)
from retts.model import PhonemeSequence, InsertionTTS

MC, _ = load_config("gradcheck")


@pytest.fixture(scope="module")
def model():
    return InsertionTTS(MC, seed=4)


@pytest.fixture(scope="module")
def utt():
    world = SyntheticWorld(0, MC.n_mels, MC.feature_dim, MC.phoneme_vocab)
    return world.utterance(world.speaker(0), 0)


# -- splice -------------------------------------------------------------------------

def naive_splice(original, segment, left):
    rows = [original[i] for i in range(left)] + list(segment) + \
           [original[i] for i in range(left, len(original))]
    return np.array(rows)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 6), st.data())
def test_splice_matches_naive_concat(t0, length, data):
    rng = np.random.default_rng(t0 * 31 + length)
    original, segment = rng.normal(size=(t0, 3)), rng.normal(size=(length, 3))
    left = data.draw(st.integers(0, t0))
    out = splice(original, segment, SplicePlan(left, length, t0 - left))
    assert np.array_equal(out, naive_splice(original, segment, left))


def test_splice_edge_cases():
    original = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(splice(original, np.zeros((0, 3)), SplicePlan(2, 0, 2)), original)
    seg = np.ones((2, 3))
    assert np.array_equal(splice(original, seg, SplicePlan(0, 2, 4))[:2], seg)
    with pytest.raises(ValueError):
        splice(original, seg, SplicePlan(1, 2, 2))
    with pytest.raises(ValueError):
        splice(original, seg, SplicePlan(1, 3, 3))
    with pytest.raises(ValueError):
        SplicePlan(-1, 0, 0)


def test_plan_text_round_trip():
    plan = SplicePlan(10, 4, 7)
    assert plan.to_text() == "left\t10\ninsert\t4\nright\t7\n"
    assert SplicePlan.from_text(plan.to_text()) == plan


# -- requests -----------------------------------------------------------------------

def test_request_invariants(utt):
    words = utt.phonemes.words()
    with pytest.raises(ValueError):
        InsertionRequest(utt.mel, utt.phonemes, utt.prosody, utt.phonemes, (0, 1))
    with pytest.raises(ValueError):
        make_insertion_request(utt.mel, utt.phonemes, utt.prosody, len(words) + 1, [[1]])
    with pytest.raises(ValueError):
        make_insertion_request(utt.mel[:-1], utt.phonemes, utt.prosody, 0, [[1]])


# -- generation -----------------------------------------------------------------------

def test_generate_full_frame_count_and_determinism(model, utt):
    text = PhonemeSequence.from_words([[1, 2], [3, 4, 5]])
    mel, d = generate_full(text, utt.ref_feature, model, return_durations=True)
    assert mel.shape == (d.sum(), MC.n_mels)
    assert np.array_equal(mel, generate_full(text, utt.ref_feature, model))
    with pytest.raises(ValueError):
        generate_full(PhonemeSequence([], []), utt.ref_feature, model)


def test_generate_does_not_touch_model_state(model, utt):
    model.train()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    generate_full(PhonemeSequence.from_words([[1]]), utt.ref_feature, model)
    assert model.training and all(m.training for m in model.modules())
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])
    model.eval()


@pytest.mark.parametrize("at_word,words", [(0, [[1, 2]]), (2, [[3], [4, 5]]), (None, [[6, 7, 8]])])
def test_insertion_contract(model, utt, at_word, words):
    n_words = utt.phonemes.n_words
    at_word = n_words if at_word is None else at_word
    req = make_insertion_request(utt.mel, utt.phonemes, utt.prosody, at_word, words)
    mel_before = utt.mel.copy()
    result = insert_words(req, model, utt.ref_feature)
    start, end = req.insert_phoneme_range
    left = int(utt.prosody.duration[:start].sum())
    plan = result.plan
    assert plan.left_frames == left
    assert plan.left_frames + plan.right_frames == utt.n_frames
    assert plan.insert_frames == result.durations[start:end].sum() == len(result.segment)
    assert np.array_equal(result.full_mel[:left], utt.mel[:left])
    assert np.array_equal(result.full_mel[left + plan.insert_frames:], utt.mel[left:])
    assert np.array_equal(result.full_mel[left:left + plan.insert_frames], result.segment)
    # context durations are the original ones
    assert np.array_equal(np.delete(result.durations, np.arange(start, end)), utt.prosody.duration)
    assert np.array_equal(utt.mel, mel_before)


def test_empty_insertion_is_identity(model, utt):
    req = InsertionRequest(utt.mel, utt.phonemes, utt.prosody, utt.phonemes, (2, 2))
    result = insert_words(req, model, utt.ref_feature)
    assert result.plan.insert_frames == 0 and len(result.segment) == 0
    assert np.array_equal(result.full_mel, utt.mel)
