import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from retts.config import load_config
from retts.data import SyntheticWorld
from retts.model import PhonemeSequence, ProsodyTrack, InsertionTTS
from retts.numerics import NumericError, RngStream, Tensor
from retts.training import (
    Discriminator,
    LambState,
    Stage1Prediction,
    Stage1Target,
    TrainConfig,
    Trainer,
    clip_grad_norm,
    feature_matching_loss,
    hinge_d_loss,
    lamb_step,
    poly_lr,
    sample_chunk,
    sample_prosody_mask,
    stage1_loss,
    stage2_loss,
    take_chunk,
)

TINY_MODEL, TINY_TRAIN = load_config("gradcheck")


# -- stage-1 loss --------------------------------------------------------------------

def _prediction(mel, d, p, e):
    return Stage1Prediction(Tensor(np.asarray(mel, float)), Tensor(np.log1p(np.asarray(d, float))),
                            Tensor(np.asarray(p, float)), Tensor(np.asarray(e, float)))


def test_perfect_prediction_and_peaked_alignment_gives_zero():
    mel = np.random.default_rng(0).normal(size=(5, 3))
    track = ProsodyTrack([2, 3], [0.1, 0.2], [0.3, 0.4])
    log_A = np.full((5, 2), -np.inf)
    log_A[:2, 0] = 0.0
    log_A[2:, 1] = 0.0
    out = stage1_loss(_prediction(mel, [2, 3], [0.1, 0.2], [0.3, 0.4]), Stage1Target(mel, track),
                      Tensor(log_A), TrainConfig())
    assert out.total.item() == 0.0


def test_mel_off_by_one():
    mel = np.zeros((4, 3))
    track = ProsodyTrack([1, 3], [0.0, 0.0], [0.0, 0.0])
    out = stage1_loss(_prediction(mel + 1, [1, 3], [0, 0], [0, 0]), Stage1Target(mel, track), None,
                      TrainConfig())
    assert out.mel_mse.item() == 1.0 and out.total.item() == 1.0


def test_stage1_loss_matches_scripted_computation():
    rng = np.random.default_rng(1)
    cfg = TrainConfig(alpha_dur=0.1, alpha_pitch=0.1, alpha_energy=0.1, alpha_align=1.0)
    mel, mel_hat = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    d = np.array([2, 1, 3])
    track = ProsodyTrack(d, rng.normal(size=3), rng.normal(size=3))
    pred = Stage1Prediction(Tensor(mel_hat), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)),
                            Tensor(rng.normal(size=3)))
    out = stage1_loss(pred, Stage1Target(mel, track), None, cfg)
    expected = (np.mean((mel_hat - mel) ** 2)
                + 0.1 * np.mean((pred.log_duration.data - np.log1p(d)) ** 2)
                + 0.1 * np.mean((pred.pitch.data - track.pitch) ** 2)
                + 0.1 * np.mean((pred.energy.data - track.energy) ** 2))
    assert abs(out.total.item() - expected) < 1e-6
    v = out.values()
    recomposed = (v["mel_mse"] + 0.1 * v["dur_mse"] + 0.1 * v["pitch_mse"] + 0.1 * v["energy_mse"]
                  + 1.0 * v["align_loss"])
    assert recomposed == v["total"]


def test_stage1_loss_shape_mismatch():
    track = ProsodyTrack([1, 1], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        stage1_loss(_prediction(np.zeros((3, 2)), [1, 1], [0, 0], [0, 0]),
                    Stage1Target(np.zeros((2, 2)), track), None, TrainConfig())


# -- adversarial losses ------------------------------------------------------------------

@pytest.mark.parametrize("real,fake,expected", [(1, -1, 0), (0, 0, 2), (-1, 2, 5)])
def test_hinge_hand_cases(real, fake, expected):
    assert hinge_d_loss(real, fake).item() == expected


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_hinge_nonnegative_and_zero_iff_margins(real, fake):
    value = hinge_d_loss(real, fake).item()
    assert value >= 0
    assert (value == 0) == (real >= 1 and fake <= -1)


def test_feature_matching_hand_cases():
    a = [Tensor(np.ones((3, 4)))]
    assert feature_matching_loss(a, a).item() == 0
    assert feature_matching_loss(a, [Tensor(np.full((3, 4), 1.5))]).item() == 0.5
    real = [Tensor(np.zeros((2, 2))), Tensor(np.zeros(3))]
    fake = [Tensor(np.array([[1.0, -1.0], [2.0, 0.0]])), Tensor(np.array([3.0, 0.0, 0.0]))]
    # (1/2) * ((4/4) + (3/3))
    assert feature_matching_loss(real, fake).item() == 1.0


def test_feature_matching_shape_mismatch():
    with pytest.raises(ValueError):
        feature_matching_loss([Tensor(np.zeros(3))], [Tensor(np.zeros(4))])
    with pytest.raises(ValueError):
        feature_matching_loss([Tensor(np.zeros(3))], [])


@pytest.mark.parametrize("stg1,feat,expected", [(1.0, 0.5, 6.0), (2.5, 0.0, 2.5), (0.0, 1.0, 10.0)])
def test_stage2_loss_hand_cases(stg1, feat, expected):
    assert stage2_loss(stg1, feat, TrainConfig().lambda_feat) == expected


def test_discriminator_exposes_every_feature():
    disc = Discriminator(5, 32, (4, 6, 8), RngStream(0, "d"))
    score, feats = disc(Tensor(np.zeros((32, 5), dtype=np.float32)))
    assert score.shape == () and len(feats) == 3
    assert [f.data.size for f in feats] == disc.feature_dims
    with pytest.raises(ValueError):
        disc(Tensor(np.zeros((31, 5), dtype=np.float32)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 120), st.integers(0, 10_000))
def test_chunks_lie_inside_utterance(n_frames, seed):
    start = sample_chunk(n_frames, 32, RngStream(seed, "chunk"))
    chunk = take_chunk(Tensor(np.arange(n_frames * 2, dtype=float).reshape(n_frames, 2) + 1), start, 32)
    assert chunk.shape == (32, 2)
    if n_frames >= 32:
        assert start + 32 <= n_frames and np.all(chunk.data != 0)


# -- masking ------------------------------------------------------------------------------

def test_single_word_mask_covers_everything():
    t = PhonemeSequence.from_words([[1, 2, 3]])
    for i in range(50):
        spec = sample_prosody_mask(t, RngStream(i, "mask"), probability=1.0)
        assert spec.apply and spec.word_span == (0, 0) and spec.phoneme_mask.all()


def test_mask_covers_exactly_the_span_words():
    t = PhonemeSequence.from_words([[1], [2, 3], [4, 5, 6], [7], [8, 9]])
    stream = RngStream(0, "mask")
    for _ in range(200):
        spec = sample_prosody_mask(t, stream)
        if not spec.apply:
            assert not spec.phoneme_mask.any()
            continue
        a, b = spec.word_span
        assert 1 <= b - a + 1 <= 3
        np.testing.assert_array_equal(spec.phoneme_mask, (t.word_index >= a) & (t.word_index <= b))


def test_mask_statistics():
    t = PhonemeSequence.from_words([[i] for i in range(10)])
    stream = RngStream(0, "mask-stats")
    draws = [sample_prosody_mask(t, stream) for _ in range(10_000)]
    rate = np.mean([d.apply for d in draws])
    assert abs(rate - 0.5) <= 0.02
    spans = [d.word_span[1] - d.word_span[0] + 1 for d in draws if d.apply]
    counts = np.bincount(spans, minlength=4)[1:]
    assert chisquare(counts).pvalue > 0.01


# -- optimizer and schedule -----------------------------------------------------------------

def test_lamb_zero_gradient_changes_nothing():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    lamb_step([p], [np.zeros(2)], LambState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_lamb_zero_lr_changes_nothing():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    lamb_step([p], [np.array([0.3, 0.7])], LambState(), lr=0.0, weight_decay=1e-2)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_lamb_scalar_hand_unrolled():
    lr, b1, b2, eps = 0.01, 0.9, 0.98, 1e-6
    p = Tensor(np.array([1.0]), requires_grad=True)
    lamb_step([p], [np.array([1.0])], LambState(), lr, b1, b2, eps)
    m_hat = (1 - b1) * 1.0 / (1 - b1)
    v_hat = (1 - b2) * 1.0 / (1 - b2)
    u = m_hat / (np.sqrt(v_hat) + eps)
    trust = abs(1.0) / abs(u)
    assert abs(p.data[0] - (1.0 - lr * trust * u)) < 1e-7


def test_lamb_gradient_scale_invariance():
    rng = np.random.default_rng(0)
    w0, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a = Tensor(w0.copy(), requires_grad=True)
    b = Tensor(w0.copy(), requires_grad=True)
    lamb_step([a], [g], LambState(), 0.01, eps=1e-12)
    lamb_step([b], [10 * g], LambState(), 0.01, eps=1e-12)
    np.testing.assert_allclose(a.data, b.data, atol=1e-10)


def test_lamb_rejects_non_finite_without_changes():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = LambState()
    with pytest.raises(NumericError):
        lamb_step([p], [np.array([np.nan, 1.0])], state, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 0


def test_poly_lr_endpoints():
    assert poly_lr(0) == 0.0
    assert poly_lr(1000) == pytest.approx(0.1)
    assert poly_lr(80000) == 0.0
    assert poly_lr(500) == pytest.approx(0.05)
    assert poly_lr(40500) == pytest.approx(0.1 * 0.5 ** 0.5)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


# -- loop -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    world = SyntheticWorld(0, TINY_MODEL.n_mels, TINY_MODEL.feature_dim, TINY_MODEL.phoneme_vocab)
    return world.corpus(2, 2)[1]


def _read_log(path):
    return [line.rsplit("\twall=", 1)[0] for line in path.read_text().splitlines()]


def test_trainer_same_seed_same_log(tmp_path, tiny_data):
    for name in ("a", "b"):
        Trainer(InsertionTTS(TINY_MODEL, seed=0), TINY_TRAIN, tiny_data, seed=3,
                log_path=tmp_path / f"{name}.log").run(4)
    assert _read_log(tmp_path / "a.log") == _read_log(tmp_path / "b.log")


def test_trainer_log_records(tmp_path, tiny_data):
    rec = Trainer(InsertionTTS(TINY_MODEL, seed=0), TINY_TRAIN, tiny_data,
                  log_path=tmp_path / "m.log").run(2)[-1]
    for key in ("step", "stage", "lr", "mel_mse", "dur_mse", "pitch_mse", "energy_mse",
                "align_loss", "total", "wall"):
        assert key in rec
    assert list(rec)[-1] == "wall"


def test_stage2_step_is_finite(tiny_data):
    tr = Trainer(InsertionTTS(TINY_MODEL, seed=0), TINY_TRAIN, tiny_data, stage=2)
    rec = tr.run(2)[-1]
    for key in ("d_loss", "feat_loss", "stage2_total", "total"):
        assert np.isfinite(float(rec[key]))


def test_trainer_rejects_mismatched_data(tiny_data):
    cfg, _ = load_config("toy")
    with pytest.raises(ValueError):
        Trainer(InsertionTTS(cfg), TINY_TRAIN, tiny_data)
    with pytest.raises(ValueError):
        Trainer(InsertionTTS(TINY_MODEL), TINY_TRAIN, [])
