import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retts.alignment import (
    Aligner,
    extract_durations,
    forward_sum_loss,
    pool_phoneme_prosody,
    soft_alignment,
)
from retts.numerics import ContractError, RngStream, Tensor, grad_check, log_softmax_lastdim

import reference as ref


def random_log_A(rng, T, N, ties=False):
    logits = rng.integers(-2, 2, size=(T, N)).astype(float) if ties else rng.normal(size=(T, N)) * 2
    return log_softmax_lastdim(Tensor(logits)).data


def test_single_phoneme_loss_is_sum_of_column():
    log_A = np.log(np.random.default_rng(0).uniform(0.1, 1.0, size=(5, 1)))
    assert forward_sum_loss(Tensor(log_A)).item() == pytest.approx(-log_A.sum(), abs=1e-12)


def test_uniform_two_by_three_hand_case():
    log_A = np.full((3, 2), math.log(0.5))
    assert forward_sum_loss(Tensor(log_A)).item() == pytest.approx(-math.log(0.25), abs=1e-12)


def test_dp_matches_enumeration_six_by_three():
    log_A = random_log_A(np.random.default_rng(1), 6, 3)
    assert abs(forward_sum_loss(Tensor(log_A)).item() - ref.brute_force_sum(log_A)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: st.tuples(st.just(n), st.integers(n, 7))),
       st.integers(0, 2**32 - 1), st.booleans())
def test_dp_and_viterbi_match_exhaustive_paths(nt, seed, ties):
    N, T = nt
    log_A = random_log_A(np.random.default_rng(seed), T, N, ties)
    assert abs(forward_sum_loss(Tensor(log_A)).item() - ref.brute_force_sum(log_A)) < 1e-6
    d = extract_durations(log_A)
    assert d.sum() == T and d.min() >= 1
    np.testing.assert_array_equal(d, ref.brute_force_best(log_A))


def test_viterbi_single_phoneme():
    np.testing.assert_array_equal(extract_durations(np.zeros((5, 1))), [5])


def test_viterbi_block_diagonal():
    A = np.full((5, 2), 0.05)
    A[:2, 0] = 0.95
    A[2:, 1] = 0.95
    np.testing.assert_array_equal(extract_durations(np.log(A)), [2, 3])


def test_viterbi_ties_advance_early():
    # all paths tie; boundaries land as early as possible
    np.testing.assert_array_equal(extract_durations(np.zeros((6, 3))), [1, 1, 4])


def test_too_few_frames_is_contract_error():
    with pytest.raises(ContractError):
        forward_sum_loss(Tensor(np.zeros((2, 3))))
    with pytest.raises(ContractError):
        extract_durations(np.zeros((2, 3)))


def test_forward_sum_gradient():
    log_A = Tensor(random_log_A(np.random.default_rng(2), 6, 3), requires_grad=True)
    # some posteriors are ~1e-7, so a smaller step drowns them in roundoff
    assert grad_check(forward_sum_loss, log_A, eps=1e-4) < 1e-4


def test_forward_sum_gradient_is_minus_posterior_occupancy():
    log_A = random_log_A(np.random.default_rng(3), 5, 3)
    t = Tensor(log_A, requires_grad=True)
    forward_sum_loss(t).backward()
    # each frame is occupied by exactly one phoneme on every path
    np.testing.assert_allclose(-t.grad.sum(axis=1), 1.0, atol=1e-10)


def test_loss_invariant_to_row_shift_after_renormalization():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 3))
    shifted = logits + rng.normal(size=(6, 1)) * 5
    a = forward_sum_loss(log_softmax_lastdim(Tensor(logits))).item()
    b = forward_sum_loss(log_softmax_lastdim(Tensor(shifted))).item()
    assert a == pytest.approx(b, abs=1e-10)


# -- soft alignment -------------------------------------------------------------------

def _aligner():
    return Aligner(10, 5, 4, RngStream(0, "align")).to(np.float64)


def test_soft_alignment_rows_are_distributions():
    al = _aligner()
    mel = Tensor(np.random.default_rng(5).normal(size=(7, 5)))
    A = soft_alignment(mel, al.embed([1, 2, 3]), al).A
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)


def test_soft_alignment_single_phoneme_is_ones():
    al = _aligner()
    A = soft_alignment(Tensor(np.ones((4, 5))), al.embed([7]), al).A
    np.testing.assert_allclose(A, np.ones((4, 1)))


def test_soft_alignment_matches_distance_softmax():
    al = _aligner()
    mel = np.random.default_rng(6).normal(size=(6, 5))
    emb = al.embed([1, 4])
    pm, pt = al.project_mel(Tensor(mel)).data, al.project_text(emb).data
    dist = ((pm[:, None, :] - pt[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(soft_alignment(Tensor(mel), emb, al).A, ref.softmax(-dist), atol=1e-10)


def test_soft_alignment_distance_dominance():
    al = _aligner()
    al.text_out.weight.data *= 10
    al.text_out.bias.data *= 10
    emb = al.embed([1, 4, 6])
    pt = al.project_text(emb).data
    # every mel frame projects exactly onto phoneme 1
    al.mel_out.weight.data[...] = 0
    al.mel_out.bias.data[...] = pt[1]
    A = soft_alignment(Tensor(np.random.default_rng(8).normal(size=(4, 5))), emb, al).A
    assert np.all(A[:, 1] > 0.99)


def test_soft_alignment_requires_enough_frames():
    al = _aligner()
    with pytest.raises(ContractError):
        soft_alignment(Tensor(np.zeros((2, 5))), al.embed([1, 2, 3]), al)


# -- pooling ---------------------------------------------------------------------------

def test_pool_hand_cases():
    p, e = pool_phoneme_prosody([1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, 1.0], [2, 2])
    np.testing.assert_array_equal(p, [1.5, 3.5])
    np.testing.assert_array_equal(e, [0.0, 1.0])
    p, _ = pool_phoneme_prosody(np.full(6, 2.5), np.zeros(6), [1, 3, 2])
    np.testing.assert_array_equal(p, [2.5, 2.5, 2.5])


def test_pool_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = rng.integers(1, 6, size=rng.integers(1, 8))
        fp, fe = rng.normal(size=d.sum()), rng.normal(size=d.sum())
        p, e = pool_phoneme_prosody(fp, fe, d)
        np.testing.assert_allclose(p, ref.pool(fp, d), rtol=1e-12)
        np.testing.assert_allclose(e, ref.pool(fe, d), rtol=1e-12)


def test_pool_rejects_wrong_total():
    with pytest.raises(ValueError):
        pool_phoneme_prosody(np.zeros(5), np.zeros(5), [2, 2])
