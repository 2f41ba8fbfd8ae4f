import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctxtts.errors import InvalidInputError, UndefinedMetricError
from ctxtts.metrics import (MCD_CONST, ProsodyScores, SpeakerClassifier, absolute, dtw_align, dtw_from_costs,
                            evaluate_run, f0_alignment, f0_rmse, gpe, mcd, mel_to_cepstrum, read_scores_table,
                            score_utterance, speaker_accuracy, train_speaker_classifier, write_scores_table)
from tests.oracles import brute_force_dtw

# -- DTW ----------------------------------------------------------------------------


def test_dtw_hand_case():
    path = dtw_align([1.0, 2.0, 3.0], [1.0, 3.0], absolute)
    assert path.cost == 1.0
    assert path.pairs[0] == (0, 0) and path.pairs[-1] == (2, 1)


def test_dtw_identical_sequences_follow_diagonal():
    x = np.arange(5.0)
    path = dtw_align(x, x)
    assert path.cost == 0.0 and path.pairs == tuple((i, i) for i in range(5))


def test_dtw_single_frame():
    path = dtw_align([[1.0, 1.0]], [[1.0, 1.0], [4.0, 5.0]])
    assert path.pairs == ((0, 0), (0, 1)) and path.cost == 5.0
    with pytest.raises(InvalidInputError):
        dtw_align([], [1.0])


costs_matrix = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 10, allow_nan=False)))


@settings(max_examples=60, deadline=None)
@given(costs_matrix)
def test_dtw_matches_brute_force(costs):
    path = dtw_from_costs(costs)
    expected, _ = brute_force_dtw(costs)
    assert path.cost == pytest.approx(expected, abs=1e-9)
    # the returned path is valid and its cost is the reported one
    pairs = path.pairs
    assert pairs[0] == (0, 0) and pairs[-1] == (costs.shape[0] - 1, costs.shape[1] - 1)
    for (a, b), (c, d) in zip(pairs, pairs[1:]):
        assert (c - a, d - b) in ((1, 0), (0, 1), (1, 1))
    assert sum(costs[a, b] for a, b in pairs) == pytest.approx(path.cost, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(costs_matrix)
def test_dtw_symmetry(costs):
    assert dtw_from_costs(costs).cost == pytest.approx(dtw_from_costs(costs.T).cost, abs=1e-9)


# -- MCD ------------------------------------------------------------------------------


def test_mcd_constant():
    assert MCD_CONST == pytest.approx(6.141851463713754, abs=1e-12)


def test_mcd_unit_offset_in_one_coefficient():
    ref = np.zeros((8, 13))
    test = ref.copy()
    test[:, 1] = 1.0
    assert mcd(ref, test) == pytest.approx(MCD_CONST)
    # c0 is ignored
    test[:, 0] = 50.0
    assert mcd(ref, test) == pytest.approx(MCD_CONST)
    assert mcd(ref, ref) == 0.0


def test_mcd_errors():
    with pytest.raises(InvalidInputError):
        mcd(np.zeros((3, 13)), np.zeros((3, 12)))
    with pytest.raises(InvalidInputError):
        mcd(np.zeros((0, 13)), np.zeros((3, 13)))
    with pytest.raises(InvalidInputError):
        mel_to_cepstrum(np.zeros((4, 12)))


def test_cepstrum_is_orthonormal_dct():
    mel = np.random.default_rng(0).normal(size=(3, 20))
    n = 20
    basis = np.array([[math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n)] for k in range(13)])
    basis *= math.sqrt(2 / n)
    basis[0] /= math.sqrt(2)
    np.testing.assert_allclose(mel_to_cepstrum(mel), mel @ basis.T, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 13), elements=st.floats(-5, 5)), arrays(np.float64, (7, 13), elements=st.floats(-5, 5)))
def test_mcd_nonnegative_and_symmetric(a, b):
    assert mcd(a, b) >= 0
    assert mcd(a, b) == pytest.approx(mcd(b, a), abs=1e-9)


# -- F0 ---------------------------------------------------------------------------------


def test_f0_constant_offset():
    ref = np.full(20, 100.0)
    assert f0_rmse(ref, ref + 10.0) == pytest.approx(10.0)
    assert f0_rmse(ref, ref) == 0.0
    assert f0_rmse(ref, ref * 1.1, unit="log") == pytest.approx(math.log(1.1))


def test_gpe_one_gross_error_in_ten():
    ref = np.full(10, 100.0)
    test = ref.copy()
    test[9] = 150.0
    assert gpe(ref, test) == pytest.approx(10.0)
    assert f0_rmse(ref, test) == pytest.approx(math.sqrt(50.0 ** 2 / 10))
    assert gpe(ref, test, threshold=0.6) == 0.0


def test_unvoiced_handling():
    ref = np.array([0, 100, 100, 0, 120.0])
    path, r, t = f0_alignment(ref, ref)
    assert path.cost == 0.0 and len(r) == 3
    with pytest.raises(UndefinedMetricError):
        f0_rmse(np.zeros(5), np.full(5, 100.0))
    with pytest.raises(InvalidInputError):
        gpe(ref, ref, threshold=-1)
    with pytest.raises(InvalidInputError):
        f0_rmse(ref, ref, unit="cents")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(60, 400)), arrays(np.float64, 9, elements=st.floats(60, 400)),
       st.floats(0.25, 4.0))
def test_f0_scale_invariance(ref, test, c):
    assert gpe(ref * c, test * c) == pytest.approx(gpe(ref, test))
    assert f0_rmse(ref * c, test * c, unit="log") == pytest.approx(f0_rmse(ref, test, unit="log"), abs=1e-9)
    assert f0_rmse(ref * c, test * c) == pytest.approx(c * f0_rmse(ref, test), rel=1e-9)


def test_score_utterance_matches_separate_metrics(small_corpus):
    u, v = small_corpus.utterances[:2]
    s = score_utterance("x", u.mel, u.pitch, v.mel, v.pitch)
    assert s.f0_rmse == pytest.approx(f0_rmse(u.pitch, v.pitch))
    assert s.gpe == pytest.approx(gpe(u.pitch, v.pitch))
    assert s.mcd == pytest.approx(mcd(mel_to_cepstrum(u.mel), mel_to_cepstrum(v.mel)))


# -- speaker classifier ----------------------------------------------------------------


def test_classifier_separates_training_speakers(small_corpus):
    clf = train_speaker_classifier(small_corpus, seed=0)
    feats = [(u.mel, u.speaker_id) for u in small_corpus.utterances]
    assert speaker_accuracy(feats, clf) == 100.0


def test_classifier_at_chance_on_uninformative_input(small_corpus):
    clf = train_speaker_classifier(small_corpus, seed=0)
    blank = np.zeros_like(small_corpus.utterances[0].mel)
    feats = [(blank, u.speaker_id) for u in small_corpus.utterances]
    # one constant prediction against balanced labels
    assert speaker_accuracy(feats, clf) == 50.0


def test_classifier_errors(small_corpus):
    clf = SpeakerClassifier(["a", "b"])
    with pytest.raises(InvalidInputError):
        clf.predict([np.zeros((3, 4))])
    with pytest.raises(InvalidInputError):
        clf.fit([])
    trained = train_speaker_classifier(small_corpus)
    with pytest.raises(InvalidInputError):
        speaker_accuracy([(small_corpus.utterances[0].mel, "zz")], trained)


# -- aggregation --------------------------------------------------------------------------


class _Out:
    def __init__(self, utt):
        self.mel, self.f0 = utt.mel, utt.pitch


def test_evaluate_ground_truth_is_zero(small_split):
    test = small_split[1]
    outputs = {u.uid: _Out(u) for u in test.utterances}
    scores, per = evaluate_run(outputs, test)
    assert scores.mcd == 0.0 and scores.f0_rmse == 0.0 and scores.gpe == 0.0
    assert math.isnan(scores.speaker_acc) and len(per) == len(test.utterances)
    outputs.pop(test.utterances[0].uid)
    with pytest.raises(InvalidInputError):
        evaluate_run(outputs, test)


def test_scores_validation_and_table(tmp_path):
    with pytest.raises(InvalidInputError):
        ProsodyScores(-1.0, 0.0, 0.0, 0.0)
    with pytest.raises(InvalidInputError):
        ProsodyScores(1.0, 0.0, 101.0, 0.0)
    rows = {"ace": ProsodyScores(5.25, 12.5, 3.0, 100.0), "gt": ProsodyScores(0.0, 0.0, 0.0, float("nan"))}
    path = write_scores_table(rows, tmp_path / "s.tsv")
    assert path.read_text().splitlines()[0] == "id\tMCD\tF0-RMSE\tGPE\tACC"
    back = read_scores_table(path)
    assert back["ace"] == rows["ace"] and math.isnan(back["gt"].speaker_acc)
    (tmp_path / "bad.tsv").write_text("nope\n")
    with pytest.raises(InvalidInputError):
        read_scores_table(tmp_path / "bad.tsv")


def test_evaluate_run_accepts_utterance_subset(small_split):
    test = small_split[1]
    subset = [u for u in test.utterances if u.index > 0]
    scores, per = evaluate_run({u.uid: _Out(u) for u in subset}, subset)
    assert len(per) == len(subset) and scores.f0_rmse == 0.0
