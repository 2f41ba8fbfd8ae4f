import dataclasses

import numpy as np
import pytest
import torch

from ctxtts.corpus.types import ContextWindow
from ctxtts.data import context_for
from ctxtts.errors import InvalidInputError
from ctxtts.inference import (ContextOverride, borrowed_context, modality, read_outputs, sample_random_contexts,
                              synthesize_book, synthesize_with_context, write_outputs)
from ctxtts.training import build_bundle
from tests.conftest import tiny_config


@pytest.fixture(scope="module")
def bundle(small_split):
    return build_bundle(small_split[0], tiny_config(), seed=0)


@pytest.fixture(scope="module")
def book(small_split):
    return next(iter(small_split[1].books().values()))


def test_single_utterance_book(bundle, book):
    (res,) = synthesize_book(bundle, book[:1])
    assert res.index == 0 and not res.has_prev and res.window.preceding == ""
    assert res.mel.shape == (int(res.durations.sum()), bundle.config.mel_bins)
    assert res.f0.shape == res.energy.shape == (res.n_frames,)
    assert (res.f0 >= 0).all() and (res.f0 > 0).any()
    assert synthesize_book(bundle, []) == []


def test_chain_feeds_previous_output(bundle, book):
    results = synthesize_book(bundle, book)
    assert [r.has_prev for r in results] == [False] + [True] * (len(book) - 1)
    tce = bundle.config.tce
    for i in (1, 3):
        again = synthesize_with_context(bundle, book[i], context_for(book, i, tce), results[i - 1].mel)
        np.testing.assert_array_equal(again.mel, results[i].mel)


def test_without_ace_order_does_not_matter(bundle, book):
    results = synthesize_book(bundle, book, use_ace=False)
    tce = bundle.config.tce
    for i in reversed(range(len(book))):
        alone = synthesize_with_context(bundle, book[i], context_for(book, i, tce), None, use_ace=False)
        np.testing.assert_array_equal(alone.mel, results[i].mel)
    assert bundle.config.use_ace  # restored after the call


def test_causality_of_the_chain(bundle, book):
    base = synthesize_book(bundle, book, mode="pre")
    changed = list(book)
    changed[4] = dataclasses.replace(book[4], text="zz " + book[4].text)
    other = synthesize_book(bundle, changed, mode="pre")
    for i in range(4):
        np.testing.assert_array_equal(base[i].mel, other[i].mel)
    assert other[4].window.preceding == base[4].window.preceding


def test_primer_mel(bundle, book):
    primed = synthesize_book(bundle, book[:2], primer_mel=book[0].mel)
    assert primed[0].has_prev
    plain = synthesize_book(bundle, book[:2])
    assert not np.array_equal(primed[0].mel, plain[0].mel)


def test_k_override_limits_windows(bundle, book):
    for k in (0, 5, 64):
        results = synthesize_book(bundle, book, k_override=k)
        assert all(r.window.k == k for r in results)
        assert all(len(r.window.preceding) <= k and len(r.window.succeeding) <= k for r in results)
    with pytest.raises(InvalidInputError):
        synthesize_book(bundle, book, k_override=-1)


def test_override_replaces_context_and_continues_chain(bundle, book):
    ov = borrowed_context(book, 1, bundle.config.tce)
    results = synthesize_book(bundle, book[:4], overrides={2: ov})
    assert results[2].override == book[1].uid and results[2].window == ov.window
    tce = bundle.config.tce
    nxt = synthesize_with_context(bundle, book[3], context_for(book[:4], 3, tce), results[2].mel)
    np.testing.assert_array_equal(nxt.mel, results[3].mel)
    with pytest.raises(InvalidInputError):
        synthesize_book(bundle, book[:4], overrides={9: ov})


def test_explicit_context_matters(bundle, book):
    a = synthesize_with_context(bundle, book[2], ContextWindow("", "", 16))
    b = synthesize_with_context(bundle, book[2], ContextWindow("ka UP ni. ", "mo DOWN. ", 16), book[1].mel)
    assert not np.array_equal(a.mel, b.mel)


def test_input_validation(bundle, book, small_split):
    with pytest.raises(InvalidInputError):
        synthesize_book(bundle, book[1:])
    stranger = [dataclasses.replace(u, speaker_id="nobody") for u in book]
    with pytest.raises(InvalidInputError):
        synthesize_book(bundle, stranger)
    thin = [dataclasses.replace(u, mel=u.mel[:, :3]) for u in book]
    with pytest.raises(InvalidInputError):
        synthesize_book(bundle, thin)


def test_modality_context_restores_on_error(bundle):
    saved = bundle.model.cfg
    with pytest.raises(RuntimeError):
        with modality(bundle.model, use_ace=False, mode="none"):
            assert not bundle.model.cfg.use_ace and not bundle.model.tce.config.enabled
            raise RuntimeError
    assert bundle.model.cfg == saved and bundle.model.tce.config == saved.tce


def test_random_contexts(small_corpus, bundle):
    target = small_corpus.utterances[3].uid
    tce = bundle.config.tce
    a = sample_random_contexts(small_corpus, target, 3, seed=5, tce=tce)
    b = sample_random_contexts(small_corpus, target, 3, seed=5, tce=tce)
    assert [c.source for c in a] == [c.source for c in b]
    assert len({c.source for c in a}) == 3 and target not in {c.source for c in a}
    with pytest.raises(InvalidInputError):
        sample_random_contexts(small_corpus, target, len(small_corpus.utterances), seed=0, tce=tce)


def test_borrowed_context_uses_ground_truth_predecessor(book, bundle):
    ov = borrowed_context(book, 3, bundle.config.tce, k=8)
    np.testing.assert_array_equal(ov.prev_mel, book[2].mel)
    assert ov.window.k == 8
    assert borrowed_context(book, 0, bundle.config.tce).prev_mel is None
    with pytest.raises(InvalidInputError):
        borrowed_context(book, len(book), bundle.config.tce)


def test_outputs_roundtrip(bundle, book, tmp_path):
    results = synthesize_book(bundle, book)
    path = tmp_path / "out.feats"
    sidecar = write_outputs(results, path, bundle.config.mel_bins, 100.0)
    assert sidecar.exists()
    stored = read_outputs(path)
    assert list(stored) == [r.uid for r in results]
    for r in results:
        s = stored[r.uid]
        np.testing.assert_allclose(s.mel, r.mel, rtol=0, atol=0)
        np.testing.assert_allclose(s.f0, r.f0.astype(np.float32), rtol=0, atol=0)
        assert s.record["durations"] == r.durations.tolist() and s.record["k"] == r.window.k
    with pytest.raises(InvalidInputError):
        read_outputs(tmp_path / "missing.feats")
