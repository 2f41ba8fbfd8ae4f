import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ctxtts.checkpoint import load_checkpoint, save_checkpoint
from ctxtts.data import Batch
from ctxtts.errors import InvalidInputError, TrainingDivergedError
from ctxtts.model import ModelOutput
from ctxtts.training import (TABLE1_K, TrainConfig, ablation_matrix, build_bundle, epoch_batches, fine_tune_scale,
                             lr_schedule, total_loss, train)
from ctxtts.text_context import FINE_TUNE_LR
from tests.conftest import tiny_config


# -- schedule ---------------------------------------------------------------------


def test_lr_schedule_examples():
    assert lr_schedule(1, 256, 4000) == pytest.approx(256 ** -0.5 * 4000 ** -1.5, rel=1e-12)
    assert lr_schedule(4000, 256, 4000) == pytest.approx(256 ** -0.5 * 4000 ** -0.5, rel=1e-12)
    assert lr_schedule(10000, 256, 4000) == pytest.approx(0.0625 * 0.01, rel=1e-12)


def test_lr_schedule_peaks_at_warmup():
    values = [lr_schedule(s, 256, 400) for s in range(1, 2001)]
    assert int(np.argmax(values)) + 1 == 400
    assert all(a < b for a, b in zip(values[:399], values[1:400]))
    assert all(a > b for a, b in zip(values[399:], values[400:]))


def test_fine_tune_scale_hits_target():
    assert lr_schedule(400, 256, 400) * fine_tune_scale(256, 400) == pytest.approx(FINE_TUNE_LR)


# -- loss -------------------------------------------------------------------------


def _hand_case(v_ace=None, v_ae=None, prev_lengths=(1,)):
    batch = Batch(
        phonemes=torch.tensor([[1, 2, 0]]), phoneme_lengths=torch.tensor([2]), speakers=torch.tensor([0]),
        durations=torch.tensor([[1, 2, 0]]), pitch=torch.tensor([[0.5, 0.0, 0.0]]),
        pitch_mask=torch.tensor([[True, False, False]]), energy=torch.tensor([[1.0, 2.0, 0.0]]),
        mel=torch.tensor([[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]]), mel_lengths=torch.tensor([3]),
        prev_mel_lengths=torch.tensor(list(prev_lengths)))
    out = ModelOutput(
        mel=torch.tensor([[[1.0, 0.0], [1.0, 1.0], [2.0, 4.0], [9.0, 9.0]]]),
        log_durations=torch.tensor([[0.0, math.log(2.0) + 1.0, 5.0]]),
        pitch=torch.tensor([[1.5, 7.0, 7.0]]), energy=torch.tensor([[1.0, 0.0, 3.0]]),
        durations=batch.durations, mel_lengths=torch.tensor([3]),
        phoneme_mask=torch.tensor([[True, True, False]]), v_ace=v_ace, v_ae=v_ae)
    return out, batch


def test_total_loss_hand_case():
    out, batch = _hand_case()
    loss = total_loss(out, batch)
    # mel: frame errors (0.5, 0, 1) over three real frames
    assert float(loss.mel) == pytest.approx(0.5)
    # duration: log errors (0, 1) -> mean square 0.5
    assert float(loss.duration) == pytest.approx(0.5)
    # pitch: only the voiced first phoneme, error 1
    assert float(loss.pitch) == pytest.approx(1.0)
    # energy: errors (0, 2) -> 2
    assert float(loss.energy) == pytest.approx(2.0)
    assert loss.ace is None and float(loss.total) == pytest.approx(4.0)


def test_total_loss_ace_term_linear_in_lambda():
    v_ace, v_ae = torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, 0.0]])
    out, batch = _hand_case(v_ace, v_ae)
    base = float(total_loss(out, batch, 0.0).total)
    for lam in (0.5, 1.0, 3.0):
        loss = total_loss(out, batch, lam)
        assert float(loss.ace) == pytest.approx(2.0)
        assert float(loss.total) == pytest.approx(base + 2.0 * lam)


def test_total_loss_skips_book_initial_items():
    out, batch = _hand_case(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, 0.0]]), prev_lengths=(0,))
    loss = total_loss(out, batch)
    assert float(loss.ace) == 0.0 and float(loss.total) == pytest.approx(4.0)


@pytest.mark.parametrize("target,ace_grad,ae_grad", [("both", True, True), ("ace", True, False), ("ae", False, True)])
def test_total_loss_ace_target(target, ace_grad, ae_grad):
    v_ace = torch.tensor([[1.0, 2.0]], requires_grad=True)
    v_ae = torch.tensor([[3.0, 0.0]], requires_grad=True)
    out, batch = _hand_case(v_ace, v_ae)
    total_loss(out, batch, 1.0, target).total.backward()
    assert (v_ace.grad is not None and v_ace.grad.abs().sum() > 0) == ace_grad
    assert (v_ae.grad is not None and v_ae.grad.abs().sum() > 0) == ae_grad


def test_total_loss_errors():
    out, batch = _hand_case()
    batch.mel = batch.mel[:, :2]
    with pytest.raises(InvalidInputError):
        total_loss(out, batch)
    batch.mel = None
    with pytest.raises(InvalidInputError):
        total_loss(out, batch)


# -- batching ------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=60), st.integers(1, 9), st.integers(0, 5),
       st.integers(0, 3))
def test_epoch_batches_properties(lengths, batch_size, seed, epoch):
    batches = epoch_batches(lengths, batch_size, seed, epoch)
    size = min(batch_size, len(lengths))
    flat = np.concatenate(batches)
    assert len(batches) == len(lengths) // size
    assert all(len(b) == size for b in batches)
    assert len(set(flat.tolist())) == len(flat)
    again = epoch_batches(lengths, batch_size, seed, epoch)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_epoch_batches_groups_similar_lengths():
    lengths = list(range(64))
    batches = epoch_batches(lengths, 4, 0, 0)
    # each pool of 32 sorted before cutting: a batch spans far less than a random draw would
    spans = [max(lengths[i] for i in b) - min(lengths[i] for i in b) for b in batches]
    assert max(spans) < 16


# -- loop -------------------------------------------------------------------------


def _cfg(**kw):
    base = dict(batch_size=4, warmup=5, max_steps=4, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_train_logs_and_is_deterministic(small_split, tmp_path):
    train_set = small_split[0]
    runs = []
    for i in range(2):
        bundle = build_bundle(train_set, tiny_config(), seed=1)
        recs = train(bundle, train_set, _cfg(), log_path=tmp_path / f"log{i}.jsonl",
                     checkpoint_path=tmp_path / f"m{i}.ckpt")
        runs.append(recs)
    assert runs[0] == runs[1] and [r["step"] for r in runs[0]] == [1, 2, 3, 4]
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
    lines = [json.loads(l) for l in (tmp_path / "log0.jsonl").read_text().splitlines()]
    assert len(lines) == 4 and {"mel", "duration", "pitch", "energy", "ace", "total", "lr"} <= set(lines[0])


def test_checkpoint_roundtrip_is_byte_identical(small_split, tmp_path):
    train_set = small_split[0]
    bundle = build_bundle(train_set, tiny_config(), seed=2)
    train(bundle, train_set, _cfg(max_steps=2), checkpoint_path=tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.step == 2 and loaded.vocab == bundle.vocab and loaded.speakers == bundle.speakers
    for (n, p), (_, q) in zip(bundle.model.state_dict().items(), loaded.model.state_dict().items()):
        assert torch.equal(p, q), n


def test_resume_matches_uninterrupted_run(small_split, tmp_path):
    train_set = small_split[0]
    full = build_bundle(train_set, tiny_config(), seed=3)
    full_recs = train(full, train_set, _cfg(max_steps=6))
    part = build_bundle(train_set, tiny_config(), seed=3)
    train(part, train_set, _cfg(max_steps=3), checkpoint_path=tmp_path / "half.ckpt")
    resumed = load_checkpoint(tmp_path / "half.ckpt")
    rest = train(resumed, train_set, _cfg(max_steps=6))
    assert [r["step"] for r in rest] == [4, 5, 6]
    assert rest == full_recs[3:]
    for (n, p), (_, q) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(p, q), n


def test_divergence_dumps_state(small_split, tmp_path):
    train_set = small_split[0]
    bundle = build_bundle(train_set, tiny_config(), seed=0)
    with torch.no_grad():
        bundle.model.decoder.proj.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        train(bundle, train_set, _cfg(), dump_dir=tmp_path / "dump")
    assert err.value.dump_path is not None and err.value.dump_path.exists()
    info = json.loads((tmp_path / "dump" / "diverged_step1.json").read_text())
    assert info["step"] == 1 and len(info["uids"]) == 4


def test_disabled_modalities_receive_no_gradient(small_split):
    train_set = small_split[0]
    bundle = build_bundle(train_set, tiny_config(use_ace=False, tce=tiny_config().tce.__class__(mode="none")),
                          seed=0)
    before = {n: p.detach().clone() for n, p in bundle.model.named_parameters()}
    train(bundle, train_set, _cfg(max_steps=3))
    after = dict(bundle.model.named_parameters())
    frozen = [n for n in before if n.startswith(("ace.", "ae.", "tce."))]
    assert frozen
    assert all(torch.equal(before[n], after[n]) for n in frozen)
    assert not torch.equal(before["decoder.proj.weight"], after["decoder.proj.weight"])


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(lambda_ace=-1)


def test_ablation_matrix():
    t2 = ablation_matrix(64, "table2")
    assert len(t2) == 8 and len({r.ablation_id for r in t2}) == 8
    assert all(r.k == 64 for r in t2)
    t1 = ablation_matrix(64, "table1")
    assert [r.k for r in t1] == list(TABLE1_K) + [128]
    assert t1[-1].eval_k == 64 and t1[-1].train_from == "atce-bi-k128"
    assert len(ablation_matrix(64, "all")) == 13
    with pytest.raises(InvalidInputError):
        ablation_matrix(64, "table3")
