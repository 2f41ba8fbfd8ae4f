import math

import numpy as np
import pytest
import torch

from ctxtts.acoustic_context import (GstConfig, GstEncoder, ReferenceEncoder, StyleTokenLayer, ace_prediction_loss,
                                     encode_acoustic_context, encode_acoustic_target, reference_encode,
                                     style_attend)
from ctxtts.errors import InvalidInputError, NumericError
from tests.fd import central_difference, relative_error

TINY = GstConfig(n_tokens=4, n_heads=2, token_dim=8, conv_channels=(2, 3), ref_dim=5)


def _gst(seed=0, mel_bins=6, out_dim=7):
    torch.manual_seed(seed)
    return GstEncoder(mel_bins, TINY, out_dim).double()


def test_reference_shape_independent_of_frames():
    enc = ReferenceEncoder(20, (4, 4), 16)
    assert reference_encode(torch.randn(10, 20), enc).shape == (16,)
    assert reference_encode(torch.randn(1000, 20), enc).shape == (16,)
    with pytest.raises(InvalidInputError):
        reference_encode(torch.zeros(0, 20), enc)


def test_reference_zero_parameters():
    enc = ReferenceEncoder(20, (4, 4), 16)
    for p in enc.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(reference_encode(torch.randn(12, 20), enc), torch.zeros(16))


def test_reference_duplicated_input_finite_and_deterministic():
    enc = ReferenceEncoder(20, (4, 4), 16)
    mel = torch.randn(9, 20)
    doubled = torch.cat([mel, mel])
    a, b = reference_encode(doubled, enc), reference_encode(doubled, enc)
    assert torch.isfinite(a).all() and torch.equal(a, b)


def test_reference_padding_does_not_leak():
    torch.manual_seed(0)
    enc = ReferenceEncoder(6, (2, 3), 5).double()
    a = torch.randn(7, 6, dtype=torch.float64)
    padded = torch.zeros(2, 12, 6, dtype=torch.float64)
    padded[0, :7] = a
    padded[1] = torch.randn(12, 6, dtype=torch.float64)
    out = enc(padded, torch.tensor([7, 12]))
    assert torch.allclose(out[0], reference_encode(a, enc), atol=1e-12)


def test_style_identical_tokens_give_projected_token():
    torch.manual_seed(0)
    bank = StyleTokenLayer(5, n_tokens=4, token_dim=8, n_heads=2, out_dim=7).double()
    with torch.no_grad():
        bank.tokens.copy_(bank.tokens[0:1].repeat(4, 1))
    expected = bank.out(bank.value(torch.tanh(bank.tokens[0])))
    for _ in range(3):
        out = style_attend(torch.randn(5, dtype=torch.float64), bank)
        assert torch.allclose(out, expected, atol=1e-12)


def test_style_weights_sum_to_one():
    torch.manual_seed(0)
    bank = StyleTokenLayer(5, n_tokens=10, token_dim=16, n_heads=8, out_dim=7)
    _, w = style_attend(torch.randn(3, 5), bank, return_weights=True)
    assert w.shape == (3, 8, 10)
    assert torch.allclose(w.sum(-1), torch.ones(3, 8), atol=1e-6)
    assert (w >= 0).all()


def test_style_hand_softmax():
    bank = StyleTokenLayer(1, n_tokens=2, token_dim=1, n_heads=1, out_dim=1).double()
    with torch.no_grad():
        bank.query.weight.fill_(1.0)
        bank.query.bias.zero_()
        bank.key.weight.fill_(3.0)
        bank.key.bias.zero_()
        # tanh(tokens) * 3 = (ln 2, ln 8)
        bank.tokens.copy_(torch.atanh(torch.tensor([[math.log(2) / 3], [math.log(8) / 3]], dtype=torch.float64)))
    _, w = style_attend(torch.ones(1, dtype=torch.float64), bank, return_weights=True)
    np.testing.assert_allclose(w.detach().numpy().reshape(-1), [0.2, 0.8], atol=1e-12)


def test_style_rejects_non_finite():
    bank = StyleTokenLayer(5, n_tokens=4, token_dim=8, n_heads=2, out_dim=7)
    with pytest.raises(NumericError):
        style_attend(torch.tensor([float("nan")] * 5), bank)
    with pytest.raises(InvalidInputError):
        StyleTokenLayer(5, token_dim=10, n_heads=4)


def test_acoustic_context_none_is_zero_and_deterministic():
    ace = _gst()
    assert torch.equal(encode_acoustic_context(None, ace), torch.zeros(7, dtype=torch.float64))
    mel = torch.randn(11, 6, dtype=torch.float64)
    assert torch.equal(encode_acoustic_context(mel, ace), encode_acoustic_context(mel, ace))
    lengths = torch.tensor([0, 11])
    batch = torch.stack([torch.zeros(11, 6, dtype=torch.float64), mel])
    out = ace(batch, lengths)
    assert torch.equal(out[0], torch.zeros(7, dtype=torch.float64))


@pytest.mark.parametrize("frames", [1, 2, 17, 10_000])
def test_acoustic_context_finite_for_any_length(frames):
    torch.manual_seed(0)
    ace = GstEncoder(20, GstConfig(conv_channels=(4, 4), ref_dim=16), 256)
    v = encode_acoustic_context(torch.randn(frames, 20), ace)
    assert v.shape == (256,) and torch.isfinite(v).all()


def test_ae_independent_of_ace_parameters():
    ace, ae = _gst(0), _gst(1)
    mel = torch.randn(9, 6, dtype=torch.float64)
    before = encode_acoustic_target(mel, ae)
    with torch.no_grad():
        for p in ace.parameters():
            p.add_(1.0)
    assert torch.equal(before, encode_acoustic_target(mel, ae))
    assert before.shape == (7,)
    with pytest.raises(InvalidInputError):
        encode_acoustic_target(torch.zeros(0, 6), ae)


def test_acoustic_context_gradient_wrt_mel():
    ace = _gst()
    mel = torch.randn(9, 6, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(encode_acoustic_context(mel, ace).sum(), mel)
    with torch.no_grad():
        num = central_difference(lambda: encode_acoustic_context(mel, ace).sum(), [mel])
    assert relative_error([g], num) < 1e-4


def test_ace_loss_examples():
    assert float(ace_prediction_loss(torch.ones(5), torch.ones(5))) == 0.0
    for d in (1, 3, 256):
        assert float(ace_prediction_loss(torch.zeros(d), torch.ones(d))) == 1.0
    assert float(ace_prediction_loss(torch.tensor([1.0, 2.0]), torch.tensor([3.0, 0.0]))) == 2.0
    with pytest.raises(InvalidInputError):
        ace_prediction_loss(torch.zeros(3), torch.zeros(4))


def test_ace_loss_properties(rng):
    for _ in range(50):
        a, b = torch.as_tensor(rng.normal(size=6)), torch.as_tensor(rng.normal(size=6))
        assert float(ace_prediction_loss(a, b)) > 0
        assert float(ace_prediction_loss(a, b)) == float(ace_prediction_loss(b, a))


def test_ace_loss_gradient_reaches_both_encoders():
    ace, ae = _gst(0), _gst(1)
    prev, cur = torch.randn(8, 6, dtype=torch.float64), torch.randn(10, 6, dtype=torch.float64)
    loss = ace_prediction_loss(encode_acoustic_context(prev, ace), encode_acoustic_target(cur, ae))
    loss.backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in ace.style.parameters())
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in ae.style.parameters())
