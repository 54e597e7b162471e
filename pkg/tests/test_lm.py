import hypothesis.strategies as st
import pytest
import torch
from hypothesis import given, settings
from torch.func import functional_call

from diffcap.config import TrainConfig
from diffcap.errors import ConfigError
from diffcap.layers import init_parameters
from diffcap.lm import (ARCaptioner, NARLanguageModel, ar_decode_baseline, argmax_lowest, decode,
                        lm_forward)
from diffcap.model import build_model
from diffcap.numkernel import RngState, grad_check, softmax
from diffcap.textcodec import EOS, MASK, build_vocab

VOCAB = build_vocab(["a dog is running in the park", "a cat is sleeping"])


def make_lm(**kw):
    args = dict(n_v=5, dim=8, vocab_size=len(VOCAB), n_layers=2, heads=2, ffn_mult=2)
    args.update(kw)
    lm = NARLanguageModel(**args)
    init_parameters(lm, RngState(0))
    return lm


def test_rows_are_distributions():
    s = lm_forward(torch.randn(3, 5, 8), make_lm())
    assert s.shape == (3, 5, len(VOCAB))
    assert (s.sum(-1) - 1).abs().max() < 1e-6


def test_default_depth_is_six_with_plain_first_layer():
    cfg = TrainConfig()
    assert cfg.n_lm_blocks == 6
    model = build_model(cfg.replace(n_v=6, d_v=16, n_denoiser_blocks=1), len(VOCAB), 4)
    assert len(model.lm.layers) == 6
    assert [l.residual_attn for l in model.lm.layers] == [False] + [True] * 5


def test_first_layer_has_no_attention_residual():
    lm = make_lm(n_layers=1)
    with torch.no_grad():
        lm.layers[0].attn.o.weight.zero_()
        lm.layers[0].attn.o.bias.zero_()
    a = lm(torch.randn(1, 5, 8))
    b = lm(torch.randn(1, 5, 8))
    # attention branch is zero and nothing is added back, so the input is forgotten
    assert torch.allclose(a, b)
    lm_res = make_lm(n_layers=1, residual_first_layer=True)
    with torch.no_grad():
        lm_res.layers[0].attn.o.weight.zero_()
        lm_res.layers[0].attn.o.bias.zero_()
    assert not torch.allclose(lm_res(torch.randn(1, 5, 8)), lm_res(torch.randn(1, 5, 8)))


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        make_lm()(torch.randn(1, 5, 7))
    with pytest.raises(ConfigError):
        make_lm(n_layers=0)


def test_lm_gradient_check():
    lm = make_lm(n_v=2, dim=4).double()
    rng = RngState(4)
    x = rng.normal((1, 2, 4), dtype=torch.float64)
    w = rng.normal((1, 2, len(VOCAB)), dtype=torch.float64)
    assert grad_check(lambda z: (lm_forward(z, lm) * w).sum(), x) < 1e-3

    def via_fc(z):
        return (softmax(functional_call(lm, {"fc.weight": z}, (x,)), -1) * w).sum()

    assert grad_check(via_fc, lm.fc.weight.detach().clone()) < 1e-3


def test_decode_one_hot_rows():
    a, dog = VOCAB.id("a"), VOCAB.id("dog")
    ids = [a, dog, EOS, MASK, MASK]
    s = torch.nn.functional.one_hot(torch.tensor(ids), len(VOCAB)).float()
    assert decode(s, VOCAB).ids == (a, dog)


def test_decode_tie_lowest_index():
    s = torch.zeros(1, len(VOCAB))
    s[0, 5] = s[0, 7] = 0.5
    assert argmax_lowest(s).tolist() == [5]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_decode_invariant_to_softmax_and_scaling(seed, scale):
    z = RngState(seed).normal((5, len(VOCAB)))
    base = decode(z, VOCAB)
    assert decode(softmax(z), VOCAB) == base
    assert decode(softmax(z * scale), VOCAB) == base


def test_decode_batch():
    z = torch.randn(3, 5, len(VOCAB))
    out = decode(z, VOCAB)
    assert len(out) == 3 and out[1] == decode(z[1], VOCAB)


def make_ar():
    ar = ARCaptioner(n_v=6, dim=8, d_f=4, vocab_size=len(VOCAB), n_layers=2, heads=2, ffn_mult=2)
    init_parameters(ar, RngState(1))
    return ar


def test_ar_max_len_one_is_one_pass():
    seq, passes = ar_decode_baseline(torch.randn(3, 4), make_ar(), VOCAB, max_len=1,
                                     min_len=1, return_passes=True)
    assert passes == 1 and seq.length == 1


@pytest.mark.parametrize("seed", range(5))
def test_ar_passes_equal_emitted_tokens(seed):
    ar = make_ar()
    with torch.no_grad():
        ar.fc.bias[EOS] = float(seed - 2)  # vary how early EOS wins
    seq, passes = ar_decode_baseline(RngState(seed).normal((3, 4)), ar, VOCAB,
                                     return_passes=True)
    emitted = seq.length + (1 if seq.length < ar.n_v else 0)  # the terminating EOS counts
    assert passes == emitted


def test_ar_min_len_forces_tokens():
    ar = make_ar()
    with torch.no_grad():
        ar.fc.bias[EOS] = 100.0
    assert ar_decode_baseline(torch.randn(3, 4), ar, VOCAB).length == 0
    assert ar_decode_baseline(torch.randn(3, 4), ar, VOCAB, min_len=4).length == 4


def test_ar_is_causal():
    ar = make_ar().eval()
    v = torch.randn(1, 3, 4)
    p1 = torch.tensor([[EOS, 5, 6, 7]])
    p2 = torch.tensor([[EOS, 5, 9, 4]])
    assert torch.allclose(ar(p1, v)[0, :2], ar(p2, v)[0, :2], atol=1e-6)
