import pytest
import torch

from diffcap.errors import GenerationError
from diffcap.model import build_model
from diffcap.numkernel import RngState
from diffcap.pipeline import (caption_dataset, default_plan, generate, generate_batch,
                              reference_loglik, sample_x0, score_captions)
from diffcap.training import init_state, schedule_for, train


@pytest.fixture
def trained(tiny_data, tiny_cfg):
    state = init_state(tiny_cfg, tiny_data.vocab, tiny_data.d_f)
    train(state, tiny_data, epochs=2)
    return state


def test_eta_zero_is_deterministic(trained, tiny_data):
    v = tiny_data.conditions(list(range(4)))
    plan = default_plan(trained.cfg.T, 5)
    a = generate(v, trained.model, trained.sched, plan, RngState(3), tiny_data.vocab,
                 return_trace=True)
    b = generate(v, trained.model, trained.sched, plan, RngState(3), tiny_data.vocab,
                 return_trace=True)
    assert a[0] == b[0]
    assert torch.equal(a[1].x0_hat, b[1].x0_hat)


@pytest.mark.parametrize("n_steps", [1, 5, 20])
def test_one_denoiser_call_per_plan_entry(trained, tiny_data, n_steps):
    plan = default_plan(trained.cfg.T, n_steps)
    _, trace = generate(tiny_data.conditions([0])[0], trained.model, trained.sched, plan,
                        RngState(0), tiny_data.vocab, return_trace=True)
    assert trace.denoiser_calls == plan.n_steps == n_steps


def test_distribution_rows_sum_to_one(trained, tiny_data):
    _, trace = generate(tiny_data.conditions([0, 1]), trained.model, trained.sched,
                        default_plan(trained.cfg.T, 5), RngState(0), tiny_data.vocab,
                        return_trace=True)
    assert trace.s.shape == (2, trained.cfg.n_v, len(tiny_data.vocab))
    assert (trace.s.sum(-1) - 1).abs().max() < 1e-5


def test_batch_of_one_matches_single(trained, tiny_data):
    v = tiny_data.conditions([2])[0]
    plan = default_plan(trained.cfg.T, 5)
    single = generate(v, trained.model, trained.sched, plan, RngState(11), tiny_data.vocab)
    seqs, times = generate_batch([v], trained.model, trained.sched, plan, [11], tiny_data.vocab)
    assert seqs == [single]
    assert len(times) == 1 and times[0] > 0


def test_eta_positive_gives_varied_latents(trained, tiny_data):
    v = tiny_data.conditions([0])
    plan = default_plan(trained.cfg.T, 5, eta=1.0)
    noise = RngState(0).normal((1, trained.cfg.n_v, trained.cfg.d_v))
    a, _ = sample_x0(trained.model, v, trained.sched, plan, RngState(1), noise=noise.clone())
    b, _ = sample_x0(trained.model, v, trained.sched, plan, RngState(2), noise=noise.clone())
    assert not torch.equal(a, b)


def test_nan_parameters_raise(trained, tiny_data):
    with torch.no_grad():
        trained.model.denoiser.head.weight.fill_(float("nan"))
    with pytest.raises(GenerationError):
        generate(tiny_data.conditions([0]), trained.model, trained.sched,
                 default_plan(trained.cfg.T, 5), RngState(0), tiny_data.vocab)


def test_caption_dataset_covers_every_video(trained, tiny_data):
    hyps = caption_dataset(trained.model, tiny_data, trained.sched,
                           default_plan(trained.cfg.T, 5), batch_size=5)
    assert set(hyps) == set(tiny_data.video_ids)
    scores = score_captions(hyps, tiny_data.references())
    assert 0 <= scores["bleu4"] <= 1 and 0 <= scores["exact_match"] <= 1


def test_reference_loglik_is_negative(trained, tiny_data):
    ll = reference_loglik(trained.model, tiny_data, trained.sched, default_plan(trained.cfg.T, 5))
    assert ll < 0


def test_ar_model_captions(tiny_data, tiny_cfg):
    state = init_state(tiny_cfg.replace(arch="ar"), tiny_data.vocab, tiny_data.d_f)
    train(state, tiny_data, epochs=1)
    assert set(caption_dataset(state.model, tiny_data)) == set(tiny_data.video_ids)


@pytest.mark.parametrize("knob,values", [("n_denoiser_blocks", [10, 12, 14]),
                                         ("n_lm_blocks", [4, 6, 8, 10])])
def test_ablation_knobs_generate(knob, values, tiny_data, tiny_cfg):
    for value in values:
        cfg = tiny_cfg.replace(**{knob: value})
        model = build_model(cfg, len(tiny_data.vocab), tiny_data.d_f)
        for steps in (5, 20, 50):
            plan = default_plan(cfg.T, min(steps, cfg.T))
            seqs = generate(tiny_data.conditions([0, 1]), model, schedule_for(cfg), plan,
                            RngState(0), tiny_data.vocab)
            assert len(seqs) == 2
