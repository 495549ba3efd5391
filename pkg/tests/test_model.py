import numpy as np
import pytest
import torch

from monoalign.data import generate_dataset
from monoalign.model import ModelConfig, MonotonicAED, pad_features, resume_frame, strip_eos
from monoalign.train import make_batch

CONFIG = ModelConfig(enc_units=12, dec_units=12, emb_dim=6, att_dim=8)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return MonotonicAED(CONFIG).double()


@pytest.fixture(scope="module")
def utts():
    return generate_dataset(4, u_range=(3, 6), seed=5)


def test_forward_shapes(model, utts):
    batch = make_batch(utts, CONFIG.eos, torch.float64)
    h, enc_lens, ctc_lp = model.encode(batch.x, batch.lens)
    n_frames = int(enc_lens.max())
    assert enc_lens.tolist() == [int(np.ceil(u.n_frames / 2)) for u in utts]
    assert ctc_lp.shape == (4, n_frames, CONFIG.n_outputs)
    assert torch.allclose(ctc_lp.exp().sum(-1), torch.ones(4, n_frames, dtype=torch.float64))
    logits, alpha, beta, p = model.forward_expected(h, enc_lens, batch.targets)
    n_steps = batch.targets.shape[1]
    assert logits.shape == (4, n_steps, CONFIG.n_outputs)
    assert alpha.shape == beta.shape == p.shape == (4, n_steps, n_frames)
    for b, n in enumerate(enc_lens.tolist()):
        assert torch.all(alpha[b, :, n:] == 0) and torch.all(beta[b, :, n:] == 0)
    rows = alpha.sum(-1)
    assert torch.all(rows <= 1 + 1e-12)
    assert torch.all(rows[:, 1:] <= rows[:, :-1] + 1e-12)
    assert torch.allclose(beta.sum(-1), rows, atol=1e-10)


def test_padding_does_not_change_results(model, utts):
    batch = make_batch(utts, CONFIG.eos, torch.float64)
    h, enc_lens, _ = model.encode(batch.x, batch.lens)
    logits, alpha, _, _ = model.forward_expected(h, enc_lens, batch.targets)
    single = make_batch(utts[:1], CONFIG.eos, torch.float64)
    h1, l1, _ = model.encode(single.x, single.lens)
    logits1, alpha1, _, _ = model.forward_expected(h1, l1, single.targets)
    n_steps, n_frames = alpha1.shape[1:]
    assert torch.allclose(alpha[0, :n_steps, :n_frames], alpha1[0], atol=1e-12)
    assert torch.allclose(logits[0, :n_steps], logits1[0], atol=1e-10)


def test_noise_is_reproducible(model, utts):
    batch = make_batch(utts, CONFIG.eos, torch.float64)
    h, enc_lens, _ = model.encode(batch.x, batch.lens)
    run = lambda seed: model.forward_expected(h, enc_lens, batch.targets,
                                              torch.Generator().manual_seed(seed))[1]
    assert torch.equal(run(3), run(3))
    assert not torch.equal(run(3), run(4))


def test_greedy_boundaries_non_decreasing(model, utts):
    x, lens = pad_features([u.features for u in utts], torch.float64)
    with torch.no_grad():
        h, enc_lens, _ = model.encode(x, lens)
        tokens, bounds, p_rows = model.greedy_decode(h, enc_lens)
    for toks, bnd, n in zip(tokens, bounds, enc_lens.tolist()):
        assert len(toks) == len(bnd)
        assert all(1 <= b <= n for b in bnd)
        assert all(a <= b for a, b in zip(bnd, bnd[1:]))


def test_forced_decoding_returns_one_boundary_per_token(model, utts):
    x, lens = pad_features([u.features for u in utts], torch.float64)
    forced = [u.labels for u in utts]
    with torch.no_grad():
        h, enc_lens, _ = model.encode(x, lens)
        tokens, bounds, _ = model.greedy_decode(h, enc_lens, forced=forced)
    assert tokens == forced
    for bnd, n in zip(bounds, enc_lens.tolist()):
        assert all(a <= b for a, b in zip(bnd, bnd[1:])) and bnd[-1] <= n


def test_beam_search_boundaries(model, utts):
    x, lens = pad_features([utts[0].features], torch.float64)
    with torch.no_grad():
        h, enc_lens, _ = model.encode(x, lens)
        hyp = model.beam_decode(h, int(enc_lens[0]), beam=3)
    assert len(hyp.tokens) == len(hyp.boundaries)
    assert all(a <= b for a, b in zip(hyp.boundaries, hyp.boundaries[1:]))


def test_resume_frame():
    assert resume_frame([], 2) == 0
    assert resume_frame([3, 5], 2) == 4
    assert resume_frame([3, 5, 5], 2) == 5
    assert resume_frame([5, 5, 5], None) == 4
    assert resume_frame([4, 5, 5], 3) == 4


def test_strip_eos():
    assert strip_eos([3, 4, 11], 11) == [3, 4]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(chunk_width=0)
    with pytest.raises(ValueError):
        ModelConfig(enc_units=-1)
