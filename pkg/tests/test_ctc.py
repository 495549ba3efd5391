import json
import math

import numpy as np
import pytest
import torch

from monoalign import oracles
from monoalign.ctc import (BoundaryProvider, InfeasibleAlignmentError, collapse, ctc_loss,
                           ctc_loss_batch, ctc_loss_torch, ctc_viterbi, ctc_viterbi_batch,
                           ctc_trellis, extract_boundaries)
from monoalign.numerics import FunctionOp, finite_difference_check


def random_log_posteriors(rng, n_t, vocab):
    logits = rng.normal(scale=2.0, size=(n_t, vocab))
    return logits - np.log(np.exp(logits).sum(1, keepdims=True))


def random_instance(rng, max_t=6, max_u=3, max_v=4, vocab=None):
    vocab = vocab or int(rng.integers(2, max_v + 1))
    n_t = int(rng.integers(1, max_t + 1))
    while True:
        u = int(rng.integers(1, max_u + 1))
        labels = [int(v) for v in rng.integers(1, vocab, size=u)]
        if len(labels) + sum(a == b for a, b in zip(labels, labels[1:])) <= n_t:
            return random_log_posteriors(rng, n_t, vocab), labels


def test_single_frame_single_label():
    loss, _ = ctc_loss(np.log([[0.5, 0.5]]), [1])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_two_frames_enumerated():
    loss, _ = ctc_loss(np.log(np.full((2, 2), 0.5)), [1])
    assert loss == pytest.approx(-math.log(0.75), abs=1e-12)


def test_infeasible_raises():
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(np.log([[0.5, 0.5]]), [1, 1])
    with pytest.raises(InfeasibleAlignmentError):
        ctc_viterbi(np.log([[0.5, 0.5]]), [1, 1])


def test_blank_in_labels_rejected():
    with pytest.raises(ValueError):
        ctc_loss(np.log(np.full((3, 3), 1 / 3)), [0, 1])


def test_loss_matches_enumeration(rng):
    for _ in range(50):
        lp, labels = random_instance(rng)
        expected, best, _ = oracles.brute_force_ctc(lp, labels)
        loss, _ = ctc_loss(lp, labels)
        assert abs(math.exp(-loss) - math.exp(expected)) <= 1e-10
        path = ctc_viterbi(lp, labels)
        assert collapse(path) == labels
        assert sum(lp[t, k] for t, k in enumerate(path)) == pytest.approx(best, abs=1e-10)


def test_batched_loss_equals_single(rng):
    items = [random_instance(rng, max_t=9, max_u=4, vocab=5) for _ in range(6)]
    losses, grads = ctc_loss_batch([lp for lp, _ in items], [y for _, y in items])
    for (lp, y), loss, grad in zip(items, losses, grads):
        single, g = ctc_loss(lp, y)
        assert loss == pytest.approx(single, abs=1e-12)
        np.testing.assert_allclose(grad, g, atol=1e-12)


def test_matches_torch_ctc(rng):
    items = [random_instance(rng, max_t=12, max_u=4, vocab=6) for _ in range(5)]
    ours = ctc_loss_batch([lp for lp, _ in items], [y for _, y in items])[0]
    for (lp, y), loss in zip(items, ours):
        ref = torch.nn.functional.ctc_loss(torch.tensor(lp)[:, None], torch.tensor([y]),
                                           [lp.shape[0]], [len(y)], reduction="sum",
                                           zero_infinity=False)
        assert loss == pytest.approx(float(ref), abs=1e-9)


def test_gradient_finite_differences(rng):
    for _ in range(10):
        lp, labels = random_instance(rng, max_t=6, max_u=3, max_v=4)
        op = FunctionOp(lambda x: ctc_loss(x.reshape(lp.shape), labels)[0],
                        lambda x: ctc_loss(x.reshape(lp.shape), labels)[1])
        assert finite_difference_check(op, lp.reshape(-1), 1e-5) <= 1e-4


def test_trellis_first_frame_entries(rng):
    lp, labels = random_log_posteriors(rng, 5, 4), [1, 2]
    tr = ctc_trellis([lp], [labels])
    first = tr.forward[0, 0]
    assert np.all(first[2:] <= -1e29)
    assert first[0] == lp[0, 0] and first[1] == lp[0, 1]
    finite = tr.forward[0][tr.forward[0] > -1e29]
    assert np.all(finite <= 0)


def test_torch_wrapper_gradient(rng):
    lp = torch.tensor(random_log_posteriors(rng, 7, 5)[None], requires_grad=True)
    loss = ctc_loss_torch(lp, [7], [[1, 3]])
    loss.sum().backward()
    _, g = ctc_loss(lp.detach()[0].numpy(), [1, 3])
    np.testing.assert_allclose(lp.grad[0].numpy(), g)


def test_viterbi_examples():
    lp = np.log([[0.1, 0.9], [0.1, 0.9]])
    assert ctc_viterbi(lp, [1]).tolist() == [1, 1]
    lp = np.log([[0.1, 0.9], [0.9, 0.1]])
    assert ctc_viterbi(lp, [1]).tolist() == [1, 0]
    one_hot = np.full((3, 4), -1e4)
    one_hot[[0, 1, 2], [0, 3, 0]] = 0.0
    (path, logp), = ctc_viterbi_batch([one_hot], [[3]])
    assert path.tolist() == [0, 3, 0] and logp == 0.0


def test_viterbi_prefers_leftmost_emission_on_ties():
    lp = np.log(np.full((3, 2), 0.5))
    path = ctc_viterbi(lp, [1])
    assert path.tolist() == [1, 0, 0]


def test_extract_boundaries_examples():
    blank, c, a, t = 0, 3, 1, 20
    path = [blank, c, c, blank, a, a, a, blank, t, t, blank]
    assert extract_boundaries(path, [c, a, t]) == [2, 5, 9, 11]
    assert extract_boundaries([c], [c]) == [1, 1]
    assert extract_boundaries([a, blank, a], [a, a]) == [1, 3, 3]


def test_extract_boundaries_mismatch():
    with pytest.raises(ValueError):
        extract_boundaries([0, 1, 0], [2])


def test_boundaries_from_viterbi_are_ordered(rng):
    for _ in range(30):
        lp, labels = random_instance(rng, max_t=10, max_u=4, max_v=5)
        b = extract_boundaries(ctc_viterbi(lp, labels), labels)
        n_t = lp.shape[0]
        assert len(b) == len(labels) + 1 and b[-1] == n_t
        assert all(1 <= v <= n_t for v in b)
        assert all(x < y for x, y in zip(b[:-2], b[1:-1]))


def test_boundary_provider_modes(tmp_path, rng):
    lp = random_log_posteriors(rng, 6, 4)
    fly = BoundaryProvider("on_the_fly")
    first = fly.boundaries(["u1"], [lp], [[1, 2]])
    sharpened = lp.copy()
    sharpened[:, 1] = [0, -50, -50, -50, -50, -50]
    sharpened[:, 2] = [-50, -50, -50, -50, 0, -50]
    second = fly.boundaries(["u1"], [sharpened], [[1, 2]])
    assert second[0] == [1, 5, 6]
    assert first != second or first[0] == [1, 5, 6]

    frozen = BoundaryProvider("precomputed", {"u1": [2, 4, 6]})
    assert frozen.boundaries(["u1"], None, [[1, 2]]) == [[2, 4, 6]]
    assert frozen.boundaries(["u1"], [sharpened], [[1, 2]]) == [[2, 4, 6]]
    with pytest.raises(KeyError):
        frozen.boundaries(["missing"], None, [[1]])

    path = tmp_path / "table.json"
    frozen.save(path)
    assert json.loads(path.read_text()) == {"u1": [2, 4, 6]}
    assert BoundaryProvider.load(path).table == {"u1": [2, 4, 6]}


def test_unknown_boundary_mode():
    with pytest.raises(ValueError):
        BoundaryProvider("sometimes")
