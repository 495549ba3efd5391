import numpy as np
import pytest

from monoalign.data import (SyntheticUtterance, apply_spec_masks, encoder_frames, eos_id,
                            generate_dataset, output_vocab, read_jsonl, symbol_embeddings,
                            with_eos, write_jsonl)


def test_dataset_is_deterministic():
    a = generate_dataset(20, seed=3)
    b = generate_dataset(20, seed=3)
    for u, v in zip(a, b):
        assert u.features.tobytes() == v.features.tobytes()
        assert u.labels == v.labels and u.boundaries == v.boundaries
    c = generate_dataset(20, seed=4)
    assert any(u.labels != v.labels for u, v in zip(a, c))


def test_noise_free_blocks():
    utts = generate_dataset(10, u_range=(4, 7), dur_range=(3, 3), noise_std=0.0, seed=1)
    table = symbol_embeddings(10, 16, 0)
    for u in utts:
        assert u.n_frames == 3 * len(u.labels)
        changes = 1 + int(np.sum(np.any(np.diff(u.features, axis=0) != 0, axis=1)))
        assert changes == len(u.labels)
        np.testing.assert_array_equal(u.features[::3], table[u.labels])


def test_oracle_boundaries():
    for u in generate_dataset(50, seed=2):
        assert 3 <= len(u.labels) <= 12
        assert all(1 <= k <= 10 for k in u.labels)
        assert all(a != b for a, b in zip(u.labels, u.labels[1:]))
        assert np.all(np.diff(u.boundaries) > 0)
        assert u.boundaries[-1] == encoder_frames(u.n_frames)


def test_two_symbol_boundary_by_hand():
    # durations 5 then 4: input frames end at 5 and 9, i.e. encoder frames 3 and 5
    utts = generate_dataset(200, u_range=(2, 2), noise_std=0.0, seed=0)
    u = next(u for u in utts if u.n_frames == 9 and np.all(u.features[4] != u.features[5]))
    assert u.boundaries == [3, 5]


def test_rejects_invalid_ranges():
    with pytest.raises(ValueError):
        generate_dataset(1, dur_range=(1, 4))
    with pytest.raises(ValueError):
        generate_dataset(1, dur_range=(2, 13))
    with pytest.raises(ValueError):
        generate_dataset(1, u_range=(5, 3))
    with pytest.raises(ValueError):
        generate_dataset(1, noise_std=-1.0)


def test_jsonl_round_trip(tmp_path):
    utts = generate_dataset(5, seed=9)
    path = tmp_path / "data.jsonl"
    write_jsonl(utts, path)
    back = read_jsonl(path)
    for u, v in zip(utts, back):
        assert isinstance(v, SyntheticUtterance)
        assert np.array_equal(u.features, v.features)
        assert (u.utt_id, u.labels, u.boundaries) == (v.utt_id, v.labels, v.boundaries)


def test_vocabulary_helpers():
    assert eos_id(10) == 11 and output_vocab(10) == 12
    assert with_eos([2, 5, 9], 11) == [2, 5, 9, 11]


def test_masks_identity_when_disabled(rng):
    x = rng.normal(size=(30, 16))
    out = apply_spec_masks(x, 4, 0, 6, 0, rng)
    assert np.array_equal(out, x) and out is not x


def test_masks_zero_only_masked_cells(rng):
    x = rng.normal(size=(40, 16)) + 5.0
    out = apply_spec_masks(x, 4, 2, 6, 2, np.random.default_rng(0))
    changed = out != x
    assert np.all(out[changed] == 0.0)
    rows = np.all(out == 0, axis=1)
    cols = np.all(out == 0, axis=0)
    assert np.array_equal(changed, rows[:, None] | cols[None, :])
    assert rows.sum() <= 12 and cols.sum() <= 8


def test_masks_deterministic(rng):
    x = rng.normal(size=(25, 16))
    a = apply_spec_masks(x, 4, 1, 6, 2, np.random.default_rng(5))
    b = apply_spec_masks(x, 4, 1, 6, 2, np.random.default_rng(5))
    assert np.array_equal(a, b)
