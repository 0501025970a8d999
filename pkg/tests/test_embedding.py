import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clinhin.embedding import (
    LOG_EPS,
    SIGMOID_CLAMP,
    EmbeddingModel,
    init_model,
    log_sigmoid,
    sigmoid,
    unsup_gradients,
    unsup_loss,
    unsup_step,
)
from clinhin.events import NodeKey, NodeType

from conftest import central_difference, relative_error


def _keys(n):
    types = [NodeType.PATIENT, NodeType.LABORATORY, NodeType.SYMPTOM, NodeType.DIAGNOSIS]
    return [NodeKey(types[i % 4], f"n{i}") for i in range(n)]


def _random_model(rng, n=12, d=8, scale=0.5):
    return EmbeddingModel(rng.normal(scale=scale, size=(n, d)), rng.normal(size=6), _keys(n))


def test_init_range_and_weights():
    m = init_model(50, d=128, seed=3)
    assert np.abs(m.vectors).max() <= 0.5 / 128
    assert m.type_weights.sum() == pytest.approx(1.0)
    assert np.array_equal(m.vectors, init_model(50, d=128, seed=3).vectors)
    with pytest.raises(ValueError):
        init_model(0, 4)


def test_sigmoid_clamp_boundary():
    assert sigmoid(SIGMOID_CLAMP) == sigmoid(1e6)
    assert sigmoid(-SIGMOID_CLAMP) == sigmoid(-1e6)
    assert 0.0 < sigmoid(-1e6) < 1e-17
    assert np.isfinite(log_sigmoid(-1e6))
    assert log_sigmoid(-1e6) >= math.log(LOG_EPS)


def test_loss_at_origin():
    m = EmbeddingModel(np.zeros((6, 4)), np.ones(6))
    assert unsup_loss(m, 0, 1, [2, 3, 4]) == pytest.approx(4 * math.log(2), abs=1e-15)
    before = m.vectors.copy()
    unsup_step(m, 0, 1, [2, 3, 4], lr=0.1)
    assert np.array_equal(m.vectors, before)


def test_loss_limit():
    E = np.zeros((4, 2))
    E[0] = [30, 0]
    E[1] = [30, 0]
    E[2] = [-30, 0]
    m = EmbeddingModel(E, np.ones(6))
    assert unsup_loss(m, 0, 1, [2]) < 1e-12


def test_loss_matches_scalar_oracle(rng):
    for _ in range(50):
        m = _random_model(rng)
        v, c = 0, 1
        negs = [2, 3, 4, 5]
        E = m.vectors
        dot = lambda a, b: sum(float(x) * float(y) for x, y in zip(E[a], E[b]))
        sig = lambda x: 1.0 / (1.0 + math.exp(-x))
        expected = -math.log(sig(dot(c, v))) - sum(math.log(sig(-dot(u, v))) for u in negs)
        assert unsup_loss(m, v, c, negs) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_gradients_match_finite_differences(rng):
    for _ in range(20):
        m = _random_model(rng)
        v, c, negs = 0, 1, [2, 3, 4]
        gv, gc, gu = unsup_gradients(m, v, c, negs)
        for node, grad in [(v, gv), (c, gc)] + list(zip(negs, gu)):
            row = m.vectors[node]
            num = central_difference(lambda: unsup_loss(m, v, c, negs), row)
            assert relative_error(grad, num) < 1e-5


def test_step_touches_only_participants_and_descends(rng):
    m = _random_model(rng, n=20)
    before = m.vectors.copy()
    loss0 = unsup_loss(m, 3, 7, [1, 9])
    unsup_step(m, 3, 7, [1, 9], lr=1e-3)
    changed = np.flatnonzero((m.vectors != before).any(axis=1))
    assert set(changed.tolist()) <= {1, 3, 7, 9}
    assert unsup_loss(m, 3, 7, [1, 9]) < loss0
    with pytest.raises(ValueError):
        unsup_step(m, 3, 7, [1], lr=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations([2, 3, 4, 5, 6]))
def test_loss_permutation_invariant(seed, order):
    m = _random_model(np.random.default_rng(seed))
    a = unsup_loss(m, 0, 1, [2, 3, 4, 5, 6])
    assert unsup_loss(m, 0, 1, order) == pytest.approx(a, rel=1e-13)


def test_text_round_trip_is_exact(tmp_path, rng):
    m = _random_model(rng, n=30, d=16)
    m.vectors[0, 0] = 1 / 3
    m.vectors[1, 1] = 5e-324
    m.save_text(tmp_path / "a.txt")
    back = EmbeddingModel.load_text(tmp_path / "a.txt")
    assert np.array_equal(back.vectors, m.vectors)
    assert np.array_equal(back.type_weights, m.type_weights)
    assert back.keys == m.keys
    back.save_text(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_binary_round_trip(tmp_path, rng):
    m = _random_model(rng, n=30, d=16)
    m.save_binary(tmp_path / "a.bin")
    back = EmbeddingModel.load(tmp_path / "a.bin")
    assert np.array_equal(back.vectors, m.vectors) and back.keys == m.keys
    back.save_binary(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    m.save_text(tmp_path / "a.txt")
    assert np.array_equal(EmbeddingModel.load(tmp_path / "a.txt").vectors, m.vectors)


def test_model_lookups(rng):
    m = _random_model(rng, n=8)
    assert m.dim == 8 and len(m) == 8
    assert m.index[NodeKey(NodeType.LABORATORY, "n1")] == 1
    assert m.nodes_of_type(NodeType.DIAGNOSIS).tolist() == [3, 7]
    assert m.weight("lab") == m.type_weights[0]
    assert m.weight(NodeType.SYMPTOM) == m.type_weights[1]
