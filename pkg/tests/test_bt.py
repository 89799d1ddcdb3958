import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import grid_mle, three_method_counts
from pharnet.bt import BTError, bt_fit, parse_pairs


def test_symmetry():
    r = bt_fit(np.array([[0, 10], [10, 0]]))
    np.testing.assert_array_equal(r.scores, [0.0, 0.0])


def test_dominance_closed_form():
    r = bt_fit(np.array([[0, 10], [0, 0]]), ["A", "B"])
    half = math.log(10.5 / 0.5) / 2
    np.testing.assert_allclose(r.scores, [half, -half], atol=1e-9)
    assert r.ranking()[0][0] == "A"


@pytest.mark.parametrize("pseudo", [0.5, 0.0])
def test_three_methods_match_grid_oracle(pseudo):
    w = three_method_counts()
    r = bt_fit(w, pseudo_count=pseudo)
    assert r.converged
    np.testing.assert_allclose(r.scores, grid_mle(w, pseudo), atol=1e-4)
    assert abs(r.scores.sum()) < 1e-12


def test_doubling_invariance_without_pseudo_count():
    w = three_method_counts()
    a = bt_fit(w, pseudo_count=0.0).scores
    b = bt_fit(2 * w, pseudo_count=0.0).scores
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_doubling_invariance_random(seed, k):
    rng = np.random.default_rng(seed)
    w = rng.integers(1, 20, (k, k)).astype(float)
    np.fill_diagonal(w, 0)
    a = bt_fit(w, pseudo_count=0.0).scores
    b = bt_fit(2 * w, pseudo_count=0.0).scores
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum()) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_are_a_stationary_point(seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(0, 15, (4, 4)).astype(float)
    np.fill_diagonal(w, 0)
    w[0, 1] = w[1, 2] = w[2, 3] = w[3, 0] = 1
    r = bt_fit(w, pseudo_count=0.5)
    wp = w + 0.5 * ((w + w.T) > 0)
    p = np.exp(r.scores)
    n = wp + wp.T
    grad = wp.sum(axis=1) - (n * p[:, None] / (p[:, None] + p[None, :])).sum(axis=1)
    assert np.abs(grad).max() < 1e-6 * n.sum()


def test_disconnected_graph_names_components():
    w = np.zeros((4, 4))
    w[0, 1] = w[1, 0] = 3
    w[2, 3] = 1
    with pytest.raises(BTError, match="disconnected") as info:
        bt_fit(w, ["a", "b", "c", "d"])
    assert "a" in str(info.value) and "c" in str(info.value)


def test_zero_game_method():
    w = np.zeros((3, 3))
    w[0, 1] = 2
    with pytest.raises(BTError, match="zero games: z"):
        bt_fit(w, ["x", "y", "z"])


@pytest.mark.parametrize(
    "w, match",
    [(np.zeros((2, 3)), "square"), (np.array([[0, -1], [1, 0]]), "non-negative"), (np.array([[1, 1], [1, 0]]), "itself")],
)
def test_bad_matrices(w, match):
    with pytest.raises(BTError, match=match):
        bt_fit(w)


def test_parse_pairs_accumulates():
    methods, w = parse_pairs("# study\nPAIR a b 8 2\nPAIR b c 7 3\nPAIR a c 9 1\nPAIR b a 1 0\n")
    assert methods == ["a", "b", "c"]
    assert w[0, 1] == 8 and w[1, 0] == 3 and w[2, 0] == 1


@pytest.mark.parametrize("text", ["PAIR a b 1\n", "PAIR a a 1 1\n", "PAIR a b x 1\n", "PAIR a b -1 2\n"])
def test_parse_pairs_errors(text):
    with pytest.raises(BTError, match="line 1"):
        parse_pairs(text)


def test_format_discloses_pseudo_count():
    r = bt_fit(three_method_counts(), ["A", "B", "C"])
    text = r.format()
    assert "pseudo-count 0.5" in text
    assert text.splitlines()[1].startswith("A ")
