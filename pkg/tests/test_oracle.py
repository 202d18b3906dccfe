import numpy as np
import pytest

from specdraft.models import random_model
from specdraft.oracle import (
    EnumerationGuardError,
    ExactSequenceDistribution,
    InsufficientSamplesError,
    chi_square_equivalence,
    exact_autoregressive,
    exact_tree_verification_marginal,
    tree_marginal_suite,
    tree_shapes,
)
from specdraft.tree import ROOT
from helpers import flat, unconditional

P = np.array([0.5, 0.3, 0.2])
Q = np.array([0.6, 0.3, 0.1])


def test_independent_pair():
    law = exact_autoregressive(unconditional([0.5, 0.5]), (), 2)
    assert law.probs == {(0, 0): 0.25, (0, 1): 0.25, (1, 0): 0.25, (1, 1): 0.25}


def test_one_step_is_table_row():
    m = random_model(4, 1, 3)
    law = exact_autoregressive(m, (0, 2), 1)
    np.testing.assert_allclose([law.probs[(t,)] for t in range(4)], m.table[(2,)])


def test_sums_to_one():
    assert exact_autoregressive(random_model(3, 1, 8), (0,), 3).total() == pytest.approx(1, abs=1e-9)


def test_marginalize_last():
    m = random_model(3, 1, 8)
    a = exact_autoregressive(m, (0,), 3).marginalize_last()
    assert a.max_abs_diff(exact_autoregressive(m, (0,), 2)) < 1e-12


def test_enumeration_guard():
    with pytest.raises(EnumerationGuardError):
        exact_autoregressive(random_model(10, 1, 0), (0,), 7)


def test_single_token_chain_marginal():
    law = exact_tree_verification_marginal(P, [P], flat([0], [ROOT], q=[Q], sampled=True))
    np.testing.assert_allclose(law[0], P, atol=1e-15)


def test_two_sibling_marginal():
    for sampled in (False, True):
        law = exact_tree_verification_marginal(P, [P, P], flat([0, 1], [ROOT, ROOT], q=[Q, Q], sampled=sampled))
        np.testing.assert_allclose(law[0], P, atol=1e-15)


def test_perfect_chain_marginal():
    q = np.array([0.25, 0.75])
    law = exact_tree_verification_marginal(q, [q, q], flat([1, 1], [ROOT, 0], q=[q, q], sampled=True))
    for row in law:
        np.testing.assert_allclose(row, q, atol=1e-15)


def test_node_guard():
    with pytest.raises(EnumerationGuardError):
        n = 9
        exact_tree_verification_marginal(P, [P] * n, flat([0] * n, [ROOT] * n))


def test_shape_counts():
    # ordered forests on n nodes are counted by the Catalan numbers
    assert [sum(1 for s in tree_shapes(n) if len(s) == n) for n in range(1, 6)] == [1, 2, 5, 14, 42]


def test_small_suite():
    res = tree_marginal_suite(max_nodes=4)
    assert res["cases"] > 0 and res["max_abs_deviation"] < 1e-12


def _law(p):
    return ExactSequenceDistribution(1, {(i,): float(x) for i, x in enumerate(p)})


def _counts(sample):
    return {(i,): int(c) for i, c in enumerate(sample) if c}


def test_null_pass_rate():
    rng = np.random.default_rng(0)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    passes = sum(chi_square_equivalence(_counts(rng.multinomial(100_000, p)), _law(p), alpha=0.05).passed
                 for _ in range(200))
    assert abs(passes / 200 - 0.95) <= 0.03


def test_power_at_tv_01():
    rng = np.random.default_rng(1)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    shifted = np.array([0.2, 0.2, 0.3, 0.3])
    assert not any(chi_square_equivalence(_counts(rng.multinomial(100_000, shifted)), _law(p)).passed
                   for _ in range(20))


def test_degenerate_expected():
    v = chi_square_equivalence({(0,): 10}, _law([1.0, 0.0]))
    assert v.passed and v.statistic == 0


def test_impossible_outcome_fails():
    assert not chi_square_equivalence({(0,): 10, (1,): 1}, _law([1.0, 0.0])).passed


def test_insufficient_samples():
    with pytest.raises(InsufficientSamplesError) as err:
        chi_square_equivalence({(0,): 3}, _law([0.999, 0.001]))
    assert err.value.required_n > 3
