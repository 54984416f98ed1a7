import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import pdist

from oracles import gauss, gram_loop
from skcd.exceptions import DomainError
from skcd.kernels import KernelSpec, cross_gram, gram, kernel_vector, median_heuristic


def test_median_small_cases():
    assert median_heuristic([[0.0], [1.0], [3.0]]) == 2.0
    assert median_heuristic([[0.0], [1.0]]) == 1.0
    # even count of distances {1, 2, 3, 1, 2, 1} -> lower median 1
    assert median_heuristic([[0.0], [1.0], [2.0], [3.0]]) == 1.0


def test_median_degenerate():
    with pytest.raises(DomainError, match="degenerate bandwidth"):
        median_heuristic(np.ones((5, 2)))


def test_median_many_ties_falls_back_to_positive():
    pts = np.array([[0.0]] * 5 + [[2.0]])
    assert median_heuristic(pts) == 2.0


def test_median_5d_against_exhaustive(rng):
    pts = rng.normal(size=(1000, 5))
    brute = []
    for i in range(1000):
        brute.extend(np.sqrt(((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)))
    brute = np.sort(brute)
    lower_median = brute[(len(brute) - 1) // 2]
    bw = median_heuristic(pts)
    assert bw == pytest.approx(lower_median, rel=1e-12)
    # the distance between two independent N(0, I_5) points is sqrt(2) chi_5
    from scipy.stats import chi
    assert abs(bw / (np.sqrt(2.0) * chi(5).median()) - 1.0) < 0.10


def test_gram_diagonal_and_pair():
    K = gram(np.array([[0.0], [1.0]]), KernelSpec(1.0))
    np.testing.assert_array_equal(np.diag(K), [1.0, 1.0])
    assert K[0, 1] == pytest.approx(np.exp(-0.5), rel=1e-15)


def test_gram_matches_double_loop(rng):
    p = rng.normal(size=(6, 3))
    np.testing.assert_allclose(gram(p, KernelSpec(0.7)), gram_loop(p, 0.7), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_gram_invariants(p):
    K = gram(p, KernelSpec(1.3))
    assert np.array_equal(K, K.T)
    assert np.all(np.diag(K) == 1.0)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * p.shape[0]


def test_kernel_vector(rng):
    p = rng.normal(size=(7, 2))
    spec = KernelSpec(0.9)
    assert kernel_vector(p, p[2], spec)[2] == 1.0
    assert np.all(kernel_vector(p, np.array([1e3, -1e3]), spec) < 1e-10)
    q = rng.normal(size=2)
    np.testing.assert_allclose(kernel_vector(p, q, spec), [gauss(pi, q, 0.9) for pi in p], atol=1e-14)
    np.testing.assert_allclose(cross_gram(p, p[:3], spec), gram(p, spec)[:, :3], atol=1e-14)


def test_kernel_spec_resolution(rng):
    p = rng.normal(size=(20, 2))
    spec = KernelSpec()
    assert not spec.resolved
    with pytest.raises(DomainError):
        spec.sigma
    r = spec.resolve(p)
    assert r.sigma == pytest.approx(np.sort(pdist(p))[(190 - 1) // 2])
    assert r.scaled(2.0).sigma == pytest.approx(2 * r.sigma)
    with pytest.raises(DomainError):
        KernelSpec(-1.0)
    with pytest.raises(DomainError):
        KernelSpec(1.0, family="laplace")
