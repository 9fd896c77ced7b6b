import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfpf.errors import InfeasibleTransportError
from mfpf.transport import (
    GibbsKernel,
    SinkhornConvergenceWarning,
    exact_transport,
    gibbs_kernel,
    plan_resample,
    sinkhorn,
    squared_distances,
    transform_particles,
)

from .oracles import transport_vertex_enumeration


def random_simplex(rng, n):
    w = rng.random(n) + 0.05
    return w / w.sum()


def test_gibbs_kernel_entries():
    fine = np.array([[0.0], [1.0]])
    coarse = np.array([[0.0], [0.5], [2.0]])
    K = gibbs_kernel(fine, coarse, g=0.5, dt=0.02)
    d2 = (fine - coarse.T) ** 2
    assert np.allclose(K.entries, np.exp(-d2 / (2 * 0.25 * 0.02)), rtol=1e-14)
    assert K.shape == (2, 3)
    with pytest.raises(ValueError):
        gibbs_kernel(fine, coarse, g=0.0, dt=0.02)


def test_sinkhorn_marginals():
    rng = np.random.default_rng(0)
    for _ in range(20):
        K = rng.random((6, 4)) + 0.01
        p1, p0 = random_simplex(rng, 6), random_simplex(rng, 4)
        plan = sinkhorn(K, p0, p1)
        assert plan.converged
        assert np.allclose(plan.entries.sum(axis=1), p1, atol=1e-8)
        assert np.allclose(plan.entries.sum(axis=0), p0, atol=1e-8)
        assert plan.marginal_error() <= 1e-8


def test_sinkhorn_matches_pot():
    import ot

    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((7, 2)), rng.standard_normal((5, 2))
    C = squared_distances(x, y)
    reg = 0.5
    p1, p0 = random_simplex(rng, 7), random_simplex(rng, 5)
    ours = sinkhorn(np.exp(-C / reg), p0, p1, tol=1e-13).entries
    ref = ot.sinkhorn(p1, p0, C, reg, stopThr=1e-14, numItermax=100_000)
    assert np.allclose(ours, ref, atol=1e-10)


def test_sinkhorn_log_domain_agrees_with_plain():
    rng = np.random.default_rng(2)
    K = rng.random((5, 5)) + 0.1
    p = np.full(5, 0.2)
    w = random_simplex(rng, 5)
    a = sinkhorn(K, p, w, log_domain=False).entries
    b = sinkhorn(K, p, w, log_domain=True).entries
    assert np.allclose(a, b, atol=1e-10)


def test_sinkhorn_switches_to_log_domain_for_tiny_kernels():
    x = np.arange(4.0)[:, None]
    kern = gibbs_kernel(x, x, g=0.05, dt=0.2)
    assert kern.entries.min() == 0.0
    plan = sinkhorn(kern, np.full(4, 0.25), np.full(4, 0.25))
    assert np.all(np.isfinite(plan.entries))
    assert plan.marginal_error() <= 1e-8
    assert np.allclose(plan.entries, np.eye(4) / 4)


def test_sinkhorn_zero_row_infeasible():
    K = np.ones((3, 3))
    K[1] = 0.0
    with pytest.raises(InfeasibleTransportError):
        sinkhorn(K, np.full(3, 1 / 3), np.full(3, 1 / 3))


def test_sinkhorn_bad_marginals():
    with pytest.raises(ValueError):
        sinkhorn(np.ones((2, 2)), [0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        sinkhorn(np.ones((2, 3)), [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        sinkhorn(-np.ones((2, 2)), [0.5, 0.5], [0.5, 0.5])


def test_sinkhorn_nonconvergence_warns():
    rng = np.random.default_rng(3)
    K = rng.random((5, 5))
    with pytest.warns(SinkhornConvergenceWarning):
        plan = sinkhorn(K, np.full(5, 0.2), random_simplex(rng, 5), max_iter=1, tol=1e-15)
    assert not plan.converged and plan.iterations == 1


def test_sinkhorn_accepts_gibbs_kernel():
    kern = GibbsKernel(np.log(np.array([[1.0, 0.5], [0.5, 1.0]])))
    plan = sinkhorn(kern, [0.5, 0.5], [0.5, 0.5])
    assert np.allclose(plan.entries, plan.entries.T)


def test_exact_transport_uniform_is_identity():
    x = np.array([[0.0], [1.0], [3.0], [7.0]])
    plan = exact_transport(squared_distances(x), np.full(4, 0.25))
    assert np.allclose(plan.entries, np.eye(4) / 4)
    assert np.allclose(transform_particles(plan, x), x)


def test_exact_transport_mass_mismatch():
    with pytest.raises(InfeasibleTransportError):
        exact_transport(np.ones((2, 2)), [0.4, 0.4])
    with pytest.raises(InfeasibleTransportError):
        exact_transport(np.ones((2, 2)), [1.5, -0.5])


def test_exact_transport_matches_vertex_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(25):
        C = rng.random((3, 3)) * 4
        w = random_simplex(rng, 3)
        plan = exact_transport(C, w)
        ref, _ = transport_vertex_enumeration(C, w, np.full(3, 1 / 3))
        assert plan.cost(C) == pytest.approx(ref, abs=1e-10)


def test_transform_preserves_weighted_mean():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((12, 2))
    w = random_simplex(rng, 12)
    plan = exact_transport(squared_distances(x), w)
    out = transform_particles(plan, x)
    assert np.allclose(out.mean(axis=0), w @ x, atol=1e-12)


def test_transform_one_dimensional_input():
    x = np.array([0.0, 1.0, 2.0])
    plan = exact_transport(squared_distances(x), np.array([0.2, 0.3, 0.5]))
    out = transform_particles(plan, x)
    assert out.shape == (3,)


def test_plan_resample_frequencies():
    P = np.array([[0.25, 0.0], [0.25, 0.5]])
    states = np.array([[10.0], [20.0]])
    rng = np.random.default_rng(6)
    draws = np.array([plan_resample(P, states, rng)[:, 0] for _ in range(4000)])
    assert np.all(draws[:, 1] == 20.0)
    assert abs(np.mean(draws[:, 0] == 10.0) - 0.5) < 0.04


def test_plan_resample_callable_uniforms():
    P = np.array([[0.3, 0.1], [0.2, 0.4]])
    states = np.array([[1.0], [2.0]])
    out = plan_resample(P, states, lambda size: np.full(size, 0.5))
    # column 0: cdf (0.6, 1.0) -> state 1; column 1: cdf (0.2, 1.0) -> state 2
    assert np.array_equal(out[:, 0], [1.0, 2.0])


def test_plan_csv(tmp_path):
    plan = exact_transport(squared_distances(np.array([0.0, 1.0])), np.array([0.5, 0.5]))
    fname = tmp_path / "plan.csv"
    plan.to_csv(fname)
    lines = fname.read_text().splitlines()
    assert lines[0] == "row,col,value"
    rows = [tuple(map(float, line.split(","))) for line in lines[1:]]
    assert sorted(rows) == [(0, 0, 0.5), (1, 1, 0.5)]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), scale=st.floats(1e-3, 1e3))
def test_sinkhorn_scale_invariance_property(seed, scale):
    rng = np.random.default_rng(seed)
    K = rng.random((4, 3)) + 0.05
    p1, p0 = random_simplex(rng, 4), random_simplex(rng, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SinkhornConvergenceWarning)
        a = sinkhorn(K, p0, p1).entries
        b = sinkhorn(scale * K, p0, p1).entries
    assert np.max(np.abs(a - b)) <= 1e-12
