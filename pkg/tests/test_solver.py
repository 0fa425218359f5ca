import dataclasses

import cvxpy as cp
import numpy as np
import pytest

from hntc import prox, solver
from hntc.experiments import nearest_copy, rse
from hntc.database import GridSpec
from hntc.solver import HntcConfig, HntcProblem, HntcState


def random_problem(rng, shape=(3, 4, 2, 3), frac=0.5, **cfg):
    t = rng.uniform(0, 1, size=shape)
    mask = rng.uniform(size=shape) < frac
    v = mask * rng.integers(1, 4, size=shape)
    return HntcProblem.from_counts(t * mask, v, HntcConfig(**cfg))


def random_state(rng, problem, mu=0.0):
    s = problem.t.shape
    n2 = problem.config.n2
    return HntcState(rng.normal(size=s), [rng.normal(size=s) for _ in range(n2)],
                     [rng.normal(size=s) for _ in range(n2)], mu)


def test_config_validation():
    with pytest.raises(ValueError):
        HntcConfig(alpha=(0.7, 0.7))
    with pytest.raises(ValueError):
        HntcConfig(alpha=(1.0, 0.0))
    with pytest.raises(ValueError):
        HntcConfig(lam=0)
    with pytest.raises(ValueError):
        HntcConfig(epsilon=0)
    with pytest.raises(ValueError):
        HntcConfig(max_iter=0)
    with pytest.raises(ValueError):
        HntcConfig(eta=-1.0)
    assert HntcConfig().alpha == (0.5, 0.5)
    assert HntcConfig().beta1 == HntcConfig().lam


def test_problem_validation(rng):
    with pytest.raises(ValueError):
        HntcProblem(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        HntcProblem(np.zeros((2, 2, 2, 2)), -np.ones((2, 2, 2, 2)))
    p = random_problem(rng)
    assert p.w.sum() == pytest.approx(1.0)
    assert np.all((p.w == 0) == (p.t == 0) | (p.w == 0))


def test_x_update_gamma_zero_mu_zero(rng):
    p = random_problem(rng, gamma=0.0, lam=0.4)
    s = random_state(rng, p)
    expected = sum(0.4 * y + z for y, z in zip(s.y, s.z)) / (2 * 0.4)
    np.testing.assert_allclose(solver.x_update(p, s), expected, atol=1e-13)


def test_x_update_satisfies_assembled_system(rng):
    p = random_problem(rng, gamma=1.3, lam=0.7)
    s = random_state(rng, p, mu=2.5)
    x = solver.x_update(p, s)
    a = prox.build_a_operator(p.grid_shape, 2, 0.7, 1.3).dense()
    for u in range(p.t.shape[2]):
        for v in range(p.t.shape[3]):
            col = lambda arr: arr[:, :, u, v].ravel(order="F")
            lhs = a @ col(x) + 2 * s.mu * col(p.w) * (col(x) - col(p.t))
            rhs = sum(0.7 * col(y) + col(z) for y, z in zip(s.y, s.z))
            assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) <= 1e-8


def test_x_update_hand_assembled_2x2():
    # 2x2 grid, one beam axis of length 1, n2 = 1: stencil [[l+4g, -2g, -2g, 0], ...]
    lam, gamma, mu = 1.0, 0.5, 0.0
    t = np.zeros((2, 2, 1))
    p = HntcProblem(t, np.zeros_like(t), HntcConfig(n1=2, n2=1, lam=lam, gamma=gamma, eta=0.0))
    y = np.array([1.0, 2.0, 3.0, 4.0]).reshape((2, 2, 1), order="F")
    s = HntcState(np.zeros_like(t), [y], [np.zeros_like(t)], mu)
    a = np.array([[3, -1, -1, 0], [-1, 3, 0, -1], [-1, 0, 3, -1], [0, -1, -1, 3.0]])
    expected = np.linalg.solve(a, [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(solver.x_update(p, s).ravel(order="F"), expected, atol=1e-12)


def test_y_update_rank_one_shrinkage():
    lam = 2.0
    cfg = HntcConfig(n1=1, n2=2, lam=lam, eta=0.0)
    a, b = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    slab = 5.0 * np.outer(a / 3, b / 5)  # sigma = 5
    x = np.stack([slab, 2 * slab])
    p = HntcProblem(np.zeros_like(x), np.zeros_like(x), cfg)
    s = HntcState(x, [x, x], [np.zeros_like(x)] * 2)
    y = solver.y_update(p, s)
    tau = 0.5 / lam
    for k in range(2):
        np.testing.assert_allclose(y[k][0], slab * (5 - tau) / 5, atol=1e-12)
        np.testing.assert_allclose(y[k][1], 2 * slab * (10 - tau) / 10, atol=1e-12)


def test_y_update_zero_cases(rng):
    p = random_problem(rng, lam=0.5)
    x = rng.normal(size=p.t.shape)
    s = HntcState(x, [x, x], [0.5 * x, 0.5 * x])
    for y in solver.y_update(p, s):
        np.testing.assert_allclose(y, 0, atol=1e-12)
    tiny = HntcProblem(p.t, p.w, HntcConfig(lam=1e-6))
    s = HntcState(x, [x, x], [np.zeros_like(x)] * 2)
    for y in solver.y_update(tiny, s):
        np.testing.assert_array_equal(y, 0)


def test_z_update_examples(rng):
    x = rng.normal(size=(2, 2, 2, 2))
    e = rng.normal(size=x.shape)
    z0 = rng.normal(size=x.shape)
    s = HntcState(x, [x.copy()], [z0])
    np.testing.assert_array_equal(solver.z_update(s, 0.5)[0], z0)
    s = HntcState(x, [x + e], [np.zeros_like(x)])
    s.z = solver.z_update(s, 0.5)
    np.testing.assert_allclose(s.z[0], 0.5 * e, atol=1e-15)
    s.z = solver.z_update(s, 0.5)
    np.testing.assert_allclose(s.z[0], 2 * 0.5 * e, atol=1e-15)


def one_entry_problem(t_val, x_val, eta):
    t = np.full((1, 1, 1, 1), t_val)
    p = HntcProblem(t, np.ones_like(t), HntcConfig(eta=eta))
    return p, HntcState(np.full_like(t, x_val), [], [])


def test_mu_update_examples():
    p, s = one_entry_problem(1.0, 1.0, 0.5)
    assert solver.mu_update(p, s, 1.0) == 0.0
    p, s = one_entry_problem(np.sqrt(0.3), 0.0, 0.0)
    assert solver.mu_update(p, s, 1.0) == pytest.approx(0.3, abs=1e-15)
    p, s = one_entry_problem(1.0, 1.0, 0.5)
    s.mu = 0.1
    assert solver.mu_update(p, s, 1.0) == 0.0


def test_noise_budget():
    w = np.array([0.25, 0.75, 0.0])
    v = np.array([1.0, 3.0, 0.0])
    assert solver.noise_budget(w, v, 2.0) == pytest.approx(0.25 * 2 + 0.75 * 2 / 3)
    assert solver.noise_budget(w, v, 2.0, c=3.0) == pytest.approx(3 * (0.5 + 0.5))


def smooth_low_rank(rng, grid=(11, 11), beams=(8, 8), rank=2):
    xs = np.linspace(0, 1, grid[0])[:, None]
    ys = np.linspace(0, 1, grid[1])[None, :]
    t = np.zeros(grid + beams)
    for r in range(rank):
        f = 1 + 0.8 * np.sin(2 * xs * (r + 1) + rng.uniform(0, 6)) * np.cos(1.5 * ys + rng.uniform(0, 6))
        a, b = rng.uniform(0, 1, beams[0]), rng.uniform(0, 1, beams[1])
        t += f[:, :, None, None] * np.outer(a, b)[None, None]
    return t


def test_fully_observed_noiseless_budget(rng):
    truth = smooth_low_rank(rng)
    w = np.full(truth.shape, 1.0 / truth.size)
    eta = 1e-3 * float(np.sum(w * truth ** 2))
    res = solver.solve(HntcProblem(truth, w, HntcConfig(eta=eta)))
    assert res.converged
    assert solver.constraint_value(HntcProblem(truth, w, HntcConfig(eta=eta)), res.x) <= 0
    assert rse(res.x, truth) <= 0.05
    assert all(mu >= 0 for *_, mu in res.trace)


def test_partial_observation_beats_nearest_copy(rng):
    truth = smooth_low_rank(rng)
    grid = GridSpec(0, 50, 0, 50, 5)
    obs = rng.permutation(121)[:49]
    t = np.zeros_like(truth)
    v = np.zeros_like(truth)
    for f in obs:
        i, j = divmod(f, 11)
        top = np.argsort(-truth[i, j].ravel(), kind="stable")[:7]
        t[i, j].flat[top] = truth[i, j].flat[top]
        v[i, j].flat[top] = 1
    res = solver.solve(HntcProblem.from_counts(t, v))
    assert rse(res.x, truth) < rse(nearest_copy(t, grid), truth)


@pytest.mark.filterwarnings("ignore:Solution may be inaccurate")
def test_low_rank_reduction_matches_convex_oracle(rng):
    # single position, gamma = 0: both unfoldings of the 4x4 slice share one nuclear norm
    b = rng.normal(size=(4, 2)) @ rng.normal(size=(2, 4))
    mask = rng.uniform(size=(4, 4)) < 0.7
    w = mask / mask.sum()
    t = b * mask
    eta = 1e-3 * float(np.sum(w * t ** 2))
    cfg = HntcConfig(n1=2, n2=2, gamma=0.0, eta=eta, epsilon=1e-11, max_iter=20000)
    res = solver.solve(HntcProblem(t[None, None], w[None, None], cfg))
    xv = cp.Variable((4, 4))
    cp.Problem(cp.Minimize(cp.normNuc(xv)),
               [cp.sum(cp.multiply(w, cp.square(t - xv))) <= eta]).solve(
        solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, max_iter=500)
    assert res.converged
    np.testing.assert_allclose(res.x[0, 0], xv.value, atol=1e-6)


def test_degenerate_partitions(rng):
    t = rng.uniform(size=(3, 4))
    w = np.full(t.shape, 1 / t.size)
    low_rank = solver.solve(HntcProblem(t, w, HntcConfig(n1=0, n2=2, eta=1e-3)))
    assert low_rank.x.shape == t.shape
    smooth = solver.solve(HntcProblem(t[..., None][..., 0], w, HntcConfig(n1=2, n2=0, eta=1e-3)))
    assert smooth.x.shape == t.shape
    assert np.sum(w * (t - smooth.x) ** 2) <= 1e-3 * (1 + 1e-6)


def test_deterministic_repeat(rng):
    p = random_problem(rng)
    a = solver.solve(p)
    b = solver.solve(HntcProblem(p.t.copy(), p.w.copy(), p.config))
    assert np.array_equal(a.x, b.x) and a.trace == b.trace


def test_max_iter_is_soft_failure(rng):
    p = random_problem(rng, max_iter=1)
    res = solver.solve(p)
    assert not res.converged and res.iterations == 1


def test_warm_start_from_converged_state(rng):
    p = random_problem(rng)
    cold = solver.solve(p)
    assert cold.converged
    warm = solver.solve_warm(p, cold.state)
    assert warm.converged and warm.iterations <= 2


def test_warm_start_shape_mismatch(rng):
    p = random_problem(rng)
    other = random_problem(rng, shape=(3, 3, 2, 3))
    with pytest.raises(ValueError):
        solver.solve_warm(p, solver.solve(other).state)


def test_trace_csv(tmp_path, rng):
    res = solver.solve(random_problem(rng))
    path = tmp_path / "trace.csv"
    solver.write_trace(path, res.trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,primal_gap,constraint_value,mu"
    assert len(lines) == res.iterations + 1
