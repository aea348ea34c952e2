import itertools

import numpy as np
import numpy.testing as npt
import pytest

from gatedfusion.autodiff import Parameter, Tape, Tensor, square, sum_reduce
from gatedfusion.monotonic import (
    Calibrator,
    Lattice,
    LatticeNetwork,
    LinearEmbedding,
    calibrator_eval,
    cumsum,
    dln_eval,
    lattice_eval,
    lattice_interp,
    linear_embed_eval,
    pav,
    project_monotone,
    pwl_interp,
    softplus,
    transpose,
)
from conftest import check_gradient


def param_fd_check(params, loss_fn, tol=1e-4, h=1e-5):
    """Tape gradients for each Parameter vs central finite differences."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        tape.gradients(loss_fn())
    for p in params:
        numeric = np.zeros_like(p.value)
        flat, nflat = p.value.ravel(), numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = np.abs(p.grad - numeric).max() / max(1.0, np.abs(numeric).max())
        assert err < tol, f"{p.name}: relative error {err:.3e}"


def brute_force_interp(values: np.ndarray, x: np.ndarray) -> float:
    """Sum over every vertex with tensor-product hat weights."""
    sizes = values.shape
    total = 0.0
    for idx in itertools.product(*[range(s) for s in sizes]):
        w = 1.0
        for i, (s, j) in enumerate(zip(sizes, idx)):
            t = np.clip(x[i], 0.0, 1.0) * (s - 1)
            w *= max(0.0, 1.0 - abs(t - j))
        total += values[idx] * w
    return total


# ---------------------------------------------------------------- calibrators

def test_identity_calibrator():
    c = Calibrator([0.0, 1.0], monotone=True)
    assert calibrator_eval(c, 0.5) == pytest.approx(0.5)
    npt.assert_allclose(c.effective_outputs().data, [0.0, 1.0], atol=1e-12)


def test_linear_interpolation_between_keypoints():
    c = Calibrator([0.0, 1.0], raw_outputs=[0.0, 2.0], monotone=False)
    assert calibrator_eval(c, 0.25) == pytest.approx(0.5)


def test_out_of_range_inputs_clamp_to_boundary():
    c = Calibrator([0.0, 1.0], raw_outputs=[0.3, 0.9], monotone=False)
    assert calibrator_eval(c, -5.0) == pytest.approx(0.3)
    assert calibrator_eval(c, 7.0) == pytest.approx(0.9)


def test_monotone_calibrator_outputs_non_decreasing(rng):
    for _ in range(50):
        c = Calibrator(np.linspace(0, 1, 6), rng.standard_normal(6), monotone=True)
        eff = c.effective_outputs().data
        assert np.all(np.diff(eff) >= 0)
        xs = np.sort(rng.uniform(-0.5, 1.5, size=40))
        ys = calibrator_eval(c, xs).data
        assert np.all(np.diff(ys) >= -1e-15)


def test_keypoint_validation():
    with pytest.raises(Exception, match="strictly increasing"):
        Calibrator([0.0, 0.0, 1.0])
    with pytest.raises(Exception, match="at least 2"):
        Calibrator([0.0])


# ---------------------------------------------------------------- embeddings

def test_identity_embedding_returns_input(rng):
    e = LinearEmbedding(np.eye(3), np.zeros(3), np.zeros(3, dtype=bool))
    x = rng.standard_normal(3)
    npt.assert_allclose(linear_embed_eval(e, x).data, x, atol=1e-12)


def test_embedding_worked_example():
    e = LinearEmbedding([[1.0, 2.0]], [1.0], [False, False])
    npt.assert_allclose(linear_embed_eval(e, [1.0, 1.0]).data, [4.0])


def test_masked_columns_are_non_negative():
    e = LinearEmbedding([[-3.0, -3.0]], [0.0], [True, False])
    w = e.effective_coefficients().data
    assert w[0, 0] >= 0.0
    assert w[0, 1] == -3.0


def test_embedding_batch_and_transpose(rng):
    e = LinearEmbedding(rng.standard_normal((2, 4)), rng.standard_normal(2),
                        np.ones(4, dtype=bool))
    x = rng.standard_normal((5, 4))
    got = linear_embed_eval(e, x).data
    w = np.log1p(np.exp(e.raw.value))
    npt.assert_allclose(got, x @ w.T + e.bias.value, atol=1e-10)
    m = rng.standard_normal((3, 4))
    npt.assert_allclose(transpose(Tensor(m)).data, m.T)


# ------------------------------------------------------------------ lattices

def test_lattice_two_by_two_worked_example():
    lat = Lattice((2, 2), values=[0.0, 1.0, 2.0, 4.0])
    assert lattice_eval(lat, np.array([0.25, 0.5])) == pytest.approx(1.125)


def test_lattice_one_dimensional_midpoint():
    lat = Lattice((2,), values=[0.0, 1.0])
    assert lattice_eval(lat, np.array([0.5])) == pytest.approx(0.5)


def test_lattice_eval_at_vertices(rng):
    sizes = (3, 2, 4)
    vals = rng.standard_normal(sizes)
    lat = Lattice(sizes, values=vals, monotone_mask=[False] * 3)
    for idx in itertools.product(*[range(s) for s in sizes]):
        x = np.array([j / (s - 1) for j, s in zip(idx, sizes)])
        assert lattice_eval(lat, x) == pytest.approx(vals[idx], abs=1e-12)


def test_lattice_matches_brute_force_oracle(rng):
    for d in range(1, 5):
        sizes = tuple(int(s) for s in rng.integers(2, 4, size=d))
        vals = rng.standard_normal(sizes)
        lat = Lattice(sizes, values=vals, monotone_mask=[False] * d)
        for _ in range(25):
            x = rng.uniform(-0.2, 1.2, size=d)
            want = brute_force_interp(vals, x)
            assert lattice_eval(lat, x) == pytest.approx(want, abs=1e-12)


def test_lattice_exact_on_affine_functions(rng):
    # Multilinear interpolation reproduces any affine function sampled at
    # the vertices; in 1-D the lattice of a line is the line.
    coef = rng.standard_normal(3)
    bias = 0.7
    sizes = (2, 3, 2)
    grid = np.meshgrid(*[np.linspace(0, 1, s) for s in sizes], indexing="ij")
    vals = bias + sum(c * g for c, g in zip(coef, grid))
    lat = Lattice(sizes, values=vals, monotone_mask=[False] * 3)
    for _ in range(50):
        x = rng.uniform(0, 1, size=3)
        assert lattice_eval(lat, x) == pytest.approx(bias + coef @ x, abs=1e-12)

    line = Lattice((2,), values=[0.3, 1.4])
    for x in rng.uniform(0, 1, size=20):
        assert lattice_eval(line, np.array([x])) == pytest.approx(0.3 + 1.1 * x, abs=1e-12)


def test_lattice_dimension_mismatch():
    lat = Lattice((2, 2))
    with pytest.raises(Exception, match="2"):
        lattice_eval(lat, np.array([0.5, 0.5, 0.5]))


# ---------------------------------------------------------------- projection

def test_pav_worked_example():
    npt.assert_allclose(pav([0.0, -1.0]), [-0.5, -0.5])


def test_projection_leaves_feasible_points_unchanged():
    lat = Lattice((3,), values=[0.0, 1.0, 2.0])
    project_monotone(lat)
    npt.assert_array_equal(lat.params.value, [0.0, 1.0, 2.0])


def test_projection_skips_non_monotone_dimensions():
    vals = np.array([[3.0, 0.0], [2.0, -1.0]])
    lat = Lattice((2, 2), values=vals.copy(), monotone_mask=[True, False])
    project_monotone(lat)
    # Columns (dim 0) become ordered; rows (dim 1) keep their violations.
    assert np.all(np.diff(lat.params.value, axis=0) >= 0)
    assert lat.params.value[0, 0] > lat.params.value[0, 1]


def test_pav_matches_quadratic_program_oracle(rng):
    cvxpy = pytest.importorskip("cvxpy")
    for _ in range(25):
        n = int(rng.integers(2, 6))
        seq = rng.standard_normal(n) * rng.choice([0.5, 2.0])
        y = cvxpy.Variable(n)
        constraints = [y[i] <= y[i + 1] for i in range(n - 1)]
        problem = cvxpy.Problem(cvxpy.Minimize(cvxpy.sum_squares(y - seq)), constraints)
        problem.solve()
        npt.assert_allclose(pav(seq), y.value, atol=1e-6)


def test_projection_idempotent_and_non_expansive(rng):
    for trial in range(20):
        sizes = (2, 3, 2)
        lat = Lattice(sizes, values=rng.standard_normal(sizes))
        project_monotone(lat)
        once = lat.params.value.copy()
        violations = max(
            np.maximum(-np.diff(once, axis=ax), 0).max() for ax in range(3)
        )
        assert violations <= 1e-12
        project_monotone(lat)
        npt.assert_array_equal(lat.params.value, once)

        # Never moves further from any feasible (fully monotone) point.
        feasible = Lattice(sizes, values=rng.standard_normal(sizes))
        project_monotone(feasible)
        z = feasible.params.value
        start = rng.standard_normal(sizes)
        moved = Lattice(sizes, values=start.copy())
        project_monotone(moved)
        assert np.linalg.norm(moved.params.value - z) <= np.linalg.norm(start - z) + 1e-12


# ---------------------------------------------------------- lattice networks

def test_identity_initialized_network_gives_equal_outputs():
    net = LatticeNetwork(k=2, seed=3)
    out = dln_eval(net, np.array([0.5, 0.5])).data
    assert out[0] == pytest.approx(out[1], abs=1e-15)


def test_network_output_non_decreasing_in_own_input():
    net = LatticeNetwork(k=3, seed=1)
    base = np.full(3, 0.6)
    for k in range(3):
        lo, hi = base.copy(), base.copy()
        lo[k], hi[k] = 0.2, 0.8
        out_lo = dln_eval(net, lo).data
        out_hi = dln_eval(net, hi).data
        assert out_hi[k] >= out_lo[k]


def _randomized_network(k: int, seed: int) -> LatticeNetwork:
    """A network with randomized (then re-projected) parameters, standing in
    for the state after training."""
    net = LatticeNetwork(k=k, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in net.parameters():
        p.value += rng.standard_normal(p.value.shape) * 0.7
    net.project()
    return net


def test_trained_network_has_zero_monotonicity_violations():
    net = _randomized_network(k=3, seed=5)
    assert net.monotone_violation() == 0.0
    rng = np.random.default_rng(6)
    for coord in range(3):
        lows = rng.uniform(0, 1, size=(1000, 3))
        highs = lows.copy()
        pair = np.sort(rng.uniform(0, 1, size=(1000, 2)), axis=1)
        lows[:, coord], highs[:, coord] = pair[:, 0], pair[:, 1]
        out_lo = dln_eval(net, lows).data
        out_hi = dln_eval(net, highs).data
        # Own output never decreases; every other output never increases.
        assert np.all(out_hi[:, coord] - out_lo[:, coord] >= -1e-12)
        others = [j for j in range(3) if j != coord]
        assert np.all(out_hi[:, others] - out_lo[:, others] <= 1e-12)


def test_network_rejects_bad_declarations():
    with pytest.raises(Exception, match="declared \\+1"):
        LatticeNetwork(k=2, declaration=[[-1, 1], [1, 1]])


def test_network_parameter_names_are_unique():
    net = LatticeNetwork(k=2)
    names = [p.name for p in net.parameters()]
    assert len(names) == len(set(names))


# ----------------------------------------------------------------- gradients

def test_softplus_and_cumsum_gradients(rng):
    for _ in range(100):
        check_gradient(lambda x: sum_reduce(square(softplus(x))), rng.standard_normal(7))
        check_gradient(lambda x: sum_reduce(square(cumsum(x))), rng.standard_normal(6))


def test_pwl_interp_gradients(rng):
    kp = np.linspace(0, 1, 5)
    for _ in range(100):
        vals = rng.standard_normal(5)
        # Keep probe points clear of keypoints: the map is only piecewise
        # smooth and finite differences straddle kinks.
        x = rng.uniform(0.02, 0.98, size=6)
        x += np.where(np.abs(x - np.round(x * 4) / 4) < 2e-3, 5e-3, 0.0)
        check_gradient(lambda v: sum_reduce(square(pwl_interp(v, x, kp))), vals)
        check_gradient(lambda xx: sum_reduce(square(pwl_interp(Tensor(vals), xx, kp))), x)


def test_lattice_interp_gradients(rng):
    sizes = (3, 2)
    for _ in range(100):
        vals = rng.standard_normal(6)
        x = rng.uniform(0.05, 0.95, size=(4, 2))
        x[:, 0] += np.where(np.abs(x[:, 0] - np.round(x[:, 0] * 2) / 2) < 2e-3, 5e-3, 0.0)
        check_gradient(lambda v: sum_reduce(square(lattice_interp(v, x, sizes))), vals)
        check_gradient(
            lambda xx: sum_reduce(square(lattice_interp(Tensor(vals), xx, sizes))), x
        )


def test_full_network_gradients_match_finite_differences():
    net = _randomized_network(k=2, seed=9)
    u = np.random.default_rng(10).uniform(0.1, 0.9, size=(3, 2))
    param_fd_check(net.parameters(), lambda: sum_reduce(square(dln_eval(net, u))))


# ------------------------------------------------------------- serialization

def test_network_checkpoint_round_trip(tmp_path):
    from gatedfusion.autodiff import load_parameters, save_parameters

    net = _randomized_network(k=2, seed=11)
    u = np.random.default_rng(12).uniform(0, 1, size=(4, 2))
    want = dln_eval(net, u).data.copy()
    path = tmp_path / "dln.ckpt"
    save_parameters(path, net.parameters())

    fresh = LatticeNetwork(k=2, seed=0)
    load_parameters(path, fresh.parameters())
    npt.assert_array_equal(dln_eval(fresh, u).data, want)
