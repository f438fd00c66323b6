import json

import numpy as np
import pytest

from mono_split.experiments import (
    CournotTwoStageParams,
    GeneratorError,
    MlfGameParams,
    build_problem,
    cournot_lipschitz,
    expected_min_uniform,
    follower_term,
    instance_document,
    load_instance,
    make_cournot,
    make_mlf_game,
    make_synthetic,
    save_instance,
    smoothed_recourse_grad,
)
from mono_split.metrics import residual
from mono_split.oracles import rng_stream
from oracles_bruteforce import bisect, grid_argmax, grid_argmin


def _dual_grid(x, h, eps):
    """Maximize ``x*lam - (eps/2) lam^2`` over ``lam in [-50, min(h, 0)]`` on a grid."""
    top = min(h, 0.0)
    return grid_argmax(lambda lam: x * lam - eps / 2 * lam ** 2, -50.0, top, 1e-3) if top > -50 else top


def test_recourse_grad_examples():
    assert smoothed_recourse_grad(0.0, 0.0, 1.0) == 0.0
    assert smoothed_recourse_grad(1.0, -2.0, 0.1) == -2.0
    assert smoothed_recourse_grad(-1.0, -0.5, 1.0) == -1.0
    assert _dual_grid(1.0, -2.0, 0.1) == pytest.approx(-2.0, abs=1e-5)
    assert _dual_grid(-1.0, -0.5, 1.0) == pytest.approx(-1.0, abs=1e-5)


def test_recourse_grad_rejects_positive_h():
    with pytest.raises(GeneratorError):
        smoothed_recourse_grad(1.0, 0.5, 1.0)
    with pytest.raises(GeneratorError):
        smoothed_recourse_grad(1.0, -0.5, 0.0)


def test_recourse_grad_monotone_and_lipschitz():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        eps = rng.uniform(0.01, 2.0)
        h = rng.uniform(-5, 0)
        a, b = np.sort(rng.uniform(-10, 10, 2))
        ga, gb = smoothed_recourse_grad(a, h, eps), smoothed_recourse_grad(b, h, eps)
        assert ga <= gb
        assert gb - ga <= (b - a) / eps + 1e-12


def test_expected_min_uniform_branches():
    assert expected_min_uniform(-7.0, -5.0, 0.0) == -7.0
    assert expected_min_uniform(3.0, -5.0, 0.0) == -2.5
    for t in (-4.0, -2.5, -0.1):
        assert expected_min_uniform(t, -5.0, 0.0) == pytest.approx(-(t * t + 25) / 10)


def test_cournot_one_player_solution():
    p = make_cournot(CournotTwoStageParams(J=1, m=[1.0], ell=[2.0], d=1.0, r=1.0, epsilon=1.0))

    def closed_form(x):
        return x + 2.0 + 2 * x - 1.0 + expected_min_uniform(x, -5.0, 0.0)

    assert closed_form(0.0) == pytest.approx(-1.5)
    root = bisect(closed_form, 0.0, 5.0)
    assert root == pytest.approx(0.5, abs=1e-12)
    assert p.known_solution[0] == pytest.approx(root, abs=1e-9)


def test_cournot_lipschitz_formula():
    assert cournot_lipschitz([1.0, 0.5, 0.2], 1.0, 0.1, 3) == pytest.approx(15.0)
    p = make_cournot(CournotTwoStageParams(J=3, m=[1.0, 0.5, 0.2], epsilon=0.1, compute_solution=False))
    assert p.lipschitz_L == pytest.approx(15.0)


@pytest.mark.parametrize("label", [1e1, 1e2, 1e3, 1e4])
def test_epsilon_sweep_reaches_label_magnitude(label):
    p = make_cournot(CournotTwoStageParams(J=20, epsilon=1 / label, compute_solution=False))
    assert 1.0 <= p.lipschitz_L / label < 4.0


def test_cournot_sigma_and_solution_residual():
    p = make_cournot(CournotTwoStageParams(J=8, epsilon=0.01, seed=4))
    assert p.strong_monotonicity_sigma == pytest.approx(min(p.params["m"]) + 1.0)
    assert residual(p, p.known_solution, 1 / (4 * p.lipschitz_L)) <= 1e-8


def test_cournot_solution_independent_of_epsilon():
    a = make_cournot(CournotTwoStageParams(J=6, epsilon=1.0, seed=2))
    b = make_cournot(CournotTwoStageParams(J=6, epsilon=1e-4, seed=2))
    np.testing.assert_allclose(a.known_solution, b.known_solution, atol=1e-9)
    assert residual(b, b.known_solution, 1 / (4 * b.lipschitz_L)) <= 1e-10


def test_merely_monotone_variant():
    p = make_cournot(CournotTwoStageParams(J=6, epsilon=0.1, merely_monotone=True, seed=1))
    assert p.strong_monotonicity_sigma == 0.0
    rng = np.random.default_rng(2)
    smallest = np.inf
    for _ in range(1000):
        x, y = rng.uniform(0.5, 3, 6), rng.uniform(0.5, 3, 6)
        d = x - y
        q = (p.mean_map(x) - p.mean_map(y)) @ d / (d @ d)
        assert q >= -1e-10
        smallest = min(smallest, q)
    # no uniform modulus: directions orthogonal to 1 see only the skew part on the orthant
    d = np.zeros(6)
    d[0], d[1] = 1.0, -1.0
    x = np.full(6, 1.0)
    assert (p.mean_map(x + 0.1 * d) - p.mean_map(x)) @ (0.1 * d) == pytest.approx(0.0, abs=1e-12)
    assert residual(p, p.known_solution, 1 / (4 * p.lipschitz_L)) <= 1e-8


def test_cournot_complicated_set():
    p = make_cournot(CournotTwoStageParams(J=20, epsilon=0.01, complicated_set=True))
    assert p.feasible_set.kind == "capped_simplex" and p.domain_bound_DT == pytest.approx(10 * np.sqrt(2))
    assert p.known_solution.sum() <= 10 + 1e-9


def test_cournot_frozen_h_is_noiseless():
    p = make_cournot(CournotTwoStageParams(J=4, frozen_h=True))
    x = np.ones(4)
    assert p.noiseless and p.noise_nu2 == 0.0
    assert np.array_equal(p.sample_batch(x, 3, rng_stream(0))[1], p.mean_map(x))


def test_cournot_rejects_bad_params():
    with pytest.raises(GeneratorError):
        make_cournot(CournotTwoStageParams(J=2, h_high=1.0))
    with pytest.raises(GeneratorError):
        make_cournot(CournotTwoStageParams(J=2, m=[1.0, -1.0]))


# ---- multi-leader multi-follower game


def test_mlf_zero_weights_is_affine_vi():
    p = make_mlf_game(MlfGameParams(a=[0.0] * 5, seed=3))
    q = p.params
    mat = np.diag(q["m"]) + 1.0 * (np.eye(5) + np.ones((5, 5)))
    root = np.linalg.solve(mat, 10.0 - np.asarray(q["ell"]))
    assert np.all((root > 0) & (root < 10))
    np.testing.assert_allclose(p.known_solution, root, atol=1e-8)


def test_mlf_point_mass_randomness():
    p = make_mlf_game(MlfGameParams(r_low=1.0, r_high=1.0, d_low=4.0, d_high=4.0))
    x = np.linspace(0, 2, 5)
    assert p.noiseless
    assert np.array_equal(p.sample_batch(x, 4, rng_stream(1))[2], p.mean_map(x))


def test_mlf_single_leader_abs_kink():
    params = MlfGameParams(N_leaders=1, m=[1.0], ell=[0.0], r_low=1.0, r_high=1.0, d_low=3.0, d_high=3.0,
                           Q=[1.0], b_slope=[1.0], b_icpt=[-1.0], l_slope=[-1.0], l_icpt=[1.0], a=[1.0],
                           x_low=0.0, x_high=2.0)
    p = make_mlf_game(params)
    ts = np.linspace(0, 2, 200001)
    oracle = ts[np.argmin([residual(p, [t], 0.25) for t in ts[::100]]) * 100]
    assert oracle == pytest.approx(1.0, abs=1e-3)
    assert p.known_solution[0] == pytest.approx(1.0, abs=1e-9)


def test_mlf_rejects_nonconvex_follower():
    with pytest.raises(GeneratorError):
        follower_term(-1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    with pytest.raises(GeneratorError):
        make_mlf_game(MlfGameParams(N_leaders=2, a=[1.0, -0.5]))


def test_mlf_resolvent_first_order_condition():
    params = MlfGameParams(N_leaders=4, seed=5).resolved()
    p = make_mlf_game(params)
    hs = [follower_term(*v) for v in zip(params.a, params.Q, params.b_slope, params.b_icpt,
                                         params.l_slope, params.l_icpt)]
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.uniform(-5, 15, 4)
        gamma = rng.uniform(0.01, 3)
        t = p.resolvent(v, gamma)
        for ti, vi, h in zip(t, v, hs):
            lo, hi = h.subdifferential(ti, tol=1e-12)
            need = -(ti - vi) / gamma
            lo = -np.inf if ti <= params.x_low + 1e-12 else lo
            hi = np.inf if ti >= params.x_high - 1e-12 else hi
            assert lo - 1e-9 <= need <= hi + 1e-9


def test_mlf_prox_matches_grid():
    h = follower_term(0.7, 1.5, 0.4, -0.2, -0.8, 0.3)
    f = lambda t: (t - 1.3) ** 2 / (2 * 0.6) + 0.7 * np.maximum((0.4 * t - 0.2) / 1.5, -0.8 * t + 0.3)
    from mono_split.geometry import prox_pwl_1d
    assert prox_pwl_1d(h, 0.6, (0.0, 10.0), 1.3) == pytest.approx(grid_argmin(f, 0.0, 10.0, 1e-3), abs=1e-5)


# ---- synthetic family


def test_synthetic_scalar():
    p = make_synthetic(1, 1.0, 1.0, seed=0)
    x_hat = p.known_solution
    assert p.mean_map(np.array([2.0]))[0] == pytest.approx(2.0 - x_hat[0])


def test_synthetic_skew_only_orthogonal():
    p = make_synthetic(5, 0.0, 2.0, seed=1, skew_only=True)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y = rng.normal(size=5), rng.normal(size=5)
        assert (p.mean_map(x) - p.mean_map(y)) @ (x - y) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("sigma,L", [(0.0, 3.0), (1.0, 4.0), (0.3, 10.0)])
def test_synthetic_spectrum(sigma, L):
    p = make_synthetic(6, sigma, L, seed=2)
    q = np.column_stack([p.mean_map(e) - p.mean_map(np.zeros(6)) for e in np.eye(6)])
    assert np.linalg.norm(q, 2) == pytest.approx(L, abs=1e-10)
    assert np.linalg.eigvalsh((q + q.T) / 2).min() == pytest.approx(sigma, abs=1e-10)


def test_synthetic_rejects_L_below_sigma():
    with pytest.raises(GeneratorError):
        make_synthetic(3, 2.0, 1.0)


# ---- serialization


@pytest.mark.parametrize("build", [
    lambda: make_cournot(CournotTwoStageParams(J=4, epsilon=0.1, seed=3)),
    lambda: make_mlf_game(MlfGameParams(N_leaders=3, seed=2)),
    lambda: make_synthetic(3, 0.5, 2.0, 0.1, 0.2, seed=7, box_radius=2.0),
])
def test_instance_roundtrip(tmp_path, build):
    p = build()
    path = tmp_path / "inst.json"
    save_instance(p, path)
    q = load_instance(path)
    x = np.linspace(0.1, 0.9, p.dimension)
    assert np.array_equal(p.mean_map(x), q.mean_map(x))
    assert q.lipschitz_L == p.lipschitz_L
    np.testing.assert_array_equal(p.known_solution, q.known_solution)
    doc = json.loads(path.read_text())
    assert doc == instance_document(q)


def test_derived_constants_override(tmp_path):
    p = make_synthetic(3, 1.0, 4.0, seed=1)
    doc = instance_document(p)
    doc["derived"]["lipschitz_L"] = 2.0
    assert load_instance(doc).lipschitz_L == 2.0


def test_unknown_generator():
    with pytest.raises(GeneratorError):
        build_problem("hydro", {})
