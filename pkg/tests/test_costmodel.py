import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stackroute import tape as tp
from stackroute.costmodel import (
    ClassSpec, CostModel, Coupling, RoutingGame, design_objective, link_cost_affine,
    link_cost_revised_bpr, marginal_link_cost, path_cost, total_travel_time,
)
from stackroute.netcore import (
    braess_pathset, build_braess, build_grid, build_two_link, enumerate_paths, parallel_pathset,
)


def _game(net, ps, kind="affine", **kw):
    return RoutingGame(ps, CostModel.from_network(net, kind), **kw)


def test_affine_examples():
    a, b = np.array([1.0, 2.0]), np.array([1.0, 1.0])
    np.testing.assert_array_equal(link_cost_affine(a, b, [0, 0]), a)
    np.testing.assert_array_equal(link_cost_affine(a, b, [2, 1]), [3, 3])
    x = np.array([0.5, 4.0])
    np.testing.assert_allclose(link_cost_affine(a, 2 * b, x) - a, 2 * (link_cost_affine(a, b, x) - a))
    with pytest.raises(ValueError):
        link_cost_affine(a, b, [-1, 0])


def test_revised_bpr_examples():
    assert link_cost_revised_bpr(1.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(1.98304, abs=1e-12)
    u0, v0 = np.array([2.0, 3.0]), np.array([1.5, 0.5])
    x2 = np.array([1.0, 2.0])
    np.testing.assert_allclose(
        link_cost_revised_bpr(u0, v0, 1.0, 0.0 * x2, x2), u0 * (1 + 0.15 * (x2 / v0) ** 4), rtol=0, atol=1e-14)
    np.testing.assert_allclose(
        link_cost_revised_bpr(u0, v0, 0.0, [0.3, 1.0], [0.7, 1.0]),
        link_cost_revised_bpr(u0, v0, 0.0, [0.9, 0.5], [0.1, 1.5]))
    np.testing.assert_array_equal(link_cost_revised_bpr(u0, v0, 1.0, [0, 0], [0, 0]), u0)
    with pytest.raises(ValueError):
        link_cost_revised_bpr(u0, [0.0, 1.0], 1.0, x2, x2)


def test_revised_bpr_model_matches_function():
    net = build_braess(costs="bpr")
    cm = CostModel.from_network(net, "revised_bpr", eta=1.0)
    x1, x2 = np.array([0.1, 0.2, 0.0, 0.5, 1.0]), np.array([1.0, 0.3, 0.0, 0.0, 2.0])
    np.testing.assert_allclose(cm.time(x1 + x2, x_cav=x1),
                               link_cost_revised_bpr(net.u0, net.v0, 1.0, x1, x2), rtol=1e-14)
    # zero CAV share reduces to plain BPR
    plain = CostModel.from_network(net, "bpr")
    np.testing.assert_allclose(cm.time(x2, x_cav=0 * x2), plain.time(x2), rtol=0, atol=1e-14)


def test_class_tolls():
    net = build_braess()
    ps = braess_pathset(net)
    game = _game(net, ps, classes=ClassSpec.mixed(0.5), coupling=Coupling("class_toll", 0.5))
    p = [np.full(3, 1 / 3)] * 2
    x = game.link_flows(p)
    z = np.zeros(10)
    z[0] = 1.0  # toll on link 1 for the first class only
    u_cav, u_hdv = game.class_link_costs(x, z)
    u_time, _ = game.link_time(x, z)
    np.testing.assert_allclose(u_cav - u_time, [0.5, 0, 0, 0, 0])
    np.testing.assert_array_equal(u_hdv, u_time)
    free = _game(net, ps, classes=ClassSpec.mixed(0.5), coupling=Coupling("class_toll", 0.0))
    a, b = free.class_link_costs(x, z)
    np.testing.assert_array_equal(a, b)


def test_capacity_coupling_identity_at_zero():
    net = build_braess(costs="bpr")
    ps = braess_pathset(net)
    p = np.array([0.2, 0.5, 0.3])
    base = _game(net, ps, "bpr")
    cap = _game(net, ps, "bpr", coupling=Coupling("capacity"))
    np.testing.assert_array_equal(path_cost(cap, p, np.zeros(5)), path_cost(base, p))
    # more capacity never hurts
    assert np.all(path_cost(cap, p, np.full(5, 0.5)) <= path_cost(base, p))


def test_controlled_flow_enters_time_argument():
    net = build_two_link(demand=2.0)
    ps = parallel_pathset(net)
    ctrl = ps.with_demand(np.array([1.0]))
    game = _game(net, ps.with_demand(np.array([2.0])),
                 coupling=Coupling("controlled", controlled=ctrl, controlled_q=ctrl.q))
    p, z = np.array([0.5, 0.5]), np.array([1.0, 0.0])
    np.testing.assert_allclose(path_cost(game, p, z), [1 + 2, 2 + 1])
    assert total_travel_time(game, p, z) == pytest.approx(2 * 3 + 1 * 3)


def test_path_cost_examples():
    net = build_two_link()
    game = _game(net, parallel_pathset(net))
    np.testing.assert_allclose(path_cost(game, np.array([2 / 3, 1 / 3])), [3, 3])
    net = build_braess()
    game = _game(net, braess_pathset(net))
    np.testing.assert_allclose(path_cost(game, np.full(3, 1 / 3)), [92, 92, 92])
    single = build_two_link().replace(tails=[0], heads=[1], u0=[1.0], v0=[1.0], b=[2.0], bpr_b=None, power=None)
    g1 = _game(single, parallel_pathset(single))
    np.testing.assert_allclose(path_cost(g1, np.array([1.0])), [1 + 2 * 3])


def test_total_travel_time_examples():
    net = build_braess()
    assert total_travel_time(_game(net, braess_pathset(net)), np.full(3, 1 / 3)) == pytest.approx(552)
    nb = build_braess("without_bridge")
    assert total_travel_time(_game(nb, braess_pathset(nb)), np.full(2, 0.5)) == pytest.approx(498)
    zero = build_braess().with_demand([0.0])
    assert total_travel_time(_game(zero, braess_pathset(zero)), np.full(3, 1 / 3)) == 0.0


def test_design_objective_examples():
    net = build_braess(costs="bpr")
    ps = braess_pathset(net)
    game = _game(net, ps, "bpr", coupling=Coupling("capacity"))
    p, w = np.full(3, 1 / 3), np.ones(5)
    tt = total_travel_time(game, p, np.zeros(5))
    assert design_objective(game, p, np.zeros(5), w, 3.0) == tt
    z = np.array([2.0, 0, 0, 0, 0])
    assert design_objective(game, p, z, w, 0.0) == total_travel_time(game, p, z)
    assert design_objective(game, p, z, w, 1.0) - total_travel_time(game, p, z) == pytest.approx(4.0)


def test_marginal_cost():
    net = build_braess(costs="bpr")
    affine = CostModel.from_network(net, "affine")
    x = np.array([0.5, 1.0, 2.0, 0.0, 3.0])
    np.testing.assert_allclose(marginal_link_cost(affine, x), net.u0 + 2 * net.b * x)
    np.testing.assert_allclose(marginal_link_cost(affine, 0 * x), net.u0)
    bpr = CostModel.from_network(net, "bpr")
    h = 1e-6
    fd = ((x + h) * bpr.time(x + h) - (x - h) * bpr.time(x - h)) / (2 * h)
    np.testing.assert_allclose(marginal_link_cost(bpr, x), fd, rtol=1e-6)
    with pytest.raises(ValueError):
        marginal_link_cost(CostModel.from_network(net, "revised_bpr", eta=1.0), x)


def test_class_spec_validation():
    with pytest.raises(ValueError):
        ClassSpec((0.5, 0.6))
    with pytest.raises(ValueError):
        ClassSpec.mixed(1.5)
    np.testing.assert_allclose(ClassSpec.mixed(0.2).class_demand([10.0]), [[2.0], [8.0]])


def test_cost_model_validation():
    net = build_braess(costs="bpr")
    with pytest.raises(ValueError):
        CostModel.from_network(net, "cubic")
    with pytest.raises(ValueError):
        CostModel.from_network(net, "revised_bpr", eta=-1.0)


def _jacobian_fd(game, p, h=1e-6):
    cols = []
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = h
        cols.append((path_cost(game, p + e) - path_cost(game, p - e)) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("kind", ["affine", "bpr"])
def test_path_cost_jacobian_structure(kind, rng):
    net = build_grid(3, 3)
    ps = enumerate_paths(net, 3)
    game = _game(net, ps, kind)
    p = rng.uniform(0.2, 1.0, ps.n_paths)
    p /= ps.spread(ps.od_sum(p))
    x = ps.lam.matvec(ps.q * p)
    lam = ps.lam.toarray()
    du = game.cost.derivative(x)
    analytic = lam.T @ np.diag(du) @ lam @ np.diag(ps.q)
    np.testing.assert_allclose(_jacobian_fd(game, p), analytic, rtol=1e-6, atol=1e-6)


def test_single_od_jacobian_symmetric():
    for net, ps in [(build_braess(), None), (build_braess(costs="bpr"), None)]:
        ps = braess_pathset(net)
        game = _game(net, ps, "affine" if net.u0[0] == 0 else "bpr")
        jac = _jacobian_fd(game, np.array([0.3, 0.3, 0.4]))
        np.testing.assert_allclose(jac, jac.T, rtol=1e-6, atol=1e-6)


def test_taped_costs_match_numeric(rng):
    net = build_braess(costs="bpr")
    ps = braess_pathset(net)
    game = _game(net, ps, "revised_bpr", classes=ClassSpec.mixed(0.3), coupling=Coupling("class_toll", 1.0))
    rows = [rng.dirichlet(np.ones(3)) for _ in range(2)]
    z = rng.uniform(0, 1, 10)
    t = tp.Tape()
    taped = game.path_costs([t.leaf(r) for r in rows], t.leaf(z))
    plain = game.path_costs(rows, z)
    for a, b in zip(taped, plain):
        np.testing.assert_array_equal(a.value, b)


flows = arrays(np.float64, 5, elements=st.floats(0, 10))


@given(flows, flows)
def test_monotone_in_flow(x, dx):
    net = build_braess(costs="bpr")
    for kind in ("affine", "bpr"):
        cm = CostModel.from_network(net, kind)
        assert np.all(cm.time(x + dx) >= cm.time(x))
