# tests/test_grid.py
import numpy as np
import pytest

from app.services.assets import ieee33_base_loads
from app.services.errors import NonConvergedError, TopologyError, ConfigurationError
from app.services.grid import (
    Branch,
    InjectionVector,
    NetworkModel,
    PowerFlowSolver,
    VoltageSolution,
    branch_losses,
    build_admittance,
    check_radial,
    ieee33_network,
    load_network,
    parent_order,
    solve_acpf,
    violation_magnitude,
    violation_report,
    DATA_DIR,
)


def sweep_magnitudes(network, p, q, iterations=500):
    """Backward/forward sweep written against branch currents, used as an oracle"""
    n = network.bus_count
    neighbours = {i: [] for i in range(n)}
    for br in network.branches:
        neighbours[br.from_bus].append((br.to_bus, complex(br.r, br.x)))
        neighbours[br.to_bus].append((br.from_bus, complex(br.r, br.x)))
    order, parent, impedance = [network.slack_bus], {network.slack_bus: None}, {}
    for node in order:
        for other, z in neighbours[node]:
            if other not in parent:
                parent[other] = node
                impedance[other] = z
                order.append(other)

    s = np.asarray(p) + 1j * np.asarray(q)
    v = np.full(n, network.v_slack, dtype=complex)
    for _ in range(iterations):
        current = np.conj(s / v)
        for node in reversed(order[1:]):
            current[parent[node]] += current[node]
        updated = v.copy()
        for node in order[1:]:
            updated[node] = updated[parent[node]] - impedance[node] * current[node]
        done = np.max(np.abs(updated - v)) < 1e-14
        v = updated
        if done:
            break
    return np.abs(v)


def random_radial(rng, n):
    branches = []
    for bus in range(1, n):
        parent = int(rng.integers(0, bus))
        branches.append(Branch(parent, bus, rng.uniform(0.002, 0.02), rng.uniform(0.002, 0.02)))
    return NetworkModel(bus_count=n, slack_bus=0, branches=tuple(branches))


def ieee33_base_injections(network):
    p_kw, q_kvar = ieee33_base_loads(network)
    return InjectionVector(p=p_kw / network.s_base, q=q_kvar / network.s_base)


def test_single_branch_admittance(two_bus):
    g, b = build_admittance(two_bus)
    assert g[0, 1] == pytest.approx(-10.0)
    assert b[0, 1] == pytest.approx(10.0)
    assert g[0, 0] == pytest.approx(10.0)
    assert b[1, 1] == pytest.approx(-10.0)


def test_single_bus_admittance_is_empty():
    g, b = build_admittance(NetworkModel(bus_count=1, slack_bus=0, branches=()))
    assert g.shape == (1, 1) and b.shape == (1, 1)
    assert g[0, 0] == 0.0 and b[0, 0] == 0.0


def test_admittance_symmetric_with_row_sum_diagonal(ieee33):
    g, b = build_admittance(ieee33)
    np.testing.assert_allclose(g, g.T)
    np.testing.assert_allclose(b, b.T)
    for m in (g, b):
        off = m - np.diag(np.diag(m))
        np.testing.assert_allclose(np.diag(m), -off.sum(axis=1), atol=1e-12)


def test_meshed_network_rejected():
    branches = (Branch(0, 1, 0.01, 0.01), Branch(1, 2, 0.01, 0.01), Branch(2, 0, 0.01, 0.01))
    network = NetworkModel(bus_count=3, slack_bus=0, branches=branches)
    with pytest.raises(TopologyError):
        build_admittance(network)


def test_disconnected_network_rejected():
    branches = (Branch(0, 1, 0.01, 0.01), Branch(2, 3, 0.01, 0.01), Branch(2, 4, 0.01, 0.01), Branch(3, 4, 0.01, 0.01))
    with pytest.raises(TopologyError):
        check_radial(NetworkModel(bus_count=5, slack_bus=0, branches=branches))


def test_invalid_impedance_and_limits_rejected():
    with pytest.raises(ConfigurationError):
        NetworkModel(bus_count=2, slack_bus=0, branches=(Branch(0, 1, 0.0, 0.0),))
    with pytest.raises(ConfigurationError):
        NetworkModel(bus_count=2, slack_bus=0, branches=(Branch(0, 1, 0.01, 0.01),), voltage_limits=(1.05, 0.95))


def test_zero_injection_is_flat(ieee33):
    n = ieee33.bus_count
    sol = solve_acpf(ieee33, InjectionVector(p=np.zeros(n), q=np.zeros(n)))
    assert sol.converged
    np.testing.assert_allclose(sol.magnitude, 1.0, atol=1e-12)
    assert sol.slack_p == pytest.approx(0.0, abs=1e-12)


def test_two_bus_matches_fixed_point(two_bus):
    s_load = 0.2 + 0.1j
    z = 0.05 + 0.05j
    v2 = 1.0 + 0j
    for _ in range(200):
        v2 = 1.0 - z * np.conj(s_load / v2)

    sol = solve_acpf(two_bus, InjectionVector(p=np.array([0.0, 0.2]), q=np.array([0.0, 0.1])))
    assert sol.converged
    assert sol.magnitude[1] == pytest.approx(abs(v2), abs=1e-7)
    assert sol.magnitude[1] == pytest.approx(0.9848, abs=1e-4)
    assert sol.magnitude[0] == 1.0


def test_ieee33_base_case_against_sweep(ieee33):
    inj = ieee33_base_injections(ieee33)
    sol = solve_acpf(ieee33, inj)
    assert sol.converged
    assert sol.max_residual < 1e-8
    np.testing.assert_allclose(sol.magnitude, sweep_magnitudes(ieee33, inj.p, inj.q), atol=1e-6)
    assert int(np.argmin(sol.magnitude)) + 1 == 18


def test_random_radial_networks_against_sweep():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(2, 34))
        network = random_radial(rng, n)
        p = rng.uniform(0.0, 0.05, n)
        q = rng.uniform(0.0, 0.03, n)
        p[0] = q[0] = 0.0
        sol = solve_acpf(network, InjectionVector(p=p, q=q))
        assert sol.converged
        np.testing.assert_allclose(sol.magnitude, sweep_magnitudes(network, p, q), atol=1e-6)


def test_slack_draw_equals_load_plus_losses(ieee33):
    inj = ieee33_base_injections(ieee33)
    sol = solve_acpf(ieee33, inj)
    losses = branch_losses(ieee33, sol)
    assert sol.slack_p == pytest.approx(inj.p.sum() + losses.sum(), abs=1e-6)
    assert np.all(losses >= 0)


def test_more_load_never_raises_voltage(small_feeder):
    solver = PowerFlowSolver(small_feeder)
    base_p = np.array([0.0, 0.1, 0.1, 0.1, 0.1])
    base_q = 0.5 * base_p
    for bus in range(1, small_feeder.bus_count):
        before = solver.solve(InjectionVector(p=base_p, q=base_q)).magnitude[bus]
        heavier = base_p.copy()
        heavier[bus] += 0.2
        after = solver.solve(InjectionVector(p=heavier, q=base_q)).magnitude[bus]
        assert after <= before + 1e-12


def test_warm_start_converges_faster(ieee33):
    solver = PowerFlowSolver(ieee33)
    inj = ieee33_base_injections(ieee33)
    cold = solver.solve(inj)
    warm = solver.solve(inj, warm_start=cold)
    assert warm.converged
    assert warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.magnitude, cold.magnitude, atol=1e-9)


def test_overload_reports_non_convergence(two_bus):
    sol = solve_acpf(two_bus, InjectionVector(p=np.array([0.0, 50.0]), q=np.array([0.0, 50.0])))
    assert not sol.converged
    with pytest.raises(NonConvergedError):
        violation_report(sol, (0.95, 1.05))


def make_solution(magnitudes, converged=True):
    magnitudes = np.asarray(magnitudes, dtype=float)
    return VoltageSolution(
        v_re=magnitudes, v_im=np.zeros_like(magnitudes), slack_p=0.0,
        converged=converged, iterations=1, max_residual=0.0,
    )


def test_violation_report_boundary_inclusive():
    assert violation_report(make_solution([1.00, 0.96, 0.95]), (0.95, 1.05)) == []


def test_violation_report_lower_and_upper():
    lower = violation_report(make_solution([1.00, 0.94]), (0.95, 1.05))
    assert [(v.bus, v.limit) for v in lower] == [(1, "lower")]
    upper = violation_report(make_solution([1.06, 1.00]), (0.95, 1.05))
    assert [(v.bus, v.limit) for v in upper] == [(0, "upper")]


def test_violation_magnitude():
    assert violation_magnitude(np.array([0.94, 1.0, 1.07]), (0.95, 1.05)) == pytest.approx(0.03)


def test_parent_order_starts_at_slack(ieee33):
    order = parent_order(ieee33)
    assert len(order) == ieee33.bus_count - 1
    seen = {ieee33.slack_bus}
    for parent, child, _ in order:
        assert parent in seen
        seen.add(child)


def test_bundled_network_loads(tmp_path):
    network = ieee33_network()
    assert network.bus_count == 33 and network.branch_count == 32
    assert network.s_base == 1000.0 and network.voltage_limits == (0.95, 1.05)

    meta = tmp_path / "meta.env"
    meta.write_text("S_BASE_KVA=500\nV_MIN=0.9\nV_MAX=1.1\n")
    custom = load_network(DATA_DIR / "ieee33_branches.csv", meta)
    assert custom.s_base == 500.0
    assert custom.voltage_limits == (0.9, 1.1)


def test_network_file_missing_columns(tmp_path):
    path = tmp_path / "branches.csv"
    path.write_text("from,to,r\n1,2,0.1\n")
    with pytest.raises(ConfigurationError):
        load_network(path)
