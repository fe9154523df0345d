import itertools

import numpy as np
import pytest

from gen import decaying_tensor, random_cost_model, random_tensor
from oracles import exhaustive_min, loop_matricize
from tnsynth.dsl import ExecState, exec_program, sketch
from tnsynth.errors import InvalidArgument
from tnsynth.network import Partition, relative_error
from tnsynth.ranksearch import (
    CostModel,
    Spectrum,
    SpectrumTable,
    bin_options,
    brute_force,
    build_bins,
    build_cost_model,
    complete_sketch,
    complete_sketch_equal,
    solve,
)


def spec_of(sigma_asc):
    s = np.asarray(sigma_asc, dtype=float)
    return Spectrum(s, np.concatenate([[0.0], np.cumsum(s ** 2)]))


def test_spectrum_table_matches_loop_matricization():
    t = random_tensor((3, 4, 2, 3), seed=0)
    table = SpectrumTable(t)
    p = Partition.of({1, 3}, range(4))
    spec = table.get(p)
    ref = np.sort(np.linalg.svd(loop_matricize(t.data, [1, 3]), compute_uv=False))
    assert np.allclose(spec.sigma, ref)
    assert np.allclose(spec.prefix_sq, np.concatenate([[0], np.cumsum(ref ** 2)]))
    assert table.get(p) is spec and p in table and len(table) == 1
    assert table.norm_sq == pytest.approx(np.sum(t.data ** 2))


def test_bin_options_hand_example():
    # squared values 1, 4, 9, 16 -> prefix sums 0, 1, 5, 14 (30 is never offered)
    spec = spec_of([1, 2, 3, 4])
    assert bin_options(spec, 10.0, 0.5) == [(0, 0.0), (2, 5.0)]
    assert bin_options(spec, 10.0, 0.1) == [(0, 0.0), (1, 1.0), (2, 5.0)]
    assert bin_options(spec, 100.0, 1.0) == [(0, 0.0), (3, 14.0)]
    assert bin_options(spec, 0.5, 0.1) == [(0, 0.0)]
    with pytest.raises(InvalidArgument):
        bin_options(spec, 1.0, 0.0)


def test_bin_options_cover_the_largest_feasible_discard():
    rng = np.random.default_rng(1)
    for _ in range(40):
        spec = spec_of(np.sort(rng.random(10)))
        budget = float(rng.random() * spec.prefix_sq[-1])
        for c in (0.05, 0.1, 0.3):
            opts = bin_options(spec, budget, c)
            best = max(i for i in range(spec.length) if spec.prefix_sq[i] <= budget)
            assert opts[-1][0] == best
            assert all(lam <= budget for _, lam in opts)
            assert [d for d, _ in opts] == sorted({d for d, _ in opts})


@pytest.mark.parametrize("seed", range(40))
def test_solver_matches_exhaustive_oracle(seed):
    m = random_cost_model(np.random.default_rng(seed))
    sol = solve(m)
    ref = exhaustive_min(m.options, m.objective, m.budget_sq)
    assert sol is not None and ref is not None
    assert sol.cost == ref[0]
    bf = brute_force(m)
    assert bf.cost == sol.cost
    assert bf.assignment == sol.assignment
    assert m.objective(sol.choice) == sol.cost and m.feasible(sol.choice)


@pytest.mark.parametrize("seed", range(10))
def test_solver_respects_topk_cut(seed):
    m = random_cost_model(np.random.default_rng(100 + seed))
    free = solve(m)
    m.topk_cut = free.cost - 1
    assert solve(m) is None
    m.topk_cut = free.cost
    assert solve(m).cost == free.cost


def test_zero_one_encoding_agrees_with_model():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m = random_cost_model(rng, max_holes=3, max_bins=4)
        ilp = m.ilp()
        for combo in itertools.product(*(range(len(o)) for o in m.options)):
            x = {(h, k): 1 for h, k in enumerate(combo)}
            val = ilp.evaluate(x)
            if m.feasible(combo):
                assert val == m.objective(combo)
            else:
                assert val is None
        # a non one-hot point is rejected
        assert ilp.evaluate({}) is None


def test_cost_model_objective_counts_network_size():
    t = decaying_tensor((4, 5, 3, 4), seed=2)
    u = frozenset(range(4))
    s = sketch([Partition.of({0}, u), Partition.of({0, 1}, u), Partition.of({1}, u)])
    table = SpectrumTable(t)
    bins = build_bins(table, s.blocks, 0.2)
    m = build_cost_model(s, table, bins)
    # nodes: {I1, r1}, {I2, r3}, {r1, r2, r3}, {r2, I3, I4}
    for combo in itertools.product(*(range(len(o)) for o in m.options)):
        r1, r2, r3 = m.ranks(combo)
        expect = 4 * r1 + 5 * r3 + r1 * r2 * r3 + r2 * 3 * 4
        assert m.objective(combo) == expect


@pytest.mark.parametrize("seed", range(6))
def test_completion_is_valid_and_bounds_cost(seed):
    t = decaying_tensor((4, 5, 3, 4), seed=seed)
    u = frozenset(range(4))
    s = sketch([Partition.of({0, 1}, u), Partition.of({0}, u), Partition.of({2}, u)])
    for eps in (0.05, 0.2):
        program, cost = complete_sketch(s, t, eps)
        assert program.complete
        st = exec_program(program, ExecState.initial(t, eps))
        assert st.network.size() <= cost
        assert relative_error(st.network, t) <= eps + 1e-12


def test_equal_completion_spends_equal_shares():
    t = decaying_tensor((4, 5, 3, 4), seed=9)
    u = frozenset(range(4))
    s = sketch([Partition.of({0}, u), Partition.of({3}, u)])
    eps = 0.2
    program, cost = complete_sketch_equal(s, t, eps)
    table = SpectrumTable(t)
    share = eps ** 2 * table.norm_sq / 2
    for e in program.exprs:
        spec = table.get(e.block)
        discard = spec.length - e.rank
        assert spec.prefix_sq[discard] <= share
        assert discard == spec.length - 1 or spec.prefix_sq[discard + 1] > share
    st = exec_program(program, ExecState.initial(t, eps))
    assert relative_error(st.network, t) <= eps + 1e-12
    assert st.network.size() <= cost


def test_empty_model():
    m = CostModel([], [], [], [(60, ())], 1.0)
    assert solve(m).cost == 60
    m.topk_cut = 10
    assert solve(m) is None
