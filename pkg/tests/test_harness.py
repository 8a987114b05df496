"""Closed-loop simulation tests: determinism, accounting, and comparisons."""
import numpy as np
import pytest

from etplan.abstraction import AbstractionConfig, build_mdp
from etplan.errors import InputError
from etplan.harness import (
    OUTCOME_NAMES,
    RUN_COLL,
    RUN_FREE,
    RUN_TAR,
    EmpiricalObjectives,
    compare_theory_empirical,
    full_kf_baseline,
    simulate_strategy,
    trace_to_csv,
)
from etplan.mdp import COLL_STATE, FREE_STATE, KIND_BELIEF, TAR_STATE, AbstractState, MOMDP
from etplan.mo_solver import ObjectivePoint, Strategy, uniform_strategy
from etplan.numerics import RngStream

from scen_util import line_scenario, noiseless_scenario


def _built(scenario, method=2, bins=(2, 2), samples=150, seed=7):
    config = AbstractionConfig(
        method=method,
        bins_theta=bins[0],
        bins_lambda=bins[1],
        samples_per_action=samples,
        pool_cap=400,
        calibration_runs=40,
    )
    return build_mdp(scenario, config, RngStream(seed, "abstract"))


@pytest.fixture(scope="module")
def two_leg():
    return line_scenario(
        waypoints=((0.0, 0.0), (1.2, 0.0), (2.4, 0.0)),
        deltas=(0.5, 1.5, 3.0),
        k_max=50,
    )


@pytest.fixture(scope="module")
def two_leg_built(two_leg):
    return _built(two_leg)


def test_zero_noise_run_is_deterministic():
    scenario = noiseless_scenario(waypoints=((0.0, 0.0), (1.0, 0.0)))
    build = _built(scenario, samples=40)
    res = simulate_strategy(
        scenario, build.mdp, uniform_strategy(build.mdp, 0),
        tables=build.tables, runs=50, rng=RngStream(3, "sim"),
    )
    assert res.objectives.p_tar == 1.0
    # zero innovation never crosses any positive threshold
    assert res.objectives.e_c_mean == 0.0
    assert res.objectives.e_c_stderr == 0.0


def test_full_kf_energy_equals_steps_times_cost(two_leg):
    res = full_kf_baseline(two_leg, runs=80, rng=RngStream(11, "sim"))
    assert np.array_equal(res.energies, res.steps.astype(float) * two_leg.comm_cost)
    assert res.objectives.p_tar > 0.9


def test_outcome_partition_and_codes(two_leg, two_leg_built):
    res = simulate_strategy(
        two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 2),
        tables=two_leg_built.tables, runs=120, rng=RngStream(5, "sim"),
    )
    o = res.objectives
    assert abs(o.p_tar + o.p_coll + o.p_free - 1.0) <= 1e-12
    assert set(np.unique(res.outcomes)) <= {RUN_TAR, RUN_COLL, RUN_FREE}
    assert o.runs == 120


def test_seeded_simulation_reproducible(two_leg, two_leg_built):
    strategy = uniform_strategy(two_leg_built.mdp, 1)

    def go():
        return simulate_strategy(
            two_leg, two_leg_built.mdp, strategy,
            tables=two_leg_built.tables, runs=60, rng=RngStream(21, "sim"),
            trace_cap=10,
        )

    a, b = go(), go()
    assert a.objectives == b.objectives
    assert np.array_equal(a.energies, b.energies)
    assert len(a.traces) == len(b.traces)
    for ra, rb in zip(a.traces, b.traces):
        assert (ra.run, ra.segment, ra.step, ra.delta, ra.triggered) == (
            rb.run, rb.segment, rb.step, rb.delta, rb.triggered,
        )
        assert np.array_equal(ra.x_true, rb.x_true)

    c = simulate_strategy(
        two_leg, two_leg_built.mdp, strategy,
        tables=two_leg_built.tables, runs=60, rng=RngStream(22, "sim"),
    )
    assert not np.array_equal(a.energies, c.energies)


def test_tighter_threshold_communicates_more(two_leg, two_leg_built):
    tight = simulate_strategy(
        two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 0),
        tables=two_leg_built.tables, runs=150, rng=RngStream(9, "sim"),
    )
    loose = simulate_strategy(
        two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 2),
        tables=two_leg_built.tables, runs=150, rng=RngStream(9, "sim"),
    )
    assert tight.objectives.e_c_mean > loose.objectives.e_c_mean


def test_degenerate_mixture_equals_pure_component(two_leg, two_leg_built):
    pure = uniform_strategy(two_leg_built.mdp, 1)
    other = uniform_strategy(two_leg_built.mdp, 2)
    mixed = Strategy(mixture=(pure, other, 1.0))
    a = simulate_strategy(
        two_leg, two_leg_built.mdp, pure,
        tables=two_leg_built.tables, runs=40, rng=RngStream(13, "sim"),
    )
    b = simulate_strategy(
        two_leg, two_leg_built.mdp, mixed,
        tables=two_leg_built.tables, runs=40, rng=RngStream(13, "sim"),
    )
    assert a.objectives == b.objectives
    assert np.array_equal(a.outcomes, b.outcomes)


def test_half_mixture_lands_between_components(two_leg, two_leg_built):
    lo = uniform_strategy(two_leg_built.mdp, 0)
    hi = uniform_strategy(two_leg_built.mdp, 2)
    runs = 200
    e_lo = simulate_strategy(
        two_leg, two_leg_built.mdp, lo, tables=two_leg_built.tables,
        runs=runs, rng=RngStream(17, "sim"),
    ).objectives.e_c_mean
    e_hi = simulate_strategy(
        two_leg, two_leg_built.mdp, hi, tables=two_leg_built.tables,
        runs=runs, rng=RngStream(17, "sim"),
    ).objectives.e_c_mean
    e_mix = simulate_strategy(
        two_leg, two_leg_built.mdp, Strategy(mixture=(lo, hi, 0.5)),
        tables=two_leg_built.tables, runs=runs, rng=RngStream(17, "sim"),
    ).objectives.e_c_mean
    assert e_hi < e_mix < e_lo


def test_unknown_abstract_state_falls_back_to_smallest_delta():
    scenario = line_scenario(
        waypoints=((0.0, 0.0), (1.0, 0.0), (2.0, 0.0)), deltas=(0.5, 2.0)
    )
    # a hand-built waypoint abstraction that only knows the first decision
    states = [AbstractState(KIND_BELIEF, 0), COLL_STATE, TAR_STATE, FREE_STATE]
    mdp = MOMDP(
        states=states,
        actions=list(scenario.deltas),
        initial=0,
        transitions=[[{2: 1.0}, {2: 1.0}], [None] * 2, [None] * 2, [None] * 2],
        costs=[[1.0, 0.5], [0.0] * 2, [0.0] * 2, [0.0] * 2],
        costs_product=[[1.0, 0.5], [0.0] * 2, [0.0] * 2, [0.0] * 2],
        mean_steps=[[5.0, 5.0], [0.0] * 2, [0.0] * 2, [0.0] * 2],
        method=1,
        meta={},
    )
    strategy = Strategy(choices={0: {1: 1.0}})
    res = simulate_strategy(scenario, mdp, strategy, runs=30, rng=RngStream(2, "sim"))
    # every run that survives to the second decision misses the lookup
    assert res.diag["fallbacks"] > 0
    alive_at_second = int((res.outcomes != RUN_COLL).sum())
    assert res.diag["fallbacks"] >= alive_at_second - 5


def test_method2_requires_tables(two_leg, two_leg_built):
    with pytest.raises(InputError, match="tables"):
        simulate_strategy(
            two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 0),
            tables=None, runs=10, rng=RngStream(1, "sim"),
        )


def test_traces_respect_cap_and_time_order(two_leg, two_leg_built):
    res = simulate_strategy(
        two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 1),
        tables=two_leg_built.tables, runs=25, rng=RngStream(31, "sim"),
        trace_cap=4,
    )
    runs_seen = {t.run for t in res.traces}
    assert runs_seen <= {0, 1, 2, 3} and runs_seen
    for run in runs_seen:
        steps = [t.step for t in res.traces if t.run == run]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)
        outs = {t.outcome for t in res.traces if t.run == run}
        assert len(outs) == 1 and outs <= set(OUTCOME_NAMES.values())


def test_trace_csv_layout(tmp_path, two_leg, two_leg_built):
    res = simulate_strategy(
        two_leg, two_leg_built.mdp, uniform_strategy(two_leg_built.mdp, 1),
        tables=two_leg_built.tables, runs=8, rng=RngStream(41, "sim"),
        trace_cap=3,
    )
    path = tmp_path / "trace.csv"
    trace_to_csv(res.traces, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == (
        "run,segment,step,delta,trigger,kf_mode,outcome,"
        "x_true_0,x_true_1,x_hat_0,x_hat_1"
    )
    assert len(lines) == 1 + len(res.traces)


def test_compare_identical_is_zero_error():
    emp = EmpiricalObjectives(0.95, 0.03, 0.02, 12.0, 0.1, runs=500)
    rep = compare_theory_empirical(ObjectivePoint(0.95, 0.03, 12.0), emp)
    assert rep.dp_tar_pp == 0.0 and rep.dp_coll_pp == 0.0 and rep.de_c_rel == 0.0
    assert rep.passed


def test_compare_percentage_point_arithmetic():
    emp = EmpiricalObjectives(0.94, 0.04, 0.02, 10.0, 0.1, runs=200)
    rep = compare_theory_empirical(
        ObjectivePoint(0.95, 0.03, 11.0), emp, tol_pp=2.0, tol_e_rel=0.05
    )
    assert rep.dp_tar_pp == pytest.approx(1.0)
    assert rep.dp_coll_pp == pytest.approx(1.0)
    assert rep.de_c_rel == pytest.approx(1.0 / 11.0)
    assert not rep.passed  # energy off by 9% > 5%
    assert "FAIL" in rep.summary()


def test_compare_requires_enough_runs():
    emp = EmpiricalObjectives(1.0, 0.0, 0.0, 1.0, 0.0, runs=99)
    with pytest.raises(InputError, match="100"):
        compare_theory_empirical(ObjectivePoint(1.0, 0.0, 1.0), emp)


def test_objectives_reject_broken_partition():
    with pytest.raises(InputError, match="sum"):
        EmpiricalObjectives(0.9, 0.2, 0.0, 1.0, 0.0, runs=10)
    with pytest.raises(InputError, match="run"):
        EmpiricalObjectives(1.0, 0.0, 0.0, 1.0, 0.0, runs=0)


def test_theory_matches_simulation_on_short_scenario(two_leg, two_leg_built):
    # end-to-end consistency at moderate sample sizes
    from etplan.mo_solver import evaluate_strategy

    strategy = uniform_strategy(two_leg_built.mdp, 1)
    predicted = evaluate_strategy(two_leg_built.mdp, strategy)
    res = simulate_strategy(
        two_leg, two_leg_built.mdp, strategy,
        tables=two_leg_built.tables, runs=600, rng=RngStream(77, "sim"),
    )
    rep = compare_theory_empirical(predicted, res.objectives, tol_pp=4.0, tol_e_rel=0.12)
    assert rep.passed, rep.summary()
