"""Acceptance gate: nine end-to-end checks, one printed verdict line each.

The heavyweight artifacts (abstractions, fronts, baselines) are built once
per session in module-scoped fixtures and shared across criteria.
"""
from importlib import resources

import numpy as np
import pytest

from etplan.abstraction import AbstractionConfig, build_mdp, refinement_probe
from etplan.cli import main as cli_main
from etplan.et_filter import (
    FilterParams,
    batch_filter_step,
    batch_predict,
    g_lambda,
    steady_state_kf_covariance,
)
from etplan.harness import compare_theory_empirical, full_kf_baseline, simulate_strategy
from etplan.mo_solver import (
    MaxPtar,
    MinEnergyGivenPtar,
    pareto_front,
    select_point,
)
from etplan.numerics import (
    RngStream,
    beta_coefficient,
    expected_trigger_rate,
    gaussian_tail_q,
)
from etplan.scenario import load_builtin_scenario

from test_mo_solver import (
    _rounded,
    chain_mdp,
    fork_mdp,
    supported_front_points,
    triangle_mdp,
)

RUNS = 3000


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


def _simulate(scenario, build, strategy, label, runs=RUNS):
    return simulate_strategy(
        scenario,
        build.mdp,
        strategy,
        tables=build.tables,
        runs=runs,
        rng=RngStream(0, f"accept/{label}"),
    )


def _three_picks(front):
    """Max-p_tar plus two strictly lower-energy strategies off the front."""
    picks = [("max_ptar", *select_point(front, MaxPtar()))]
    for tag, floor in (("ptar995", 0.995), ("ptar99", 0.99)):
        strategy, point = select_point(front, MinEnergyGivenPtar(floor))
        picks.append((tag, strategy, point))
    top_e = picks[0][2].e_c
    assert all(p.e_c < top_e for _, _, p in picks[1:])
    return picks


@pytest.fixture(scope="module")
def w2():
    scenario = load_builtin_scenario("winding2d")
    config = AbstractionConfig(
        method=2, bins_theta=3, bins_lambda=8,
        samples_per_action=2500, pool_cap=4000, calibration_runs=400,
    )
    build = build_mdp(scenario, config, RngStream(0, "abstract"))
    return scenario, build, pareto_front(build.mdp, grid_resolution=40)


@pytest.fixture(scope="module")
def w2_method1():
    scenario = load_builtin_scenario("winding2d")
    config = AbstractionConfig(method=1, samples_per_action=2500, pool_cap=4000)
    build = build_mdp(scenario, config, RngStream(0, "abstract"))
    return scenario, build, pareto_front(build.mdp, grid_resolution=40)


@pytest.fixture(scope="module")
def w3():
    scenario = load_builtin_scenario("winding3d")
    config = AbstractionConfig(
        method=2, bins_theta=3, bins_lambda=8,
        samples_per_action=2000, pool_cap=4000, calibration_runs=400,
    )
    build = build_mdp(scenario, config, RngStream(0, "abstract"))
    return scenario, build, pareto_front(build.mdp, grid_resolution=40)


@pytest.fixture(scope="module")
def kf_baseline_w2():
    scenario = load_builtin_scenario("winding2d")
    return full_kf_baseline(scenario, runs=RUNS, rng=RngStream(0, "accept/kf"))


# ---------------------------------------------------------------------------
# 1. theory vs simulation


def test_criterion_1_theory_vs_simulation_2d(w2):
    scenario, build, front = w2
    details = []
    ok = True
    for tag, strategy, predicted in _three_picks(front):
        res = _simulate(scenario, build, strategy, f"c1/{tag}")
        rep = compare_theory_empirical(
            predicted, res.objectives, tol_pp=2.5, tol_e_rel=0.05
        )
        ok &= rep.passed
        details.append(
            f"{tag} dp_tar={rep.dp_tar_pp:.2f}pp dp_coll={rep.dp_coll_pp:.2f}pp "
            f"de_c={100 * rep.de_c_rel:.2f}%"
        )
    _verdict(1, ok, "winding2d (<=2.5pp, <=5%): " + "; ".join(details))


def test_criterion_1_theory_vs_simulation_3d(w3):
    scenario, build, front = w3
    details = []
    ok = True
    for tag, strategy, predicted in _three_picks(front):
        res = _simulate(scenario, build, strategy, f"c1/{tag}")
        rep = compare_theory_empirical(
            predicted, res.objectives, tol_pp=4.0, tol_e_rel=0.05
        )
        ok &= rep.passed
        details.append(
            f"{tag} dp_tar={rep.dp_tar_pp:.2f}pp dp_coll={rep.dp_coll_pp:.2f}pp "
            f"de_c={100 * rep.de_c_rel:.2f}%"
        )
    _verdict(1, ok, "winding3d (<=4pp, <=5%): " + "; ".join(details))


# ---------------------------------------------------------------------------
# 2. method-1 state count


def test_criterion_2_method1_state_count(w2_method1):
    counts = {}
    expected = {}
    _, build, _ = w2_method1
    counts["winding2d"] = build.mdp.n_states
    expected["winding2d"] = load_builtin_scenario("winding2d").n_segments + 3
    for name in ("open2d", "winding3d"):
        scenario = load_builtin_scenario(name)
        quick = build_mdp(
            scenario,
            AbstractionConfig(method=1, samples_per_action=120, pool_cap=300),
            RngStream(0, "accept/c2"),
        )
        counts[name] = quick.mdp.n_states
        expected[name] = scenario.n_segments + 3
    ok = counts == expected
    _verdict(2, ok, f"states {counts} == N+3 {expected}")


# ---------------------------------------------------------------------------
# 3. energy vs the always-transmit baseline


def test_criterion_3_energy_vs_full_kf(w2, kf_baseline_w2):
    scenario, build, front = w2
    strategy, _ = select_point(front, MaxPtar())
    et = _simulate(scenario, build, strategy, "c3/max_ptar")
    kf = kf_baseline_w2.objectives
    ratio = et.objectives.e_c_mean / kf.e_c_mean
    dp = abs(et.objectives.p_tar - kf.p_tar)
    ok = ratio <= 0.70 and dp <= 0.05
    _verdict(
        3,
        ok,
        f"e_c {et.objectives.e_c_mean:.1f} / {kf.e_c_mean:.1f} = {ratio:.3f} "
        f"(<=0.70), |dp_tar|={100 * dp:.2f}pp (<=5)",
    )


# ---------------------------------------------------------------------------
# 4. region method beats waypoint method on minimum energy


def test_criterion_4_method_comparison(w2, w2_method1):
    min2 = min(v.point.e_c for v in w2[2].vertices)
    min1 = min(v.point.e_c for v in w2_method1[2].vertices)
    ok = min2 <= min1
    _verdict(4, ok, f"method-2 min e_c {min2:.3f} <= method-1 min e_c {min1:.3f}")


# ---------------------------------------------------------------------------
# 5. front validity


def test_criterion_5_front_validity(w2, w2_method1, w3):
    dominated = 0
    for front in (w2[2], w2_method1[2], w3[2]):
        pts = front.points
        dominated += sum(
            1
            for i, a in enumerate(pts)
            for j, b in enumerate(pts)
            if i != j and a.dominates(b)
        )
    mism = []
    for make in (triangle_mdp, fork_mdp, chain_mdp):
        mdp = make()
        got = {v.point.as_tuple() for v in pareto_front(mdp).vertices}
        want = set(map(tuple, supported_front_points(mdp)))
        if _rounded(got) != _rounded(want):
            mism.append(make.__name__)
    ok = dominated == 0 and not mism
    _verdict(
        5,
        ok,
        f"dominated pairs across 3 emitted fronts: {dominated}; "
        f"enumeration mismatches: {mism or 'none'}",
    )


# ---------------------------------------------------------------------------
# 6. filter oracles


def test_criterion_6_filter_oracles():
    eye = np.eye(2)
    params = FilterParams(F=eye, G=eye, H=eye, Q=0.07**2 * eye, R=0.03**2 * eye)
    rng = RngStream(0, "accept/c6")

    # full-trigger ET filter against an independently coded plain KF
    mean_et = np.zeros((1, 2))
    cov_et = np.tile(1e-4 * eye, (1, 1, 1))
    mean_kf = np.zeros(2)
    cov_kf = 1e-4 * eye
    worst = 0.0
    force = np.array([True])
    for _ in range(100):
        u = rng.standard_normal((1, 2))
        z = rng.standard_normal((1, 2))
        mean_et, cov_et = batch_predict(mean_et, cov_et, u, params)
        mean_et, cov_et, gamma, _ = batch_filter_step(
            mean_et, cov_et, z, 1.0, params, force_mask=force
        )
        assert gamma[0]
        mean_kf = params.F @ mean_kf + params.G @ u[0]
        cov_kf = params.F @ cov_kf @ params.F.T + params.Q
        gain = cov_kf @ params.H.T @ np.linalg.inv(params.H @ cov_kf @ params.H.T + params.R)
        mean_kf = mean_kf + gain @ z[0]
        ikh = np.eye(2) - gain @ params.H
        cov_kf = ikh @ cov_kf @ ikh.T + gain @ params.R @ gain.T
        worst = max(
            worst,
            float(np.abs(mean_et[0] - mean_kf).max()),
            float(np.abs(cov_et[0] - cov_kf).max()),
        )
    kf_equiv = worst <= 1e-12

    p_ss = steady_state_kf_covariance(params)
    ss_err = float(np.abs(p_ss - 7.768e-4 * eye).max())
    ss_ok = ss_err <= 1e-6

    beta_ok = abs(beta_coefficient(1e-6) - 1.0) <= 1e-6
    q_ok = gaussian_tail_q(0.0) == 0.5

    # covariance ordering g_1(P-) <= g_beta(P-) <= P- on a threshold grid
    p_minus = params.F @ p_ss @ params.F.T + params.Q
    order_ok = True
    for delta in (0.5, 1.0, 2.0, 3.0):
        g1 = g_lambda(p_minus, 1.0, params)
        gb = g_lambda(p_minus, beta_coefficient(delta), params)
        for low, high in ((g1, gb), (gb, p_minus)):
            order_ok &= float(np.linalg.eigvalsh(high - low).min()) >= -1e-12
    ok = kf_equiv and ss_ok and beta_ok and q_ok and order_ok
    _verdict(
        6,
        ok,
        f"full-trigger==KF worst {worst:.2e} (<=1e-12); "
        f"steady-state err {ss_err:.2e} (<=1e-6); beta(1e-6) ok={beta_ok}; "
        f"Q(0)=0.5 ok={q_ok}; ordering ok={order_ok}",
    )


# ---------------------------------------------------------------------------
# 7. refinement shrinks (or at least does not blow up) region disagreement


def test_criterion_7_refinement_probe():
    scenario = load_builtin_scenario("winding2d")
    medians = {}
    for bins in ((2, 2), (4, 4)):
        config = AbstractionConfig(
            method=2, bins_theta=bins[0], bins_lambda=bins[1],
            samples_per_action=1500, pool_cap=3000, calibration_runs=300,
        )
        report = refinement_probe(scenario, config, RngStream(0, "accept/c7"))
        medians[bins] = report.median
    ok = medians[(4, 4)] <= medians[(2, 2)] + 0.05
    _verdict(
        7,
        ok,
        f"median dP_max at (4,4) {medians[(4, 4)]:.4f} <= "
        f"(2,2) {medians[(2, 2)]:.4f} + 0.05",
    )


# ---------------------------------------------------------------------------
# 8. stationary trigger rate matches the analytic law


def test_criterion_8_trigger_rate_mapping():
    steps = 10_000
    worst = 0.0
    for m in (1, 2, 3):
        eye = np.eye(m)
        params = FilterParams(F=eye, G=eye, H=eye, Q=0.07**2 * eye, R=0.03**2 * eye)
        for delta in (0.5, 1.0, 2.0, 3.0):
            rng = RngStream(5, f"accept/c8/{m}/{delta}")
            truth = np.zeros((1, m))
            mean = np.zeros((1, m))
            cov = np.tile(1e-4 * eye, (1, 1, 1))
            triggers = 0
            for _ in range(steps):
                truth = truth + rng.standard_normal((1, m)) * 0.07
                mean, cov = batch_predict(mean, cov, np.zeros((1, m)), params)
                z = truth + rng.standard_normal((1, m)) * 0.03 - mean
                mean, cov, gamma, _ = batch_filter_step(mean, cov, z, delta, params)
                triggers += int(gamma[0])
            law = expected_trigger_rate(delta, m)
            worst = max(worst, abs(triggers / steps - law))
    ok = worst <= 0.03
    _verdict(8, ok, f"worst |empirical - 1-(1-2Q(d))^m| = {100 * worst:.2f}pp (<=3pp)")


# ---------------------------------------------------------------------------
# 9. determinism of the whole pipeline


def _run_pipeline(scenario_path: str, out: str) -> None:
    assert cli_main([
        "abstract", scenario_path, "--bins", "2,4", "--samples", "400",
        "--pool-cap", "800", "--calibration-runs", "80", "--seed", "5",
        "--out", out,
    ]) == 0
    assert cli_main(["pareto", f"{out}/mdp.json", "--out", out]) == 0
    assert cli_main([
        "synth", f"{out}/front.json", "--query", "max-ptar", "--out", out,
    ]) == 0
    assert cli_main([
        "simulate", scenario_path, f"{out}/strategy_max_ptar.json",
        "--mdp", f"{out}/mdp.json", "--tables", f"{out}/tables.json",
        "--runs", "800", "--seed", "5", "--trace-cap", "40", "--out", out,
    ]) == 0
    assert cli_main([
        "baseline", scenario_path, "--runs", "400", "--seed", "5", "--out", out,
    ]) == 0
    assert cli_main(["report", out]) == 0


def test_criterion_9_pipeline_determinism(tmp_path):
    scenario_path = str(resources.files("etplan.data") / "open2d.json")
    first, second = tmp_path / "a", tmp_path / "b"
    _run_pipeline(scenario_path, str(first))
    _run_pipeline(scenario_path, str(second))
    csvs = sorted(p.name for p in first.glob("*.csv"))
    assert csvs, "pipeline produced no CSV outputs"
    differing = [
        name
        for name in csvs
        if (first / name).read_bytes() != (second / name).read_bytes()
    ]
    ok = not differing
    _verdict(9, ok, f"CSV outputs {csvs} byte-identical across reruns: {ok}")
