"""Acceptance battery.

Each criterion runs at its stated tolerance over seeded corpora and prints
one pass/fail line.  Run with ``pytest tests/test_acceptance.py -v -s``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from rbsde_lab.bundles import right_jump_identity_defect, skorokhod_residual, SolutionBundle
from rbsde_lab.cli import main
from rbsde_lab.engine import PenalizationMode, penalization_sweep, solve_penalized
from rbsde_lab.lattice import AdaptedField, sup_distance, build_binomial
from rbsde_lab.oracle import (
    InstanceRecipe,
    comparison_check,
    dynkin_value_bruteforce,
    exhaustive_game_values,
    game_value_field,
    ordered_widening,
    random_instance,
)
from rbsde_lab.regulated import RegulatedField, jump_exhaustion_schedule
from rbsde_lab.solvers import negation_dual, solve_doubly_reflected
from rbsde_lab.stopping import PathContext, alternating_sequence, local_solution, patch_global

ROOT = Path(__file__).resolve().parents[1]
EPS = 1e-5
N_CORPUS = 200
N_PAIRS = 200
N_GAME = 50
N_SYMMETRIC = 50


def _report(num: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[acceptance] criterion {num} {name}: {status}{suffix}")
    assert passed, f"criterion {num} {name} failed{suffix}"


@pytest.fixture(scope="module")
def corpus():
    return [
        random_instance(
            InstanceRecipe(seed=1000 + s, steps=(10, 15), gap=0.25, right_jumps=s % 3)
        )
        for s in range(N_CORPUS)
    ]


@pytest.fixture(scope="module")
def projections(corpus):
    return [solve_doubly_reflected(inst) for inst in corpus]


@pytest.fixture(scope="module")
def sweeps(corpus):
    t0 = time.time()
    out = []
    for inst in corpus:
        inc = penalization_sweep(inst, PenalizationMode.LOWER_PENALTY_UPPER_REFLECT, eps=EPS)
        dec = penalization_sweep(inst, PenalizationMode.UPPER_PENALTY_LOWER_REFLECT, eps=EPS)
        out.append((inc, dec))
    return out, time.time() - t0


def test_criterion_1_penalization_monotone_convergence(corpus, projections, sweeps):
    results, elapsed = sweeps
    worst_gap = 0.0
    worst_mono = 0.0
    for inst, proj, (inc, dec) in zip(corpus, projections, results):
        assert inc.converged and dec.converged
        worst_mono = max(worst_mono, inc.monotone_violation, dec.monotone_violation)
        worst_gap = max(
            worst_gap,
            sup_distance(inc.final.y.value, proj.y.value),
            sup_distance(dec.final.y.value, proj.y.value),
        )
    ok = worst_mono <= 1e-10 and worst_gap <= 1e-4
    _report(
        1,
        "penalization monotone convergence",
        ok,
        f"{N_CORPUS} instances, max monotonicity violation {worst_mono:.2e}, "
        f"max distance to oracle {worst_gap:.2e}, sweeps took {elapsed:.1f}s",
    )


def test_criterion_2_scheme_agreement(sweeps):
    results, _ = sweeps
    worst = 0.0
    for inc, dec in results:
        worst = max(worst, sup_distance(inc.final.y.value, dec.final.y.value))
    _report(2, "increasing/decreasing agreement", worst <= 2 * EPS, f"max gap {worst:.2e}")


def test_criterion_3_skorokhod_minimality(corpus, projections):
    worst = 0.0
    most_negative = 0.0
    for inst, proj in zip(corpus, projections):
        rep = skorokhod_residual(proj, inst.barriers)
        worst = max(worst, rep.lower_residual, rep.upper_residual)
        most_negative = min(
            most_negative, float(np.min(rep.lower_paths)), float(np.min(rep.upper_paths))
        )
    detector_ok = True
    for inst, proj in zip(corpus[:20], projections[:20]):
        injected = 0.37
        site = None
        for k in range(inst.tree.depth):
            gaps = proj.y.right_value.level(k) - inst.lower.right_value.level(k)
            j = int(np.argmax(gaps))
            if float(gaps[j]) > 0.05:
                site = (k, j, float(gaps[j]))
                break
        assert site is not None
        k, j, weight = site
        dk = [np.array(proj.dk_star.level(i)) for i in range(inst.tree.levels)]
        dk[k][j] += injected
        tampered = SolutionBundle(
            tree=proj.tree, grid=proj.grid, y=proj.y, dm=proj.dm,
            dk_star=AdaptedField(proj.tree, dk), jump_k=proj.jump_k,
            da_star=proj.da_star, jump_a=proj.jump_a, method="tampered",
        )
        rep = skorokhod_residual(tampered, inst.barriers)
        if abs(rep.lower_residual - weight * injected) > 1e-12:
            detector_ok = False
    ok = worst <= 1e-9 and most_negative >= -1e-12 and detector_ok
    _report(
        3,
        "minimality residuals",
        ok,
        f"max residual {worst:.2e}, most negative path sum {most_negative:.2e}, "
        f"injected violations detected: {detector_ok}",
    )


def test_criterion_4_comparison_theorem():
    rng = np.random.default_rng(20240)
    worst = 0.0
    for s in range(N_PAIRS):
        inst = random_instance(
            InstanceRecipe(seed=2000 + s, steps=(10, 15), gap=0.25, right_jumps=s % 3)
        )
        wider = ordered_widening(inst, rng)
        report = comparison_check(inst, wider)
        worst = max(worst, report.max_violation)
    _report(4, "comparison theorem", worst <= 1e-12, f"{N_PAIRS} ordered pairs, max violation {worst:.2e}")


def test_criterion_5_game_oracle_identity():
    worst_solver_gap = 0.0
    exact = True
    for s in range(N_GAME):
        inst = random_instance(
            InstanceRecipe(
                seed=3000 + s,
                steps=(2, 5),
                gap=0.2,
                driver_family="constant" if s % 2 else "zero",
                right_jumps=s % 2,
            )
        )
        sup_inf, inf_sup = exhaustive_game_values(inst)
        fast = dynkin_value_bruteforce(inst)
        if not (sup_inf == inf_sup == fast):
            exact = False
        field = game_value_field(inst)
        sol = solve_doubly_reflected(inst)
        worst_solver_gap = max(worst_solver_gap, sup_distance(field, sol.y.value))
    ok = exact and worst_solver_gap <= 1e-10
    _report(
        5,
        "stopping-game oracle identity",
        ok,
        f"{N_GAME} instances, exhaustive == fast exactly: {exact}, "
        f"max solver gap {worst_solver_gap:.2e}",
    )


def test_criterion_6_global_patching(corpus, projections):
    worst_index_margin = 0
    worst_y = 0.0
    worst_ka = 0.0
    for inst, proj in zip(corpus, projections):
        rules, stat = alternating_sequence(proj.y, inst.barriers)
        assert stat.max_index <= inst.tree.depth + 1
        worst_index_margin = max(worst_index_margin, stat.max_index - (inst.tree.depth + 1))
        shared = PathContext(inst, proj)
        pieces = [
            local_solution(inst, rules[i], rules[i + 1], context=shared)
            for i in range(len(rules) - 1)
        ]
        patched = patch_global(inst, pieces)
        worst_y = max(worst_y, sup_distance(patched.y.value, proj.y.value))
        ka = patched.cumulative_k_paths() - patched.cumulative_a_paths()
        ka_direct = proj.cumulative_k_paths() - proj.cumulative_a_paths()
        worst_ka = max(worst_ka, float(np.max(np.abs(ka - ka_direct))))
    ok = worst_index_margin <= 0 and worst_y <= 1e-9 and worst_ka <= 1e-9
    _report(
        6,
        "global patching",
        ok,
        f"stationary on every path, max Y gap {worst_y:.2e}, max K-A gap {worst_ka:.2e}",
    )


def test_criterion_7_right_jump_machinery(corpus, projections):
    jump_instances = [
        (inst, proj)
        for inst, proj in zip(corpus, projections)
        if inst.lower.jump_events()
    ]
    assert len(jump_instances) >= 50
    nesting_ok = True
    identity_defect = 0.0
    for inst, proj in jump_instances:
        events = inst.lower.jump_events()
        ladder = [1, 2, 4, 8, 16, 64, 256, 4096]
        ladder.append(int(np.ceil(1.0 / min(abs(d) for _, _, d in events))) + 1)
        prev = set()
        union = set()
        for n in sorted(ladder):
            sched = jump_exhaustion_schedule(inst.lower, n).node_set()
            if not prev <= sched:
                nesting_ok = False
            prev = sched
            union |= sched
        negative = {(k, j) for k, j, d in events if d < 0}
        if union != negative:
            nesting_ok = False
        identity_defect = max(identity_defect, right_jump_identity_defect(proj))
        pen = solve_penalized(inst, 32, PenalizationMode.LOWER_PENALTY_UPPER_REFLECT)
        identity_defect = max(identity_defect, right_jump_identity_defect(pen))

    # threshold example: a -0.05 right jump is first scheduled at n = 21
    tree = build_binomial(3, 0.0, 1.0, -1.0, 0.5)
    barrier = RegulatedField.constant(tree, 0.0).with_right_jumps([(1, 0, -0.05)])
    first = next(
        n for n in range(1, 40) if jump_exhaustion_schedule(barrier, n).events
    )
    ok = nesting_ok and identity_defect <= 1e-12 and first == 21
    _report(
        7,
        "right-jump machinery",
        ok,
        f"{len(jump_instances)} jump instances, nesting/exhaustion exact: {nesting_ok}, "
        f"max jump-identity defect {identity_defect:.2e}, -0.05 first scheduled at n={first}",
    )


def test_criterion_8_negation_duality():
    worst = 0.0
    roundtrip_exact = True
    for s in range(N_SYMMETRIC):
        inst = random_instance(
            InstanceRecipe(seed=4000 + s, steps=(8, 12), symmetric=True, right_jumps=s % 3)
        )
        dual = negation_dual(inst)
        back = negation_dual(dual)
        if not (
            np.array_equal(back.terminal, inst.terminal)
            and back.driver == inst.driver
            and all(
                np.array_equal(back.lower.value.level(k), inst.lower.value.level(k))
                and np.array_equal(back.lower.right_value.level(k), inst.lower.right_value.level(k))
                and np.array_equal(back.upper.value.level(k), inst.upper.value.level(k))
                and np.array_equal(back.upper.right_value.level(k), inst.upper.right_value.level(k))
                for k in range(inst.tree.levels)
            )
        ):
            roundtrip_exact = False
        sol = solve_doubly_reflected(inst)
        dual_sol = solve_doubly_reflected(dual)
        for k in range(inst.tree.levels):
            worst = max(worst, float(np.max(np.abs(dual_sol.y.value.level(k) + sol.y.value.level(k)))))
            worst = max(worst, float(np.max(np.abs(dual_sol.dk_star.level(k) - sol.da_star.level(k)))))
            worst = max(worst, float(np.max(np.abs(dual_sol.jump_k.level(k) - sol.jump_a.level(k)))))
            worst = max(worst, float(np.max(np.abs(dual_sol.da_star.level(k) - sol.dk_star.level(k)))))
            worst = max(worst, float(np.max(np.abs(dual_sol.jump_a.level(k) - sol.jump_k.level(k)))))
    ok = roundtrip_exact and worst <= 1e-12
    _report(
        8,
        "negation duality",
        ok,
        f"{N_SYMMETRIC} symmetric instances, round trip exact: {roundtrip_exact}, "
        f"max primal/dual gap {worst:.2e}",
    )


def test_criterion_9_cli_determinism(tmp_path):
    jobs = [
        (["solve", str(ROOT / "instances/two_sided_affine.json"), "--method", "projection"],
         ROOT / "goldens/two_sided_affine.projection.json"),
        (["solve", str(ROOT / "instances/two_sided_affine.json"), "--method", "inc-pen"],
         ROOT / "goldens/two_sided_affine.inc-pen.json"),
        (["converge", str(ROOT / "instances/two_sided_affine.json"), "--mode", "inc-pen"],
         ROOT / "goldens/two_sided_affine.converge.csv"),
        (["solve", str(ROOT / "instances/barrier_jumps.json"), "--method", "projection"],
         ROOT / "goldens/barrier_jumps.projection.json"),
        (["converge", str(ROOT / "instances/barrier_jumps.json"), "--mode", "dec-pen"],
         ROOT / "goldens/barrier_jumps.converge.csv"),
        (["solve", str(ROOT / "instances/lower_only.json"), "--method", "projection"],
         ROOT / "goldens/lower_only.projection.json"),
    ]
    identical = True
    for i, (args, golden) in enumerate(jobs):
        run1 = tmp_path / f"{i}_run1"
        run2 = tmp_path / f"{i}_run2"
        assert main([*args, "--out", str(run1)]) == 0
        assert main([*args, "--out", str(run2)]) == 0
        if run1.read_bytes() != run2.read_bytes() or run1.read_bytes() != golden.read_bytes():
            identical = False
    _report(9, "deterministic CLI runs", identical, f"{len(jobs)} golden jobs, bit-identical")
