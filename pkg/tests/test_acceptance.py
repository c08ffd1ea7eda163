"""Acceptance criteria 1-11, one verdict line each (see the terminal summary).

Runs use alpha = 0.6 (p = 1) and 0.25 (p = 2) wherever a criterion leaves
alpha open; the stated values 1.5 (p = 1) and 0.6 (p = 2) exceed the
measured stability limit on these meshes and are run literally where a
criterion prescribes them.
"""

import math
import time

import numpy as np
import pytest
import scipy.linalg as sla

from acceptance_report import note, record
from eqwave.assembly import MaterialData, element_mass_matrices, element_stiffness_matrices
from eqwave.cli import main as cli_main
from eqwave.equilibrate import null_space_oracle
from eqwave.estimator import EstimatorTrace
from eqwave.experiment import convergence_table, run_experiment
from eqwave.mesh import BoundaryKind, Mesh, PatchClass, generate_square
from eqwave.scenarios import reflection, standing_wave
from eqwave.spaces import LagrangeSpace, lagrange_eval, quadrature, rt_dim, rt_dof_functionals, rt_eval
from eqwave.wavesolver import InstabilityError, LeapFrog, Stepper

from problem_factory import random_step

STABLE_ALPHA = {1: 0.6, 2: 0.25}
D, AB = BoundaryKind.DIRICHLET, BoundaryKind.ABSORBING


def sequence(scenario, levels, p, alpha, **kw):
    return [run_experiment(scenario, scenario.mesh(n), p=p, alpha=alpha, **kw) for n in levels]


def finest_eoc(outputs, rho):
    row = convergence_table(outputs, rho, against="h")[-1]
    return row.eoc_err, row.eoc_est


def literal_sequence(scenario, levels, p, alpha):
    """Run the prescribed sequence; return (outputs, None) or (None, InstabilityError)."""
    try:
        return sequence(scenario, levels, p, alpha), None
    except InstabilityError as exc:
        return None, exc


# --- shared runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def sw_p1_stable():
    return sequence(standing_wave(), (5, 10, 20, 40), 1, STABLE_ALPHA[1])


@pytest.fixture(scope="module")
def sw_p2_fine_step():
    t0 = time.perf_counter()
    outs = sequence(standing_wave(), (5, 10, 20), 2, 0.1)
    return outs, time.perf_counter() - t0


# --- criteria ------------------------------------------------------------------


def _checked_runs():
    t0 = time.perf_counter()
    runs = {}
    for p in (1, 2):
        sw = standing_wave()
        runs["standing", p] = run_experiment(sw, sw.mesh(8), p=p, alpha=STABLE_ALPHA[p], check=True, with_error=False)
        rf = reflection(0.5)
        runs["reflection", p] = run_experiment(rf, rf.mesh(8), p=p, alpha=STABLE_ALPHA[p], check=True, with_error=False)
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def checked_runs():
    return _checked_runs()


def test_criterion_01_equilibration(checked_runs):
    runs, elapsed = checked_runs
    div = max(r.checks.divergence for r in runs.values())
    bnd = max(runs["reflection", p].checks.boundary for p in (1, 2))
    steps = sum(r.checks.steps for r in runs.values())
    ok = div <= 1e-9 and bnd <= 1e-9 and elapsed <= 120
    line = record(1, ok, f"max div defect {div:.2e}, max Gamma_A defect {bnd:.2e} over {steps} steps, {elapsed:.0f} s")
    assert ok, line


def test_criterion_02_compatibility(checked_runs):
    runs, _ = checked_runs
    worst = max(r.checks.compatibility for r in runs.values())
    ok = worst <= 1e-9
    line = record(2, ok, f"max patch compatibility defect / scale {worst:.2e}")
    assert ok, line


def test_criterion_03_patch_oracle():
    count, classes, worst = 0, {1: set(), 2: set()}, 0.0
    boundary_sets = [[D, D, D, D], [AB, AB, AB, AB], [D, AB, D, AB], [AB, D, AB, AB]]
    for p in (1, 2):
        for seed, kinds in enumerate(boundary_sets):
            s = random_step(100 * p + seed, p, n=2, kinds=kinds)
            for pt in s.fr.patches:
                prob = s.fr.patch_problem(pt)
                data = s.fr.residual_data(prob, s.z)
                u_loc = prob.u_map @ s.z[prob.z_index]
                tau = s.fr.solve_patch(prob, data, u_loc).coefficients
                ref = null_space_oracle(prob, prob.grad @ u_loc, data.div_moments, data.boundary)
                o1, o2 = prob.objective(tau, u_loc), prob.objective(ref, u_loc)
                worst = max(worst, abs(o1 - o2) / max(abs(o2), 1e-14))
                classes[p].add(pt.cls)
                count += 1
    all_classes = all(c == set(PatchClass) for c in classes.values())
    ok = count >= 50 and all_classes and worst <= 1e-8
    line = record(3, ok, f"{count} patch problems, all classes for p=1,2: {all_classes}, max rel objective gap {worst:.2e}")
    assert ok, line


def test_criterion_04_standing_wave_convergence(sw_p1_stable, sw_p2_fine_step):
    t0 = time.perf_counter()
    literal, exc = literal_sequence(standing_wave(), (5, 10, 20, 40), 1, 1.5)
    elapsed = time.perf_counter() - t0
    p2, p2_time = sw_p2_fine_step
    e2_err, e2_est = finest_eoc(p2, 0.5)
    p2_ok = 1.7 <= e2_err <= 2.3 and 1.7 <= e2_est <= 2.3
    if literal is None:
        p1_ok, p1_text = False, f"p=1 alpha=1.5: {exc}"
    else:
        e_err, e_est = finest_eoc(literal, 0.5)
        p1_ok = 0.8 <= e_err <= 1.2 and 0.8 <= e_est <= 1.2
        p1_text = f"p=1 alpha=1.5 EOC err {e_err:.3f} est {e_est:.3f}"
    e_err, e_est = finest_eoc(sw_p1_stable, 0.5)
    note(f"criterion 4 rerun p=1 alpha={STABLE_ALPHA[1]}: EOC err {e_err:.3f} est {e_est:.3f} (h 0.05 -> 0.025)")
    total = elapsed + p2_time
    ok = p1_ok and p2_ok and total <= 900
    line = record(4, ok, f"{p1_text}; p=2 alpha=0.1 EOC err {e2_err:.3f} est {e2_est:.3f}; {total:.0f} s")
    assert ok, line


def test_criterion_05_asymptotic_effectivity(sw_p1_stable, sw_p2_fine_step):
    literal, exc = literal_sequence(standing_wave(), (5, 10, 20, 40), 1, 1.5)
    p2_eff = sw_p2_fine_step[0][-1].report(0.5).effectivity
    p2_ok = 0.85 <= p2_eff <= 1.10

    def judge(outputs):
        effs = [o.report(0.5).effectivity for o in outputs]
        return (effs[-3] < effs[-2] < effs[-1]) and 0.85 <= effs[-1] <= 1.10, effs

    if literal is None:
        p1_ok, p1_text = False, f"p=1 alpha=1.5: {exc}"
    else:
        p1_ok, effs = judge(literal)
        p1_text = "p=1 alpha=1.5 eff " + ", ".join(f"{e:.3f}" for e in effs)
    _, effs = judge(sw_p1_stable)
    note(f"criterion 5 rerun p=1 alpha={STABLE_ALPHA[1]}: eff " + ", ".join(f"{e:.3f}" for e in effs))
    ok = p1_ok and p2_ok
    line = record(5, ok, f"{p1_text}; p=2 alpha=0.1 finest eff {p2_eff:.3f}")
    assert ok, line


def test_criterion_06_rho_sensitivity(sw_p1_stable):
    out = sw_p1_stable[2]
    assert out.h_max == pytest.approx(0.05 * math.sqrt(2))
    eff = {rho: out.report(rho).effectivity for rho in (1.0, 0.5, 0.25)}
    ok = eff[1.0] > eff[0.5] > eff[0.25] and eff[0.25] <= 1.05
    line = record(6, ok, "h=0.05 p=1 eff(1)={:.4f} eff(0.5)={:.4f} eff(0.25)={:.4f}".format(eff[1.0], eff[0.5], eff[0.25]))
    assert ok, line


def test_criterion_07_time_discretization_signature(sw_p2_fine_step):
    sw = standing_wave()
    fine = sw_p2_fine_step[0][-1].report(0.5).effectivity
    try:
        coarse = run_experiment(sw, sw.mesh(20), p=2, alpha=0.6).report(0.5).effectivity
        ok = coarse < fine and fine - coarse >= 0.01
        text = f"p=2 h=0.05 eff(alpha=0.6)={coarse:.4f} eff(alpha=0.1)={fine:.4f}"
    except InstabilityError as exc:
        ok, text = False, f"p=2 alpha=0.6: {exc}"
    info = run_experiment(sw, sw.mesh(20), p=2, alpha=STABLE_ALPHA[2]).report(0.5).effectivity
    note(f"criterion 7 rerun p=2 h=0.05: eff(alpha={STABLE_ALPHA[2]})={info:.4f} vs eff(alpha=0.1)={fine:.4f}")
    line = record(7, ok, text)
    assert ok, line


def test_criterion_08_energy_and_instability():
    mesh = generate_square(0, 1, 8)
    mats = MaterialData.uniform()
    drifts = {}
    for p in (1, 2):
        V = LagrangeSpace(mesh, p)
        probe = LeapFrog(V, mats, 1.0)
        free = ~probe.mask
        lam = sla.eigh(probe.K.toarray()[np.ix_(free, free)], probe.M.toarray()[np.ix_(free, free)], eigvals_only=True)[-1]
        lf = LeapFrog(V, mats, 0.9 * 2.0 / math.sqrt(lam))
        rng = np.random.default_rng(p)
        u0, u1 = rng.standard_normal((2, V.n_dofs))
        u0[lf.mask] = u1[lf.mask] = 0.0
        stepper = Stepper(lf, lambda t: np.zeros(V.n_dofs), (u0, u1))
        e0 = lf.energy(u0, u1)
        drift = 0.0
        for _ in range(1000):
            st = stepper.advance()
            drift = max(drift, abs(lf.energy(st.u_curr, st.u_next) - e0) / e0)
        drifts[p] = drift
    sw = standing_wave()
    try:
        run_experiment(sw, sw.mesh(16), p=1, alpha=3.0, with_error=False)
        fired = False
    except InstabilityError:
        fired = True
    ok = max(drifts.values()) <= 1e-10 and fired
    line = record(8, ok, f"energy drift p=1 {drifts[1]:.1e}, p=2 {drifts[2]:.1e}; alpha=3 detector fired: {fired}")
    assert ok, line


def test_criterion_09_reflection():
    outs = sequence(reflection(0.5), (10, 20, 40, 80), 1, STABLE_ALPHA[1])
    rho = outs[0].trace.rhos[0]
    e_err, e_est = finest_eoc(outs, rho)
    eff = outs[-1].report(rho).effectivity
    ok = 0.8 <= e_err <= 1.2 and 0.8 <= e_est <= 1.2 and 0.6 <= eff <= 1.10
    line = record(9, ok, f"sigma=0.5 p=1 EOC err {e_err:.3f} est {e_est:.3f}, finest eff {eff:.3f}")
    assert ok, line


def test_criterion_10_unit_invariants():
    quad = 0.0
    for d in range(1, 13):
        r = quadrature(d)
        for a in range(d + 1):
            for b in range(d + 1 - a):
                exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
                quad = max(quad, abs(r.weights @ (r.points[:, 0] ** a * r.points[:, 1] ** b) - exact))
    x = np.random.default_rng(0).random((20, 2)) * 0.5
    pou = max(abs(lagrange_eval(p, x)[0].sum(axis=1) - 1).max() for p in (1, 2))
    uni = max(abs(rt_dof_functionals(q, lambda y: rt_eval(q, y)[0]) - np.eye(rt_dim(q))).max() for q in range(4))
    tri = Mesh.from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    V = LagrangeSpace(tri, 1)
    mats = MaterialData.uniform()
    Me = element_mass_matrices(V, mats)[0]
    Ke = element_stiffness_matrices(V, mats)[0]
    el = max(abs(Me - np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24).max(),
             abs(Ke - 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])).max())

    def trap_defect(m):
        times = np.linspace(0.1, 10.0, m)
        tr = EstimatorTrace((1.0,))
        for t in times:
            tr.accumulate(t, 1.0)
        return abs(tr.lam2[1.0][-1] - (math.exp(-0.2) - math.exp(-20.0)) / 2)

    ratio = trap_defect(201) / trap_defect(401)
    ok = quad <= 1e-13 and pou <= 1e-13 and uni <= 1e-11 and el <= 1e-12 and ratio >= 3.5
    line = record(10, ok, f"quadrature {quad:.1e}, unity {pou:.1e}, RT dofs {uni:.1e}, element matrices {el:.1e}, "
                          f"trapezoid defect ratio {ratio:.2f}")
    assert ok, line


def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[experiment]\nscenario = reflection\np = 2\nalpha = 0.25\nn = 6\nT = 6\nsigma = 0.5\n"
                   "[output]\nvtk_times = 5\n")
    outputs = []
    for k, threads in enumerate((1, 1, 2, 4)):
        d = tmp_path / f"out{k}"
        assert cli_main(["run", str(cfg), "--out", str(d), "--threads", str(threads)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    ok = all(o == outputs[0] for o in outputs[1:])
    line = record(11, ok, f"{len(outputs)} runs (threads 1, 1, 2, 4), {len(outputs[0])} files each, byte-identical: {ok}")
    assert ok, line
