import json
import math

import numpy as np
import pytest

from qldecouple import conditions as cond
from qldecouple import models
from qldecouple.errors import NotApplicable, TooLarge
from qldecouple.system import SamplePlan, load_system

S3 = math.sqrt(3.0)


def plan(count=120, seed=42):
    return SamplePlan(count=count, seed=seed)


@pytest.fixture(scope="module")
def barotropic_cubic():
    return models.build_barotropic("p0*rho^3").system


@pytest.fixture(scope="module")
def barotropic_quadratic():
    return models.build_barotropic("p0*rho^2").system


def full_11():
    return cond.PartitionScheme([[0], [1]], "full")


# --- index sets ----------------------------------------------------------------

def test_tuple_index_sets():
    p = cond.PartitionScheme([[0], [1], [2]], "partial")
    assert set(cond.gradient_tuples(p)) == {(0, 1), (0, 2), (1, 2)}
    assert set(cond.interaction_tuples(p)) == {(1, 0, 2)}

    pf = cond.PartitionScheme([[0], [1], [2]], "full")
    assert set(cond.gradient_tuples(pf)) == {(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)}
    assert set(cond.interaction_tuples(pf)) == set()  # all blocks are singletons

    p22 = cond.PartitionScheme([[0, 1], [2, 3]], "partial")
    grads = set(cond.gradient_tuples(p22))
    assert grads == {(0, 2), (0, 3), (1, 2), (1, 3)}
    inter = set(cond.interaction_tuples(p22))
    assert inter == {(0, 1, 2), (0, 1, 3), (1, 0, 2), (1, 0, 3)}

    p22f = cond.PartitionScheme([[0, 1], [2, 3]], "full")
    assert set(cond.interaction_tuples(p22f)) == {
        (0, 1, 2), (0, 1, 3), (1, 0, 2), (1, 0, 3),
        (2, 3, 0), (2, 3, 1), (3, 2, 0), (3, 2, 1)}


def test_constraint_count_formula():
    # sizes (2,1) on n=3: 2*2*1 + 1*3*0 = 4
    assert cond.PartitionScheme([[0, 1], [2]], "partial").constraint_count() == 4
    # sizes (1,1) on n=2: 1*1*1 = 1
    assert full_11().constraint_count() == 1


# --- gradient residuals --------------------------------------------------------

def test_gradient_residual_zero_for_cubic_pressure(barotropic_cubic):
    report = cond.check_partition(barotropic_cubic, full_11(), plan(), tol=1e-6)
    assert report.verdict == "pass"
    assert report.families["gradient"].max_abs <= 1e-9
    assert report.frame_provenance == "analyticHint"


def test_gradient_residual_quadratic_hand_value(barotropic_quadratic):
    # grad(lambda_1) . r_2 = rho p''/(2 sqrt(p')) - sqrt(p') = -sqrt(rho/2)
    got = cond.gradient_condition_residual(barotropic_quadratic, 0, 1, 0.0, 0.0,
                                           np.array([1.0, 0.0]))
    # hinted slot order: slot 0 is v + sqrt(p'), slot 1 is v - sqrt(p')
    assert got == pytest.approx(-math.sqrt(0.5), rel=1e-9)


def test_gradient_residual_quadratic_range_on_box(barotropic_quadratic):
    report = cond.check_partition(barotropic_quadratic, full_11(), plan(count=400), tol=1e-6)
    assert report.verdict == "fail"
    mx = report.families["gradient"].max_abs
    assert 0.5 <= mx <= 1.0
    # analytic value sqrt(rho/2) at the argmax sample
    rho_star = report.families["gradient"].argmax["u"][0]
    assert mx == pytest.approx(math.sqrt(rho_star / 2.0), rel=1e-7)


def test_gradient_fd_path_agrees_with_analytic(barotropic_quadratic):
    rng = np.random.default_rng(8)
    for _ in range(50):
        u = np.array([rng.uniform(0.6, 1.9), rng.uniform(-0.9, 0.9)])
        a = cond.gradient_condition_residual(barotropic_quadratic, 0, 1, 0, 0, u)
        f = cond.gradient_condition_residual(barotropic_quadratic, 0, 1, 0, 0, u, path="fd")
        assert abs(a - f) <= 1e-5


def test_gradient_numeric_frame_matches_hinted_zero_set(barotropic_cubic):
    report = cond.check_partition(barotropic_cubic, full_11(), plan(), frame="numeric")
    assert report.verdict == "pass"
    assert report.frame_provenance == "numeric"
    assert report.families["gradient"].max_abs <= 1e-8


def test_constant_coefficient_all_zero():
    doc = {"n": 3, "states": ["a", "b", "c"],
           "A": [["5", "1", "0"], ["0", "2", "1"], ["0", "0", "-1"]],
           "domain": {"a": [-1, 1], "b": [-1, 1], "c": [-1, 1]}}
    sys_ = load_system(json.dumps(doc))
    p = cond.PartitionScheme([[0], [1], [2]], "partial")
    report = cond.check_partition(sys_, p, plan(count=40))
    assert report.verdict == "pass"
    assert report.max_residual <= 1e-10


# --- threadline ------------------------------------------------------------------

def test_threadline_partial_22_passes():
    sys_ = models.build_threadline(k=1.0).system
    p = cond.PartitionScheme([[0, 1], [2, 3]], "partial")
    report = cond.check_partition(sys_, p, plan(count=150))
    assert report.verdict == "pass"
    assert report.max_residual <= 1e-6
    assert report.frame_provenance == "analyticHint"


def test_threadline_decay_coefficients_vanish():
    # complete exceptionality: grad(lambda_a) . r_a = 0 for every family,
    # including across the split multiplicity-2 eigenvalues
    sys_ = models.build_threadline(k=1.0).system
    machine = cond.FrameMachine(sys_)
    for row in sys_.sample_points(plan(count=60)):
        u = row[2:]
        base = machine.base(row[0], row[1], u)
        for a in range(4):
            val = cond.gradient_condition_residual(sys_, a, a, row[0], row[1], u,
                                                   machine=machine, base=base)
            assert abs(val) <= 1e-6


def test_threadline_numeric_cluster_partition_fails():
    # without hints the only multiplicity-respecting (2,2) grouping keys the
    # clusters themselves, and the speed of one cluster varies across the other
    sys_ = models.build_threadline(k=1.0).system
    p = cond.PartitionScheme([[0, 1], [2, 3]], "partial")
    report = cond.check_partition(sys_, p, plan(count=60), frame="numeric")
    assert report.verdict == "fail"
    assert report.families["gradient"].max_abs >= 0.5


# --- isentropic: the honest behavior ---------------------------------------------

def test_isentropic_gradient_residual_hand_formula():
    # with the true lambda = v eigenvector r3 = (p_s, 0, -p_rho):
    # grad(lambda_1) . r3 = (p_rr p_s - p_rs p_r)/(2 sqrt(p_r))
    #                     = sqrt(3) s (1 - rho^3 s) for p0 = 1, f(s) = s
    sys_ = models.build_isentropic("s").system
    for (rho, v, s) in [(1.0, 0.0, 1.0), (1.5, 0.3, 0.8), (0.7, -0.5, 1.6)]:
        got = cond.gradient_condition_residual(sys_, 0, 2, 0.0, 0.0,
                                               np.array([rho, v, s]))
        want = S3 * s * (1.0 - rho**3 * s)
        assert got == pytest.approx(want, rel=1e-8, abs=1e-10)


def test_isentropic_partial_hierarchy_fails_honestly():
    sys_ = models.build_isentropic("s").system
    p = cond.PartitionScheme([[0], [1], [2]], "partial")
    report = cond.check_partition(sys_, p, plan(count=150))
    assert report.verdict == "fail"
    # residual sqrt(3) s (1 - rho^3 s) reaches O(1) magnitudes on the box
    assert report.families["gradient"].max_abs >= 1e-1


def test_isentropic_full_mode_fails_strongly():
    sys_ = models.build_isentropic("s").system
    p = cond.PartitionScheme([[0], [1], [2]], "full")
    report = cond.check_partition(sys_, p, plan(count=150))
    assert report.verdict == "fail"
    assert report.families["gradient"].max_abs >= 1e-2


def test_isentropic_verdicts_do_not_depend_on_f():
    pa = cond.PartitionScheme([[0], [1], [2]], "partial")
    r1 = cond.check_partition(models.build_isentropic("s").system, pa, plan(count=60))
    r2 = cond.check_partition(models.build_isentropic("s^2").system, pa, plan(count=60))
    assert r1.verdict == r2.verdict == "fail"


# --- sources ---------------------------------------------------------------------

def test_source_family_vacuous_when_homogeneous(barotropic_cubic):
    report = cond.check_partition(barotropic_cubic, full_11(), plan(count=30))
    assert report.families["source"].vacuous
    assert report.families["source"].count == 0


def test_source_directional_derivative_hand_value():
    # barotropic p = rho^3 with g = (0, -v): l1 . g = -rho v (hinted lefts);
    # grad(-rho v) . r2 = -v rho + sqrt(3) rho^2 = -1 + sqrt(3) at (1, 1)
    entry = models.build_barotropic("p0*rho^3")
    doc = json.loads(json.dumps(entry.document))
    doc["g"] = ["0", "-v"]
    sys_ = load_system(json.dumps(doc))
    got = cond.source_condition_residual(sys_, 0, 1, 0.0, 0.0, np.array([1.0, 1.0]))
    assert got == pytest.approx(-1.0 + S3, rel=1e-6)


def test_source_residual_covariant_under_right_rescaling():
    entry = models.build_barotropic("p0*rho^3")
    doc = json.loads(json.dumps(entry.document))
    doc["g"] = ["0", "-v"]
    sys_plain = load_system(json.dumps(doc))
    doc2 = json.loads(json.dumps(doc))
    av = doc2["autovectorHint"]
    av["right"][1] = [f"({c})*(1 + rho^2/4)" for c in av["right"][1]]
    sys_scaled = load_system(json.dumps(doc2))
    u = np.array([1.2, 0.7])
    v1 = cond.source_condition_residual(sys_plain, 0, 1, 0, 0, u)
    v2 = cond.source_condition_residual(sys_scaled, 0, 1, 0, 0, u)
    # rescaling the sweep direction r_b scales the residual, zeros unmoved
    tau = 1.0 + u[0] ** 2 / 4.0
    assert v2 == pytest.approx(v1 * tau, rel=1e-5, abs=1e-8)


# --- oracle soundness and completeness -------------------------------------------

def test_oracle_soundness_partial():
    tri, maps, entry = models.build_synthetic_triangular(seed=3, n=3, block_sizes=(2, 1))
    p = cond.PartitionScheme(entry.extras["blocks"], "partial")
    report = cond.check_partition(entry.system, p, plan(count=80))
    assert report.verdict == "pass", report.to_json()
    assert report.max_residual <= 1e-6


def test_oracle_with_source_passes():
    _, _, entry = models.build_synthetic_triangular(seed=11, n=4, block_sizes=(1, 1, 2),
                                                    with_source=True)
    p = cond.PartitionScheme(entry.extras["blocks"], "partial")
    report = cond.check_partition(entry.system, p, plan(count=80))
    assert report.verdict == "pass", report.to_json()
    assert not report.families["source"].vacuous
    assert report.families["source"].max_abs <= 1e-6


def test_oracle_completeness_defect_detected():
    _, _, entry = models.build_synthetic_triangular(seed=5, n=3, block_sizes=(2, 1),
                                                    off_block_defect=0.1)
    p = cond.PartitionScheme(entry.extras["blocks"], "partial")
    report = cond.check_partition(entry.system, p, plan(count=80))
    assert report.verdict == "fail"
    assert report.max_residual >= 1e-2


def test_oracle_completeness_statistical():
    hits = 0
    trials = 100
    for seed in range(trials):
        _, _, entry = models.build_synthetic_triangular(
            seed=1000 + seed, n=3, block_sizes=(2, 1), off_block_defect=0.1)
        p = cond.PartitionScheme(entry.extras["blocks"], "partial")
        report = cond.check_partition(entry.system, p, plan(count=20))
        if report.verdict == "fail" and report.max_residual >= 1e-3:
            hits += 1
    assert hits >= 95


def test_scaling_invariance_of_verdict():
    entry = models.build_barotropic("p0*rho^3")
    doc = json.loads(json.dumps(entry.document))
    av = doc["autovectorHint"]
    av["right"] = [[f"({c})*(1 + rho^2/10)" for c in vec] for vec in av["right"]]
    av["left"] = [[f"({c})/(1 + rho^2/10)" for c in vec] for vec in av["left"]]
    sys_scaled = load_system(json.dumps(doc))
    report = cond.check_partition(sys_scaled, full_11(), plan(count=100))
    assert report.verdict == "pass"
    assert report.families["gradient"].max_abs <= 1e-8


# --- search -----------------------------------------------------------------------

def test_search_finds_full_11_for_cubic(barotropic_cubic):
    found = cond.search_partitions(barotropic_cubic, plan(count=80), mode="full")
    assert found, "expected the (1,1) scheme"
    schemes = [tuple(map(tuple, s.blocks)) for s, _ in found]
    assert ((0,), (1,)) in schemes


def test_search_empty_for_quadratic(barotropic_quadratic):
    found = cond.search_partitions(barotropic_quadratic, plan(count=80), mode="full")
    assert found == []
    found_p = cond.search_partitions(barotropic_quadratic, plan(count=80), mode="partial")
    assert found_p == []


def test_search_threadline_includes_22_with_hints():
    sys_ = models.build_threadline(k=1.0).system
    found = cond.search_partitions(sys_, plan(count=60), mode="partial")
    schemes = [tuple(map(tuple, s.blocks)) for s, _ in found]
    assert ((0, 1), (2, 3)) in schemes


def test_search_too_large():
    n = 9
    doc = {"n": n, "states": [f"u{i}" for i in range(n)],
           "A": [["1" if i == j else "0" for j in range(n)] for i in range(n)],
           "domain": {f"u{i}": [-1, 1] for i in range(n)}}
    sys_ = load_system(json.dumps(doc))
    with pytest.raises(TooLarge):
        cond.search_partitions(sys_, plan(count=10))


# --- Nijenhuis --------------------------------------------------------------------

def test_nijenhuis_constant_matrix_zero():
    doc = {"n": 2, "states": ["a", "b"], "A": [["1", "2"], ["3", "4"]],
           "domain": {"a": [-1, 1], "b": [-1, 1]}}
    sys_ = load_system(json.dumps(doc))
    assert cond.nijenhuis_residual(sys_, 0, 0, np.array([0.2, 0.3])) == 0.0


def test_nijenhuis_barotropic_hand_formula(barotropic_quadratic, barotropic_cubic):
    # for A = [[v, rho], [q(rho), v]]: max-entry N_212 = q - rho q' = (2p' - rho p'')/rho
    mx, _ = cond.nijenhuis_max(barotropic_cubic, plan(count=100))
    assert mx <= 1e-10
    got = cond.nijenhuis_residual(barotropic_quadratic, 0, 0, np.array([1.4, -0.2]))
    assert got == pytest.approx(2.0, rel=1e-9)  # q - rho q' = 2 for p = rho^2
    mx2, _ = cond.nijenhuis_max(barotropic_quadratic, plan(count=100))
    assert mx2 >= 0.1


def test_nijenhuis_matches_brute_force_fd():
    # independent oracle: assemble the tensor from finite differences of A
    _, _, entry = models.build_synthetic_triangular(seed=6, n=3, block_sizes=(2, 1))
    sys_ = entry.system
    u = np.array([0.2, -0.3, 0.4])
    n = sys_.n
    h = 1e-6
    D = np.empty((n, n, n))
    for m in range(n):
        e = np.zeros(n)
        e[m] = h
        D[m] = (sys_.eval_matrix(0, 0, u + e) - sys_.eval_matrix(0, 0, u - e)) / (2 * h)
    A = sys_.eval_matrix(0, 0, u)
    N = np.zeros((n, n, n))
    for j in range(n):
        for i in range(n):
            for k in range(n):
                for a in range(n):
                    N[j, i, k] += (A[a, i] * D[a, j, k] - A[a, k] * D[a, j, i]
                                   + A[j, a] * D[k, a, i] - A[j, a] * D[i, a, k])
    brute = float(np.max(np.abs(N)))
    got = cond.nijenhuis_residual(sys_, 0, 0, u)
    assert got == pytest.approx(brute, rel=1e-5, abs=1e-6)


def test_nijenhuis_not_applicable():
    doc = {"n": 2, "states": ["a", "b"], "A": [["1", "0"], ["0", "2"]],
           "g": ["a", "0"], "domain": {"a": [-1, 1], "b": [-1, 1]}}
    sys_ = load_system(json.dumps(doc))
    with pytest.raises(NotApplicable):
        cond.nijenhuis_residual(sys_, 0, 0, np.array([0.0, 0.0]))
    doc2 = {"n": 2, "states": ["a", "b"], "A": [["x", "0"], ["0", "2"]],
            "domain": {"a": [-1, 1], "b": [-1, 1]}}
    sys2 = load_system(json.dumps(doc2))
    with pytest.raises(NotApplicable):
        cond.nijenhuis_residual(sys2, 0, 0, np.array([0.0, 0.0]))


def test_nijenhuis_consistency_with_search():
    # n = 2 strictly hyperbolic: a full (1,1) scheme exists iff N vanishes
    for gamma, decouples in ((2.0, False), (2.5, False), (3.0, True)):
        sys_ = models.build_barotropic(f"p0*rho^{gamma}").system
        mx, _ = cond.nijenhuis_max(sys_, plan(count=60))
        found = cond.search_partitions(sys_, plan(count=60), mode="full")
        if decouples:
            assert mx <= 1e-6 and found
        else:
            assert mx > 1e-6 and not found


# --- report plumbing --------------------------------------------------------------

def test_report_json_and_csv(tmp_path, barotropic_quadratic):
    csvfile = tmp_path / "resid.csv"
    report = cond.check_partition(barotropic_quadratic, full_11(), plan(count=20),
                                  csv_path=str(csvfile))
    d = report.to_dict()
    assert d["verdict"] == "fail"
    assert d["samples"]["total"] == 20
    assert "gradient" in d["families"]
    lines = csvfile.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == ["sampleIndex", "t", "x", "rho", "v", "family", "ia", "lb", "jg",
                      "residual"]
    assert len(lines) > 1


def test_exclusion_policy_fails_when_mostly_excluded():
    entry = models.build_barotropic("p0*rho^3")
    doc = json.loads(json.dumps(entry.document))
    doc["exclude"] = ["2 - rho"]  # excludes rho < 2: nearly the whole box
    sys_ = load_system(json.dumps(doc))
    report = cond.check_partition(sys_, full_11(), plan(count=50))
    assert report.verdict == "fail"
    assert report.excluded >= 0.8 * 50


def test_nonhyperbolic_pressure_all_excluded():
    entry = models.build_barotropic("-p0*rho^2", parameters={"p0": 1.0})
    report = cond.check_partition(entry.system, full_11(), plan(count=30),
                                  frame="numeric")
    assert report.verdict == "fail"
    assert "allExcluded" in report.flags


def test_workers_reduction_is_deterministic(barotropic_quadratic):
    r1 = cond.check_partition(barotropic_quadratic, full_11(), plan(count=60), workers=1)
    r2 = cond.check_partition(barotropic_quadratic, full_11(), plan(count=60), workers=2)
    assert r1.to_json() == r2.to_json()


def test_interaction_residual_hand_oracle():
    # A = [[1, u3, 0], [0, 2, 0], [0, 0, 4]]: r-fields e1, (u3, 1, 0), e3
    # and dual lefts l1 = (1, -u3, 0).  The only partial-mode interaction
    # tuple for blocks ({1,2},{3}) is l1 . ((Dr2) r3 - (Dr3) r2) = 1 exactly.
    doc = {"n": 3, "states": ["u1", "u2", "u3"],
           "A": [["1", "u3", "0"], ["0", "2", "0"], ["0", "0", "4"]],
           "domain": {"u1": [-1, 1], "u2": [-1, 1], "u3": [0.2, 0.8]}}
    sys_ = load_system(json.dumps(doc))
    got = cond.interaction_condition_residual(sys_, 0, 1, 2, 0.0, 0.0,
                                              np.array([0.1, -0.2, 0.5]))
    assert got == pytest.approx(1.0, abs=1e-6)
    # swapped roles flip the sign
    got2 = cond.interaction_condition_residual(sys_, 0, 2, 1, 0.0, 0.0,
                                               np.array([0.1, -0.2, 0.5]))
    assert got2 == pytest.approx(-1.0, abs=1e-6)
    # and the full check flags the coupling
    p = cond.PartitionScheme([[0, 1], [2]], "partial")
    report = cond.check_partition(sys_, p, plan(count=40))
    assert report.verdict == "fail"
    assert report.families["interaction"].max_abs == pytest.approx(1.0, abs=1e-5)


def test_complex_pair_block_partial_passes():
    # rotation block (complex pair, constant) above a real family that may
    # depend on the leading variables: the hierarchy holds
    doc = {"n": 3, "states": ["u1", "u2", "u3"],
           "A": [["0", "-1", "0"], ["1", "0", "0"], ["0", "0", "3 + u1"]],
           "domain": {"u1": [-1, 1], "u2": [-1, 1], "u3": [-1, 1]}}
    sys_ = load_system(json.dumps(doc))
    p = cond.PartitionScheme([[0, 1], [2]], "partial")
    report = cond.check_partition(sys_, p, plan(count=40))
    assert report.frame_provenance == "numeric"
    assert report.verdict == "pass", report.to_json()
    assert report.max_residual <= 1e-8


def test_complex_pair_block_full_fails_on_dependence():
    # same matrix in full mode: the real family's speed 3 + u1 varies across
    # the rotation block's waves, so non-interacting decoupling must fail
    doc = {"n": 3, "states": ["u1", "u2", "u3"],
           "A": [["0", "-1", "0"], ["1", "0", "0"], ["0", "0", "3 + u1"]],
           "domain": {"u1": [-1, 1], "u2": [-1, 1], "u3": [-1, 1]}}
    sys_ = load_system(json.dumps(doc))
    p = cond.PartitionScheme([[0, 1], [2]], "full")
    report = cond.check_partition(sys_, p, plan(count=40))
    assert report.verdict == "fail"
    # grad(3 + u1) . r for the pair's Re vector (1, 0, 0) is exactly 1
    assert report.families["gradient"].max_abs == pytest.approx(1.0, abs=1e-6)
