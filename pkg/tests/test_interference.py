import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlsched.interference import (
    DEFAULT_COEFFICIENTS, CoLocationContext, InterferenceCoefficients, InterferenceError,
    SlowdownSample, ablated_models, cpu_slowdown, fit, pcie_slowdown, read_samples,
    synthesize_samples, total_slowdown, u_c, u_p, write_samples,
)

HIDDEN = InterferenceCoefficients(0.05, 0.12, 0.05, 0.02, 0.004, 0.002, 0.01)


def ctx(same=(), diff=(), cj=4.0, pj=20.0, n_core=8):
    return CoLocationContext(cj, pj, tuple(same), tuple(diff), n_core)


def test_u_c_examples():
    assert u_c(ctx(same=[(4, 0), (3, 0)], diff=[6])) == 7
    assert u_c(ctx(diff=[10, 4])) == 6
    assert u_c(ctx()) == 0


def test_cpu_slowdown_examples():
    zero = InterferenceCoefficients()
    assert cpu_slowdown(ctx(same=[(9, 1)]), zero) == 0
    c = InterferenceCoefficients(alpha1=0.1, alpha2=0.2, alpha3=0.05)
    assert cpu_slowdown(ctx(same=[(10, 0)], cj=4), c) == pytest.approx(0.1 * math.exp(2.2))
    assert cpu_slowdown(ctx(same=[(10, 0)], cj=4), c) == pytest.approx(0.9025, abs=1e-4)
    c = InterferenceCoefficients(alpha1=0.05, alpha2=0.0, alpha3=0.1, lambda1=0.01)
    for same in ([], [(7, 1)], [(3, 2), (5, 5)]):
        assert cpu_slowdown(ctx(same=same, cj=6), c) == pytest.approx(0.1011, abs=1e-4)


def test_pcie_slowdown_examples():
    assert pcie_slowdown(ctx(same=[(1, 50)]), InterferenceCoefficients()) == 0
    c = InterferenceCoefficients(beta1=0.002, beta2=0.001, lambda2=0.01)
    assert pcie_slowdown(ctx(same=[(1, 50)], pj=20), c) == pytest.approx(0.13)
    assert pcie_slowdown(ctx(pj=20), c) == pytest.approx(0.001 * 20 + 0.01)


def test_total_slowdown_examples():
    assert total_slowdown(ctx(), InterferenceCoefficients()) == 0
    c2 = InterferenceCoefficients(0.1, 0.2, 0.05, 0.0, 0.002, 0.001, 0.01)
    # U_c = 10 from one same-group co-runner of 10 cores, U_p = 50
    got = total_slowdown(ctx(same=[(10, 50)], cj=4, pj=20), c2)
    assert got == pytest.approx(0.1 * math.exp(0.2 * 10 + 0.05 * 4) + 0.13)
    assert got == pytest.approx(1.0325, abs=1e-4)
    bad = InterferenceCoefficients(lambda1=-5.0)
    assert total_slowdown(ctx(), bad) == 0.0


def test_default_coefficients_zero_when_alone():
    from marlsched.workload import load_profiles
    for p in load_profiles():
        assert total_slowdown(ctx(cj=p.cpu_util, pj=p.pcie_util), DEFAULT_COEFFICIENTS) == 0.0


def test_exponent_cap_keeps_value_finite(caplog):
    c = InterferenceCoefficients(alpha1=1.0, alpha2=100.0)
    v = cpu_slowdown(ctx(same=[(50, 0)]), c)
    assert math.isfinite(v) and v == pytest.approx(math.exp(50))
    assert "capped" in caplog.text


def test_negative_utilization_rejected():
    with pytest.raises(InterferenceError):
        ctx(diff=[-1])


def test_fit_recovers_noiseless():
    samples = synthesize_samples(HIDDEN, 300, seed=1, noise=0.0)
    coeffs, report = fit(samples, seed=0)
    assert report["fit"] < 0.01 and report["heldout"] < 0.01


def test_fit_is_deterministic():
    samples = synthesize_samples(HIDDEN, 120, seed=2)
    a, ra = fit(samples, seed=5)
    b, rb = fit(samples, seed=5)
    assert a == b and ra == rb


def test_more_restarts_never_worse():
    samples = synthesize_samples(HIDDEN, 150, seed=3)
    errs = [fit(samples, seed=4, restarts=r)[1]["fit"] for r in (1, 4, 16)]
    assert errs[1] <= errs[0] + 1e-12 and errs[2] <= errs[1] + 1e-12


def test_fit_constant_data():
    base = ctx(same=[(3, 10)], diff=[4])
    samples = [SlowdownSample(base, 0.3)] * 40
    coeffs, report = fit(samples, seed=0)
    assert total_slowdown(base, coeffs) == pytest.approx(0.3, abs=1e-6)


def test_fit_errors():
    with pytest.raises(InterferenceError):
        fit(synthesize_samples(HIDDEN, 10, seed=0))
    bad = synthesize_samples(HIDDEN, 30, seed=0)
    bad[0] = SlowdownSample(bad[0].context, float("nan"))
    with pytest.raises(InterferenceError):
        fit(bad)


def test_linear_generator_favours_linear_fit():
    rng = np.random.default_rng(0)
    samples = []
    for s in synthesize_samples(HIDDEN, 300, seed=9, noise=0.0):
        c = s.context
        y = 0.1 + 0.02 * u_c(c) + 0.01 * c.subject_cpu + 0.003 * u_p(c) + 0.002 * c.subject_pcie
        samples.append(SlowdownSample(c, y * (1 + 0.02 * rng.standard_normal())))
    errs = ablated_models(samples, seed=0)
    assert errs["linear"] <= errs["full"] + 0.02


def test_absent_pcie_term_makes_ablation_match():
    no_pcie = InterferenceCoefficients(0.05, 0.12, 0.05, 0.02, 0.0, 0.0, 0.0)
    errs = ablated_models(synthesize_samples(no_pcie, 300, seed=4, noise=0.0), seed=0)
    assert errs["w/o PCIe"] <= errs["full"] + 0.01


def test_sample_csv_round_trip(tmp_path):
    samples = synthesize_samples(HIDDEN, 25, seed=0)
    write_samples(tmp_path / "s.csv", samples)
    back = read_samples(tmp_path / "s.csv")
    assert len(back) == 25
    for a, b in zip(samples, back):
        assert b.observed_slowdown == pytest.approx(a.observed_slowdown)
        assert u_c(b.context) == pytest.approx(u_c(a.context))
        assert u_p(b.context) == pytest.approx(u_p(a.context))


# -- property suite (10^4 cases in total) ------------------------------------------------

util = st.floats(0, 12, allow_nan=False)
pcie = st.floats(0, 60, allow_nan=False)
pos_coeffs = st.builds(InterferenceCoefficients, st.floats(0, 0.2), st.floats(0, 0.4),
                       st.floats(0, 0.2), st.floats(0, 0.1), st.floats(0, 0.01),
                       st.floats(0, 0.01), st.floats(0, 0.1))
any_coeffs = st.builds(InterferenceCoefficients, *[st.floats(-1, 1)] * 7)
same_list = st.lists(st.tuples(util, pcie), max_size=4)
diff_list = st.lists(util, max_size=4)
PROPERTY = settings(max_examples=2000, deadline=None, database=None)


@PROPERTY
@given(pos_coeffs, same_list, diff_list, util, st.integers(0, 3), st.floats(0, 10))
def test_cpu_monotone_in_same_group(c, same, diff, cj, idx, bump):
    base = ctx(same=same, diff=diff, cj=cj)
    if same:
        i = idx % len(same)
        bumped = list(same)
        bumped[i] = (same[i][0] + bump, same[i][1])
    else:
        bumped = [(bump, 0.0)]
    assert cpu_slowdown(ctx(same=bumped, diff=diff, cj=cj), c) >= cpu_slowdown(base, c) - 1e-12


@PROPERTY
@given(pos_coeffs, same_list, diff_list, util, st.floats(0, 10))
def test_cpu_monotone_in_diff_total(c, same, diff, cj, extra):
    base = ctx(same=same, diff=diff, cj=cj)
    more = ctx(same=same, diff=list(diff) + [extra], cj=cj)
    assert cpu_slowdown(more, c) >= cpu_slowdown(base, c) - 1e-12


@PROPERTY
@given(same_list, diff_list, st.randoms(use_true_random=False), st.integers(1, 16))
def test_u_c_permutation_and_threshold(same, diff, rnd, n_core):
    s2, d2 = list(same), list(diff)
    rnd.shuffle(s2)
    rnd.shuffle(d2)
    a = ctx(same=same, diff=diff, n_core=n_core)
    assert u_c(a) == pytest.approx(u_c(ctx(same=s2, diff=d2, n_core=n_core)))
    if sum(diff) <= n_core:
        assert u_c(a) == pytest.approx(u_c(ctx(same=same, n_core=n_core)))


@PROPERTY
@given(any_coeffs, same_list, pcie, st.floats(0, 5))
def test_pcie_linear_scaling(c, same, pj, a):
    scaled = [(cc, p * a) for cc, p in same]
    base = pcie_slowdown(ctx(same=same, pj=pj), c) - c.lambda2 - c.beta2 * pj
    new = pcie_slowdown(ctx(same=scaled, pj=pj), c) - c.lambda2 - c.beta2 * pj
    assert new == pytest.approx(a * base, abs=1e-9)


@PROPERTY
@given(any_coeffs, same_list, diff_list, util, pcie)
def test_total_clamped_and_consistent(c, same, diff, cj, pj):
    x = ctx(same=same, diff=diff, cj=cj, pj=pj)
    tot = total_slowdown(x, c)
    assert tot >= 0.0
    assert tot == pytest.approx(max(0.0, cpu_slowdown(x, c) + pcie_slowdown(x, c)))
