import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resexp.certify import (
    BoundConstants,
    BoundInputs,
    Unsatisfiable,
    VERDICT_NON_WORSENING,
    VERDICT_NOT,
    VERDICT_STRICT,
    build_certificate,
    chain_route_b,
    check_population,
    check_route_a,
    check_route_b,
    covering_number_log,
    data_requirement,
    eps_gen_norm,
    hoeffding_failure,
    rademacher_bound,
    render_chain_table,
)
from resexp.jumpboard import MarginReport


def unit_consts(**over):
    base = dict(B_ell=1.0, L_ell=1.0, d=10, b_bar=1.0, n_layers=1, Lambda_max=1.0)
    base.update(over)
    return BoundConstants(**base)


def report_with(delta_r_test=0.0, delta_erm=0.0, proxies=False, delta_r_proxy=0.0):
    l_test_old = 1.0
    l_test_jump = l_test_old - delta_r_test
    l_train_jump = 0.9
    l_train_new = l_train_jump - delta_erm
    kwargs = {}
    if proxies:
        kwargs = dict(L_proxy_old=1.0, L_proxy_jump=1.0 - delta_r_proxy,
                      L_proxy_new=1.0 - delta_r_proxy - delta_erm)
    return MarginReport(
        delta_train_S=0.1, delta_R_test=delta_r_test, delta_ERM=delta_erm,
        L_train_old=1.0, L_train_jump=l_train_jump, L_train_new=l_train_new,
        L_test_old=l_test_old, L_test_jump=l_test_jump, L_test_new=l_test_jump - delta_erm,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# formulas


def test_covering_number_log_values():
    assert covering_number_log(1.0, 2.0, 1) == pytest.approx(math.log(2.0))
    assert covering_number_log(1.0, 1.0, 3) == pytest.approx(3 * math.log(3.0))
    assert covering_number_log(1.0, 1e9, 2) == pytest.approx(0.0, abs=1e-8)


def test_rademacher_bound_hand_value():
    inputs = BoundInputs(unit_consts(), m=100, delta=0.5, rho=0.1)
    expected = math.sqrt(2 * 10 * math.log(21.0) / 100) + 0.1
    assert rademacher_bound(inputs) == pytest.approx(expected, rel=1e-12)
    assert rademacher_bound(inputs) == pytest.approx(0.8803, abs=2e-4)


def test_eps_gen_norm_hand_value():
    inputs = BoundInputs(unit_consts(n_layers=2), m=100, delta=0.1, rho=0.1)
    expected = (2 * math.sqrt(2 * 10 * math.log(41.0) / 100) + 0.2
                + 3 * math.sqrt(math.log(20.0) / 200))
    assert eps_gen_norm(inputs) == pytest.approx(expected, rel=1e-12)
    assert eps_gen_norm(inputs) == pytest.approx(2.2908, abs=2e-4)


def test_eps_gen_norm_delta_limit_third_term():
    consts = unit_consts()
    near_one = eps_gen_norm(BoundInputs(consts, 100, 1 - 1e-12, rho=0.1))
    base = 2 * math.sqrt(2 * 10 * math.log(21.0) / 100) + 0.2
    assert near_one == pytest.approx(base + 3 * math.sqrt(math.log(2.0) / 200), rel=1e-6)


def test_eps_gen_norm_quadrupling_m_halves_sqrt_terms():
    consts = unit_consts()
    a = eps_gen_norm(BoundInputs(consts, 100, 0.1, rho=0.1))
    b = eps_gen_norm(BoundInputs(consts, 400, 0.1, rho=0.1))
    assert b - 0.2 == pytest.approx((a - 0.2) / 2, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bound_monotonicity(seed):
    rng = np.random.default_rng(seed)
    consts = unit_consts(
        B_ell=float(rng.uniform(0.5, 5)), L_ell=float(rng.uniform(0.5, 5)),
        d=int(rng.integers(1, 200)), b_bar=float(rng.uniform(0.2, 5)),
        n_layers=int(rng.integers(1, 6)), Lambda_max=float(rng.uniform(0.1, 100)),
    )
    m = int(rng.integers(2, 10_000))
    delta = float(rng.uniform(0.01, 0.5))
    rho = float(rng.uniform(0.01, 1.0))
    base = eps_gen_norm(BoundInputs(consts, m, delta, rho))
    assert eps_gen_norm(BoundInputs(consts, 4 * m, delta, rho)) <= base
    bigger_d = unit_consts(**{**consts.__dict__, "d": consts.d + 30})
    assert eps_gen_norm(BoundInputs(bigger_d, m, delta, rho)) >= base
    bigger_lam = unit_consts(**{**consts.__dict__, "Lambda_max": consts.Lambda_max * 8})
    assert eps_gen_norm(BoundInputs(bigger_lam, m, delta, rho)) >= base
    bigger_b = unit_consts(**{**consts.__dict__, "b_bar": consts.b_bar * 8})
    assert eps_gen_norm(BoundInputs(bigger_b, m, delta, rho)) >= base
    smaller_delta = eps_gen_norm(BoundInputs(consts, m, delta / 2, rho))
    assert smaller_delta >= base
    assert rademacher_bound(BoundInputs(consts, 4 * m, delta, rho)) \
        <= rademacher_bound(BoundInputs(consts, m, delta, rho))


def test_hoeffding_values_and_range():
    assert hoeffding_failure(100, 0.4, 1.0) == pytest.approx(6 * math.exp(-2.0), rel=1e-12)
    assert hoeffding_failure(100, 0.4, 1.0) == pytest.approx(0.81201, abs=1e-5)
    assert hoeffding_failure(100, 0.0, 1.0) == 6.0
    assert hoeffding_failure(10**9, 0.5, 1.0) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        hoeffding_failure(0, 0.1, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10**6),
       st.one_of(st.just(0.0), st.floats(1e-6, 10.0)),
       st.floats(0.01, 10.0))
def test_hoeffding_in_zero_six_interval(k, delta_r, b_ell):
    # exponents kept within float range; the (0, 6] interval is exact there
    v = hoeffding_failure(k, delta_r, b_ell)
    if k * delta_r**2 / (8 * b_ell**2) < 700:
        assert 0.0 < v <= 6.0
        assert (v == 6.0) == (delta_r == 0.0)
    else:
        assert v == pytest.approx(0.0, abs=1e-300)


# ---------------------------------------------------------------------------
# verdicts


def test_route_a_strict_example():
    verdict, _ = check_route_a(report_with(delta_erm=0.1), 0.4, 0.1)
    assert verdict == VERDICT_STRICT


def test_route_a_zero_margins_not_certified():
    verdict, _ = check_route_a(report_with(), 0.0, 0.5)
    assert verdict == VERDICT_NOT


def test_route_a_boundary_is_non_worsening_not_strict():
    # 0.25 vs 0.25: strict fails, the non-worsening threshold holds with equality
    verdict, _ = check_route_a(report_with(), 0.5, 0.125)
    assert verdict == VERDICT_NON_WORSENING
    verdict, _ = check_route_a(report_with(), 0.5, 0.125 + 1e-9)
    assert verdict == VERDICT_NOT


def test_route_b_strict_example():
    report = report_with(delta_r_test=0.2, delta_erm=0.05)
    verdict, chain = check_route_b(report, 0.05, 0.05)
    assert verdict == VERDICT_STRICT
    assert [s.name for s in chain] == ["B1", "B2", "B3", "B4", "B5"]


def test_route_b_degenerate_jump_needs_erm():
    report = report_with(delta_r_test=0.0, delta_erm=0.5)
    verdict, _ = check_route_b(report, 0.1, 0.1)
    assert verdict == VERDICT_STRICT
    report = report_with(delta_r_test=0.0, delta_erm=0.1)
    verdict, _ = check_route_b(report, 0.1, 0.1)
    assert verdict == VERDICT_NOT


def test_route_b_negative_margin_can_still_certify():
    report = report_with(delta_r_test=-0.1, delta_erm=0.9)
    verdict, _ = check_route_b(report, 0.1, 0.1)
    assert verdict == VERDICT_STRICT


def test_population_checks():
    assert check_population(None, 0.3, 0.0, 0.1) == VERDICT_STRICT
    assert check_population(None, 0.0, 0.0, 0.1) == VERDICT_NOT
    assert check_population(None, 0.3, 0.0, 0.0) == VERDICT_STRICT
    assert check_population(None, 0.3, 0.0, 0.15) == VERDICT_NON_WORSENING


def test_chain_route_b_holds_on_consistent_values():
    report = report_with(delta_r_test=0.05, delta_erm=0.02)
    for step in chain_route_b(report, 1.0, 1.0):
        assert step.holds, step


def test_chain_detects_violated_inequality():
    report = report_with(delta_r_test=0.05, delta_erm=0.02)
    # a generalization allowance that is too small to cover the train/test gap
    steps = chain_route_b(report, 1e-9, 1e-9)
    assert not all(s.holds for s in steps)


def test_build_certificate_and_render(small_trained):
    report = report_with(delta_r_test=0.2, delta_erm=0.05, proxies=True,
                         delta_r_proxy=0.3)
    cert = build_certificate(report, unit_consts(), m=10**8, k=10**8, delta=0.1)
    assert cert.eps_M < 0.01
    assert cert.verdict_B == VERDICT_STRICT
    assert cert.verdict_A == VERDICT_STRICT
    assert cert.verdict_pop == VERDICT_STRICT
    assert cert.hoeffding_term == pytest.approx(
        hoeffding_failure(10**8, 0.3, 1.0))
    rec = cert.to_record()
    assert rec["verdict_B"] == VERDICT_STRICT
    assert "chain.B5.lhs" in rec and "chain.A1.lhs" in rec
    table = render_chain_table(cert)
    assert "route B" in table and "B5" in table


def test_certificate_without_proxies_skips_population_routes():
    report = report_with(delta_r_test=0.2, delta_erm=0.05)
    cert = build_certificate(report, unit_consts(), m=10**8, k=10**8, delta=0.1)
    assert cert.verdict_A == VERDICT_NOT
    assert cert.verdict_pop == VERDICT_NOT
    assert cert.verdict_B == VERDICT_STRICT


# ---------------------------------------------------------------------------
# data requirement


def test_data_requirement_monotone_and_witnessed():
    consts = unit_consts()
    m_star_small = data_requirement(0.5, 0.1, consts)
    m_star_tiny = data_requirement(0.05, 0.1, consts)
    assert m_star_tiny > m_star_small
    witness = eps_gen_norm(BoundInputs(consts, 1000, 0.1))
    assert data_requirement(witness, 0.1, consts) <= 1000


def test_data_requirement_exact_threshold_by_scan():
    consts = unit_consts()
    target = 0.5
    m_star = data_requirement(target, 0.1, consts)
    values = [eps_gen_norm(BoundInputs(consts, m, 0.1)) for m in range(1, m_star + 1)]
    first = next(m for m, v in zip(range(1, m_star + 1), values) if v <= target)
    assert first == m_star
    assert values[m_star - 1] <= target
    assert all(v > target for v in values[:m_star - 1])


def test_data_requirement_unsatisfiable_below_fixed_rho_floor():
    consts = unit_consts()
    with pytest.raises(Unsatisfiable):
        data_requirement(0.05, 0.1, consts, rho=0.1)  # floor 2 rho = 0.2
    with pytest.raises(Unsatisfiable):
        data_requirement(-1.0, 0.1, consts)


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs(unit_consts(), m=0, delta=0.1)
    with pytest.raises(ValueError):
        BoundInputs(unit_consts(), m=10, delta=1.5)
    with pytest.raises(ValueError):
        BoundInputs(unit_consts(), m=10, delta=0.1, rho=0.0)
    assert BoundInputs(unit_consts(), m=16, delta=0.1).resolved_rho == 0.25
