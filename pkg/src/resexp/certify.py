"""Closed-form generalization bounds and improvement certificates.

Evaluates the covering-number Rademacher bound and the three-term uniform
generalization bound for norm-controlled normalized residual classes, the
test-concentration failure term, and the data requirement implied by a
target accuracy. Measured margins are then checked against the two
certification routes (via population-proxy risk, and directly on
train/test losses) plus the population-level check, each with a recorded
inequality-chain audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jumpboard import MarginReport

VERDICT_STRICT = "certified-strict"
VERDICT_NON_WORSENING = "certified-non-worsening"
VERDICT_NOT = "not-certified"
VERDICTS = (VERDICT_STRICT, VERDICT_NON_WORSENING, VERDICT_NOT)

_REL_TOL = 1e-9


class CertifyError(Exception):
    pass


class Unsatisfiable(CertifyError):
    """The target accuracy cannot be met within the sample-size window."""


@dataclass
class BoundConstants:
    """Minimal constant set consumed by the bound formulas."""

    B_ell: float
    L_ell: float
    d: int
    b_bar: float
    n_layers: int
    Lambda_max: float

    @staticmethod
    def from_arch(consts) -> "BoundConstants":
        return BoundConstants(
            B_ell=consts.B_ell,
            L_ell=consts.L_ell,
            d=consts.d,
            b_bar=consts.b_bar,
            n_layers=consts.n_layers,
            Lambda_max=consts.Lambda_max,
        )


@dataclass
class BoundInputs:
    """Inputs of one bound evaluation; rho defaults to m^(-1/2)."""

    consts: object  # anything exposing the BoundConstants attributes
    m: int
    delta: float
    rho: float | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def resolved_rho(self) -> float:
        return self.m**-0.5 if self.rho is None else self.rho


def covering_number_log(b: float, eps: float, d: int) -> float:
    """Log covering number of a radius-``b`` ball in dimension ``d``: d log(2b/eps + 1)."""
    if b <= 0 or eps <= 0 or d < 1:
        raise ValueError("covering_number_log needs b > 0, eps > 0, d >= 1")
    return d * math.log(2.0 * b / eps + 1.0)


def _log_argument(c, rho: float) -> float:
    return 2.0 * c.b_bar * c.n_layers * c.L_ell * c.Lambda_max / rho + 1.0


def rademacher_bound(inputs: BoundInputs) -> float:
    """Covering-number bound on the empirical Rademacher complexity of the loss class."""
    c = inputs.consts
    eps0 = inputs.resolved_rho
    return c.B_ell * math.sqrt(
        2.0 * c.d * math.log(_log_argument(c, eps0)) / inputs.m
    ) + eps0


def eps_gen_norm(inputs: BoundInputs) -> float:
    """Uniform generalization bound: 2 * Rademacher term + 2 rho + confidence term."""
    c = inputs.consts
    rho = inputs.resolved_rho
    return (
        2.0 * c.B_ell * math.sqrt(2.0 * c.d * math.log(_log_argument(c, rho)) / inputs.m)
        + 2.0 * rho
        + 3.0 * c.B_ell * math.sqrt(math.log(2.0 / inputs.delta) / (2.0 * inputs.m))
    )


def hoeffding_failure(k: int, delta_r: float, b_ell: float) -> float:
    """Failure mass of the three test-set concentration events: 6 exp(-K dR^2 / 8 B^2)."""
    if k < 1 or b_ell <= 0 or delta_r < 0:
        raise ValueError("hoeffding_failure needs K >= 1, B_ell > 0, Delta_R >= 0")
    return 6.0 * math.exp(-k * delta_r**2 / (8.0 * b_ell**2))


def data_requirement(eps: float, delta: float, consts, rho: float | None = None,
                     m_max: int = 2**60) -> int:
    """Smallest sample size whose generalization bound is <= ``eps``.

    With the default rho = m^(-1/2) the bound decreases strictly in m, so a
    doubling phase followed by integer bisection finds the exact threshold.
    A fixed rho puts a 2*rho floor under the bound; targets below the floor
    (or beyond the window) raise Unsatisfiable rather than clamping.
    """
    if eps <= 0:
        raise Unsatisfiable("target accuracy must be positive")

    def value(m: int) -> float:
        return eps_gen_norm(BoundInputs(consts, m, delta, rho))

    if value(m_max) > eps:
        raise Unsatisfiable(
            f"eps_gen_norm({m_max}) = {value(m_max):.3e} > target {eps:.3e}"
        )
    lo, hi = 1, 1
    while value(hi) > eps:
        lo, hi = hi, hi * 2
    while lo < hi:
        mid = (lo + hi) // 2
        if value(mid) <= eps:
            hi = mid
        else:
            lo = mid + 1
    return hi


# ---------------------------------------------------------------------------
# verdicts and audit chains


@dataclass
class ChainStep:
    name: str
    description: str
    lhs: float
    relation: str  # "<=" or "=="
    rhs: float

    @property
    def holds(self) -> bool:
        tol = _REL_TOL * (1.0 + abs(self.lhs) + abs(self.rhs))
        if self.relation == "==":
            return abs(self.lhs - self.rhs) <= tol
        return self.lhs <= self.rhs + tol


def _route_verdict(margin_for_strict: float, margin_for_safe: float, cost: float) -> str:
    if margin_for_strict > cost:
        return VERDICT_STRICT
    if cost <= margin_for_safe:
        return VERDICT_NON_WORSENING
    return VERDICT_NOT


def check_population(report: MarginReport | None, delta_r: float, delta_erm: float,
                     eps_m: float) -> str:
    """Population-risk check: strict iff Delta_R + Delta_ERM > 2 eps_M."""
    return _route_verdict(delta_r + delta_erm, delta_r, 2.0 * eps_m)


def chain_route_a(report: MarginReport, delta_r: float, eps_m: float) -> list[ChainStep]:
    """Population-proxy inequality chain: old risk -> jump risk -> train -> selected -> new risk."""
    if report.L_proxy_old is None:
        raise ValueError("route A audit requires population-proxy losses in the report")
    return [
        ChainStep("A1", "proxy risk of jumpboard = old - Delta_R",
                  report.L_proxy_jump, "==", report.L_proxy_old - delta_r),
        ChainStep("A2", "jumpboard train loss <= proxy risk + eps_M",
                  report.L_train_jump, "<=", report.L_proxy_jump + eps_m),
        ChainStep("A3", "selected train loss <= jumpboard train loss - Delta_ERM",
                  report.L_train_new, "<=", report.L_train_jump - report.delta_ERM),
        ChainStep("A4", "new proxy risk <= selected train loss + eps_M",
                  report.L_proxy_new, "<=", report.L_train_new + eps_m),
        ChainStep("A5", "new proxy risk <= old - Delta_R - Delta_ERM + 2 eps_M",
                  report.L_proxy_new, "<=",
                  report.L_proxy_old - delta_r - report.delta_ERM + 2.0 * eps_m),
    ]


def check_route_a(report: MarginReport, delta_r_proxy: float, eps_m: float
                  ) -> tuple[str, list[ChainStep]]:
    """Route through population risk: strict iff Delta_R/2 + Delta_ERM > 2 eps_M."""
    verdict = _route_verdict(
        0.5 * delta_r_proxy + report.delta_ERM, 0.5 * delta_r_proxy, 2.0 * eps_m
    )
    chain = []
    if report.L_proxy_old is not None:
        chain = chain_route_a(report, delta_r_proxy, eps_m)
    return verdict, chain


def chain_route_b(report: MarginReport, eps_m: float, eps_k: float) -> list[ChainStep]:
    """Direct train/test inequality chain with the uniform comparison cost."""
    eps_tt = eps_m + eps_k
    return [
        ChainStep("B1", "test loss of jumpboard = old - Delta_R_test",
                  report.L_test_jump, "==", report.L_test_old - report.delta_R_test),
        ChainStep("B2", "jumpboard train loss <= jumpboard test loss + eps_TT",
                  report.L_train_jump, "<=", report.L_test_jump + eps_tt),
        ChainStep("B3", "selected train loss <= jumpboard train loss - Delta_ERM",
                  report.L_train_new, "<=", report.L_train_jump - report.delta_ERM),
        ChainStep("B4", "new test loss <= selected train loss + eps_TT",
                  report.L_test_new, "<=", report.L_train_new + eps_tt),
        ChainStep("B5", "new test loss <= old - Delta_R_test - Delta_ERM + 2 eps_TT",
                  report.L_test_new, "<=",
                  report.L_test_old - report.delta_R_test - report.delta_ERM
                  + 2.0 * eps_tt),
    ]


def check_route_b(report: MarginReport, eps_m: float, eps_k: float
                  ) -> tuple[str, list[ChainStep]]:
    """Direct route: strict iff Delta_R_test + Delta_ERM > 2 (eps_M + eps_K)."""
    verdict = _route_verdict(
        report.delta_R_test + report.delta_ERM,
        report.delta_R_test,
        2.0 * (eps_m + eps_k),
    )
    return verdict, chain_route_b(report, eps_m, eps_k)


@dataclass
class CertificateReport:
    """Bound values, margins, verdicts, and the logged inequality chains."""

    eps_M: float
    eps_K: float
    hoeffding_term: float
    delta_R_proxy: float
    delta_R_test: float
    delta_ERM: float
    route_A_lhs: float
    route_A_rhs: float
    route_B_lhs: float
    route_B_rhs: float
    verdict_A: str
    verdict_B: str
    verdict_pop: str
    audit_chain: list[ChainStep] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = {
            "eps_M": self.eps_M,
            "eps_K": self.eps_K,
            "hoeffding_term": self.hoeffding_term,
            "delta_R_proxy": self.delta_R_proxy,
            "delta_R_test": self.delta_R_test,
            "delta_ERM": self.delta_ERM,
            "route_A_lhs": self.route_A_lhs,
            "route_A_rhs": self.route_A_rhs,
            "route_B_lhs": self.route_B_lhs,
            "route_B_rhs": self.route_B_rhs,
            "verdict_A": self.verdict_A,
            "verdict_B": self.verdict_B,
            "verdict_pop": self.verdict_pop,
        }
        for step in self.audit_chain:
            rec[f"chain.{step.name}.lhs"] = step.lhs
            rec[f"chain.{step.name}.rhs"] = step.rhs
            rec[f"chain.{step.name}.relation"] = step.relation
            rec[f"chain.{step.name}.holds"] = step.holds
        return rec


def build_certificate(
    report: MarginReport,
    consts,
    m: int,
    k: int,
    delta: float,
    rho_m: float | None = None,
    rho_k: float | None = None,
) -> CertificateReport:
    """Evaluate both bound values and all three verdicts for one expansion run."""
    eps_m = eps_gen_norm(BoundInputs(consts, m, delta, rho_m))
    eps_k = eps_gen_norm(BoundInputs(consts, k, delta, rho_k))
    delta_r_proxy = report.delta_R_proxy
    have_proxy = delta_r_proxy is not None
    if not have_proxy:
        delta_r_proxy = 0.0
    verdict_a, chain_a = check_route_a(report, delta_r_proxy, eps_m)
    verdict_b, chain_b = check_route_b(report, eps_m, eps_k)
    verdict_pop = check_population(report, delta_r_proxy, report.delta_ERM, eps_m)
    if not have_proxy:
        verdict_a = VERDICT_NOT
        verdict_pop = VERDICT_NOT
    hoeff = hoeffding_failure(k, max(delta_r_proxy, 0.0), consts.B_ell)
    return CertificateReport(
        eps_M=eps_m,
        eps_K=eps_k,
        hoeffding_term=hoeff,
        delta_R_proxy=delta_r_proxy,
        delta_R_test=report.delta_R_test,
        delta_ERM=report.delta_ERM,
        route_A_lhs=0.5 * delta_r_proxy + report.delta_ERM,
        route_A_rhs=2.0 * eps_m,
        route_B_lhs=report.delta_R_test + report.delta_ERM,
        route_B_rhs=2.0 * (eps_m + eps_k),
        verdict_A=verdict_a,
        verdict_B=verdict_b,
        verdict_pop=verdict_pop,
        audit_chain=chain_a + chain_b,
    )


def render_chain_table(cert: CertificateReport) -> str:
    """Human-readable inequality-chain table for both routes."""
    lines = [
        f"eps_M = {cert.eps_M:.6g}   eps_K = {cert.eps_K:.6g}   "
        f"hoeffding_term = {cert.hoeffding_term:.6g}",
        f"route A: {cert.route_A_lhs:.6g} > {cert.route_A_rhs:.6g} ?  -> {cert.verdict_A}",
        f"route B: {cert.route_B_lhs:.6g} > {cert.route_B_rhs:.6g} ?  -> {cert.verdict_B}",
        f"population: -> {cert.verdict_pop}",
        "",
        f"{'step':<5}{'lhs':>14}  {'rel':<3}{'rhs':>14}  {'holds':<6} description",
    ]
    for s in cert.audit_chain:
        lines.append(
            f"{s.name:<5}{s.lhs:>14.6g}  {s.relation:<3}{s.rhs:>14.6g}  "
            f"{str(s.holds):<6} {s.description}"
        )
    return "\n".join(lines)
