"""Excess-risk recursion, power-law envelopes, and depth-width coupling.

Under a gradient-risk coupling ||mu_k||^2 = c_G Delta_k^(1+beta) and a
single-step gain Delta_R >= ||mu_k||^2 / (2q), the remaining excess risk
obeys Delta_{k+1} <= Delta_k - c Delta_k^(1+beta) with c = c_G / (2q).
This module runs that recursion at equality (the worst-case trajectory),
evaluates its closed-form upper envelope, converts parameter budgets to
(width, depth) under a coupling L = u(N), and fits the induced power-law
exponent against its analytic value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ScalelabError(Exception):
    pass


class StepTooLarge(ScalelabError):
    """A recursion step drove the excess risk to zero or below."""


class BetaZero(ScalelabError):
    """beta = 0 has no power-law envelope; use the exponential form."""


class InsufficientGrid(ScalelabError):
    pass


@dataclass
class ScalingParams:
    """Recursion constants; c Delta_0^beta < 1 keeps the trajectory positive."""

    beta: float
    c_G: float
    q: float
    delta0: float
    k_max: int
    validate: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.c_G <= 0 or self.q <= 0 or self.delta0 <= 0:
            raise ValueError("c_G, q, delta0 must be positive")
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if self.validate and self.c * self.delta0**self.beta >= 1.0:
            raise ValueError(
                f"c delta0^beta = {self.c * self.delta0 ** self.beta:.6g} >= 1: "
                "one recursion step would not stay positive"
            )

    @property
    def c(self) -> float:
        return self.c_G / (2.0 * self.q)


def run_recursion(params: ScalingParams) -> np.ndarray:
    """Trajectory Delta_0 ... Delta_{k_max} of Delta_{k+1} = Delta_k - c Delta_k^(1+beta)."""
    c, beta = params.c, params.beta
    out = np.empty(params.k_max + 1)
    out[0] = params.delta0
    d = params.delta0
    for k in range(params.k_max):
        d = d - c * d ** (1.0 + beta)
        if d <= 0.0:
            raise StepTooLarge(f"Delta_{k + 1} = {d:.6g} <= 0")
        out[k + 1] = d
    return out


def power_law_envelope(params: ScalingParams, k) -> np.ndarray | float:
    """Closed-form envelope (Delta_0^-beta + beta c k)^(-1/beta), beta > 0.

    Dominates the recursion trajectory at every step.
    """
    if params.beta == 0.0:
        raise BetaZero("beta = 0: envelope is exponential_envelope")
    karr = np.asarray(k, dtype=np.float64)
    env = (params.delta0**-params.beta + params.beta * params.c * karr) ** (
        -1.0 / params.beta
    )
    return float(env) if np.isscalar(k) or karr.ndim == 0 else env


def exponential_envelope(params: ScalingParams, k) -> np.ndarray | float:
    """beta = 0 trajectory (1 - c)^k Delta_0 (exact, not just an envelope)."""
    karr = np.asarray(k, dtype=np.float64)
    env = (1.0 - params.c) ** karr * params.delta0
    return float(env) if np.isscalar(k) or karr.ndim == 0 else env


# ---------------------------------------------------------------------------
# depth-width coupling


@dataclass
class CouplingModel:
    """Depth supported at width N: linear u(N) = kappa N, polynomial
    u(N) = kappa N^(1-nu) with 0 <= nu < 1, or a custom callable."""

    kind: str  # "linear" | "polynomial" | "custom"
    kappa: float = 1.0
    nu: float = 0.0
    a_arch: float = 1.0
    u_fn: object | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "custom"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kappa <= 0 or self.a_arch <= 0:
            raise ValueError("kappa and a_arch must be positive")
        if self.kind == "polynomial" and not (0.0 <= self.nu < 1.0):
            raise ValueError("polynomial coupling needs 0 <= nu < 1")
        if self.kind == "custom" and self.u_fn is None:
            raise ValueError("custom coupling needs u_fn")

    @property
    def effective_nu(self) -> float:
        return 0.0 if self.kind == "linear" else self.nu

    def u(self, n: float) -> float:
        if self.kind == "custom":
            return float(self.u_fn(n))
        return self.kappa * n ** (1.0 - self.effective_nu)

    def param_count(self, n: float) -> float:
        """Total parameters P(N) = a_arch u(N) N^2 along the coupled path."""
        return self.a_arch * self.u(n) * n * n


def params_to_width(p: float, coupling: CouplingModel) -> tuple[float, float]:
    """Invert P = a_arch u(N) N^2: returns (N, L = u(N)).

    Closed form for the polynomial family; monotone bisection for a custom
    coupling. Values are real; integer rounding is left to the caller.
    """
    if p <= 0:
        raise ValueError("parameter budget must be positive")
    if coupling.kind in ("linear", "polynomial"):
        nu = coupling.effective_nu
        n = (p / (coupling.a_arch * coupling.kappa)) ** (1.0 / (3.0 - nu))
    else:
        lo, hi = 1e-12, 1.0
        while coupling.param_count(hi) < p:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if coupling.param_count(mid) < p:
                lo = mid
            else:
                hi = mid
        n = 0.5 * (lo + hi)
    return n, coupling.u(n)


def scaling_exponent(nu: float, beta: float) -> float:
    """Parameter-count power-law exponent (1 - nu) / ((3 - nu) beta)."""
    if not (0.0 <= nu < 1.0):
        raise ValueError("nu must lie in [0, 1)")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return (1.0 - nu) / ((3.0 - nu) * beta)


# ---------------------------------------------------------------------------
# coupled risk curves


@dataclass
class CurvePoint:
    P: float
    N: float
    L: float
    k: int
    delta: float
    envelope: float


@dataclass
class CurveResult:
    points: list[CurvePoint] = field(default_factory=list)
    fitted_exponent: float = math.nan   # slope magnitude of log Delta vs log P
    analytic_exponent: float = math.nan


def coupled_risk_curve(
    p_grid, coupling: CouplingModel, params: ScalingParams
) -> CurveResult:
    """Excess risk after k(P) = round(L(P)) expansion steps across a budget grid.

    The tail half of the log-grid is fit by least squares; the slope is
    compared against the analytic exponent (an asymptotic statement, so
    the grid must span several decades for a tight match).
    """
    p_grid = np.sort(np.asarray(p_grid, dtype=np.float64))
    if p_grid.size < 2:
        raise InsufficientGrid("risk curve needs at least two budgets")
    span = math.log10(p_grid[-1] / p_grid[0])
    if span < 2.0:
        raise InsufficientGrid(f"grid spans {span:.2f} decades < 2")

    widths, depths, ks = [], [], []
    for p in p_grid:
        n, l = params_to_width(float(p), coupling)
        widths.append(n)
        depths.append(l)
        ks.append(int(round(l)))
    k_needed = max(ks)
    traj_params = ScalingParams(
        beta=params.beta, c_G=params.c_G, q=params.q, delta0=params.delta0,
        k_max=k_needed, validate=params.validate,
    )
    traj = run_recursion(traj_params)

    points = []
    for p, n, l, k in zip(p_grid, widths, depths, ks):
        if params.beta > 0:
            env = power_law_envelope(params, k)
        else:
            env = exponential_envelope(params, k)
        points.append(CurvePoint(P=float(p), N=n, L=l, k=k, delta=float(traj[k]), envelope=env))

    logp = np.log(p_grid)
    half = 0.5 * (logp[0] + logp[-1])
    tail = logp >= half
    if tail.sum() < 2:
        raise InsufficientGrid("tail half of the grid has fewer than two points")
    logd = np.log([pt.delta for pt in points])
    slope = float(np.polyfit(logp[tail], logd[tail], 1)[0])

    analytic = math.nan
    if params.beta > 0 and coupling.kind in ("linear", "polynomial"):
        analytic = scaling_exponent(coupling.effective_nu, params.beta)
    return CurveResult(points=points, fitted_exponent=-slope, analytic_exponent=analytic)


# ---------------------------------------------------------------------------
# reliability constraint


@dataclass
class ReliabilityResult:
    satisfied: bool
    slack: float  # rhs / lhs; >= 1 iff satisfied
    lhs: float
    rhs: float


def reliability_constraint(
    k: float, n: float, m: int, k_test: int, beta: float, delta: float,
    constant: float = 1.0,
) -> ReliabilityResult:
    """Observability requirement k^((1+beta)/beta) <= constant delta N min(M, K)."""
    if min(k, n, m, k_test, beta, delta, constant) <= 0:
        raise ValueError("all reliability inputs must be positive")
    lhs = k ** ((1.0 + beta) / beta)
    rhs = constant * delta * n * min(m, k_test)
    return ReliabilityResult(satisfied=lhs <= rhs, slack=rhs / lhs, lhs=lhs, rhs=rhs)


# ---------------------------------------------------------------------------
# CSV emission

CURVE_CSV_FIELDS = ["P", "N", "L", "k", "delta", "envelope"]


def curve_rows(result: CurveResult) -> list[dict]:
    return [
        {"P": pt.P, "N": pt.N, "L": pt.L, "k": pt.k, "delta": pt.delta,
         "envelope": pt.envelope}
        for pt in result.points
    ]


def write_curve_csv(result: CurveResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_CSV_FIELDS)
        writer.writeheader()
        for row in curve_rows(result):
            writer.writerow(row)
