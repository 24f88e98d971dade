"""Train/test alignment of activation-gradient directions.

Estimates and bounds the failure probability P(mu.g <= 0) that the
train-average gradient direction disagrees with the independent
test-average direction: the three-term covariance-control bound, a
seeded Monte Carlo ground truth under a Gaussian gradient model, and
covariance diagnostics supporting the near-diagonality check.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ndcore import as_tensor

WILSON_Z_95 = 1.959963984540054

_CHUNK_TRIALS = 16384


class AlignlabError(Exception):
    pass


class ZeroMeanSignal(AlignlabError):
    """||mu_bar|| = 0: the bound is undefined (deepest-model regime)."""


class InvalidCovariance(AlignlabError):
    """Declared covariance model violates the spectral/variance caps."""


class DominanceViolation(AlignlabError):
    """Monte Carlo failure rate exceeded the covariance-control bound."""


# ---------------------------------------------------------------------------
# covariance sampling helpers (shared with gradient diagnostics)


def sample_offdiag_covariance(
    per_sample: np.ndarray, pair_samples: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled off-diagonal covariance entries of per-sample rows.

    Returns (values, pairs) for ``pair_samples`` uniformly random coordinate
    pairs drawn without replacement; the estimate uses the M-1 denominator.
    """
    per_sample = np.atleast_2d(as_tensor(per_sample))
    m, n = per_sample.shape
    if pair_samples <= 0 or n < 2 or m < 2:
        return np.zeros(0), np.zeros((0, 2), dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0FFD1A6]))
    total = n * (n - 1) // 2
    k = min(int(pair_samples), total)
    flat = rng.choice(total, size=k, replace=False)
    # invert the row-major enumeration of the strict upper triangle
    i = (n - 2 - np.floor(np.sqrt(-8.0 * flat + 4 * n * (n - 1) - 7) / 2.0 - 0.5)
         ).astype(np.int64)
    j = (flat + i + 1 - total + (n - i) * (n - i - 1) // 2).astype(np.int64)
    centered = per_sample - per_sample.mean(axis=0, keepdims=True)
    vals = np.einsum("mi,mi->i", centered[:, i], centered[:, j]) / (m - 1)
    return vals, np.stack([i, j], axis=1)


@dataclass(eq=False)
class CovarianceDiagnostics:
    """Summaries supporting the near-diagonal covariance check."""

    sigma_diag: np.ndarray
    offdiag_values: np.ndarray
    offdiag_pairs: np.ndarray
    max_offdiag_ratio: float        # max |off-diagonal| / max diagonal
    gershgorin_upper: float         # row-sum upper estimate of lambda_max
    noise_bands: np.ndarray         # 3 * sampling std of each sampled entry
    frac_within_noise_band: float


def covariance_diagnostics(
    per_sample_grads: np.ndarray, pair_samples: int, seed: int = 0, row_samples: int = 32
) -> CovarianceDiagnostics:
    """Diagonal variances, sampled off-diagonals, and a spectral upper estimate."""
    q = np.atleast_2d(as_tensor(per_sample_grads))
    m, n = q.shape
    if m < 2:
        raise ValueError("covariance diagnostics need at least two samples")
    sigma_diag = q.var(axis=0, ddof=1)
    vals, pairs = sample_offdiag_covariance(q, pair_samples, seed)
    max_diag = float(sigma_diag.max()) if n else 0.0
    ratio = float(np.abs(vals).max() / max_diag) if vals.size and max_diag > 0 else 0.0

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6765727]))
    rows = rng.choice(n, size=min(row_samples, n), replace=False)
    centered = q - q.mean(axis=0, keepdims=True)
    gersh = 0.0
    for r in rows:
        row_cov = centered[:, r] @ centered / (m - 1)
        gersh = max(gersh, float(np.abs(row_cov).sum()))

    if vals.size:
        bands = 3.0 * np.sqrt(sigma_diag[pairs[:, 0]] * sigma_diag[pairs[:, 1]] / (m - 1))
        frac = float(np.mean(np.abs(vals) <= bands))
    else:
        bands = np.zeros(0)
        frac = 1.0
    return CovarianceDiagnostics(
        sigma_diag=sigma_diag,
        offdiag_values=vals,
        offdiag_pairs=pairs,
        max_offdiag_ratio=ratio,
        gershgorin_upper=gersh,
        noise_bands=bands,
        frac_within_noise_band=frac,
    )


# ---------------------------------------------------------------------------
# configuration


SIGMA_KINDS = ("diagonal", "scaled-identity", "full")


@dataclass(eq=False)
class AlignmentConfig:
    """Gradient model for the alignment simulation.

    mu_bar is the population mean gradient; the covariance model is one of
    diagonal(variances), scaled-identity(tau_sq), or full(matrix). The caps
    lambda_max(Sigma) <= C_sigma tau_sq and tau_sq >= max variance are
    validated at construction.
    """

    N: int
    M: int
    K: int
    mu_bar: np.ndarray
    C_sigma: float
    tau_sq: float
    trials: int
    seed: int
    sigma_kind: str = "scaled-identity"
    sigma_variances: np.ndarray | None = None
    sigma_matrix: np.ndarray | None = None
    sigma_scale: float | None = None

    def __post_init__(self):
        self.mu_bar = as_tensor(self.mu_bar)
        if self.mu_bar.shape != (self.N,):
            raise ValueError(f"mu_bar shape {self.mu_bar.shape} != ({self.N},)")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ValueError(f"unknown sigma_kind {self.sigma_kind!r}")
        if self.trials < 1 or self.M < 1 or self.K < 1:
            raise ValueError("M, K, trials must be positive")
        if self.sigma_kind == "diagonal":
            self.sigma_variances = as_tensor(self.sigma_variances)
            if self.sigma_variances.shape != (self.N,) or np.any(self.sigma_variances < 0):
                raise InvalidCovariance("diagonal model needs nonnegative variances of width N")
        if self.sigma_kind == "scaled-identity" and self.sigma_scale is None:
            self.sigma_scale = self.tau_sq
        if self.sigma_kind == "full":
            self.sigma_matrix = as_tensor(self.sigma_matrix)
            if self.sigma_matrix.shape != (self.N, self.N):
                raise InvalidCovariance("full model needs an N x N matrix")
        lam, max_var = self.lambda_max(), self.max_variance()
        tol = 1e-12 * (1.0 + abs(lam))
        if lam > self.C_sigma * self.tau_sq + tol:
            raise InvalidCovariance(
                f"lambda_max(Sigma) = {lam:.6g} exceeds C_sigma tau_sq = "
                f"{self.C_sigma * self.tau_sq:.6g}"
            )
        if max_var > self.tau_sq + tol:
            raise InvalidCovariance(
                f"max coordinate variance {max_var:.6g} exceeds tau_sq = {self.tau_sq:.6g}"
            )

    def lambda_max(self) -> float:
        if self.sigma_kind == "diagonal":
            return float(self.sigma_variances.max())
        if self.sigma_kind == "scaled-identity":
            return float(self.sigma_scale)
        return float(np.linalg.eigvalsh(self.sigma_matrix).max())

    def max_variance(self) -> float:
        if self.sigma_kind == "diagonal":
            return float(self.sigma_variances.max())
        if self.sigma_kind == "scaled-identity":
            return float(self.sigma_scale)
        return float(np.diag(self.sigma_matrix).max())

    def trace(self) -> float:
        if self.sigma_kind == "diagonal":
            return float(self.sigma_variances.sum())
        if self.sigma_kind == "scaled-identity":
            return float(self.sigma_scale * self.N)
        return float(np.trace(self.sigma_matrix))

    def sigma_factor(self) -> np.ndarray:
        """A with A A^T = Sigma; diagonal models return the std vector."""
        if self.sigma_kind == "diagonal":
            return np.sqrt(self.sigma_variances)
        if self.sigma_kind == "scaled-identity":
            return np.full(self.N, math.sqrt(self.sigma_scale))
        return np.linalg.cholesky(self.sigma_matrix)


def uniform_mean(n: int, alpha: float) -> np.ndarray:
    """Uniformly active mean vector alpha * (1, ..., 1); ||mu_bar||^2 = alpha^2 n."""
    return np.full(n, float(alpha))


# ---------------------------------------------------------------------------
# the three-term bound


@dataclass
class AlignmentBound:
    total: float
    term_train: float
    term_test: float
    term_mixed: float


def alignment_failure_bound(cfg: AlignmentConfig) -> AlignmentBound:
    """Covariance-control bound on P(mu.g <= 0).

    4 C tau^2 / (M ||mu_bar||^2) + 4 C tau^2 / (K ||mu_bar||^2)
    + 4 C tau^2 tr(Sigma) / (K M ||mu_bar||^4).
    """
    mu2 = float(cfg.mu_bar @ cfg.mu_bar)
    if mu2 == 0.0:
        raise ZeroMeanSignal("||mu_bar|| = 0: alignment bound undefined")
    a = 4.0 * cfg.C_sigma * cfg.tau_sq
    t1 = a / (cfg.M * mu2)
    t2 = a / (cfg.K * mu2)
    t3 = a * cfg.trace() / (cfg.K * cfg.M * mu2**2)
    return AlignmentBound(total=t1 + t2 + t3, term_train=t1, term_test=t2, term_mixed=t3)


# ---------------------------------------------------------------------------
# Monte Carlo


def wilson_upper(failures: int, trials: int, z: float = WILSON_Z_95) -> float:
    """Upper endpoint of the Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ValueError("trials must be positive")
    p = failures / trials
    denom = 1.0 + z * z / trials
    center = p + z * z / (2.0 * trials)
    radius = z * math.sqrt(p * (1.0 - p) / trials + z * z / (4.0 * trials * trials))
    return min(1.0, (center + radius) / denom)


@dataclass
class AlignmentResult:
    empirical_fail_rate: float
    wilson_ci_upper: float
    theorem_bound: float  # nan when the bound is undefined (zero mean signal)
    term_train: float
    term_test: float
    term_mixed: float
    failures: int
    trials: int


def _chunk_failures(cfg: AlignmentConfig, chunk_index: int, size: int,
                    explicit_sums: bool) -> int:
    rng = np.random.default_rng(
        np.random.Philox(key=np.random.SeedSequence([int(cfg.seed), chunk_index, 0xA116]).generate_state(2, np.uint64))
    )
    factor = cfg.sigma_factor()

    def noise(count: int) -> np.ndarray:
        xi = rng.standard_normal((size, count, cfg.N))
        if factor.ndim == 1:
            return xi * factor
        return xi @ factor.T

    if explicit_sums:
        mu = cfg.mu_bar + noise(cfg.M).mean(axis=1)
        g = cfg.mu_bar + noise(cfg.K).mean(axis=1)
    else:
        # the Gaussian sample mean over M draws is exactly N(mu_bar, Sigma/M)
        mu = cfg.mu_bar + noise(1)[:, 0, :] / math.sqrt(cfg.M)
        g = cfg.mu_bar + noise(1)[:, 0, :] / math.sqrt(cfg.K)
    return int(np.count_nonzero(np.einsum("ti,ti->t", mu, g) <= 0.0))


def simulate_alignment(
    cfg: AlignmentConfig,
    workers: int = 1,
    explicit_sums: bool = False,
    check_bound: bool = True,
) -> AlignmentResult:
    """Monte Carlo estimate of P(mu.g <= 0) under the configured Gaussian model.

    Per trial the train/test average gradients are distributed as
    N(mu_bar, Sigma/M) and N(mu_bar, Sigma/K); by Gaussian stability these
    means are sampled directly (``explicit_sums=True`` draws all M + K
    vectors instead, for cross-validation). Trials are split into fixed
    chunks with counter-based per-chunk streams, so counts do not depend
    on the worker count. When the bound is defined and < 1, the Wilson
    upper limit is checked against it.
    """
    sizes = [_CHUNK_TRIALS] * (cfg.trials // _CHUNK_TRIALS)
    if cfg.trials % _CHUNK_TRIALS:
        sizes.append(cfg.trials % _CHUNK_TRIALS)
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(
                pool.map(lambda it: _chunk_failures(cfg, it[0], it[1], explicit_sums),
                         enumerate(sizes))
            )
        failures = sum(counts)
    else:
        failures = sum(
            _chunk_failures(cfg, i, s, explicit_sums) for i, s in enumerate(sizes)
        )

    rate = failures / cfg.trials
    upper = wilson_upper(failures, cfg.trials)
    try:
        bound = alignment_failure_bound(cfg)
        total, t1, t2, t3 = bound.total, bound.term_train, bound.term_test, bound.term_mixed
    except ZeroMeanSignal:
        total = t1 = t2 = t3 = math.nan
    # dominance is only resolvable when the Wilson floor at zero failures
    # sits below the bound; below that, no trial count this size can confirm it
    resolvable = (
        math.isfinite(total) and total < 1.0
        and wilson_upper(0, cfg.trials) <= total
    )
    if check_bound and resolvable and upper > total:
        raise DominanceViolation(
            f"Wilson upper {upper:.6g} exceeds bound {total:.6g} "
            f"(failures {failures}/{cfg.trials})"
        )
    return AlignmentResult(
        empirical_fail_rate=rate,
        wilson_ci_upper=upper,
        theorem_bound=total,
        term_train=t1,
        term_test=t2,
        term_mixed=t3,
        failures=failures,
        trials=cfg.trials,
    )


# ---------------------------------------------------------------------------
# grid runner and CSV

ALIGNMENT_CSV_FIELDS = [
    "N", "M", "K", "mu_bar_norm_sq", "tau_sq", "C_sigma",
    "empirical_rate", "wilson_upper", "bound", "term_train", "term_test", "term_mixed",
]


def alignment_row(cfg: AlignmentConfig, result: AlignmentResult) -> dict:
    return {
        "N": cfg.N,
        "M": cfg.M,
        "K": cfg.K,
        "mu_bar_norm_sq": float(cfg.mu_bar @ cfg.mu_bar),
        "tau_sq": cfg.tau_sq,
        "C_sigma": cfg.C_sigma,
        "empirical_rate": result.empirical_fail_rate,
        "wilson_upper": result.wilson_ci_upper,
        "bound": result.theorem_bound,
        "term_train": result.term_train,
        "term_test": result.term_test,
        "term_mixed": result.term_mixed,
    }


def run_alignment_grid(configs: list[AlignmentConfig], workers: int = 1,
                       check_bound: bool = True) -> list[dict]:
    return [
        alignment_row(cfg, simulate_alignment(cfg, workers=workers, check_bound=check_bound))
        for cfg in configs
    ]


def write_csv(rows: list[dict], fields: list[str], path) -> None:
    """Plain CSV with a header row, '.' decimals, repr-exact floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
