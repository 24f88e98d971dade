"""Jumpboard construction from activation gradients.

Builds zero-output expansion blocks ``h(z) = V psi(z)`` with ``V = 0``,
extracts per-sample activation gradients at the insertion layer, forms the
canonical descent direction ``DeltaV = -C_S`` from the gradient/feature
outer-product mean, steps it with a backtracking line search, applies the
train-loss fallback selection, and measures every improvement margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignlab import sample_offdiag_covariance
from .ndcore import as_tensor
from .netmodel import Model, build_forward, network_loss, spectral_norm, project_norms

FEATURE_KINDS = ("relu", "bias")

DESCENT_TOLERANCE = 1e-10


class JumpboardError(Exception):
    pass


class EmptyDataset(JumpboardError):
    pass


class NoDescentDirection(JumpboardError):
    """The outer-product signal is numerically zero: the first-order
    mechanism is exhausted at this insertion layer (deepest-model regime)."""


# ---------------------------------------------------------------------------
# block


@dataclass(eq=False)
class JumpboardBlock:
    """Zero-output residual block ``h(z) = V psi(z)``.

    ``psi_params`` holds the frozen feature extractor U0 (relu kind:
    psi(z) = relu(U0 z); bias kind: psi(z) = 1, a pure shift). With
    ``v = 0`` the block output is identically zero and the expanded
    network reproduces the old one.
    """

    psi_params: np.ndarray          # (m, N); unused for the bias kind beyond its width
    v: np.ndarray                   # (N, m)
    feature_kind: str = "relu"
    direction: np.ndarray | None = None   # DeltaV
    eta: float = 0.0
    v_spectral_cap: float = 1.0
    v_frobenius_cap: float = 1.0

    def __post_init__(self):
        self.psi_params = as_tensor(self.psi_params)
        self.v = as_tensor(self.v)
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")
        if self.v.shape != (self.psi_params.shape[1], self.psi_params.shape[0]):
            raise ValueError(f"v shape {self.v.shape} inconsistent with psi {self.psi_params.shape}")

    @property
    def feature_dim(self) -> int:
        return self.psi_params.shape[0]

    def at_eta(self, eta: float) -> "JumpboardBlock":
        """Block stepped to ``V = eta * DeltaV`` (projected onto the V caps)."""
        if self.direction is None:
            raise ValueError("block has no direction")
        v = project_norms(eta * self.direction, self.v_spectral_cap, self.v_frobenius_cap)
        return JumpboardBlock(
            psi_params=self.psi_params,
            v=v,
            feature_kind=self.feature_kind,
            direction=self.direction,
            eta=float(eta),
            v_spectral_cap=self.v_spectral_cap,
            v_frobenius_cap=self.v_frobenius_cap,
        )

    def with_v(self, v: np.ndarray) -> "JumpboardBlock":
        return JumpboardBlock(
            psi_params=self.psi_params,
            v=as_tensor(v),
            feature_kind=self.feature_kind,
            direction=self.direction,
            eta=self.eta,
            v_spectral_cap=self.v_spectral_cap,
            v_frobenius_cap=self.v_frobenius_cap,
        )

    # constants consumed by the architecture inventory
    def input_lipschitz_cap(self) -> float:
        if self.feature_kind == "bias":
            return 0.0
        return self.v_spectral_cap * spectral_norm(self.psi_params)

    def offset_cap(self) -> float:
        return self.v_frobenius_cap if self.feature_kind == "bias" else 0.0

    def param_lipschitz(self, b_star: float) -> float:
        # bias features are constant: ||dh|| = ||dV||_F, so fold out the B_* factor
        if self.feature_kind == "bias":
            return 1.0 / b_star
        return spectral_norm(self.psi_params)

    def to_dict(self) -> dict:
        return {
            "psi_params": self.psi_params.tolist(),
            "v": self.v.tolist(),
            "feature_kind": self.feature_kind,
            "direction": None if self.direction is None else self.direction.tolist(),
            "eta": self.eta,
            "v_spectral_cap": self.v_spectral_cap,
            "v_frobenius_cap": self.v_frobenius_cap,
        }

    @staticmethod
    def from_dict(d: dict) -> "JumpboardBlock":
        return JumpboardBlock(
            psi_params=as_tensor(d["psi_params"]),
            v=as_tensor(d["v"]),
            feature_kind=d["feature_kind"],
            direction=None if d["direction"] is None else as_tensor(d["direction"]),
            eta=float(d["eta"]),
            v_spectral_cap=float(d["v_spectral_cap"]),
            v_frobenius_cap=float(d["v_frobenius_cap"]),
        )


def make_block(
    width: int,
    feature_dim: int,
    seed: int,
    feature_kind: str = "relu",
    v_spectral_cap: float = 1.0,
    v_frobenius_cap: float = 1.0,
) -> JumpboardBlock:
    """Fresh zero-output block; U0 entries drawn N(0, 1/width)."""
    if feature_kind == "bias":
        u0 = np.zeros((1, width))
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7073690A]))
        u0 = rng.standard_normal((feature_dim, width)) / math.sqrt(width)
    return JumpboardBlock(
        psi_params=u0,
        v=np.zeros((width, u0.shape[0])),
        feature_kind=feature_kind,
        v_spectral_cap=v_spectral_cap,
        v_frobenius_cap=v_frobenius_cap,
    )


def psi_features(block: JumpboardBlock, z: np.ndarray) -> np.ndarray:
    """Frozen branch features psi(z) for representations ``z`` (M, N)."""
    z = np.atleast_2d(as_tensor(z))
    if block.feature_kind == "bias":
        return np.ones((z.shape[0], 1))
    return np.maximum(z @ block.psi_params.T, 0.0)


# ---------------------------------------------------------------------------
# gradient statistics


@dataclass(eq=False)
class GradientStats:
    """Activation-gradient summaries at the insertion layer."""

    mu: np.ndarray                       # train average, (N,)
    g: np.ndarray                        # test average, (N,)
    per_sample_grads: np.ndarray | None  # (M, N) train rows
    sigma_diag: np.ndarray               # per-coordinate variances, ddof=1
    offdiag_samples: np.ndarray          # sampled off-diagonal covariance entries
    mu_norm_sq: float
    g_norm_sq: float
    mu_dot_g: float


def activation_gradients(model: Model, x, labels) -> tuple[np.ndarray, np.ndarray]:
    """(per-sample activation gradients at the insertion layer, representations).

    The forward pass records the sum loss, so the gradient rows at the
    insertion node are exactly the per-sample gradients; the summation
    order of any later averaging is fixed by the row order of ``x``.
    """
    x = np.atleast_2d(as_tensor(x))
    if x.shape[0] == 0:
        raise EmptyDataset("no samples")
    fp = build_forward(model, x, labels=labels, reduction="sum")
    fp.tape.backward(fp.loss)
    return fp.tape.grad_at(fp.z_star), fp.z_star.value


def collect_gradient_stats(
    model: Model,
    train: tuple,
    test: tuple,
    pair_samples: int = 0,
    pair_seed: int = 0,
    keep_per_sample: bool = True,
) -> GradientStats:
    """Exact sample means and covariance summaries of activation gradients."""
    x_train, y_train = train
    x_test, y_test = test
    q_train, _ = activation_gradients(model, x_train, y_train)
    q_test, _ = activation_gradients(model, x_test, y_test)
    mu = q_train.mean(axis=0)
    g = q_test.mean(axis=0)
    m = q_train.shape[0]
    sigma_diag = q_train.var(axis=0, ddof=1) if m >= 2 else np.zeros(q_train.shape[1])
    offdiag, _ = sample_offdiag_covariance(q_train, pair_samples, pair_seed) if m >= 2 else (
        np.zeros(0), None,
    )
    return GradientStats(
        mu=mu,
        g=g,
        per_sample_grads=q_train if keep_per_sample else None,
        sigma_diag=sigma_diag,
        offdiag_samples=offdiag,
        mu_norm_sq=float(mu @ mu),
        g_norm_sq=float(g @ g),
        mu_dot_g=float(mu @ g),
    )


# ---------------------------------------------------------------------------
# descent directions


def empirical_descent_direction(
    per_sample_grads: np.ndarray, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(C_S, DeltaV = -C_S) from per-sample gradients (M, N) and features (M, m).

    C_S is the exact outer-product mean (1/M) sum_i q_i psi_i^T. The
    first-order derivative of the train loss along DeltaV is -||C_S||_F^2.
    Raises NoDescentDirection when ||C_S||_F <= 1e-10.
    """
    q = np.atleast_2d(as_tensor(per_sample_grads))
    psi = np.atleast_2d(as_tensor(features))
    if q.shape[0] == 0:
        raise EmptyDataset("no samples")
    if q.shape[0] != psi.shape[0]:
        raise ValueError(f"sample counts differ: {q.shape[0]} vs {psi.shape[0]}")
    c_s = q.T @ psi / q.shape[0]
    if float(np.linalg.norm(c_s)) <= DESCENT_TOLERANCE:
        raise NoDescentDirection(
            f"||C_S||_F = {np.linalg.norm(c_s):.3e} <= {DESCENT_TOLERANCE:g}"
        )
    return c_s, -c_s


def population_descent_direction(
    per_sample_grads: np.ndarray, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Population-proxy direction from a held-out estimation set.

    Same outer-product formula as the empirical version; the caller must
    pass gradients/features computed on an estimation set disjoint from
    train and test, which proxies the unobservable true expectation.
    """
    return empirical_descent_direction(per_sample_grads, features)


# ---------------------------------------------------------------------------
# line search and selection


def line_search_eta(
    model: Model,
    block: JumpboardBlock,
    x,
    labels,
    eta0: float = 0.1,
    armijo: float = 1e-4,
    max_halvings: int = 60,
) -> tuple[float, bool]:
    """Backtracking step size along the block's DeltaV.

    Returns (eta, degenerate). A non-degenerate eta gives a strict train
    loss decrease; eta = 0 with degenerate=True means no trial step
    decreased the loss (floating-point exhaustion of the direction).
    """
    if block.direction is None:
        raise ValueError("block has no direction")
    base = network_loss(model, x, labels)
    slope = -float(np.sum(block.direction * block.direction))
    if slope == 0.0:
        return 0.0, True
    eta = float(eta0)
    for _ in range(max_halvings + 1):
        value = network_loss(model.with_block(block.at_eta(eta)), x, labels)
        if value <= base + armijo * eta * slope and value < base:
            return eta, False
        eta *= 0.5
    return 0.0, True


def select_final_model(
    model_alg: Model, model_jump: Model, x, labels
) -> tuple[Model, float]:
    """Fallback selection: train-loss argmin of the two candidates.

    Ties prefer the optimizer output. Returns (selected, delta_ERM) with
    delta_ERM = L_train(jump) - L_train(selected) >= 0.
    """
    loss_alg = network_loss(model_alg, x, labels)
    loss_jump = network_loss(model_jump, x, labels)
    if loss_alg <= loss_jump:
        return model_alg, loss_jump - loss_alg
    return model_jump, 0.0


# ---------------------------------------------------------------------------
# margins


@dataclass
class MarginReport:
    """All measured losses and improvement margins for one expansion run."""

    delta_train_S: float
    delta_R_test: float
    delta_ERM: float
    L_train_old: float
    L_train_jump: float
    L_train_new: float
    L_test_old: float
    L_test_jump: float
    L_test_new: float
    L_proxy_old: float | None = None
    L_proxy_jump: float | None = None
    L_proxy_new: float | None = None

    @property
    def delta_R_proxy(self) -> float | None:
        if self.L_proxy_old is None or self.L_proxy_jump is None:
            return None
        return self.L_proxy_old - self.L_proxy_jump

    def to_record(self) -> dict:
        rec = {
            "delta_train_S": self.delta_train_S,
            "delta_R_test": self.delta_R_test,
            "delta_ERM": self.delta_ERM,
            "L_train_old": self.L_train_old,
            "L_train_jump": self.L_train_jump,
            "L_train_new": self.L_train_new,
            "L_test_old": self.L_test_old,
            "L_test_jump": self.L_test_jump,
            "L_test_new": self.L_test_new,
        }
        if self.L_proxy_old is not None:
            rec["L_proxy_old"] = self.L_proxy_old
            rec["L_proxy_jump"] = self.L_proxy_jump
            rec["L_proxy_new"] = self.L_proxy_new
        return rec

    @staticmethod
    def from_record(rec: dict) -> "MarginReport":
        return MarginReport(
            delta_train_S=float(rec["delta_train_S"]),
            delta_R_test=float(rec["delta_R_test"]),
            delta_ERM=float(rec["delta_ERM"]),
            L_train_old=float(rec["L_train_old"]),
            L_train_jump=float(rec["L_train_jump"]),
            L_train_new=float(rec["L_train_new"]),
            L_test_old=float(rec["L_test_old"]),
            L_test_jump=float(rec["L_test_jump"]),
            L_test_new=float(rec["L_test_new"]),
            L_proxy_old=float(rec["L_proxy_old"]) if "L_proxy_old" in rec else None,
            L_proxy_jump=float(rec["L_proxy_jump"]) if "L_proxy_jump" in rec else None,
            L_proxy_new=float(rec["L_proxy_new"]) if "L_proxy_new" in rec else None,
        )


def measure_margins(
    model_old: Model,
    model_jump: Model,
    model_new: Model,
    train: tuple,
    test: tuple,
    proxy: tuple | None = None,
) -> MarginReport:
    """Evaluate the six losses and three margins exactly per their definitions."""
    x_tr, y_tr = train
    x_te, y_te = test
    l_train = [network_loss(m, x_tr, y_tr) for m in (model_old, model_jump, model_new)]
    l_test = [network_loss(m, x_te, y_te) for m in (model_old, model_jump, model_new)]
    l_proxy = [None, None, None]
    if proxy is not None:
        x_px, y_px = proxy
        l_proxy = [network_loss(m, x_px, y_px) for m in (model_old, model_jump, model_new)]
    return MarginReport(
        delta_train_S=l_train[0] - l_train[1],
        delta_R_test=l_test[0] - l_test[1],
        delta_ERM=l_train[1] - l_train[2],
        L_train_old=l_train[0],
        L_train_jump=l_train[1],
        L_train_new=l_train[2],
        L_test_old=l_test[0],
        L_test_jump=l_test[1],
        L_test_new=l_test[2],
        L_proxy_old=l_proxy[0],
        L_proxy_jump=l_proxy[1],
        L_proxy_new=l_proxy[2],
    )


def first_order_test_margin(stats: GradientStats, eta: float) -> float:
    """Predicted finite-test margin eta * mu.g of a small bias-type jump step.

    The measured margin of a bias block stepped by eta differs from this
    prediction by an O(eta^2) remainder.
    """
    return float(eta) * stats.mu_dot_g
