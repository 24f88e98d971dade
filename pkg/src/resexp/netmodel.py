"""Normalized residual networks with certified architecture constants.

A model is a stack of residual layers ``T_l(z) = N_l(z + h_l(z))`` between a
linear input embedding and a linear head, where ``N_l`` is an
epsilon-stabilized RMSNorm/LayerNorm or a fixed-statistics BatchNorm and
``h_l(z) = W2 relu(W1 z)``. The module owns:

* forward evaluation on an ndcore tape, including the decomposition at an
  insertion layer and an optional zero-initialized expansion block,
* spectral/Frobenius norm projection of parameters onto their declared caps,
* the constant inventory (norm Lipschitz factors, layer amplification
  constants, loss bounds) that feeds the generalization-bound formulas,
* bit-exact JSON serialization of specs and states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ndcore
from .ndcore import Tape, as_tensor

NORM_KINDS = ("rmsnorm_eps", "layernorm_eps", "fixed_batchnorm")
LOSS_KINDS = ("softmax_xent", "squared")

MODEL_FORMAT = "resexp-model"
MODEL_VERSION = 1


class NetmodelError(Exception):
    pass


class InputTooLarge(NetmodelError):
    pass


# ---------------------------------------------------------------------------
# specs and states


@dataclass(eq=False)
class NetworkSpec:
    """Architecture description; parameters live in NetworkState."""

    depth: int
    width: int
    norm_kind: str
    eps_eng: float
    gamma: np.ndarray
    insertion_layer: int
    output_dim: int
    input_dim: int
    branch_dim: int
    input_bound: float
    residual_branch_kind: str = "mlp2"
    branch_spectral_cap: float = 1.0
    branch_frobenius_cap: float = 4.0
    embed_spectral_cap: float = 2.0
    top_spectral_cap: float = 2.0
    loss_kind: str = "softmax_xent"
    target_bound: float = 0.0

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.residual_branch_kind != "mlp2":
            raise ValueError(f"unknown residual_branch_kind {self.residual_branch_kind!r}")
        if self.eps_eng <= 0:
            raise ValueError("eps_eng must be positive")
        if not (0 <= self.insertion_layer <= self.depth):
            raise ValueError(f"insertion_layer {self.insertion_layer} outside [0, {self.depth}]")
        if self.gamma.shape != (self.width,):
            raise ValueError(f"gamma shape {self.gamma.shape} != ({self.width},)")
        if min(self.depth, self.width, self.output_dim, self.input_dim, self.branch_dim) < 1:
            if self.depth < 0:
                raise ValueError("depth must be >= 0")
            if min(self.width, self.output_dim, self.input_dim, self.branch_dim) < 1:
                raise ValueError("dimensions must be positive")

    @property
    def gamma_max(self) -> float:
        return float(np.max(np.abs(self.gamma)))


@dataclass(eq=False)
class NetworkState:
    """Trained parameters; treated as immutable, updates build new states."""

    w_embed: np.ndarray                      # (N, D)
    branches: list                           # [(W1 (m, N), W2 (N, m)), ...]
    w_top: np.ndarray                        # (C, N)
    bn_mean: list | None = None              # depth+1 vectors, fixed_batchnorm only
    bn_var: list | None = None

    def copy(self) -> "NetworkState":
        return NetworkState(
            w_embed=self.w_embed.copy(),
            branches=[(w1.copy(), w2.copy()) for w1, w2 in self.branches],
            w_top=self.w_top.copy(),
            bn_mean=None if self.bn_mean is None else [m.copy() for m in self.bn_mean],
            bn_var=None if self.bn_var is None else [v.copy() for v in self.bn_var],
        )


@dataclass(eq=False)
class Model:
    """A spec/state pair plus an optional inserted expansion block."""

    spec: NetworkSpec
    state: NetworkState
    block: object | None = None  # duck-typed: .psi_params (m_ins, N), .v (N, m_ins)

    def with_block(self, block) -> "Model":
        return Model(self.spec, self.state, block)


def init_state(spec: NetworkSpec, seed: int) -> NetworkState:
    """Seeded Gaussian initialization, projected onto the declared norm caps."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E65746D]))
    n, d, m, c = spec.width, spec.input_dim, spec.branch_dim, spec.output_dim
    w_embed = rng.standard_normal((n, d)) / math.sqrt(d)
    branches = []
    for _ in range(spec.depth):
        w1 = rng.standard_normal((m, n)) / math.sqrt(n)
        w2 = rng.standard_normal((n, m)) / math.sqrt(m)
        branches.append((w1, w2))
    w_top = rng.standard_normal((c, n)) / math.sqrt(n)
    state = NetworkState(w_embed=w_embed, branches=branches, w_top=w_top)
    if spec.norm_kind == "fixed_batchnorm":
        state.bn_mean = [np.zeros(n) for _ in range(spec.depth + 1)]
        state.bn_var = [np.ones(n) for _ in range(spec.depth + 1)]
    return project_state(spec, state)


# ---------------------------------------------------------------------------
# normalization maps (pure evaluation; the tape primitives mirror these)


def rmsnorm_eps(x, gamma, eps: float) -> np.ndarray:
    """diag(gamma) x / sqrt(||x||^2/N + eps); output norm <= gamma_max sqrt(N)."""
    x, gamma = as_tensor(x), as_tensor(gamma)
    n = x.shape[-1]
    s = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) / n + eps)
    return gamma * x / s


def layernorm_eps(x, gamma, eps: float) -> np.ndarray:
    x, gamma = as_tensor(x), as_tensor(gamma)
    c = x - x.mean(axis=-1, keepdims=True)
    n = x.shape[-1]
    s = np.sqrt(np.sum(c * c, axis=-1, keepdims=True) / n + eps)
    return gamma * c / s


def batchnorm_fixed_map(x, gamma, beta, mean, var, eps: float) -> np.ndarray:
    x = as_tensor(x)
    coef = as_tensor(gamma) / np.sqrt(as_tensor(var) + eps)
    return coef * (x - as_tensor(mean)) + as_tensor(beta)


def fixed_batchnorm_constant(gamma, var, eps: float) -> float:
    """Lipschitz factor max_i |gamma_i| / sqrt(var_i + eps) of the frozen map."""
    return float(np.max(np.abs(as_tensor(gamma)) / np.sqrt(as_tensor(var) + eps)))


def norm_lipschitz_constant(spec: NetworkSpec, state: NetworkState | None = None) -> np.ndarray:
    """Certified Lipschitz bound of each normalization layer (embed norm first).

    Epsilon-stabilized RMSNorm/LayerNorm admit the uniform bound
    2 gamma_max / sqrt(eps_eng); fixed-statistics BatchNorm uses its frozen
    per-layer variances.
    """
    n_layers = spec.depth + 1
    if spec.norm_kind in ("rmsnorm_eps", "layernorm_eps"):
        c = 2.0 * spec.gamma_max / math.sqrt(spec.eps_eng)
        return np.full(n_layers, c)
    if state is None or state.bn_var is None:
        raise ValueError("fixed_batchnorm requires a state with frozen statistics")
    return np.array(
        [fixed_batchnorm_constant(spec.gamma, state.bn_var[i], spec.eps_eng) for i in range(n_layers)]
    )


# ---------------------------------------------------------------------------
# forward evaluation


@dataclass(eq=False)
class ForwardPass:
    tape: Tape
    x: ndcore.Node
    z_star: ndcore.Node
    output: ndcore.Node
    loss: ndcore.Node | None
    weights: dict  # name -> Node for trainable weights ("embed", "w1_0", ..., "top", "block_v")


def _apply_norm(tape: Tape, spec: NetworkSpec, state: NetworkState, z, layer_index: int):
    if spec.norm_kind == "rmsnorm_eps":
        return tape.rmsnorm(z, spec.gamma, spec.eps_eng)
    if spec.norm_kind == "layernorm_eps":
        return tape.layernorm(z, spec.gamma, spec.eps_eng)
    return tape.batchnorm_fixed(
        z, spec.gamma, np.zeros(spec.width), state.bn_mean[layer_index],
        state.bn_var[layer_index], spec.eps_eng,
    )


def build_forward(
    model: Model,
    x,
    labels=None,
    reduction: str = "mean",
    check_input: bool = True,
) -> ForwardPass:
    """Record a full forward pass on a fresh tape.

    ``x`` has shape (B, input_dim) or (input_dim,). When ``labels`` is given a
    loss node is recorded (integer class labels for softmax_xent, target
    vectors for squared loss). The inserted block, when present, contributes
    ``z + V relu(U0 z)`` at the insertion layer; with V = 0 this recovers the
    base network output exactly.
    """
    spec, state, block = model.spec, model.state, model.block
    x = as_tensor(x)
    if check_input:
        norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
        if np.any(norms > spec.input_bound * (1 + 1e-12) + 1e-12):
            raise InputTooLarge(
                f"input norm {norms.max():.6g} exceeds bound {spec.input_bound:.6g}"
            )
    tape = Tape()
    weights: dict = {}
    xn = tape.input(x)
    w_embed = tape.input(state.w_embed)
    weights["embed"] = w_embed
    z = _apply_norm(tape, spec, state, tape.linear(xn, w_embed), 0)

    z_star = None

    def insert_block(z_node):
        v = tape.input(block.v)
        weights["block_v"] = v
        if getattr(block, "feature_kind", "relu") == "bias":
            feat_shape = z_node.shape[:-1] + (block.v.shape[1],)
            psi = tape.input(np.ones(feat_shape))
        else:
            u0 = tape.input(block.psi_params)
            weights["block_u0"] = u0
            psi = tape.relu(tape.linear(z_node, u0))
        return tape.add(z_node, tape.linear(psi, v))

    for l in range(spec.depth + 1):
        if l == spec.insertion_layer:
            z_star = z
            if block is not None:
                z = insert_block(z)
        if l < spec.depth:
            w1 = tape.input(state.branches[l][0])
            w2 = tape.input(state.branches[l][1])
            weights[f"w1_{l}"] = w1
            weights[f"w2_{l}"] = w2
            h = tape.linear(tape.relu(tape.linear(z, w1)), w2)
            z = _apply_norm(tape, spec, state, tape.add(z, h), l + 1)

    w_top = tape.input(state.w_top)
    weights["top"] = w_top
    output = tape.linear(z, w_top)

    loss = None
    if labels is not None:
        if spec.loss_kind == "softmax_xent":
            loss = tape.softmax_cross_entropy(output, labels, reduction=reduction)
        else:
            loss = tape.squared_error(output, labels, reduction=reduction)
    return ForwardPass(tape=tape, x=xn, z_star=z_star, output=output, loss=loss, weights=weights)


def forward_decomposed(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    """Return (representation at the insertion layer, network output)."""
    fp = build_forward(model, x)
    return fp.z_star.value, fp.output.value


def network_output(model: Model, x) -> np.ndarray:
    return build_forward(model, x).output.value


def network_loss(model: Model, x, labels, reduction: str = "mean") -> float:
    fp = build_forward(model, x, labels=labels, reduction=reduction)
    return float(fp.loss.value)


# ---------------------------------------------------------------------------
# norm projection


def spectral_norm(w: np.ndarray) -> float:
    return float(np.linalg.norm(w, 2))


def project_norms(
    w: np.ndarray,
    spectral_cap: float | None = None,
    frobenius_cap: float | None = None,
) -> np.ndarray:
    """Radially rescale ``w`` until both norm caps hold; feasible input is returned unchanged.

    Caps are compared with 1e-12 relative slack so that the projection is
    exactly idempotent despite rescaling round-off.
    """
    w = as_tensor(w)
    scale = 1.0
    if spectral_cap is not None:
        s = spectral_norm(w)
        if s > spectral_cap * (1.0 + 1e-12):
            scale = min(scale, spectral_cap / s)
    if frobenius_cap is not None:
        f = float(np.linalg.norm(w))
        if f > frobenius_cap * (1.0 + 1e-12):
            scale = min(scale, frobenius_cap / f)
    if scale >= 1.0:
        return w
    return w * scale


def project_state(spec: NetworkSpec, state: NetworkState) -> NetworkState:
    """Project every weight matrix onto its declared caps."""
    branches = [
        (
            project_norms(w1, spec.branch_spectral_cap, spec.branch_frobenius_cap),
            project_norms(w2, spec.branch_spectral_cap, spec.branch_frobenius_cap),
        )
        for w1, w2 in state.branches
    ]
    return NetworkState(
        w_embed=project_norms(state.w_embed, spec.embed_spectral_cap),
        branches=branches,
        w_top=project_norms(state.w_top, spec.top_spectral_cap),
        bn_mean=state.bn_mean,
        bn_var=state.bn_var,
    )


# ---------------------------------------------------------------------------
# architecture constants


@dataclass
class LayerEntry:
    """Constants of one parameter block in forward order."""

    label: str
    c: float        # Lipschitz factor of the normalization applied after the block
    s: float        # input-Lipschitz bound of the branch
    L_p: float      # parameter-Lipschitz constant
    d: int          # parameter dimension
    b: float        # Frobenius radius of the block's parameter ball
    covered: bool   # participates in the covering (varies over the class)


@dataclass
class ArchConstants:
    """Constant inventory feeding the covering-number generalization bound."""

    B_ell: float
    L_ell: float
    L_top: float
    B_0: float
    gamma_max: float
    B_x: float
    B_norm: float
    B_star: float
    entries: list[LayerEntry] = field(default_factory=list)
    Lambda_l: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def c_l(self) -> np.ndarray:
        return np.array([e.c for e in self.entries])

    @property
    def s_l(self) -> np.ndarray:
        return np.array([e.s for e in self.entries])

    @property
    def b_l(self) -> np.ndarray:
        return np.array([e.b for e in self.entries if e.covered])

    @property
    def L_l_p(self) -> np.ndarray:
        return np.array([e.L_p for e in self.entries])

    @property
    def d_l(self) -> np.ndarray:
        return np.array([e.d for e in self.entries if e.covered], dtype=np.int64)

    @property
    def d(self) -> int:
        return int(self.d_l.sum())

    @property
    def b_bar(self) -> float:
        return float(self.b_l.max())

    @property
    def n_layers(self) -> int:
        """Number of covered parameter blocks (the covering radius is split among them)."""
        return int(sum(1 for e in self.entries if e.covered))

    @property
    def Lambda_max(self) -> float:
        lam = [l for l, e in zip(self.Lambda_l, self.entries) if e.covered]
        return float(max(lam))


def lambda_amplifications(entries: list[LayerEntry], l_top: float, b_star: float) -> np.ndarray:
    """Output sensitivity of each block: L_top L_p B_* c_i prod_{j>i} c_j (1 + s_j)."""
    lams = []
    for i, e in enumerate(entries):
        prod = 1.0
        for later in entries[i + 1:]:
            prod *= later.c * (1.0 + later.s)
        lams.append(l_top * e.L_p * b_star * e.c * prod)
    return np.array(lams)


def loss_constants(spec: NetworkSpec, b_out: float) -> tuple[float, float]:
    """(bound, Lipschitz constant) of the loss on the reachable output set."""
    if spec.loss_kind == "softmax_xent":
        return math.log(spec.output_dim) + 2.0 * b_out, math.sqrt(2.0)
    reach = b_out + spec.target_bound
    return 0.5 * reach**2, reach


def compute_arch_constants(
    model: Model,
    covered: str = "layers",
) -> ArchConstants:
    """Assemble the full constant inventory for ``model``.

    ``covered`` selects the hypothesis class the covering ranges over:
    "layers" covers every residual layer (plus the inserted block if
    present); "block" covers only the inserted block's output projection,
    everything else frozen — the class actually searched during expansion.
    Frozen blocks still contribute their propagation factors.
    """
    spec, state, block = model.spec, model.state, model.block
    if covered not in ("layers", "block"):
        raise ValueError(f"unknown covered scope {covered!r}")
    if covered == "block" and block is None:
        raise ValueError("covered='block' requires an inserted block")

    c_norm = norm_lipschitz_constant(spec, state)
    s_branch = spec.branch_spectral_cap**2
    lp_branch = math.sqrt(2.0) * spec.branch_spectral_cap
    d_branch = 2 * spec.branch_dim * spec.width
    b_branch = math.sqrt(2.0) * spec.branch_frobenius_cap
    layer_cov = covered == "layers"

    gamma_max = spec.gamma_max
    if spec.norm_kind in ("rmsnorm_eps", "layernorm_eps"):
        b_norm = gamma_max * math.sqrt(spec.width)
    else:
        # affine BatchNorm: propagate the reachable-set bound layer by layer
        bound = float(c_norm[0]) * spec.embed_spectral_cap * spec.input_bound
        b_norm = bound
        for l in range(spec.depth):
            bound = float(c_norm[l + 1]) * (1.0 + s_branch) * bound
            b_norm = max(b_norm, bound)

    # an inserted block is not followed by a normalization, so it elevates
    # the bound on representations reaching later branches and the head
    if block is not None:
        s_block = block.input_lipschitz_cap()
        b_repr = b_norm * (1.0 + s_block) + block.offset_cap()
    else:
        s_block = 0.0
        b_repr = b_norm
    b_star = max(spec.input_bound, b_repr)

    entries: list[LayerEntry] = []
    for l in range(spec.depth + 1):
        if l == spec.insertion_layer and block is not None:
            entries.append(
                LayerEntry(
                    label="block",
                    c=1.0,  # no normalization after the inserted block
                    s=s_block,
                    L_p=block.param_lipschitz(b_star),
                    d=int(block.v.size),
                    b=block.v_frobenius_cap,
                    covered=True,
                )
            )
        if l < spec.depth:
            entries.append(
                LayerEntry(
                    label=f"layer_{l}",
                    c=float(c_norm[l + 1]),
                    s=s_branch,
                    L_p=lp_branch,
                    d=d_branch,
                    b=b_branch,
                    covered=layer_cov,
                )
            )

    l_top = spec.top_spectral_cap
    b_out = l_top * b_repr  # linear head: ||f_top(0)|| = 0
    b_ell, l_ell = loss_constants(spec, b_out)

    consts = ArchConstants(
        B_ell=b_ell,
        L_ell=l_ell,
        L_top=l_top,
        B_0=0.0,
        gamma_max=gamma_max,
        B_x=spec.input_bound,
        B_norm=b_norm,
        B_star=b_star,
        entries=entries,
    )
    consts.Lambda_l = lambda_amplifications(entries, l_top, b_star)
    return consts


# ---------------------------------------------------------------------------
# serialization (bit-exact for parameters: floats round-trip through repr)


def spec_to_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["gamma"] = spec.gamma.tolist()
    return d


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(**d)


def state_to_dict(state: NetworkState) -> dict:
    return {
        "w_embed": state.w_embed.tolist(),
        "branches": [[w1.tolist(), w2.tolist()] for w1, w2 in state.branches],
        "w_top": state.w_top.tolist(),
        "bn_mean": None if state.bn_mean is None else [m.tolist() for m in state.bn_mean],
        "bn_var": None if state.bn_var is None else [v.tolist() for v in state.bn_var],
    }


def state_from_dict(d: dict) -> NetworkState:
    return NetworkState(
        w_embed=as_tensor(d["w_embed"]),
        branches=[(as_tensor(w1), as_tensor(w2)) for w1, w2 in d["branches"]],
        w_top=as_tensor(d["w_top"]),
        bn_mean=None if d["bn_mean"] is None else [as_tensor(m) for m in d["bn_mean"]],
        bn_var=None if d["bn_var"] is None else [as_tensor(v) for v in d["bn_var"]],
    )


def model_to_dict(model: Model) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": spec_to_dict(model.spec),
        "state": state_to_dict(model.state),
        "block": None,
    }
    if model.block is not None:
        doc["block"] = model.block.to_dict()
    return doc


def save_model(model: Model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def model_from_dict(doc: dict, block_loader=None) -> Model:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    block = None
    if doc.get("block") is not None:
        if block_loader is None:
            from .jumpboard import JumpboardBlock

            block_loader = JumpboardBlock.from_dict
        block = block_loader(doc["block"])
    return Model(spec_from_dict(doc["spec"]), state_from_dict(doc["state"]), block)


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
