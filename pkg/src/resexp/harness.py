"""Desk-scale experiment pipelines on synthetic data.

Trains small normalized residual networks, runs the full depth-expansion
pipeline (gradient collection, descent direction, line search, block
fine-tuning, fallback selection, margin measurement, certification), and
sweeps depth/width/seed grids with resumable journaled execution.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import certify
from .jumpboard import (
    GradientStats,
    JumpboardBlock,
    MarginReport,
    NoDescentDirection,
    activation_gradients,
    collect_gradient_stats,
    empirical_descent_direction,
    first_order_test_margin,
    line_search_eta,
    make_block,
    measure_margins,
    psi_features,
    select_final_model,
)
from .ndcore import NonFinite, as_tensor
from .netmodel import (
    Model,
    NetworkSpec,
    NetworkState,
    build_forward,
    compute_arch_constants,
    init_state,
    network_loss,
    project_norms,
    project_state,
)


class HarnessError(Exception):
    pass


class DivergedTraining(HarnessError):
    pass


# ---------------------------------------------------------------------------
# synthetic tasks

TASK_KINDS = (
    "gaussian_mixture",
    "parity_mixture",
    "teacher_regression",
    "constant_input_regression",
)


@dataclass
class SyntheticTask:
    """Synthetic data family; train/test/proxy splits use disjoint sub-seeds.

    parity_mixture places clusters at the sign patterns of ``parity_dims``
    coordinates and labels them by parity, so extra depth genuinely buys
    fit (the class boundary is not linearly separable).
    """

    kind: str = "gaussian_mixture"
    classes: int = 4              # class count / regression target dimension
    input_dim: int = 16
    separation: float = 2.0
    noise_std: float = 0.1
    parity_dims: int = 2
    M: int = 2048
    K: int = 2048
    M_proxy: int = 20480
    seed: int = 0
    input_bound: float = 24.0
    target_bound: float = 8.0     # regression targets are clipped to this ball

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if min(self.M, self.K, self.M_proxy) < 1:
            raise ValueError("sample sizes must be positive")
        if self.kind == "parity_mixture":
            if self.classes != 2:
                raise ValueError("parity_mixture is a two-class task")
            if not (1 <= self.parity_dims <= self.input_dim):
                raise ValueError("parity_dims must lie in [1, input_dim]")


@dataclass
class Datasets:
    train: tuple
    test: tuple
    proxy: tuple


def _clip_rows(x: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return x * scale


def materialize_task(task: SyntheticTask) -> Datasets:
    """Draw the three splits; the distribution itself is fixed by the task seed."""
    root = np.random.SeedSequence([int(task.seed), 0x7461736B])
    dist_seq, train_seq, test_seq, proxy_seq = root.spawn(4)
    dist_rng = np.random.default_rng(dist_seq)

    if task.kind == "gaussian_mixture":
        raw = dist_rng.standard_normal((task.classes, task.input_dim))
        means = task.separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)

        def draw(seq, count):
            rng = np.random.default_rng(seq)
            y = rng.integers(0, task.classes, size=count)
            x = means[y] + rng.standard_normal((count, task.input_dim))
            return _clip_rows(x, task.input_bound), y

    elif task.kind == "parity_mixture":
        p = task.parity_dims

        def draw(seq, count):
            rng = np.random.default_rng(seq)
            bits = rng.integers(0, 2, size=(count, p))
            x = task.noise_std * rng.standard_normal((count, task.input_dim))
            x[:, :p] += (2 * bits - 1) * (task.separation / 2.0)
            y = bits.sum(axis=1) % 2
            return _clip_rows(x, task.input_bound), y

    elif task.kind == "teacher_regression":
        hidden = 2 * task.input_dim
        t1 = dist_rng.standard_normal((hidden, task.input_dim)) / math.sqrt(task.input_dim)
        t2 = dist_rng.standard_normal((task.classes, hidden)) / math.sqrt(hidden)

        def draw(seq, count):
            rng = np.random.default_rng(seq)
            x = rng.standard_normal((count, task.input_dim))
            x = _clip_rows(x, task.input_bound)
            y = np.maximum(x @ t1.T, 0.0) @ t2.T
            y = y + task.noise_std * rng.standard_normal(y.shape)
            return x, _clip_rows(y, task.target_bound)

    else:  # constant_input_regression: one fixed input, i.i.d. Gaussian targets
        base = dist_rng.standard_normal(task.input_dim)
        base = base / np.linalg.norm(base) * min(task.input_bound, math.sqrt(task.input_dim))

        def draw(seq, count):
            rng = np.random.default_rng(seq)
            x = np.tile(base, (count, 1))
            y = rng.standard_normal((count, task.classes))
            return x, _clip_rows(y, task.target_bound)

    return Datasets(
        train=draw(train_seq, task.M),
        test=draw(test_seq, task.K),
        proxy=draw(proxy_seq, task.M_proxy),
    )


def default_spec(
    task: SyntheticTask,
    depth: int,
    width: int,
    norm_kind: str = "rmsnorm_eps",
    eps_eng: float = 0.01,
    insertion_layer: int | None = None,
    branch_dim: int | None = None,
    **overrides,
) -> NetworkSpec:
    """Spec matched to a synthetic task; insertion defaults to the last layer."""
    classification = task.kind in ("gaussian_mixture", "parity_mixture")
    loss_kind = "softmax_xent" if classification else "squared"
    return NetworkSpec(
        depth=depth,
        width=width,
        norm_kind=norm_kind,
        eps_eng=eps_eng,
        gamma=np.ones(width),
        insertion_layer=depth if insertion_layer is None else insertion_layer,
        output_dim=task.classes,
        input_dim=task.input_dim,
        branch_dim=width if branch_dim is None else branch_dim,
        input_bound=task.input_bound,
        loss_kind=loss_kind,
        target_bound=task.target_bound if loss_kind == "squared" else 0.0,
        **overrides,
    )


# ---------------------------------------------------------------------------
# base training


@dataclass
class OptimizerConfig:
    """Plain SGD."""

    lr: float = 0.05
    steps: int = 400
    batch_size: int = 64


@dataclass
class TrainResult:
    state: NetworkState
    trace: list[float]
    initial_loss: float
    final_loss: float


_WEIGHT_KEYS = ("embed", "top")


def train_base(
    data: Datasets, spec: NetworkSpec, opt: OptimizerConfig, seed: int
) -> TrainResult:
    """SGD on all weights with norm projection after every step.

    Deterministic given the seed. Ends with a fallback between the final
    and initial parameters on the full train loss, so the returned state
    never trains to something worse than initialization.
    """
    x_all, y_all = data.train
    m = x_all.shape[0]
    state = init_state(spec, seed)
    model = Model(spec, state)
    initial_loss = network_loss(model, x_all, y_all)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5F736764]))
    batch = min(opt.batch_size, m)
    trace: list[float] = []
    perm = rng.permutation(m)
    cursor = 0
    try:
        for _ in range(opt.steps):
            if cursor + batch > m:
                perm = rng.permutation(m)
                cursor = 0
            idx = perm[cursor:cursor + batch]
            cursor += batch
            fp = build_forward(model, x_all[idx], labels=y_all[idx], reduction="mean")
            fp.tape.backward(fp.loss)
            trace.append(float(fp.loss.value))
            new_state = NetworkState(
                w_embed=state.w_embed - opt.lr * fp.tape.grad_at(fp.weights["embed"]),
                branches=[
                    (
                        w1 - opt.lr * fp.tape.grad_at(fp.weights[f"w1_{l}"]),
                        w2 - opt.lr * fp.tape.grad_at(fp.weights[f"w2_{l}"]),
                    )
                    for l, (w1, w2) in enumerate(state.branches)
                ],
                w_top=state.w_top - opt.lr * fp.tape.grad_at(fp.weights["top"]),
                bn_mean=state.bn_mean,
                bn_var=state.bn_var,
            )
            state = project_state(spec, new_state)
            model = Model(spec, state)
    except NonFinite as exc:
        raise DivergedTraining(str(exc)) from exc
    final_loss = network_loss(model, x_all, y_all)
    if final_loss > initial_loss:
        state, final_loss = init_state(spec, seed), initial_loss
    return TrainResult(state=state, trace=trace, initial_loss=initial_loss,
                       final_loss=final_loss)


# ---------------------------------------------------------------------------
# expansion pipeline


@dataclass
class ExpansionConfig:
    feature_kind: str = "relu"
    feature_dim: int | None = None        # defaults to the width
    block_seed: int = 0
    v_spectral_cap: float = 1.0
    v_frobenius_cap: float = 1.0
    eta0: float = 0.1
    armijo: float = 1e-4
    max_halvings: int = 60
    finetune_steps: int = 200
    finetune_lr: float = 0.1
    delta: float = 0.1
    insertion_policy: str = "last-layer"  # "last-layer" | "scan-all" | "fixed"
    pair_samples: int = 0


@dataclass
class ExpansionResult:
    margins: MarginReport
    certificate: certify.CertificateReport
    stats: GradientStats
    block: JumpboardBlock
    model_old: Model
    model_jump: Model
    model_new: Model
    eta: float
    degenerate: bool
    degenerate_reason: str | None
    insertion_layer: int
    predicted_first_order_margin: float

    def to_record(self) -> dict:
        rec = {"insertion_layer": self.insertion_layer, "eta": self.eta,
               "degenerate": self.degenerate,
               "degenerate_reason": self.degenerate_reason,
               "predicted_first_order_margin": self.predicted_first_order_margin,
               "mu_norm_sq": self.stats.mu_norm_sq, "g_norm_sq": self.stats.g_norm_sq,
               "mu_dot_g": self.stats.mu_dot_g}
        rec.update({f"margin.{k}": v for k, v in self.margins.to_record().items()})
        rec.update({f"certificate.{k}": v for k, v in self.certificate.to_record().items()})
        return rec


def _finetune_block(model: Model, block: JumpboardBlock, x, y,
                    steps: int, lr: float) -> JumpboardBlock:
    """Full-batch gradient steps on the block projection only; caps re-applied."""
    current = block
    for _ in range(steps):
        fp = build_forward(model.with_block(current), x, labels=y, reduction="mean")
        fp.tape.backward(fp.loss)
        v = current.v - lr * fp.tape.grad_at(fp.weights["block_v"])
        current = current.with_v(
            project_norms(v, current.v_spectral_cap, current.v_frobenius_cap)
        )
    return current


def _direction_at(model: Model, data: Datasets, cfg: ExpansionConfig,
                  insertion_layer: int) -> tuple[JumpboardBlock, float]:
    spec = replace(model.spec, insertion_layer=insertion_layer)
    probe = Model(spec, model.state)
    q, z = activation_gradients(probe, data.train[0], data.train[1])
    block = make_block(
        width=spec.width,
        feature_dim=cfg.feature_dim or spec.width,
        seed=cfg.block_seed,
        feature_kind=cfg.feature_kind,
        v_spectral_cap=cfg.v_spectral_cap,
        v_frobenius_cap=cfg.v_frobenius_cap,
    )
    try:
        c_s, delta_v = empirical_descent_direction(q, psi_features(block, z))
        block.direction = delta_v
        signal = float(np.linalg.norm(c_s))
    except NoDescentDirection:
        signal = 0.0
    return block, signal


def choose_insertion_layer(model: Model, data: Datasets, cfg: ExpansionConfig
                           ) -> tuple[int, JumpboardBlock, float]:
    """Insertion layer per policy; scan-all picks the largest ||C_S||_F."""
    depth = model.spec.depth
    if cfg.insertion_policy == "fixed":
        layers = [model.spec.insertion_layer]
    elif cfg.insertion_policy == "last-layer":
        layers = [depth]
    elif cfg.insertion_policy == "scan-all":
        layers = list(range(depth + 1))
    else:
        raise ValueError(f"unknown insertion policy {cfg.insertion_policy!r}")
    best = None
    for l in layers:
        block, signal = _direction_at(model, data, cfg, l)
        if best is None or signal > best[2]:
            best = (l, block, signal)
    return best


def expansion_pipeline(data: Datasets, base: Model, cfg: ExpansionConfig
                       ) -> ExpansionResult:
    """Collect -> direction -> line search -> fine-tune -> select -> measure -> certify."""
    l_star, block, signal = choose_insertion_layer(base, data, cfg)
    spec = replace(base.spec, insertion_layer=l_star)
    model_old = Model(spec, base.state)
    stats = collect_gradient_stats(
        model_old, data.train, data.test,
        pair_samples=cfg.pair_samples, pair_seed=cfg.block_seed, keep_per_sample=False,
    )

    degenerate = signal == 0.0
    degenerate_reason = "no-descent-direction" if degenerate else None
    x_tr, y_tr = data.train
    if degenerate:
        eta = 0.0
        block = block.with_v(np.zeros_like(block.v))
        model_jump = model_old.with_block(block)
    else:
        eta, no_step = line_search_eta(
            model_old, block, x_tr, y_tr,
            eta0=cfg.eta0, armijo=cfg.armijo, max_halvings=cfg.max_halvings,
        )
        if no_step:
            degenerate = True
            degenerate_reason = "no-accepted-step"
        model_jump = model_old.with_block(block.at_eta(eta))

    if cfg.finetune_steps > 0 and not degenerate:
        tuned = _finetune_block(model_old, model_jump.block, x_tr, y_tr,
                                cfg.finetune_steps, cfg.finetune_lr)
        model_alg = model_old.with_block(tuned)
    else:
        model_alg = model_jump
    model_new, _ = select_final_model(model_alg, model_jump, x_tr, y_tr)

    margins = measure_margins(model_old, model_jump, model_new,
                              data.train, data.test, proxy=data.proxy)
    consts = compute_arch_constants(model_jump, covered="block")
    cert = certify.build_certificate(
        margins, consts, m=x_tr.shape[0], k=data.test[0].shape[0], delta=cfg.delta,
    )
    return ExpansionResult(
        margins=margins,
        certificate=cert,
        stats=stats,
        block=model_jump.block,
        model_old=model_old,
        model_jump=model_jump,
        model_new=model_new,
        eta=eta,
        degenerate=degenerate,
        degenerate_reason=degenerate_reason,
        insertion_layer=l_star,
        predicted_first_order_margin=first_order_test_margin(stats, eta),
    )


def first_order_margin_audit(model: Model, data: Datasets, etas) -> list[dict]:
    """Measured vs predicted test margin of bias-type jumps at decreasing steps.

    The residual |measured - predicted| of the first-order prediction
    eta * mu.g shrinks quadratically in eta.
    """
    stats = collect_gradient_stats(model, data.train, data.test, keep_per_sample=False)
    block = make_block(model.spec.width, 1, seed=0, feature_kind="bias",
                       v_spectral_cap=math.inf, v_frobenius_cap=math.inf)
    block.direction = -stats.mu[:, None]
    x_te, y_te = data.test
    base = network_loss(model, x_te, y_te)
    rows = []
    for eta in etas:
        jump = model.with_block(block.at_eta(float(eta)))
        measured = base - network_loss(jump, x_te, y_te)
        predicted = first_order_test_margin(stats, float(eta))
        rows.append({"eta": float(eta), "measured": measured, "predicted": predicted,
                     "residual": abs(measured - predicted)})
    return rows


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepConfig:
    depths: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    widths: list[int] = field(default_factory=lambda: [8, 16])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    insertion_policy: str = "last-layer"
    norm_kind: str = "rmsnorm_eps"
    eps_eng: float = 0.01

    def __post_init__(self):
        if not (self.depths and self.widths and self.seeds):
            raise ValueError("depths, widths, seeds must be nonempty")


def _train_cell(task: SyntheticTask, sweep: SweepConfig, depth: int, width: int,
                seed: int) -> tuple[Model, Datasets, TrainResult]:
    cell_task = replace(task, seed=int(np.random.SeedSequence(
        [task.seed, seed, 0x63656C6C]).generate_state(1)[0]))
    data = materialize_task(cell_task)
    spec = default_spec(cell_task, depth, width, norm_kind=sweep.norm_kind,
                        eps_eng=sweep.eps_eng)
    result = train_base(data, spec, sweep.optimizer, seed)
    return Model(spec, result.state), data, result


def gradient_decay_cell(payload: dict) -> dict:
    """One (depth, width, seed) cell of the gradient-decay sweep."""
    task = SyntheticTask(**payload["task"])
    sweep = sweep_config_from_dict(payload["sweep"])
    depth, width, seed = payload["depth"], payload["width"], payload["seed"]
    model, data, _ = _train_cell(task, sweep, depth, width, seed)
    q, _ = activation_gradients(model, data.train[0], data.train[1])
    mu = q.mean(axis=0)
    return {"depth": depth, "width": width, "seed": seed,
            "mu_norm": float(np.linalg.norm(mu))}


def joint_scaling_cell(payload: dict) -> dict:
    """One (depth, width, seed) cell of the joint depth/width sweep."""
    task = SyntheticTask(**payload["task"])
    sweep = sweep_config_from_dict(payload["sweep"])
    depth, width, seed = payload["depth"], payload["width"], payload["seed"]
    model, data, _ = _train_cell(task, sweep, depth, width, seed)
    return {
        "depth": depth, "width": width, "seed": seed,
        "train_loss": network_loss(model, *data.train),
        "test_loss": network_loss(model, *data.test),
    }


def sweep_config_to_dict(cfg: SweepConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def sweep_config_from_dict(d: dict) -> SweepConfig:
    d = dict(d)
    if isinstance(d.get("optimizer"), dict):
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
    return SweepConfig(**d)


def _sweep_payloads(cfg: SweepConfig, task: SyntheticTask) -> list[dict]:
    base = {"task": dataclasses.asdict(task), "sweep": sweep_config_to_dict(cfg)}
    return [
        {**base, "depth": depth, "width": width, "seed": seed}
        for depth in cfg.depths for width in cfg.widths for seed in cfg.seeds
    ]


def _payload_key(payload: dict) -> str:
    return f"{payload['depth']}|{payload['width']}|{payload['seed']}"


def run_resumable(payloads: list[dict], worker, journal_path=None,
                  workers: int = 1, key_fn=_payload_key) -> list[dict]:
    """Execute independent cells with a journal of completed rows.

    Cells found in the journal are not recomputed; fresh rows are appended
    as they finish. Rows are returned in grid order, so completed output is
    identical whether or not the run was interrupted and resumed.
    """
    done: dict[str, dict] = {}
    if journal_path is not None and os.path.exists(journal_path):
        with open(journal_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                done[rec["key"]] = rec["row"]
    pending = [p for p in payloads if key_fn(p) not in done]
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(worker, pending))
    else:
        fresh = [worker(p) for p in pending]
    journal = open(journal_path, "a") if journal_path is not None else None
    try:
        for payload, row in zip(pending, fresh):
            done[key_fn(payload)] = row
            if journal is not None:
                journal.write(json.dumps({"key": key_fn(payload), "row": row}) + "\n")
                journal.flush()
    finally:
        if journal is not None:
            journal.close()
    return [done[key_fn(p)] for p in payloads]


GRADIENT_DECAY_FIELDS = ["depth", "width", "seed", "mu_norm", "mu_norm_normalized"]
JOINT_SCALING_FIELDS = ["depth", "width", "seed", "train_loss", "test_loss"]
JOINT_SUMMARY_FIELDS = ["depth", "width", "n_seeds", "train_loss_mean",
                        "train_loss_std", "test_loss_mean", "test_loss_std"]


def gradient_decay_sweep(cfg: SweepConfig, task: SyntheticTask, journal_path=None,
                         workers: int = 1) -> list[dict]:
    """Per-cell ||mu|| at the final pre-head layer, plus width-wise normalization
    by the shallowest depth."""
    rows = run_resumable(_sweep_payloads(cfg, task), gradient_decay_cell,
                         journal_path, workers)
    shallowest = min(cfg.depths)
    ref = {(r["width"], r["seed"]): r["mu_norm"] for r in rows
           if r["depth"] == shallowest}
    for r in rows:
        base = ref[(r["width"], r["seed"])]
        r["mu_norm_normalized"] = r["mu_norm"] / base if base > 0 else math.nan
    return rows


def joint_scaling_sweep(cfg: SweepConfig, task: SyntheticTask, journal_path=None,
                        workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Full factorial (depth, width, seed) grid; returns (rows, per-cell summary)."""
    rows = run_resumable(_sweep_payloads(cfg, task), joint_scaling_cell,
                         journal_path, workers)
    summary = []
    for depth in cfg.depths:
        for width in cfg.widths:
            cell = [r for r in rows if r["depth"] == depth and r["width"] == width]
            tr = np.array([r["train_loss"] for r in cell])
            te = np.array([r["test_loss"] for r in cell])
            summary.append({
                "depth": depth, "width": width, "n_seeds": len(cell),
                "train_loss_mean": float(tr.mean()),
                "train_loss_std": float(tr.std(ddof=1)) if len(cell) > 1 else 0.0,
                "test_loss_mean": float(te.mean()),
                "test_loss_std": float(te.std(ddof=1)) if len(cell) > 1 else 0.0,
            })
    return rows, summary
