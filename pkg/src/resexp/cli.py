"""Command-line entry point for every pipeline.

One binary, subcommand style; runs are configured from JSON files, with
flags only for paths, seeds, overrides, and worker caps. Every command
writes its data outputs plus a run manifest; re-running with the same
config and seed reproduces the data outputs byte for byte (the manifest
carries timestamps and is excluded from that guarantee).

Exit codes: 0 success, 2 config error, 3 numeric divergence,
4 degenerate direction (the expansion report is still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, alignlab, certify, harness, netmodel, scalelab
from .harness import (
    Datasets,
    DivergedTraining,
    ExpansionConfig,
    OptimizerConfig,
    SweepConfig,
    SyntheticTask,
    default_spec,
    expansion_pipeline,
    gradient_decay_sweep,
    joint_scaling_sweep,
    materialize_task,
    train_base,
)
from .jumpboard import MarginReport, activation_gradients

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DEGENERATE = 4

SEED_ENV = "RESEXP_SEED"

EXPANSION_FORMAT = "resexp-expansion"
EXPANSION_VERSION = 1


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        cfg = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top-level config must be an object")
    return cfg, raw


def _build(factory, section: dict, where: str):
    try:
        return factory(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _apply_seed_override(cfg: dict, override: int | None) -> list[int]:
    """RESEXP_SEED / --seed replace the config's top-level and task seeds."""
    if override is not None:
        if "seed" in cfg or "task" not in cfg:
            cfg["seed"] = override
        if isinstance(cfg.get("task"), dict):
            cfg["task"]["seed"] = override
    seeds = []
    if "seed" in cfg:
        seeds.append(int(cfg["seed"]))
    if isinstance(cfg.get("task"), dict) and "seed" in cfg["task"]:
        seeds.append(int(cfg["task"]["seed"]))
    if isinstance(cfg.get("sweep"), dict) and "seeds" in cfg["sweep"]:
        seeds.extend(int(s) for s in cfg["sweep"]["seeds"])
    return sorted(set(seeds))


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else None


def _out_dir(cfg: dict, args) -> str:
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("no output directory: set \"out\" in the config or pass --out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: str, command: str, config_raw: bytes, seeds: list[int],
                    outputs: list[str], started: float) -> None:
    manifest = {
        "format": "resexp-manifest",
        "version": 1,
        "command": command,
        "config_digest": hashlib.sha256(config_raw).hexdigest(),
        "seed_set": seeds,
        "artifact_version": __version__,
        "timestamps": {"started": started, "finished": time.time()},
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)


def _task_from_config(cfg: dict) -> SyntheticTask:
    return _build(SyntheticTask, cfg.get("task", {}), "task")


def _spec_from_config(cfg: dict, task: SyntheticTask) -> netmodel.NetworkSpec:
    section = dict(cfg.get("spec", {}))
    depth = section.pop("depth", 2)
    width = section.pop("width", 16)
    if "gamma" in section:
        section["gamma"] = np.asarray(section["gamma"], dtype=np.float64)
    try:
        return default_spec(task, depth, width, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"spec: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    task = _task_from_config(cfg)
    spec = _spec_from_config(cfg, task)
    opt = _build(OptimizerConfig, cfg.get("optimizer", {}), "optimizer")
    seed = int(cfg.get("seed", task.seed))
    data = materialize_task(task)
    try:
        result = train_base(data, spec, opt, seed)
    except DivergedTraining as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    model_path = os.path.join(out, "model.json")
    netmodel.save_model(netmodel.Model(spec, result.state), model_path)
    trace_path = os.path.join(out, "loss_trace.csv")
    alignlab.write_csv(
        [{"step": i, "batch_loss": v} for i, v in enumerate(result.trace)],
        ["step", "batch_loss"], trace_path,
    )
    summary_path = os.path.join(out, "train_summary.json")
    _write_json(summary_path, {
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "steps": opt.steps,
        "seed": seed,
    })
    _write_manifest(out, "train", raw, seeds, [model_path, trace_path, summary_path],
                    started)
    print(f"trained model -> {model_path} (train loss {result.initial_loss:.6g} "
          f"-> {result.final_loss:.6g})")
    return EXIT_OK


def _expansion_record(result, consts, m: int, k: int, delta: float) -> dict:
    bc = certify.BoundConstants.from_arch(consts)
    return {
        "format": EXPANSION_FORMAT,
        "version": EXPANSION_VERSION,
        "margins": result.margins.to_record(),
        "bound_constants": dataclasses.asdict(bc),
        "M": m,
        "K": k,
        "delta": delta,
        "context": {
            "insertion_layer": result.insertion_layer,
            "eta": result.eta,
            "degenerate": result.degenerate,
            "degenerate_reason": result.degenerate_reason,
            "predicted_first_order_margin": result.predicted_first_order_margin,
            "mu_norm_sq": result.stats.mu_norm_sq,
            "g_norm_sq": result.stats.g_norm_sq,
            "mu_dot_g": result.stats.mu_dot_g,
        },
        "certificate": result.certificate.to_record(),
    }


def cmd_expand(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    task = _task_from_config(cfg)
    exp_cfg = _build(ExpansionConfig, cfg.get("expansion", {}), "expansion")
    data = materialize_task(task)
    if "model" in cfg:
        base = netmodel.load_model(cfg["model"])
    else:
        spec = _spec_from_config(cfg, task)
        opt = _build(OptimizerConfig, cfg.get("optimizer", {}), "optimizer")
        try:
            trained = train_base(data, spec, opt, int(cfg.get("seed", task.seed)))
        except DivergedTraining as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        base = netmodel.Model(spec, trained.state)

    result = expansion_pipeline(data, base, exp_cfg)
    consts = netmodel.compute_arch_constants(result.model_jump, covered="block")
    record = _expansion_record(result, consts, data.train[0].shape[0],
                               data.test[0].shape[0], exp_cfg.delta)
    record_path = os.path.join(out, "expansion_record.json")
    _write_json(record_path, record)
    outputs = [record_path]
    for name, model in (("model_old", result.model_old),
                        ("model_jump", result.model_jump),
                        ("model_new", result.model_new)):
        path = os.path.join(out, f"{name}.json")
        netmodel.save_model(model, path)
        outputs.append(path)
    _write_manifest(out, "expand", raw, seeds, outputs, started)
    print(certify.render_chain_table(result.certificate))
    if result.degenerate_reason == "no-descent-direction":
        print("degenerate direction: first-order mechanism exhausted", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_certify(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    record_path = cfg.get("record")
    if not record_path:
        raise ConfigError("certify config needs \"record\": path to an expansion record")
    with open(record_path) as fh:
        record = json.load(fh)
    if record.get("format") != EXPANSION_FORMAT:
        raise ConfigError(f"{record_path}: not an expansion record")
    margins = MarginReport.from_record(record["margins"])
    consts = certify.BoundConstants(**record["bound_constants"])
    cert = certify.build_certificate(
        margins, consts, m=int(record["M"]), k=int(record["K"]),
        delta=float(record["delta"]),
    )
    cert_path = os.path.join(out, "certificate.json")
    _write_json(cert_path, cert.to_record())
    table_path = os.path.join(out, "certificate_table.txt")
    table = certify.render_chain_table(cert)
    with open(table_path, "w") as fh:
        fh.write(table + "\n")
    _write_manifest(out, "certify", raw, seeds, [cert_path, table_path], started)
    print(table)
    return EXIT_OK


def _mean_from_config(section, n: int) -> np.ndarray:
    if isinstance(section, dict):
        kind = section.get("kind", "uniform")
        if kind == "uniform":
            return alignlab.uniform_mean(n, float(section["alpha"]))
        if kind == "explicit":
            return np.asarray(section["values"], dtype=np.float64)
        if kind == "zero":
            return np.zeros(n)
        raise ConfigError(f"unknown mu_bar kind {kind!r}")
    return np.asarray(section, dtype=np.float64)


def cmd_align(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    defaults = cfg.get("defaults", {})
    cells = cfg.get("grid")
    if not cells:
        raise ConfigError("align config needs a nonempty \"grid\" list")
    rows = []
    for i, cell in enumerate(cells):
        merged = {**defaults, **cell}
        n = int(merged.pop("N"))
        mu_bar = _mean_from_config(merged.pop("mu_bar"), n)
        merged.setdefault("seed", 0)
        acfg = _build(
            alignlab.AlignmentConfig,
            {"N": n, "mu_bar": mu_bar, **merged},
            f"grid[{i}]",
        )
        result = alignlab.simulate_alignment(acfg, workers=args.workers,
                                             check_bound=cfg.get("check_bound", True))
        rows.append(alignlab.alignment_row(acfg, result))
    csv_path = os.path.join(out, "alignment.csv")
    alignlab.write_csv(rows, alignlab.ALIGNMENT_CSV_FIELDS, csv_path)
    _write_manifest(out, "align", raw, seeds, [csv_path], started)
    print(f"{len(rows)} alignment cells -> {csv_path}")
    return EXIT_OK


def cmd_scaling(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    params = _build(scalelab.ScalingParams,
                    {"k_max": 0, **cfg.get("params", {})}, "params")
    coupling = _build(scalelab.CouplingModel, cfg.get("coupling", {"kind": "linear"}),
                      "coupling")
    grid_cfg = cfg.get("p_grid", {})
    try:
        p_grid = np.geomspace(float(grid_cfg["min"]), float(grid_cfg["max"]),
                              int(grid_cfg.get("points", 25)))
    except KeyError as exc:
        raise ConfigError(f"p_grid: missing {exc}") from exc
    result = scalelab.coupled_risk_curve(p_grid, coupling, params)
    csv_path = os.path.join(out, "scaling_curve.csv")
    scalelab.write_curve_csv(result, csv_path)
    summary_path = os.path.join(out, "scaling_summary.json")
    _write_json(summary_path, {
        "fitted_exponent": result.fitted_exponent,
        "analytic_exponent": result.analytic_exponent,
        "beta": params.beta,
        "nu": coupling.effective_nu,
    })
    _write_manifest(out, "scaling", raw, seeds, [csv_path, summary_path], started)
    print(f"fitted exponent {result.fitted_exponent:.4f} "
          f"(analytic {result.analytic_exponent:.4f}) -> {csv_path}")
    return EXIT_OK


def cmd_covariance(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    task = _task_from_config(cfg)
    data = materialize_task(task)
    if "model" in cfg:
        model = netmodel.load_model(cfg["model"])
    else:
        spec = _spec_from_config(cfg, task)
        opt = _build(OptimizerConfig, cfg.get("optimizer", {}), "optimizer")
        try:
            trained = train_base(data, spec, opt, int(cfg.get("seed", task.seed)))
        except DivergedTraining as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        model = netmodel.Model(spec, trained.state)
    q, _ = activation_gradients(model, data.train[0], data.train[1])
    diag = alignlab.covariance_diagnostics(
        q, pair_samples=int(cfg.get("pair_samples", 100_000)),
        seed=int(cfg.get("pair_seed", 0)),
    )
    csv_path = os.path.join(out, "offdiag_samples.csv")
    alignlab.write_csv(
        [
            {"i": int(p[0]), "j": int(p[1]), "covariance": v, "noise_band": b}
            for p, v, b in zip(diag.offdiag_pairs, diag.offdiag_values, diag.noise_bands)
        ],
        ["i", "j", "covariance", "noise_band"], csv_path,
    )
    summary_path = os.path.join(out, "covariance_summary.json")
    _write_json(summary_path, {
        "max_offdiag_ratio": diag.max_offdiag_ratio,
        "gershgorin_upper": diag.gershgorin_upper,
        "frac_within_noise_band": diag.frac_within_noise_band,
        "max_diag": float(diag.sigma_diag.max()),
        "pairs_sampled": int(diag.offdiag_values.size),
    })
    _write_manifest(out, "covariance", raw, seeds, [csv_path, summary_path], started)
    print(f"{diag.offdiag_values.size} sampled pairs, "
          f"{100 * diag.frac_within_noise_band:.2f}% within 3 noise bands -> {csv_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    cfg, raw = _load_config(args.config)
    seeds = _apply_seed_override(cfg, _resolve_seed(args))
    out = _out_dir(cfg, args)
    task = _task_from_config(cfg)
    sweep = harness.sweep_config_from_dict(cfg.get("sweep", {}))
    mode = cfg.get("mode", "joint-scaling")
    journal = os.path.join(out, "journal.jsonl")
    outputs = []
    if mode == "gradient-decay":
        rows = gradient_decay_sweep(sweep, task, journal_path=journal,
                                    workers=args.workers)
        csv_path = os.path.join(out, "gradient_decay.csv")
        alignlab.write_csv(rows, harness.GRADIENT_DECAY_FIELDS, csv_path)
        outputs.append(csv_path)
    elif mode == "joint-scaling":
        rows, summary = joint_scaling_sweep(sweep, task, journal_path=journal,
                                            workers=args.workers)
        csv_path = os.path.join(out, "joint_scaling.csv")
        alignlab.write_csv(rows, harness.JOINT_SCALING_FIELDS, csv_path)
        summary_path = os.path.join(out, "joint_scaling_summary.csv")
        alignlab.write_csv(summary, harness.JOINT_SUMMARY_FIELDS, summary_path)
        outputs.extend([csv_path, summary_path])
    else:
        raise ConfigError(f"unknown sweep mode {mode!r}")
    _write_manifest(out, "sweep", raw, seeds, outputs, started)
    print(f"sweep {mode}: {len(rows)} cells -> {outputs[0]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resexp",
        description="Depth-expansion laboratory for normalized residual networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train a base model on a synthetic task"),
        "expand": (cmd_expand, "run the depth-expansion pipeline and certify it"),
        "certify": (cmd_certify, "re-derive verdicts from an expansion record"),
        "align": (cmd_align, "alignment failure simulation over a config grid"),
        "scaling": (cmd_scaling, "power-law recursion curves and fitted exponents"),
        "covariance": (cmd_covariance, "activation-gradient covariance diagnostics"),
        "sweep": (cmd_sweep, "depth/width/seed sweeps (gradient decay, joint scaling)"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a JSON config file")
        p.add_argument("--out", help="output directory (overrides config \"out\")")
        p.add_argument("--seed", type=int,
                       help=f"seed override (also via {SEED_ENV})")
        p.add_argument("--workers", type=int, default=1,
                       help="concurrency cap for parallel cells/trials")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
