"""Command-line entry point: ``python -m streamproto <command>``.

Exit status: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, metrics
from .config import ConfigError, RunConfig, load_config, resolve
from .encoder import encode_batch, init_params
from .numerics import DegenerateVectorError
from .streams import (
    DISTRACTOR_LABEL_BASE,
    EpisodeSource,
    lag1_same_class_rate,
    load_episodes,
    write_episodes,
)
from .trainer import GradCheckConfig, NumericalError, TrainState, evaluate, grad_check, train

log = logging.getLogger("streamproto")

EVAL_FORMAT_VERSION = 1
TRAIN_LOG_HEADER = ["step", "l_self", "l_ent", "l_new", "total", "p_new", "lr"]
METRICS_HEADER = ["episode", "protocol", "metric", "value"]
SWEEP_HEADER = ["param", "value", "ami", "ami_max", "ami_max_alpha", "ari", "ap", "relative_ami"]

SWEEP_PARAMS = {
    "K": ("memory", "capacity", int),
    "rho": ("memory", "decay", float),
    "alpha": ("memory", "alpha", float),
    "mu": ("loss", "beta_mean", float),
    "lambda_new": ("loss", "lambda_new", float),
    "lambda_ent": ("loss", "lambda_ent", float),
    "tau_ratio": ("model", "tau_ratio", float),
    "distractor_rate": ("stream", "distractor_rate", float),
}


# -- shared helpers ------------------------------------------------------------


def initial_params(cfg: RunConfig):
    m = cfg.model
    return init_params(cfg.encoder, beta=m.beta_init, gamma=m.gamma_init, tau=m.tau_init, tau_ratio=m.tau_ratio)


def heldout_episodes(cfg: RunConfig, n: int | None = None) -> list:
    """Held-out episodes: same world, disjoint episode seeds, no distractors."""
    stream = replace(cfg.stream, distractor_rate=0.0, iid_shuffle=False)
    return EpisodeSource(stream, cfg.seed + cfg.eval.seed_offset).episodes(cfg.eval.episodes if n is None else n)


def alpha_grid(size: int, alpha: float) -> list[float]:
    # a single point means "evaluate at the configured threshold"
    return [alpha] if size == 1 else [float(a) for a in metrics.default_alpha_grid(size)]


def _read_stream(path, cfg: RunConfig) -> list:
    return list(load_episodes(path, view_noise=cfg.stream.view_noise, seed=cfg.seed))


def _check_dims(episodes, params, what: str):
    for ep in episodes:
        if ep:
            got = ep[0].features.shape[0]
            if got != params.config.input_dim:
                raise ConfigError(f"{what} has feature dimension {got} but the encoder expects {params.config.input_dim}")
            return


class _LogWriter:
    def __init__(self, path: Path, append: bool):
        new = not (append and path.exists())
        self.fh = open(path, "a" if not new else "w", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(TRAIN_LOG_HEADER)

    def __call__(self, state, row):
        self.writer.writerow([row["step"]] + [row[k] for k in TRAIN_LOG_HEADER[1:]])

    def close(self):
        self.fh.close()


def run_train(cfg: RunConfig, out_dir, *, resume=None, stream_path=None) -> TrainState:
    """Train per ``cfg``; writes config.json, train_log.csv and checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
    params = initial_params(cfg)
    state = None
    if resume is not None:
        state, _, _ = checkpoint.load(resume)
        if state.params.config != params.config:
            raise ConfigError("checkpoint encoder does not match the configured encoder")
    if stream_path is not None:
        episodes = _read_stream(stream_path, cfg)
        if not episodes:
            raise ConfigError(f"{stream_path}: no episodes")
        _check_dims(episodes, params, str(stream_path))
        source = lambda i: episodes[i % len(episodes)]  # noqa: E731
    else:
        source = EpisodeSource(cfg.stream, cfg.seed)

    def save_ckpt(st):
        checkpoint.save(out / f"checkpoint_{st.step:08d}.json", st, config=echo)

    logger = _LogWriter(out / "train_log.csv", append=resume is not None)
    try:
        state = train(source, cfg.train, params, cfg.loss, cfg.memory, state=state,
                      on_step=logger, on_checkpoint=save_ckpt)
    finally:
        logger.close()
    checkpoint.save(out / "checkpoint.json", state, config=echo)
    return state


def _offline(params, train_eps, test_eps, cfg: RunConfig, scoped: bool) -> dict:
    def flatten(eps, parity):
        X, y = [], []
        for i, ep in enumerate(eps):
            keep = [f for f in ep if parity is None or f.t % 2 == parity]
            if not keep:
                continue
            X.append(encode_batch(np.stack([f.features for f in keep]), params))
            for f in keep:
                # class identities are per episode unless they are distractors
                y.append(f.label if not scoped or f.label >= DISTRACTOR_LABEL_BASE else i * DISTRACTOR_LABEL_BASE + f.label)
        return np.concatenate(X), y

    if scoped:
        tx, ty = flatten(test_eps, 0)
        vx, vy = flatten(test_eps, 1)
    else:
        tx, ty = flatten(train_eps, None)
        vx, vy = flatten(test_eps, None)
    k = min(cfg.eval.knn_k, len(tx))
    return {
        "knn_accuracy": float(metrics.knn_readout(tx, ty, vx, vy, k)),
        "linear_accuracy": float(metrics.linear_readout(tx, ty, vx, vy, cfg.eval.linear_epochs, cfg.eval.linear_lr,
                                                        seed=cfg.seed)),
    }


def run_eval(cfg: RunConfig, params, episodes, protocol: str, *, sweep_alpha: bool = False,
             train_episodes=None) -> dict:
    if any(f.label is None for ep in episodes for f in ep):
        raise ConfigError(f"protocol {protocol!r} needs labeled frames")
    _check_dims(episodes, params, "evaluation stream")
    if protocol == "offline":
        if not episodes:
            return {}
        if train_episodes is not None:
            _check_dims(train_episodes, params, "training stream")
        report = _offline(params, train_episodes, episodes, cfg, scoped=train_episodes is None)
        report["episodes"] = []
        return report
    alpha = cfg.memory.alpha
    grid = alpha_grid(cfg.eval.alpha_grid_size if sweep_alpha else 1, alpha)
    report = evaluate(params, episodes, protocol, cfg.memory, alpha=alpha, alpha_grid=grid, workers=cfg.eval.workers)
    if protocol == "unsupervised" and not sweep_alpha:
        report.pop("ami_max", None)
        report.pop("ami_max_alpha", None)
    return report


def _write_metrics(out: Path, protocol: str, report: dict, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for i, row in enumerate(report.get("episodes", [])):
            for k, v in row.items():
                w.writerow([i, protocol, k, v])
        for k, v in report.items():
            if k != "episodes":
                w.writerow(["mean", protocol, k, v])
    summary = {
        "format": "streamproto-eval",
        "version": EVAL_FORMAT_VERSION,
        "protocol": protocol,
        "num_episodes": len(report.get("episodes", [])),
        "metrics": {k: v for k, v in report.items() if k != "episodes"},
        **extra,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _dump_embeddings(path, params, episodes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "label", "context"] + [f"z{j}" for j in range(params.config.output_dim
                                                                                    if params.config.kind != "identity"
                                                                                    else params.config.input_dim)])
        for i, ep in enumerate(episodes):
            Z = encode_batch(np.stack([f.features for f in ep]), params)
            for f, z in zip(ep, Z):
                w.writerow([i, f.t, "" if f.label is None else f.label, f.context] + [repr(float(v)) for v in z])


# -- subcommands ---------------------------------------------------------------


def _config(args, **extra) -> RunConfig:
    overrides = list(args.set or [])
    return load_config(args.config, profile=args.profile, seed=args.seed, overrides=overrides, **extra)


def cmd_gen(args) -> int:
    cfg = _config(args)
    n = args.episodes
    if args.split == "test":
        seed = cfg.seed + cfg.eval.seed_offset
    else:
        seed = cfg.seed
    episodes = EpisodeSource(cfg.stream, seed).episodes(n)
    out = Path(args.out or "episodes.jsonl")
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    frames = write_episodes(episodes, out)
    per_episode = [len({f.label for f in ep}) for ep in episodes]
    rates = [r for r in (lag1_same_class_rate(ep) for ep in episodes) if not math.isnan(r)]
    print(f"episodes: {len(episodes)}")
    print(f"frames: {frames}")
    print(f"contexts per episode: {cfg.stream.num_contexts}")
    print(f"classes: {sum(per_episode)} total, {np.mean(per_episode) if per_episode else 0:.2f} per episode")
    print(f"lag-1 same-class rate: {np.mean(rates) if rates else float('nan'):.4f}")
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"train.total_steps={args.steps}")
    if args.resume and args.config is None and args.profile is None:
        _, echo, _ = checkpoint.load(args.resume)
        cfg = resolve(echo, seed=args.seed, overrides=overrides)
    else:
        cfg = load_config(args.config, profile=args.profile, seed=args.seed, overrides=overrides)
    out = Path(args.out or cfg.out_dir)
    state = run_train(cfg, out, resume=args.resume, stream_path=args.stream)
    last = state.last or {}
    print(f"trained to step {state.step}; final total loss {last.get('total', float('nan')):.6f}")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'train_log.csv'}")
    return 0


def cmd_eval(args) -> int:
    state = echo = None
    if args.checkpoint:
        state, echo, _ = checkpoint.load(args.checkpoint)
    if echo is not None and args.config is None and args.profile is None:
        cfg = resolve(echo, seed=args.seed, overrides=list(args.set or []))
    else:
        cfg = _config(args)
    params = state.params if state is not None else initial_params(cfg)
    if state is not None and params.tau_ratio != cfg.model.tau_ratio:
        params = replace(params, tau_ratio=cfg.model.tau_ratio)
    protocol = args.protocol or cfg.eval.protocol
    episodes = _read_stream(args.stream, cfg) if args.stream else heldout_episodes(cfg)
    train_eps = _read_stream(args.train_stream, cfg) if args.train_stream else None
    report = run_eval(cfg, params, episodes, protocol, sweep_alpha=args.sweep_alpha, train_episodes=train_eps)
    out = Path(args.out or cfg.out_dir)
    extra = {"alpha": cfg.memory.alpha, "checkpoint": args.checkpoint, "stream": args.stream,
             "sweep_alpha": bool(args.sweep_alpha)}
    summary = _write_metrics(out, protocol, report, extra)
    if args.dump_embeddings:
        _dump_embeddings(args.dump_embeddings, params, episodes)
    for k, v in summary["metrics"].items():
        print(f"{k}: {v:.6f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    kinds = ["identity", "linear", "mlp"] if args.encoder == "all" else [args.encoder]
    modes = {"full": [False], "stop": [True], "both": [False, True]}[args.mode]
    failed = False
    for kind in kinds:
        tol = args.tol if args.tol is not None else (1e-6 if kind == "identity" else 1e-4)
        for stop in modes:
            gc = GradCheckConfig(
                kind=kind, input_dim=args.dim, output_dim=min(args.dim, 4), hidden_dim=min(args.dim, 5),
                episode_length=args.frames, tau_ratio=cfg.model.tau_ratio, stop_prototype_gradient=stop,
                seed=cfg.seed,
            )
            report = grad_check(gc)
            ok = report.max_rel_error <= tol and math.isfinite(report.max_rel_error)
            failed |= not ok
            mode = "stop" if stop else "full"
            print(f"{kind:8s} {mode:4s} max_rel_error={report.max_rel_error:.3e} tol={tol:.0e} "
                  f"{'PASS' if ok else 'FAIL'}")
            for name, err in report.per_group.items():
                print(f"    {name:10s} {err:.3e}")
    return 2 if failed else 0


def _sweep_one(payload):
    cfg_dict, param, value, out_dir, sweep_alpha = payload
    section, key, cast = SWEEP_PARAMS[param]
    cfg = resolve(cfg_dict, overrides=[f"{section}.{key}={json.dumps(cast(value))}"])
    state = run_train(cfg, Path(out_dir) / f"{param}={value}")
    eps = heldout_episodes(cfg)
    uns = run_eval(cfg, state.params, eps, "unsupervised", sweep_alpha=sweep_alpha)
    sup = run_eval(cfg, state.params, eps, "supervised")
    return {
        "param": param, "value": value,
        "ami": uns.get("ami", float("nan")), "ami_max": uns.get("ami_max", float("nan")),
        "ami_max_alpha": uns.get("ami_max_alpha", float("nan")), "ari": uns.get("ari", float("nan")),
        "ap": sup.get("ap", float("nan")),
    }


def run_sweep(cfg: RunConfig, param: str, values: list, out_dir, *, sweep_alpha: bool = True, workers: int = 1) -> list[dict]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; valid names: {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cast = SWEEP_PARAMS[param][2]
    values = [cast(v) for v in values]
    payloads = [(cfg.to_dict(), param, v, str(out_dir), sweep_alpha) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_one, payloads))
    else:
        rows = [_sweep_one(p) for p in payloads]
    key = "ami_max" if sweep_alpha else "ami"
    ref = next((r for r in rows if r["value"] == 0), rows[0])
    for r in rows:
        r["relative_ami"] = r[key] / ref[key] if ref[key] != 0 else float("nan")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_sweep(args) -> int:
    if args.steps is not None:
        args.set = list(args.set or []) + [f"train.total_steps={args.steps}"]
    cfg = _config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    try:
        values = [json.loads(v) for v in values]
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sweep values must be numbers ({exc})") from None
    out = Path(args.out or cfg.out_dir)
    rows = run_sweep(cfg, args.param, values, out, sweep_alpha=not args.fixed_alpha, workers=args.workers)
    print(",".join(SWEEP_HEADER))
    for r in rows:
        print(",".join(str(r[k]) for k in SWEEP_HEADER))
    print(f"wrote {out / 'sweep.csv'}")
    return 0


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (status 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (profile + overrides)")
    common.add_argument("--profile", metavar="NAME", help="named hyperparameter profile")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="PATH", help="output directory (gen: output file)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="streamproto", description="Online prototype learning from non-iid streams.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="write synthetic episodes as JSONL")
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--split", choices=["train", "test"], default="train")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train an encoder")
    t.add_argument("--steps", type=int, help="shortcut for --set train.total_steps=N")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--stream", metavar="JSONL", help="train on episodes from a file instead of the generator")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", metavar="CKPT", help="omit to evaluate the untrained initialization")
    e.add_argument("--stream", metavar="JSONL", help="labeled test episodes (default: generated held-out episodes)")
    e.add_argument("--train-stream", metavar="JSONL", help="labeled training split for the offline protocol")
    e.add_argument("--protocol", choices=["unsupervised", "supervised", "offline"])
    e.add_argument("--sweep-alpha", action="store_true", help="also report AMI_max over the threshold grid")
    e.add_argument("--dump-embeddings", metavar="CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--encoder", choices=["identity", "linear", "mlp", "all"], default="all")
    c.add_argument("--mode", choices=["full", "stop", "both"], default="both")
    c.add_argument("--frames", type=int, default=5)
    c.add_argument("--dim", type=int, default=6)
    c.add_argument("--tol", type=float)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", parents=[common], help="train and evaluate over one hyperparameter")
    s.add_argument("--param", required=True, help=f"one of: {', '.join(SWEEP_PARAMS)}")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--steps", type=int, help="shortcut for --set train.total_steps=N")
    s.add_argument("--fixed-alpha", action="store_true", help="skip the threshold sweep in evaluation")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericalError, DegenerateVectorError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
