"""Command-line entry point: ``iseat {train,attack,margin,landscape,analyze,compare}``.

Exit status is 0 on success, 1 for configuration, data or checkpoint
problems and 2 when a computation produces non-finite values.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .attacks import MARGIN_MAX, loss_landscape, margin_lattice, margin_search, pgd, robust_accuracy, write_landscape_csv
from .config import ExperimentConfig, load_config, load_datasets
from .data import Dataset
from .errors import CheckpointError, ConfigError, IdxFormatError, NumericalError
from .model import Checkpoint, ModelParams, load_checkpoint, save_checkpoint
from .training import format_value, measure_av_stats, run, write_metrics_csv
from .vulnerability import AV_FIELDS

log = logging.getLogger("iseat")

COMPARE_METRICS = ("eval_clean_acc", "eval_robust_acc", "av_sd")
# random streams for the analysis commands, disjoint from the trainer's
_MARGIN_STREAM, _LANDSCAPE_STREAM, _ANALYZE_STREAM, _ATTACK_STREAM = 11, 12, 13, 14


@contextmanager
def staged_output(out: Path):
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
        os.replace(out, old / "prev")
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out_dir:
        return cfg.resolve(cfg.out_dir)
    raise ConfigError("no output directory: pass --out or set out_dir in the config")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, precision=args.precision)


def _load_model(args, cfg: ExperimentConfig) -> ModelParams:
    ckpt: Checkpoint = load_checkpoint(args.checkpoint)
    return ckpt.params.astype(cfg.dtype)


def _pick(data: tuple[Dataset, Dataset], which: str, params: ModelParams) -> Dataset:
    ds = data[0] if which == "train" else data[1]
    if ds.n_features != params.spec.n_inputs:
        raise ConfigError(f"checkpoint expects {params.spec.n_inputs} inputs, dataset has {ds.n_features}")
    return ds


# -- train --------------------------------------------------------------------

def train_into(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Run training and write every artifact into ``out`` (an existing directory)."""
    train, test = load_datasets(cfg)
    init = None
    if cfg.init_checkpoint is not None:
        init = load_checkpoint(cfg.resolve(cfg.init_checkpoint)).params
    spec = init.spec if init is not None else cfg.model_spec()
    result = run(cfg.run_config(), spec, train, test, init=init)
    write_metrics_csv(result.metrics, out / "metrics.csv")
    save_checkpoint(out / "final.ckpt.json", result.final, precision=cfg.precision, seed=cfg.seed, epoch=cfg.epochs)
    save_checkpoint(out / "best.ckpt.json", result.best, precision=cfg.precision, seed=cfg.seed, epoch=result.best_epoch)
    if result.swa is not None:
        save_checkpoint(out / "swa.ckpt.json", result.swa, precision=cfg.precision, seed=cfg.seed, epoch=cfg.epochs)
    snapshot = cfg.snapshot()
    snapshot["data"] = {"train": train.provenance, "train_size": len(train), "test_size": len(test)}
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n")
    return result.metrics


def cmd_train(args) -> int:
    cfg = _config(args)
    with staged_output(_out_dir(args, cfg)) as tmp:
        metrics = train_into(cfg, tmp)
    last = metrics[-1]
    print(f"{cfg.label}: clean {last['eval_clean_acc']:.4f}  robust {last['eval_robust_acc']:.4f}  AV SD {last['av_sd']:.4f}")
    return 0


# -- checkpoint analyses ----------------------------------------------------------

def cmd_attack(args) -> int:
    cfg = _config(args)
    params = _load_model(args, cfg)
    attack = cfg.eval_attack if args.steps is None else cfg.eval_attack.model_copy(update={"steps": args.steps})
    rows = []
    for which in ("train", "test") if args.split == "both" else (args.split,):
        ds = _pick(load_datasets(cfg), which, params)
        rng = np.random.default_rng([cfg.seed, _ATTACK_STREAM])
        clean, robust = robust_accuracy(params, ds.inputs, ds.labels, attack, rng=rng)
        rows.append([which, len(ds), format_value(attack.epsilon), attack.steps, format_value(clean), format_value(robust)])
        print(f"{which}: clean {clean:.4f}  robust {robust:.4f}  (eps {attack.epsilon}, {attack.steps} steps)")
    if args.out:
        with staged_output(Path(args.out)) as tmp:
            _write_csv(tmp / "attack.csv", ["split", "n", "epsilon", "steps", "clean_acc", "robust_acc"], rows)
    return 0


def margins(params: ModelParams, ds: Dataset, cfg: ExperimentConfig, step: float, mu_max: float) -> list[tuple]:
    x = ds.inputs.astype(params.dtype)
    delta = pgd(params, x, ds.labels, cfg.eval_attack, np.random.default_rng([cfg.seed, _MARGIN_STREAM]))
    out = []
    for i in range(len(ds)):
        if not np.any(delta[i]):
            # no ascent direction at all: the prediction can't be moved along it
            out.append((i, int(ds.labels[i]), MARGIN_MAX, 0.0))
            continue
        r = margin_search(params, x[i], delta[i], step, mu_max)
        out.append((i, int(ds.labels[i]), r.mu, r.direction_norm))
    return out


def cmd_margin(args) -> int:
    cfg = _config(args)
    params = _load_model(args, cfg)
    ds = _pick(load_datasets(cfg), args.split, params)
    rows = margins(params, ds, cfg, args.step, args.mu_max)
    mus = np.array([r[2] for r in rows])
    lattice = margin_lattice(args.step, args.mu_max)
    with staged_output(_out_dir(args, cfg)) as tmp:
        _write_csv(
            tmp / "margins.csv",
            ["index", "label", "mu", "direction_norm"],
            [[i, y, "MAX" if mu == MARGIN_MAX else format_value(mu), format_value(n)] for i, y, mu, n in rows],
        )
        _write_csv(
            tmp / "margin_cdf.csv",
            ["mu", "cumulative_fraction"],
            [[format_value(m), format_value(np.mean(mus <= m))] for m in lattice],
        )
    print(f"{int(np.sum(mus != MARGIN_MAX))}/{len(mus)} predictions flip within mu <= {args.mu_max}")
    return 0


def cmd_landscape(args) -> int:
    cfg = _config(args)
    params = _load_model(args, cfg)
    ds = _pick(load_datasets(cfg), args.split, params)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside the {args.split} set of size {len(ds)}")
    if args.points < 3 or args.points % 2 == 0:
        raise ConfigError("--points must be an odd number >= 3 so the grid contains beta = 0")
    x, y = ds.inputs[args.index].astype(params.dtype), int(ds.labels[args.index])
    rng = np.random.default_rng([cfg.seed, _LANDSCAPE_STREAM])
    delta = pgd(params, x[None, :], np.array([y]), cfg.eval_attack, rng)[0]
    alphas = np.linspace(0.0, args.alpha_max, args.points)
    betas = np.linspace(-args.beta_max, args.beta_max, args.points)
    betas[args.points // 2] = 0.0
    grid = loss_landscape(params, x, y, delta, alphas, betas, seed=cfg.seed, epsilon=cfg.eval_attack.epsilon or 1.0)
    with staged_output(_out_dir(args, cfg)) as tmp:
        write_landscape_csv(grid, tmp / "landscape.csv")
    print(f"{args.points}x{args.points} grid, |delta|_2 = {grid.delta_norm:.4f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    params = _load_model(args, cfg)
    ds = _pick(load_datasets(cfg), args.split, params)
    stats = measure_av_stats(params, ds, cfg.attack, np.random.default_rng([cfg.seed, _ANALYZE_STREAM]))
    with staged_output(_out_dir(args, cfg)) as tmp:
        _write_csv(tmp / "av_stats.csv", AV_FIELDS, [[format_value(stats[f]) for f in AV_FIELDS]])
    print("  ".join(f"{f}={stats[f]:.4f}" for f in AV_FIELDS))
    return 0


# -- compare --------------------------------------------------------------------

def _run_member(cfg_path: str, seed: int, precision: str | None, out: str) -> dict:
    cfg = load_config(cfg_path, seed=seed, precision=precision)
    Path(out).mkdir(parents=True)
    return train_into(cfg, Path(out))[-1]


def _load_member(run_dir: Path) -> tuple[str, str, dict]:
    try:
        with (run_dir / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        meta = json.loads((run_dir / "resolved_config.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{run_dir}: not a finished run directory ({exc})") from None
    if not rows:
        raise ConfigError(f"{run_dir}: metrics.csv has no rows")
    return meta.get("label", run_dir.name), meta["method"], {k: float(v) for k, v in rows[-1].items()}


def _threads() -> int:
    raw = os.environ.get("ISEAT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ISEAT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("ISEAT_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def summarize(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def cmd_compare(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    members = []
    # validate everything before the first run starts
    for item in args.config:
        p = Path(item)
        if p.is_dir():
            members.append(("dir", p, None))
            continue
        cfg = load_config(p, seed=args.seed, precision=args.precision)
        load_datasets(cfg)
        if cfg.init_checkpoint is not None:
            load_checkpoint(cfg.resolve(cfg.init_checkpoint))
        members.append(("config", p, cfg))
    loaded = {i: _load_member(p) for i, (kind, p, _) in enumerate(members) if kind == "dir"}
    labels = [loaded[i][0] if kind == "dir" else cfg.label for i, (kind, _, cfg) in enumerate(members)]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"compare members need distinct labels, got {labels}")

    out = _out_dir(args)
    with staged_output(out) as tmp:
        jobs = []
        for i, (kind, p, cfg) in enumerate(members):
            if kind == "config":
                for s in seeds if seeds is not None else [cfg.seed]:
                    jobs.append((i, str(p), s, args.precision, str(tmp / "runs" / labels[i] / f"seed-{s}")))
        workers = min(_threads(), max(1, len(jobs)))
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                finals = list(pool.map(_run_member, *zip(*[j[1:] for j in jobs])))
        else:
            finals = [_run_member(*j[1:]) for j in jobs]

        per_member: dict[int, list[dict]] = {}
        for job, final in zip(jobs, finals):
            per_member.setdefault(job[0], []).append(final)
        header = ["label", "method", "runs"]
        for m in COMPARE_METRICS:
            header += [m, f"{m}_sd"]
        rows = []
        for i, (kind, _, cfg) in enumerate(members):
            if kind == "dir":
                method, finals_i = loaded[i][1], [loaded[i][2]]
            else:
                method, finals_i = cfg.method, per_member[i]
            row = [labels[i], method, len(finals_i)]
            for m in COMPARE_METRICS:
                mean, sd = summarize([f[m] for f in finals_i])
                row += [format_value(mean), format_value(sd)]
            rows.append(row)
            print("  ".join(str(c) for c in row))
        _write_csv(tmp / "compare.csv", header, rows)
    return 0


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (replaced atomically on success)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--precision", choices=("f32", "f64"), help="override the config precision")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    single = argparse.ArgumentParser(add_help=False, parents=[common])
    single.add_argument("--config", required=True, help="experiment config (JSON)")

    ckpt = argparse.ArgumentParser(add_help=False, parents=[single])
    ckpt.add_argument("--checkpoint", required=True, help="model checkpoint written by 'train'")
    ckpt.add_argument("--split", choices=("train", "test"), default="train", help="dataset split to analyse")

    parser = argparse.ArgumentParser(prog="iseat", description="Instance-adaptive adversarial training on small dense networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[single], help="train a model").set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="clean and PGD accuracy of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "both"), default="test")
    p.add_argument("--steps", type=int, help="override the evaluation attack's step count")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("margin", parents=[ckpt], help="per-sample margins along the attack direction")
    p.add_argument("--step", type=float, default=0.25, help="lattice spacing for mu")
    p.add_argument("--mu-max", type=float, default=50.0, help="largest mu probed")
    p.set_defaults(func=cmd_margin)

    p = sub.add_parser("landscape", parents=[ckpt], help="loss over an adversarial/random direction grid")
    p.add_argument("--index", type=int, default=0, help="sample index within the split")
    p.add_argument("--points", type=int, default=21, help="grid points per axis (odd)")
    p.add_argument("--alpha-max", type=float, default=5.0)
    p.add_argument("--beta-max", type=float, default=5.0)
    p.set_defaults(func=cmd_landscape)

    sub.add_parser("analyze", parents=[ckpt], help="attack-vulnerability statistics").set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", parents=[common], help="train several configs and tabulate them")
    p.add_argument("--config", nargs="+", required=True, help="configs (or finished run directories), in table order")
    p.add_argument("--seeds", help="comma-separated seeds to run per config")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
