"""Command-line entry point: data generation, training, evaluation,
K sweeps, and numeric self-checks.

Every command writes its artifacts into a fresh run directory under
``$MOW_RUN_DIR`` (default ``./runs``) together with a manifest that
captures the effective configuration; run directories are append-only.
Exit codes: 0 success, 2 usage, 3 class capacity, 4 file format,
5 numeric-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datasynth import (CLASS_NAMES, Dataset, SynthConfig, generate,
                        load_dataset, save_dataset, split_train_test)
from .errors import (CapacityError, ContractError, FormatError, MownetError,
                     NumericError)
from .metrics import (dump_embeddings, evaluate, render_report_csv,
                      render_report_text, summarize_weight_trajectory,
                      write_weight_trajectory_csv)
from .selfcheck import autodiff_fd_suite, hypergrad_equivalence_suite
from .trainer import (TrainConfig, train, train_ce_baseline, write_baseline_trace_csv,
                      write_trace_csv)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CAPACITY = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


class UsageError(MownetError):
    pass


# ---------------------------------------------------------------------------
# run directories and manifests


@dataclass
class RunManifest:
    mode: str
    seed: int
    config: dict
    paths: dict = field(default_factory=dict)
    started_utc: str = ""
    finished_utc: str = ""
    status: str = "running"

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(**raw)
        except (json.JSONDecodeError, TypeError) as err:
            raise FormatError(f"{path}: malformed manifest ({err})") from err


def runs_root() -> Path:
    return Path(os.environ.get("MOW_RUN_DIR", "./runs"))


def new_run_dir(mode: str, seed: int) -> Path:
    root = runs_root()
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    for attempt in range(10000):
        suffix = "" if attempt == 0 else f"-{attempt}"
        candidate = root / f"{mode}-{stamp}-seed{seed}{suffix}"
        try:
            candidate.mkdir(parents=False, exist_ok=False)
            return candidate
        except FileExistsError:
            continue
    raise ContractError("new_run_dir: could not allocate a unique run directory")


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# config file and flag merging


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; keys are flag names without the dashes."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"--config: cannot read {path} ({err})") from err
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _hidden_dims(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--hidden: expected comma-separated integers, got {text!r}")
    if any(d <= 0 for d in dims):
        raise argparse.ArgumentTypeError(f"--hidden: widths must be positive, got {text!r}")
    return dims


_CASTS = {
    "alpha": float, "beta": float, "epochs": int, "batch-size": int, "k": int,
    "seed": int, "seeds": int, "trials": int, "n-per-class": int, "dim": int,
    "sigma-score": float, "sigma-feature": float, "overlap": float,
    "signal-scale": float, "train-frac": float, "decay-factor": float,
    "decay-period": int, "weight-decay": float, "weightnet-hidden": int,
    "method": str, "hypergrad": str, "outer-opt": str, "mos": str,
    "hidden": _hidden_dims, "dataset": str, "out": str, "checkpoint": str,
    "crosscheck": lambda s: s.lower() in ("1", "true", "yes"),
}


def effective(args: argparse.Namespace, key: str, default):
    """CLI flag beats config file beats built-in default."""
    dest = key.replace("-", "_")
    cli_value = getattr(args, dest, None)
    if cli_value is not None:
        return cli_value
    file_cfg = getattr(args, "_file_config", {})
    if key in file_cfg:
        cast = _CASTS.get(key, str)
        try:
            return cast(file_cfg[key])
        except (ValueError, argparse.ArgumentTypeError) as err:
            raise UsageError(f"config file key {key!r}: {err}") from err
    return default


def _positive_int(flag: str):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag}: expected an integer, got {text!r}")
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{flag}: must be positive, got {value}")
        return value
    return parse


def _nonneg_int(flag: str):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag}: expected an integer, got {text!r}")
        if value < 0:
            raise argparse.ArgumentTypeError(f"{flag}: must be >= 0, got {value}")
        return value
    return parse


def _positive_float(flag: str):
    def parse(text: str) -> float:
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag}: expected a number, got {text!r}")
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{flag}: must be positive, got {value}")
        return value
    return parse


def _k_list(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k: expected comma-separated integers, got {text!r}")
    if not ks or any(k <= 0 for k in ks):
        raise argparse.ArgumentTypeError(f"--k: values must be positive, got {text!r}")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mownet",
                                     description="Meta ordinal weighting network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic ordinal dataset")
    gen.add_argument("--out", required=True, help="output dataset path (MOWDS1)")
    gen.add_argument("--seed", type=_nonneg_int("--seed"))
    gen.add_argument("--n-per-class", type=_positive_int("--n-per-class"))
    gen.add_argument("--dim", type=_positive_int("--dim"))
    gen.add_argument("--sigma-score", type=_positive_float("--sigma-score"))
    gen.add_argument("--sigma-feature", type=_positive_float("--sigma-feature"))
    gen.add_argument("--overlap", type=float)
    gen.add_argument("--signal-scale", type=_positive_float("--signal-scale"))
    gen.add_argument("--config")

    def add_train_flags(p):
        p.add_argument("--dataset", required=False)
        p.add_argument("--alpha", type=_positive_float("--alpha"))
        p.add_argument("--beta", type=_positive_float("--beta"))
        p.add_argument("--epochs", type=_nonneg_int("--epochs"))
        p.add_argument("--batch-size", type=_positive_int("--batch-size"))
        p.add_argument("--seed", type=_nonneg_int("--seed"))
        p.add_argument("--hypergrad", choices=["through", "decomposed"])
        p.add_argument("--outer-opt", choices=["sgd", "adam"])
        p.add_argument("--mos", choices=["per-sample", "batch"])
        p.add_argument("--hidden", type=_hidden_dims)
        p.add_argument("--weightnet-hidden", type=_positive_int("--weightnet-hidden"))
        p.add_argument("--train-frac", type=_positive_float("--train-frac"))
        p.add_argument("--decay-factor", type=_positive_float("--decay-factor"))
        p.add_argument("--decay-period", type=_positive_int("--decay-period"))
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--crosscheck", action="store_const", const=True, default=None)
        p.add_argument("--config")

    tr = sub.add_parser("train", help="train a model and emit a run directory")
    tr.add_argument("--method", choices=["mow", "ce"])
    tr.add_argument("--k", type=_positive_int("--k"))
    tr.add_argument("--out", help="run directory (default: fresh under MOW_RUN_DIR)")
    add_train_flags(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", help="run directory (default: fresh under MOW_RUN_DIR)")

    sw = sub.add_parser("sweep-k", help="train over a grid of K values and seeds")
    sw.add_argument("--k", type=_k_list, help="comma-separated K values, e.g. 1,5,10")
    sw.add_argument("--seeds", type=_positive_int("--seeds"),
                    help="number of seeds per K (seed, seed+1, ...)")
    sw.add_argument("--method", choices=["mow", "ce"])
    sw.add_argument("--out")
    add_train_flags(sw)

    gc = sub.add_parser("gradcheck", help="run the numeric self-check suites")
    gc.add_argument("--trials", type=_nonneg_int("--trials"))
    gc.add_argument("--seed", type=_nonneg_int("--seed"))
    gc.add_argument("--verbose", action="store_true")

    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    config = SynthConfig(
        dim=effective(args, "dim", 16),
        n_per_class=effective(args, "n-per-class", 500),
        sigma_score=effective(args, "sigma-score", 0.35),
        sigma_feature=effective(args, "sigma-feature", 1.0),
        overlap=effective(args, "overlap", 0.8),
        signal_scale=effective(args, "signal-scale", 3.5),
        seed=effective(args, "seed", 0),
    )
    run_dir = new_run_dir("gen-data", config.seed)
    manifest = RunManifest(mode="gen-data", seed=config.seed,
                           config={"out": str(args.out), **asdict(config)},
                           started_utc=_utc_now())
    dataset = generate(config)
    save_dataset(args.out, dataset)
    manifest.paths = {"dataset": str(args.out)}
    manifest.finished_utc = _utc_now()
    manifest.status = "done"
    manifest.save(run_dir / "manifest.json")
    print(f"wrote {len(dataset)} samples to {args.out} (run dir {run_dir})")
    return EXIT_OK


def _train_config_from_args(args, k: int, seed: int) -> TrainConfig:
    return TrainConfig(
        alpha=effective(args, "alpha", 1e-4),
        beta=effective(args, "beta", 1e-4),
        batch_size=effective(args, "batch-size", 16),
        k=k,
        epochs=effective(args, "epochs", 100),
        lr_decay_factor=effective(args, "decay-factor", 0.1),
        lr_decay_period=effective(args, "decay-period", 80),
        weight_decay=effective(args, "weight-decay", 1e-4),
        seed=seed,
        mos_mode=effective(args, "mos", "per-sample"),
        hypergrad_mode=effective(args, "hypergrad", "through"),
        outer_optimizer=effective(args, "outer-opt", "sgd"),
        hidden_dims=effective(args, "hidden", (32,)),
        weightnet_hidden=effective(args, "weightnet-hidden", 100),
        hypergrad_crosscheck=bool(effective(args, "crosscheck", False)),
    )


def _write_eval_artifacts(run_dir: Path, theta, dataset: Dataset) -> None:
    cm, report, embeddings = evaluate(theta, dataset)
    (run_dir / "report.txt").write_text(render_report_text(report, cm))
    (run_dir / "report.csv").write_text(render_report_csv(report))
    dump_embeddings(embeddings, dataset.labels, run_dir / "embeddings.csv")


def run_training(args, k: int, seed: int, run_dir: Path, method: str) -> Path:
    """One full training run into ``run_dir``; returns the run directory."""
    dataset_path = effective(args, "dataset", None)
    if not dataset_path:
        raise UsageError("--dataset: required for training")
    dataset = load_dataset(dataset_path)
    train_frac = effective(args, "train-frac", 0.8)
    train_ds, test_ds = split_train_test(dataset, train_frac, seed)
    config = _train_config_from_args(args, k=k, seed=seed)

    manifest = RunManifest(
        mode=f"train-{method}", seed=seed,
        config={"method": method, "dataset": str(dataset_path),
                "train-frac": train_frac, "k": config.k, "alpha": config.alpha,
                "beta": config.beta, "epochs": config.epochs,
                "batch-size": config.batch_size, "seed": seed,
                "hypergrad": config.hypergrad_mode, "outer-opt": config.outer_optimizer,
                "mos": config.mos_mode, "decay-factor": config.lr_decay_factor,
                "decay-period": config.lr_decay_period, "weight-decay": config.weight_decay,
                "hidden": ",".join(str(d) for d in config.hidden_dims),
                "weightnet-hidden": config.weightnet_hidden},
        started_utc=_utc_now())

    save_dataset(run_dir / "test_split.ds", test_ds)
    if method == "mow":
        result = train(config, train_ds)
        write_trace_csv(run_dir / "trace.csv", result.trace, config.num_classes)
        if result.trace:
            write_weight_trajectory_csv(run_dir / "weight_trajectory.csv",
                                        summarize_weight_trajectory(result.trace))
    else:
        result = train_ce_baseline(config, train_ds)
        write_baseline_trace_csv(run_dir / "trace.csv", result.trace)

    for epoch, theta_snap, phi_snap in result.snapshots:
        save_checkpoint(run_dir / f"ckpt_epoch_{epoch}.bin", theta_snap, phi_snap)
    save_checkpoint(run_dir / "ckpt_final.bin", result.theta, result.phi)
    _write_eval_artifacts(run_dir, result.theta, test_ds)

    manifest.paths = {
        "dataset": str(dataset_path),
        "test_split": str(run_dir / "test_split.ds"),
        "trace": str(run_dir / "trace.csv"),
        "checkpoint_final": str(run_dir / "ckpt_final.bin"),
        "report_txt": str(run_dir / "report.txt"),
        "report_csv": str(run_dir / "report.csv"),
        "embeddings": str(run_dir / "embeddings.csv"),
    }
    manifest.finished_utc = _utc_now()
    manifest.status = "done"
    manifest.save(run_dir / "manifest.json")
    return run_dir


def _explicit_run_dir(out) -> Path:
    run_dir = Path(out)
    try:
        run_dir.mkdir(parents=True, exist_ok=False)
    except FileExistsError:
        raise UsageError(f"--out: {run_dir} already exists; run directories are "
                         f"append-only") from None
    return run_dir


def cmd_train(args) -> int:
    method = effective(args, "method", "mow")
    seed = effective(args, "seed", 0)
    k = effective(args, "k", 1)
    if args.out:
        run_dir = _explicit_run_dir(args.out)
    else:
        run_dir = new_run_dir(f"train-{method}", seed)
    run_training(args, k=k, seed=seed, run_dir=run_dir, method=method)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    theta, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if args.out:
        run_dir = _explicit_run_dir(args.out)
    else:
        run_dir = new_run_dir("eval", 0)
    manifest = RunManifest(mode="eval", seed=0,
                           config={"checkpoint": str(args.checkpoint),
                                   "dataset": str(args.dataset)},
                           started_utc=_utc_now())
    _write_eval_artifacts(run_dir, theta, dataset)
    manifest.paths = {"report_txt": str(run_dir / "report.txt"),
                      "report_csv": str(run_dir / "report.csv"),
                      "embeddings": str(run_dir / "embeddings.csv")}
    manifest.finished_utc = _utc_now()
    manifest.status = "done"
    manifest.save(run_dir / "manifest.json")
    print((run_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def _median_or_none(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.median(defined)) if defined else None


def cmd_sweep_k(args) -> int:
    from .metrics import parse_report_csv

    ks = effective(args, "k", (1, 5, 10))
    n_seeds = effective(args, "seeds", 3)
    base_seed = effective(args, "seed", 0)
    method = effective(args, "method", "mow")
    if args.out:
        sweep_dir = _explicit_run_dir(args.out)
    else:
        sweep_dir = new_run_dir("sweep-k", base_seed)
    manifest = RunManifest(mode="sweep-k", seed=base_seed,
                           config={"k": ",".join(str(k) for k in ks), "seeds": n_seeds,
                                   "method": method,
                                   "dataset": str(effective(args, "dataset", ""))},
                           started_utc=_utc_now())
    failures: list[str] = []
    rows = []
    for k in ks:
        reports = []
        for offset in range(n_seeds):
            seed = base_seed + offset
            run_dir = sweep_dir / f"k{k}-seed{seed}"
            try:
                run_dir.mkdir(parents=False, exist_ok=False)
                run_training(args, k=k, seed=seed, run_dir=run_dir, method=method)
                reports.append(parse_report_csv((run_dir / "report.csv").read_text()))
            except MownetError as err:
                failures.append(f"k={k} seed={seed}: {err}")
                print(f"run k={k} seed={seed} failed: {err}", file=sys.stderr)
        row: dict = {"k": k, "runs": len(reports)}
        row["accuracy"] = _median_or_none([r["accuracy"] for r in reports])
        for c, name in enumerate(CLASS_NAMES):
            for metric in ("precision", "recall", "f1"):
                row[f"{name}_{metric}"] = _median_or_none(
                    [r["per_class"].get(c, {}).get(metric) for r in reports])
        rows.append(row)

    cols = ["k", "runs", "accuracy"] + [f"{n}_{m}" for n in CLASS_NAMES
                                        for m in ("precision", "recall", "f1")]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for col in cols:
            v = row[col]
            cells.append("" if v is None else (str(v) if isinstance(v, int)
                                               else format(v, ".17g")))
        lines.append(",".join(cells))
    (sweep_dir / "sweep.csv").write_text("\n".join(lines) + "\n")

    manifest.paths = {"sweep_csv": str(sweep_dir / "sweep.csv")}
    manifest.finished_utc = _utc_now()
    manifest.status = "done" if not failures else f"{len(failures)} runs failed"
    manifest.save(sweep_dir / "manifest.json")
    print(f"sweep complete: {sweep_dir / 'sweep.csv'}")
    if failures:
        print(f"{len(failures)} runs failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    trials = args.trials if args.trials is not None else 40
    seed = args.seed if args.seed is not None else 0
    if trials == 0:
        print("warning: --trials 0, nothing checked (vacuous pass)")
        return EXIT_OK
    transform = None
    if os.environ.get("MOW_FAULT_INJECT") == "negate-hypergrad":
        # testing hook: corrupt the decomposed route to prove the sentinel trips
        transform = lambda v: -v  # noqa: E731
    fd = autodiff_fd_suite(n_graphs=trials, seed=seed)
    print(fd.summary(verbose=args.verbose))
    hg = hypergrad_equivalence_suite(n_instances=max(1, trials // 4), seed=seed,
                                     decomposed_transform=transform)
    print(hg.summary(verbose=args.verbose))
    if not (fd.passed and hg.passed):
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-k": cmd_sweep_k,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            args._file_config = parse_config_file(args.config)
        else:
            args._file_config = {}
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as err:
        print(f"invalid arguments: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as err:
        print(f"class capacity error: {err}", file=sys.stderr)
        return EXIT_CAPACITY
    except FormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as err:
        print(f"numeric check failed: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
