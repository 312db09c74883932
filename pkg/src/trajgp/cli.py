"""Command-line front door.

Subcommands wire the pipeline end to end: synth, split, train-population,
train-shrinkage, personalize, evaluate, plot, and a pipeline convenience
command that chains them. Flags are long-form only; precedence is
flags > --config file (key=value lines) > built-in defaults, and the
resolved values are echoed into a manifest written beside the primary
output. Exit codes: 0 success, 1 usage error, 2 data/model error. Progress
goes to stderr so output streams stay machine-parseable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .boosting import GbtConfig
from .dataset import (
    SynthConfig,
    generate_synthetic_cohort,
    load_cohort_csv,
    save_cohort_csv,
    split_cohort,
    truncate_history,
)
from .errors import HistoryError, ParameterError, TrajgpError
from .evaluation import run_benchmark, save_report, save_report_csv
from .manifest import RunManifest, manifest_path_for, sha256_file, write_manifest
from .plotting import emit_plot
from .population import TrainConfig, load_model, save_model, train_population
from .shrinkage import (
    personalize_full,
    save_alpha_dataset_csv,
    save_estimator,
    load_estimator,
    train_shrinkage_estimator,
    trajectory_grid,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(f"{self.prog}: {message}")


DEFAULTS: dict[str, dict] = {
    "synth": {
        "seed": 0, "feature_dim": 20, "noise_sd": 0.05, "visits_min": 4, "visits_max": 8,
        "spacing_min": 6.0, "spacing_max": 18.0, "class_mix": "0.5,0.3,0.2",
    },
    "split": {"fractions": "0.8,0.1,0.1", "seed": 0},
    "train-population": {
        "epochs": 500, "learning_rate": 0.01, "weight_decay": 0.01, "dropout": 0.2,
        "latent_dim": 8, "hidden": "", "seed": 0,
    },
    "train-shrinkage": {
        "h_min": 2, "h_max": 0, "grid_step": 6.0, "rounds": 200, "max_depth": 3,
        "learning_rate": 0.05, "min_leaf": 5, "alpha_csv": "", "workers": 0,
    },
    "personalize": {
        "history": 0, "grid_stop": 0.0, "grid_step": 6.0, "variance_mode": "independent",
    },
    "evaluate": {
        "h": "4", "variance_mode": "independent", "grid_step": 6.0,
        "bootstrap_seed": 0, "csv": "", "workers": 0,
    },
    "plot": {"history": 0, "grid_stop": 0.0, "grid_step": 6.0},
    "pipeline": {
        "subjects": 300, "seed": 7, "fractions": "0.6667,0.16665,0.16665",
        "epochs": 500, "learning_rate": 0.01, "weight_decay": 0.01, "dropout": 0.2,
        "latent_dim": 8, "hidden": "", "noise_sd": 0.05, "h": "2,3,4,5",
        "variance_mode": "covariance", "grid_step": 6.0, "rounds": 200,
        "max_depth": 3, "min_leaf": 5, "workers": 0,
    },
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "synth": ("subjects", "out"),
    "split": ("cohort", "out_train", "out_val", "out_test"),
    "train-population": ("cohort", "out"),
    "train-shrinkage": ("model", "cohort", "out"),
    "personalize": ("model", "estimator", "cohort", "subject_id", "out"),
    "evaluate": ("model", "estimator", "cohort", "out"),
    "plot": ("model", "estimator", "cohort", "subject_id", "out"),
    "pipeline": ("workdir",),
}


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != n:
        raise UsageError(f"{what} needs {n} comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"{what}: could not parse {text!r}") from None


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"{what}: could not parse {text!r}") from None


def _workers(value: int) -> int:
    return value if value > 0 else (os.cpu_count() or 1)


def _read_config_file(path: str) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, _, raw = line.partition("=")
        values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def _resolve(args: argparse.Namespace) -> dict:
    command = args.command
    cfg = dict(DEFAULTS[command])
    for key in REQUIRED[command]:
        cfg.setdefault(key, None)
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} for {command}")
            like = DEFAULTS[command].get(key, "")
            cfg[key] = _coerce(raw, like)
    for key in cfg:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
    for key in REQUIRED[command]:
        if cfg[key] is None:
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg


# ---------------------------------------------------------------------------
# Subcommand implementations: each returns (input paths, output paths)
# ---------------------------------------------------------------------------

def _cmd_synth(cfg: dict) -> tuple[list[Path], list[Path]]:
    mix = _parse_floats(cfg["class_mix"], 3, "--class-mix")
    config = SynthConfig(
        n_subjects=cfg["subjects"],
        feature_dim=cfg["feature_dim"],
        visits_per_subject=(cfg["visits_min"], cfg["visits_max"]),
        visit_spacing_months=(cfg["spacing_min"], cfg["spacing_max"]),
        class_mix=mix,
        noise_sd=cfg["noise_sd"],
        seed=cfg["seed"],
    )
    cohort = generate_synthetic_cohort(config)
    out = Path(cfg["out"])
    save_cohort_csv(cohort, out)
    _progress(f"wrote {len(cohort)} subjects to {out}")
    return [], [out]


def _cmd_split(cfg: dict) -> tuple[list[Path], list[Path]]:
    cohort_path = Path(cfg["cohort"])
    cohort = load_cohort_csv(cohort_path)
    fractions = _parse_floats(cfg["fractions"], 3, "--fractions")
    train, val, test = split_cohort(cohort, fractions, cfg["seed"])
    outs = [Path(cfg["out_train"]), Path(cfg["out_val"]), Path(cfg["out_test"])]
    for part, out in zip((train, val, test), outs):
        save_cohort_csv(part, out)
    _progress(f"split {len(cohort)} subjects into {len(train)}/{len(val)}/{len(test)}")
    return [cohort_path], outs


def _cmd_train_population(cfg: dict) -> tuple[list[Path], list[Path]]:
    cohort_path = Path(cfg["cohort"])
    cohort = load_cohort_csv(cohort_path)
    hidden = tuple(_parse_ints(cfg["hidden"], "--hidden")) if cfg["hidden"] else None
    config = TrainConfig(
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        dropout=cfg["dropout"],
        latent_dim=cfg["latent_dim"],
        hidden_sizes=hidden,
        seed=cfg["seed"],
    )
    _progress(f"training population model on {len(cohort)} subjects for {config.epochs} epochs")
    model = train_population(cohort, config)
    out = Path(cfg["out"])
    save_model(model, out)
    _progress(f"final MLL {model.mll_trace[-1]:.4f}, wrote {out}")
    return [cohort_path], [out]


def _cmd_train_shrinkage(cfg: dict) -> tuple[list[Path], list[Path]]:
    model_path, cohort_path = Path(cfg["model"]), Path(cfg["cohort"])
    pop = load_model(model_path)
    validation = load_cohort_csv(cohort_path)
    h_range = range(cfg["h_min"], cfg["h_max"] + 1) if cfg["h_max"] > 0 else None
    gbt = GbtConfig(
        rounds=cfg["rounds"], max_depth=cfg["max_depth"],
        learning_rate=cfg["learning_rate"], min_leaf=cfg["min_leaf"],
    )
    _progress(f"building alpha dataset from {len(validation)} validation subjects")
    est, rows = train_shrinkage_estimator(
        pop, validation, h_range, cfg["grid_step"], gbt, _workers(cfg["workers"])
    )
    out = Path(cfg["out"])
    save_estimator(est, out)
    outputs = [out]
    if cfg["alpha_csv"]:
        save_alpha_dataset_csv(rows, Path(cfg["alpha_csv"]))
        outputs.append(Path(cfg["alpha_csv"]))
    _progress(f"fitted alpha regressor on {len(rows)} rows, wrote {out}")
    return [model_path, cohort_path], outputs


def _select_subject(cohort, subject_id: str):
    for s in cohort.subjects:
        if s.subject_id == subject_id:
            return s
    raise ParameterError(f"subject {subject_id!r} not in cohort")


def _observed_and_grid(cfg: dict, subject):
    if cfg["history"] > 0:
        if cfg["history"] >= subject.n_visits:
            raise HistoryError(
                f"--history {cfg['history']} must be < the subject's {subject.n_visits} visits"
            )
        observed, _ = truncate_history(subject, cfg["history"])
    else:
        observed = subject
    t_obs = observed.visits[-1].time_months
    stop = cfg["grid_stop"] if cfg["grid_stop"] > 0 else t_obs + 120.0
    grid = trajectory_grid(stop, observed.times, cfg["grid_step"])
    return observed, grid


def _cmd_personalize(cfg: dict) -> tuple[list[Path], list[Path]]:
    inputs = [Path(cfg["model"]), Path(cfg["estimator"]), Path(cfg["cohort"])]
    pop = load_model(inputs[0])
    est = load_estimator(inputs[1])
    cohort = load_cohort_csv(inputs[2])
    subject = _select_subject(cohort, cfg["subject_id"])
    observed, grid = _observed_and_grid(cfg, subject)
    res = personalize_full(pop, est, observed, grid, cfg["variance_mode"])
    doc = {
        "format": "trajgp-personalized-curve",
        "version": 1,
        "subject_id": subject.subject_id,
        "alpha": res.alpha,
        "variance_mode": cfg["variance_mode"],
        "t_obs_months": observed.visits[-1].time_months,
        "times": res.curve.times.tolist(),
        "mean": res.curve.mean.tolist(),
        "variance": res.curve.variance.tolist(),
    }
    out = Path(cfg["out"])
    out.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _progress(f"personalized {subject.subject_id} with alpha={res.alpha:.3f}")
    return inputs, [out]


def _cmd_evaluate(cfg: dict) -> tuple[list[Path], list[Path]]:
    inputs = [Path(cfg["model"]), Path(cfg["estimator"]), Path(cfg["cohort"])]
    pop = load_model(inputs[0])
    est = load_estimator(inputs[1])
    test = load_cohort_csv(inputs[2])
    h_values = _parse_ints(cfg["h"], "--h")
    if not h_values:
        raise UsageError("--h needs at least one history length")
    report = run_benchmark(
        pop, est, test, h_values,
        variance_mode=cfg["variance_mode"],
        grid_step_months=cfg["grid_step"],
        bootstrap_seed=cfg["bootstrap_seed"],
        workers=_workers(cfg["workers"]),
    )
    out = Path(cfg["out"])
    save_report(report, out)
    outputs = [out]
    if cfg["csv"]:
        save_report_csv(report, Path(cfg["csv"]))
        outputs.append(Path(cfg["csv"]))
    _progress(
        f"mean MAE {report.aggregate['mean_mae']:.4f} "
        f"(+/- {report.aggregate['mae_ci95']:.4f}), coverage {report.aggregate['mean_coverage']:.3f}"
    )
    return inputs, outputs


def _cmd_plot(cfg: dict) -> tuple[list[Path], list[Path]]:
    inputs = [Path(cfg["model"]), Path(cfg["estimator"]), Path(cfg["cohort"])]
    pop = load_model(inputs[0])
    est = load_estimator(inputs[1])
    cohort = load_cohort_csv(inputs[2])
    subject = _select_subject(cohort, cfg["subject_id"])
    observed, grid = _observed_and_grid(cfg, subject)
    res = personalize_full(pop, est, observed, grid)
    out = Path(cfg["out"])
    emit_plot(res.curve, observed, out)
    _progress(f"wrote {out}")
    return inputs, [out]


def _cmd_pipeline(cfg: dict) -> tuple[list[Path], list[Path]]:
    workdir = Path(cfg["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "cohort": workdir / "cohort.csv",
        "train": workdir / "train.csv",
        "val": workdir / "val.csv",
        "test": workdir / "test.csv",
        "model": workdir / "population.json",
        "estimator": workdir / "estimator.json",
        "alpha_csv": workdir / "alpha_dataset.csv",
        "report": workdir / "report.json",
        "report_csv": workdir / "report.csv",
    }
    _cmd_synth({
        "subjects": cfg["subjects"], "seed": cfg["seed"], "out": str(paths["cohort"]),
        "feature_dim": 20, "noise_sd": cfg["noise_sd"], "visits_min": 4, "visits_max": 8,
        "spacing_min": 6.0, "spacing_max": 18.0, "class_mix": "0.5,0.3,0.2",
    })
    _cmd_split({
        "cohort": str(paths["cohort"]), "fractions": cfg["fractions"], "seed": cfg["seed"],
        "out_train": str(paths["train"]), "out_val": str(paths["val"]), "out_test": str(paths["test"]),
    })
    _cmd_train_population({
        "cohort": str(paths["train"]), "out": str(paths["model"]),
        "epochs": cfg["epochs"], "learning_rate": cfg["learning_rate"],
        "weight_decay": cfg["weight_decay"], "dropout": cfg["dropout"],
        "latent_dim": cfg["latent_dim"], "hidden": cfg["hidden"], "seed": cfg["seed"],
    })
    _cmd_train_shrinkage({
        "model": str(paths["model"]), "cohort": str(paths["val"]), "out": str(paths["estimator"]),
        "h_min": 2, "h_max": 0, "grid_step": cfg["grid_step"], "rounds": cfg["rounds"],
        "max_depth": cfg["max_depth"], "learning_rate": 0.05, "min_leaf": cfg["min_leaf"],
        "alpha_csv": str(paths["alpha_csv"]), "workers": cfg["workers"],
    })
    _cmd_evaluate({
        "model": str(paths["model"]), "estimator": str(paths["estimator"]),
        "cohort": str(paths["test"]), "h": cfg["h"], "variance_mode": cfg["variance_mode"],
        "grid_step": cfg["grid_step"], "bootstrap_seed": cfg["seed"],
        "out": str(paths["report"]), "csv": str(paths["report_csv"]), "workers": cfg["workers"],
    })
    # Report first: the pipeline manifest lands beside it.
    ordered = ["report", "report_csv", "cohort", "train", "val", "test", "model", "estimator", "alpha_csv"]
    return [], [paths[k] for k in ordered]


_COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train-population": _cmd_train_population,
    "train-shrinkage": _cmd_train_shrinkage,
    "personalize": _cmd_personalize,
    "evaluate": _cmd_evaluate,
    "plot": _cmd_plot,
    "pipeline": _cmd_pipeline,
}

_FLAG_TYPES = {
    "subjects": int, "seed": int, "feature_dim": int, "visits_min": int, "visits_max": int,
    "epochs": int, "latent_dim": int, "h_min": int, "h_max": int, "rounds": int,
    "max_depth": int, "min_leaf": int, "workers": int, "history": int, "bootstrap_seed": int,
    "noise_sd": float, "spacing_min": float, "spacing_max": float, "learning_rate": float,
    "weight_decay": float, "dropout": float, "grid_step": float, "grid_stop": float,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajgp", description=__doc__, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"trajgp {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in _COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", default=None, help="key=value config file")
        keys = set(DEFAULTS[name]) | set(REQUIRED[name])
        for key in sorted(keys):
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, type=_FLAG_TYPES.get(key, str))
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see trajgp --help)")
        cfg = _resolve(args)
        start = time.monotonic()
        inputs, outputs = _COMMANDS[args.command](cfg)
        duration = time.monotonic() - start
        manifest = RunManifest(
            command=args.command,
            config={k: v for k, v in sorted(cfg.items())},
            seed=cfg.get("seed"),
            tool_version=__version__,
            duration_seconds=duration,
            input_digests={str(p): sha256_file(p) for p in inputs},
            output_digests={str(p): sha256_file(p) for p in outputs},
        )
        primary = outputs[0] if outputs else Path(cfg.get("workdir", "."))
        write_manifest(manifest, manifest_path_for(primary))
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (TrajgpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
