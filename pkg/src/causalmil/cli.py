"""Command-line surface: data generation, training, evaluation,
attribution, and the graph-variant ablation sweep.

Every command writes its artifacts under ``--out`` together with a
``run.json`` provenance record (resolved config, seed, git describe,
wall clock). Exit codes: 0 success, 2 usage or configuration problem,
1 numeric or other runtime failure. Given identical flags and seeds
the data and model artifacts are byte-identical across runs; only the
provenance record (timing) differs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np

from .bagio import Cohort, ScmConfig, generate_cohort, load_cohort, save_cohort
from .errors import CausalMilError, ConfigError, FormatError
from .evalmetrics import attribution_factor, attribution_total, write_predictions_csv
from .figures import (
    plot_ablation,
    plot_attribution,
    plot_group_accuracy,
    plot_training_curves,
)
from .model import ModelState, forward_bag, load_model, save_model
from .trainer import TrainConfig, evaluate, train, write_log_jsonl

_VARIANTS = ("collider", "fork", "direct", "concat")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def _write_run_record(out_dir: Path, command: str, config: dict, seed, started: float) -> None:
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map library errors onto the exit-code contract."""
    try:
        fn()
    except (ConfigError, FormatError) as exc:
        _fail(exc, 2)
    except CausalMilError as exc:
        _fail(exc, 1)


def _resolve_train_config(config_path: str | None, overrides: dict) -> TrainConfig:
    """JSON config file first, explicit flags on top, defaults underneath."""
    raw: dict = {}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(raw)


def _load_cohort_checked(path: str) -> Cohort:
    return load_cohort(path)


def _train_flags(fn):
    for deco in reversed(
        (
            click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
            click.option("--variant", type=click.Choice(_VARIANTS), default=None),
            click.option("--seed", type=int, default=None),
            click.option("--epochs", type=int, default=None),
            click.option("--accumulation-steps", type=int, default=None),
            click.option("--patience", type=int, default=None),
            click.option("--dropout", type=float, default=None),
            click.option("--d-h", type=int, default=None),
            click.option("--d-q", type=int, default=None),
            click.option("--n-heads", type=int, default=None),
            click.option("--layers", type=int, default=None),
            click.option("--k-frac", type=float, default=None),
            click.option("--base-lr", type=float, default=None),
            click.option("--lambda-fair", type=float, default=None),
            click.option("--survival/--no-survival", default=None),
            click.option(
                "--no-fair-loss",
                is_flag=True,
                help="Drop the fairness penalty (equivalent to a zero weight).",
            ),
        )
    ):
        fn = deco(fn)
    return fn


def _collect_overrides(kwargs: dict) -> dict:
    overrides = {
        key: kwargs[flag]
        for flag, key in (
            ("variant", "variant"),
            ("seed", "seed"),
            ("epochs", "epochs"),
            ("accumulation_steps", "accumulation_steps"),
            ("patience", "patience"),
            ("dropout", "dropout"),
            ("d_h", "d_h"),
            ("d_q", "d_q"),
            ("n_heads", "n_heads"),
            ("layers", "layers"),
            ("k_frac", "k_frac"),
            ("base_lr", "base_lr"),
            ("lambda_fair", "lambda_fair"),
            ("survival", "survival"),
        )
        if kwargs[flag] is not None
    }
    if kwargs["no_fair_loss"]:
        overrides["lambda_fair"] = 0.0
        overrides["fairness_enabled"] = False
    return overrides


@click.group()
def main() -> None:
    """Causality-aware multiple-instance learning toolkit."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--bags", type=int, default=200, show_default=True)
@click.option("--k", type=int, default=16, show_default=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--classes", type=int, default=2, show_default=True)
@click.option("--rho", type=float, default=0.5, show_default=True)
@click.option("--gamma", type=float, default=0.0, show_default=True)
@click.option("--sigma", type=float, default=0.3, show_default=True)
@click.option("--survival", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
def gen_data(out_dir, bags, k, dim, classes, rho, gamma, sigma, survival, seed) -> None:
    """Sample a synthetic confounded cohort and write it to disk."""

    def body() -> None:
        started = time.perf_counter()
        cfg = ScmConfig(
            seed=seed,
            n_bags=bags,
            k=k,
            dim=dim,
            class_count=classes,
            rho=rho,
            gamma=gamma,
            sigma=sigma,
            survival=survival,
        )
        cohort = generate_cohort(cfg)
        out = Path(out_dir)
        manifest = save_cohort(cohort, out)
        config = {
            "seed": seed,
            "n_bags": bags,
            "k": k,
            "dim": dim,
            "class_count": classes,
            "rho": rho,
            "gamma": gamma,
            "sigma": sigma,
            "survival": survival,
        }
        _write_run_record(out, "gen-data", config, seed, started)
        click.echo(f"wrote {len(cohort)} bags to {manifest}")

    _guarded(body)


@main.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_train_flags
def cmd_train(data_path, out_dir, config_path, **kwargs) -> None:
    """Train on a cohort and keep the best-validation checkpoint."""

    def body() -> None:
        started = time.perf_counter()
        cfg = _resolve_train_config(config_path, _collect_overrides(kwargs))
        cohort = _load_cohort_checked(data_path)
        result = train(cohort, cfg)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(result.state, out / "checkpoint.mckp")
        write_log_jsonl(result.log, out / "train_log.jsonl")
        plot_training_curves(result.log, out / "training_curves.png")
        _write_run_record(out, "train", dataclasses.asdict(cfg), cfg.seed, started)
        click.echo(
            f"best epoch {result.best_epoch} with validation metric "
            f"{result.best_metric:.4f}; checkpoint at {out / 'checkpoint.mckp'}"
        )

    _guarded(body)


def _dump_attention(state: ModelState, cohort: Cohort, split: str, path: Path) -> None:
    """Per-instance pooling weights, one row per (bag, instance)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "instance_index", "alpha"])
        for bag in cohort.split_bags(split):
            fw = forward_bag(state, bag, "eval")
            for i, a in enumerate(fw.alpha.data[0]):
                writer.writerow([bag.bag_id, i, f"{float(a)!r}"])


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--split", type=click.Choice(("train", "val", "test")), default="test", show_default=True)
@click.option("--dump-attention", is_flag=True)
@click.option("--dump-predictions", is_flag=True)
def cmd_eval(model_path, data_path, out_dir, split, dump_attention, dump_predictions) -> None:
    """Evaluate a checkpoint on one split and write the report files."""

    def body() -> None:
        started = time.perf_counter()
        state = load_model(model_path)
        cohort = _load_cohort_checked(data_path)
        report, records = evaluate(state, cohort, split)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        if dump_predictions:
            write_predictions_csv(records, out / "predictions.csv")
        if dump_attention:
            _dump_attention(state, cohort, split, out / "attention.csv")
        if any(report.group_accuracy.get(a) for a in report.group_accuracy):
            plot_group_accuracy(report, out / "group_accuracy.png")
        _write_run_record(
            out, "eval", {"model": str(model_path), "split": split}, None, started
        )
        acc = "n/a" if report.acc is None else f"{report.acc:.4f}"
        auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
        ci = "n/a" if report.c_index is None else f"{report.c_index:.4f}"
        click.echo(f"{split}: n={report.n_bags} acc={acc} auc={auc} c_index={ci}")

    _guarded(body)


@main.command("attribute")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--split", type=click.Choice(("train", "val", "test")), default="test", show_default=True)
@click.option(
    "--factor",
    type=click.Choice(("all", "gender", "race", "age")),
    default="all",
    show_default=True,
)
def cmd_attribute(model_path, data_path, out_dir, split, factor) -> None:
    """Per-bag demographic intervention shifts, written as CSV."""

    def body() -> None:
        started = time.perf_counter()
        state = load_model(model_path)
        cohort = _load_cohort_checked(data_path)
        bags = cohort.split_bags(split)
        if not bags:
            raise ConfigError(f"split {split!r} is empty")
        factors = ("gender", "race", "age") if factor == "all" else (factor,)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        columns = ["bag_id", "total"] + list(factors)
        sums = np.zeros(len(factors) + 1)
        with open(out / "attribution.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for bag in bags:
                total = attribution_total(state, bag)
                shifts = [attribution_factor(state, bag, f) for f in factors]
                sums += np.array([total] + shifts)
                writer.writerow([bag.bag_id] + [f"{v!r}" for v in [total] + shifts])
        means = sums / len(bags)
        if factor == "all":
            report, _ = evaluate(state, cohort, split, with_attribution=True)
            plot_attribution(report, out / "attribution.png")
        _write_run_record(
            out, "attribute", {"model": str(model_path), "split": split, "factor": factor},
            None, started,
        )
        pairs = ", ".join(f"{c}={m:.4f}" for c, m in zip(columns[1:], means))
        click.echo(f"mean shifts over {len(bags)} bags: {pairs}")

    _guarded(body)


@main.command("ablate")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option(
    "--variants",
    default=",".join(_VARIANTS),
    show_default=True,
    help="Comma-separated graph variants to compare.",
)
@click.option(
    "--seeds",
    default="0,1,2,3,4",
    show_default=True,
    help="Comma-separated training seeds.",
)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--epochs", type=int, default=None)
@click.option("--d-h", type=int, default=None)
@click.option("--d-q", type=int, default=None)
@click.option("--n-heads", type=int, default=None)
@click.option("--k-frac", type=float, default=None)
@click.option("--base-lr", type=float, default=None)
def cmd_ablate(data_path, out_dir, variants, seeds, config_path, **kwargs) -> None:
    """Train every requested graph variant over the seed list and tabulate
    accuracy, AUC, and gender disparity on the test split."""

    def body() -> None:
        started = time.perf_counter()
        variant_list = [v.strip() for v in variants.split(",") if v.strip()]
        for v in variant_list:
            if v not in _VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; expected one of {_VARIANTS}")
        if not variant_list:
            raise ConfigError("no variants requested")
        try:
            seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"seeds must be integers: {exc}") from exc
        if not seed_list:
            raise ConfigError("no seeds requested")
        overrides = {k: v for k, v in kwargs.items() if v is not None}
        cohort = _load_cohort_checked(data_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for variant in variant_list:
            for seed in seed_list:
                cfg = _resolve_train_config(
                    config_path, {**overrides, "variant": variant, "seed": seed}
                )
                if cfg.survival:
                    raise ConfigError("the ablation table is classification-only")
                result = train(cohort, cfg)
                report, _ = evaluate(result.state, cohort, "test")
                rows.append(
                    {
                        "variant": variant,
                        "seed": seed,
                        "acc": report.acc,
                        "auc": report.auc,
                        "f1": report.f1,
                        "gdv": report.gdv["gender"],
                        "gdv_race": report.gdv["race"],
                        "gdv_age": report.gdv["age"],
                    }
                )
                click.echo(
                    f"{variant} seed {seed}: acc={report.acc:.4f} "
                    f"gdv_gender={_fmt(report.gdv['gender'])}"
                )
        columns = ["variant", "seed", "acc", "auc", "f1", "gdv", "gdv_race", "gdv_age"]
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow(
                    [row["variant"], row["seed"]]
                    + ["" if row[c] is None else f"{row[c]!r}" for c in columns[2:]]
                )
        plot_ablation(rows, out / "ablation.png")
        click.echo(f"\n{'variant':<10}{'acc':>8}{'auc':>8}{'gdv(gender)':>14}")
        for variant in variant_list:
            sub = [r for r in rows if r["variant"] == variant]
            acc = np.mean([r["acc"] for r in sub])
            auc_vals = [r["auc"] for r in sub if r["auc"] is not None]
            auc = np.mean(auc_vals) if auc_vals else None
            gdv_vals = [r["gdv"] for r in sub if r["gdv"] is not None]
            gdv = np.mean(gdv_vals) if gdv_vals else None
            click.echo(f"{variant:<10}{acc:>8.4f}{_fmt(auc):>8}{_fmt(gdv):>14}")
        _write_run_record(
            out,
            "ablate",
            {"variants": variant_list, "seeds": seed_list, "overrides": overrides},
            seed_list,
            started,
        )

    _guarded(body)


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


if __name__ == "__main__":
    main()
