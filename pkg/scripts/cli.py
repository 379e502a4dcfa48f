"""
VibroSP command-line interface

Subcommands wire the experiment matrix end to end:

    synth        generate the seeded fixture corpus as a CSV tree
    ingest       load the CSV tree, assign folds, write the dataset manifest
    optimize-sp  AIC-guided signal-processing search per fold
    extract      apply each fold's winning pipeline and cache features
    train        RFECV + grid tuning + out-of-fold predictions per estimator
    compare      paired statistics between configured experiments
    report       aggregate every artifact into one summary
    all          run the whole chain

Exit codes: 0 success, 1 usage/configuration, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import joblib
import numpy as np
import optuna
import pandas as pd
import scipy
import sklearn
from dotenv import load_dotenv

import scripts
from scripts.config import AppConfig, ExperimentConfig, load_config
from scripts.dsp_kernels import apply_pipeline
from scripts.errors import AlignmentError, MissingArtifactError, VibroSPError
from scripts.estimators import dump_model
from scripts.feature_extraction import extract_matrix, load_feature_matrix, save_feature_matrix
from scripts.ml_optimizer import run_training
from scripts.pipeline_optimizer import (
    FeatureCache,
    PipelineSearchReport,
    StageGrid,
    optimize_fold,
)
from scripts.signal_io import (
    Dataset,
    FaultClass,
    NATIVE_SAMPLING_RATE_HZ,
    apply_sampling,
    assign_folds,
    build_manifest,
    class_counts,
    dataset_from_manifest,
    fold_table,
    load_directory,
    load_manifest,
    save_manifest,
    synth_dataset,
    write_csv_tree,
)
from scripts.stat_eval import adjust_family, compare_configurations, stat_table

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
COMMANDS = ("synth", "ingest", "optimize-sp", "extract", "train", "compare", "report", "all")
REPORT_KEYS = {
    "pipeline_search": ("provenance", "experiment", "winners", "tuned", "records"),
    "metrics": ("provenance", "experiment", "estimator", "folds", "pooled"),
    "comparison": ("provenance", "comparisons"),
    "summary": ("provenance", "dataset", "experiments", "comparisons"),
}


# Artifact helpers


def banner(step: str):
    logger.info("=" * 80)
    logger.info(f"RUNNING: {step}")
    logger.info("=" * 80)


def atomic_write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Cannot serialize {type(obj).__name__}")


def write_json(path: Path, payload: dict, kind: str | None = None) -> Path:
    if kind is not None:
        validate_report(payload, kind)
    return atomic_write_text(
        path, json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"
    )


def read_json(path: Path, producer: str) -> dict:
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return json.loads(path.read_text())


def write_table(path: Path, frame: pd.DataFrame) -> None:
    """CSV for machines plus an aligned text rendering next to it."""
    atomic_write_text(path.with_suffix(".csv"), frame.to_csv(index=False))
    atomic_write_text(path.with_suffix(".txt"), frame.to_string(index=False) + "\n")


def validate_report(payload: dict, kind: str) -> None:
    missing = [k for k in REPORT_KEYS[kind] if k not in payload]
    if missing:
        raise VibroSPError(f"{kind} report is missing keys {missing}")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(cfg: AppConfig) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "package": "vibrosp",
        "version": scripts.__version__,
        "libraries": {
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "pandas": pd.__version__,
        },
    }


class Stamp:
    """Input digest of a finished subcommand; a matching stamp makes reruns no-ops."""

    def __init__(self, directory: Path, command: str, cfg: AppConfig, extra=None, inputs=()):
        self.path = Path(directory) / f".stamp_{command}"
        self.command = command
        self.digest = joblib.hash(
            {
                "command": command,
                "config": cfg.config_hash(),
                "extra": extra,
                "inputs": [file_digest(p) for p in inputs],
            }
        )

    def fresh(self, outputs=()) -> bool:
        ok = (
            self.path.is_file()
            and self.path.read_text().strip() == self.digest
            and all(Path(p).exists() for p in outputs)
        )
        if ok:
            logger.info(f"{self.command}: inputs unchanged, nothing to do")
        return ok

    def write(self):
        atomic_write_text(self.path, self.digest + "\n")


# Paths


def manifest_path(cfg: AppConfig) -> Path:
    return cfg.output_dir / "dataset" / "manifest.json"


def experiment_dir(cfg: AppConfig, exp: ExperimentConfig) -> Path:
    return cfg.output_dir / exp.name


def search_path(cfg, exp) -> Path:
    return experiment_dir(cfg, exp) / "pipeline_search.json"


def feature_path(cfg, exp, fold: int) -> Path:
    return experiment_dir(cfg, exp) / "features" / f"fold_{fold}.parquet"


def oof_path(cfg, exp, estimator: str) -> Path:
    return experiment_dir(cfg, exp) / estimator / "oof.parquet"


def metrics_path(cfg, exp, estimator: str) -> Path:
    return experiment_dir(cfg, exp) / estimator / "metrics.json"


def _memory(cfg: AppConfig) -> joblib.Memory:
    return joblib.Memory(cfg.cache_dir / "joblib", verbose=0)


def load_experiment_dataset(cfg: AppConfig, exp: ExperimentConfig) -> Dataset:
    path = manifest_path(cfg)
    if not path.is_file():
        raise MissingArtifactError(path, "ingest")
    d = dataset_from_manifest(load_manifest(path), jobs=cfg.jobs)
    d = apply_sampling(d, exp.sampling)
    exp.check_grid(d.windows[0].n_samples)
    logger.info(
        f"Experiment {exp.name}: {len(d)} windows of {d.windows[0].n_samples} samples "
        f"@ {d.windows[0].sampling_rate_hz:g} Hz"
    )
    return d


# Subcommands


def cmd_synth(cfg: AppConfig) -> None:
    banner("Synthesize fixture corpus")
    root = cfg.data.data_dir
    stamp = Stamp(root, "synth", cfg, extra=cfg.raw["synth"])
    if stamp.fresh([root]):
        return
    d = synth_dataset(cfg.synth, cfg.seed)
    paths = write_csv_tree(d, root, cfg.data.channel_columns)
    logger.info(f"Wrote {len(paths)} windows under {root}")
    stamp.write()


def _ingest_rate(cfg: AppConfig) -> float:
    if cfg.data.sampling_rate_hz is not None:
        return float(cfg.data.sampling_rate_hz)
    if cfg.data.source == "synth":
        return float(cfg.synth.sampling_rate_hz)
    return NATIVE_SAMPLING_RATE_HZ


def cmd_ingest(cfg: AppConfig) -> None:
    banner("Ingest dataset")
    out = manifest_path(cfg)
    stamp = Stamp(out.parent, "ingest", cfg)
    if stamp.fresh([out]):
        return
    d = load_directory(cfg.data.data_dir, cfg.data.channel_columns, _ingest_rate(cfg), cfg.jobs)
    d = assign_folds(d, cfg.k, cfg.seed)
    m = build_manifest(d, cfg.data.data_dir, cfg.data.channel_columns, _ingest_rate(cfg))
    save_manifest(m, out)
    write_table(out.parent / "fold_table", fold_table(d).reset_index())
    logger.info(f"Class counts: {class_counts(d)}")
    stamp.write()


def cmd_optimize_sp(cfg: AppConfig, exp: ExperimentConfig) -> None:
    banner(f"Optimize signal processing [{exp.name}]")
    out = search_path(cfg, exp)
    if not manifest_path(cfg).is_file():
        raise MissingArtifactError(manifest_path(cfg), "ingest")
    stamp = Stamp(out.parent, "optimize-sp", cfg, exp.to_dict(), [manifest_path(cfg)])
    if stamp.fresh([out]):
        return
    d = load_experiment_dataset(cfg, exp)
    grid = StageGrid.for_mode(exp.grid_mode, cfg.signal_processing.max_imfs)
    sp = cfg.signal_processing
    cached_fold = _memory(cfg).cache(optimize_fold, ignore=["cache", "jobs"])
    cache = FeatureCache()
    folds = []
    for fold in range(d.n_folds):
        logger.info(f"--- Fold {fold + 1}/{d.n_folds} ---")
        folds.append(
            cached_fold(d, fold, grid, cfg.features, sp.stages, sp.joint_search, cache=cache, jobs=cfg.jobs)
        )
    report = PipelineSearchReport(folds)
    payload = {"provenance": provenance(cfg), "experiment": exp.to_dict(), "grid_mode": grid.grid_mode.value}
    payload |= report.to_dict()
    write_json(out, payload, "pipeline_search")
    write_table(out.parent / "search_records", report.records_frame())
    write_table(out.parent / "stage_table", report.stage_table())
    write_table(out.parent / "ordering_table", report.ordering_table())
    stamp.write()


def cmd_extract(cfg: AppConfig, exp: ExperimentConfig) -> None:
    banner(f"Extract features [{exp.name}]")
    search = search_path(cfg, exp)
    winners = PipelineSearchReport.winners_from_dict(read_json(search, "optimize-sp"))
    stamp = Stamp(experiment_dir(cfg, exp) / "features", "extract", cfg, exp.to_dict(), [search])
    outputs = [feature_path(cfg, exp, f) for f in winners]
    if stamp.fresh(outputs):
        return
    d = load_experiment_dataset(cfg, exp)
    matrices = {}
    for fold, pipeline in sorted(winners.items()):
        text = pipeline.to_text()
        if text not in matrices:
            logger.info(f"Applying {text} to {len(d)} windows")
            windows = joblib.Parallel(n_jobs=cfg.jobs)(
                joblib.delayed(apply_pipeline)(w, pipeline) for w in d.windows
            )
            matrices[text] = extract_matrix(windows, cfg.features, d.fold_of, cfg.jobs)
        save_feature_matrix(matrices[text], feature_path(cfg, exp, fold))
        logger.info(f"Fold {fold}: {matrices[text].n_features} features cached")
    stamp.write()


def cmd_train(cfg: AppConfig, exp: ExperimentConfig) -> None:
    banner(f"Train classifiers [{exp.name}]")
    search = read_json(search_path(cfg, exp), "optimize-sp")
    folds = sorted(int(f) for f in search["winners"])
    paths = {f: feature_path(cfg, exp, f) for f in folds}
    for p in paths.values():
        if not p.is_file():
            raise MissingArtifactError(p, "extract")
    matrices = {f: load_feature_matrix(p) for f, p in paths.items()}
    n_classes = len(FaultClass)
    train_fold_cached = _memory(cfg).cache(_train_estimator, ignore=["jobs"])

    for kind in cfg.estimators_for(exp):
        est_dir = experiment_dir(cfg, exp) / kind
        stamp = Stamp(est_dir, "train", cfg, [exp.to_dict(), kind], list(paths.values()))
        if stamp.fresh([metrics_path(cfg, exp, kind), oof_path(cfg, exp, kind)]):
            continue
        report = train_fold_cached(matrices, cfg.ml.plan(kind, cfg.seed), n_classes, jobs=cfg.jobs)
        _write_training(cfg, exp, kind, report)
        stamp.write()


def _train_estimator(matrices, plan, n_classes, jobs=1):
    return run_training(matrices, plan, n_classes, jobs)


def _write_training(cfg, exp, kind, report) -> None:
    est_dir = experiment_dir(cfg, exp) / kind
    pooled = report.pooled_metrics()
    payload = {
        "provenance": provenance(cfg),
        "experiment": exp.to_dict(),
        "estimator": kind,
        "folds": {
            str(f.fold): {
                "metrics": f.metrics.to_dict(),
                "n_features": len(f.selection.selected_features),
                "selected_features": f.selection.selected_features,
                "hyperparams": f.tuning.best_hyperparams,
            }
            for f in report.folds
        },
        "pooled": pooled.to_dict(),
    }
    write_json(metrics_path(cfg, exp, kind), payload, "metrics")
    frame = report.oof_frame()
    tmp = oof_path(cfg, exp, kind).with_suffix(".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    frame.to_parquet(tmp, index=False)
    os.replace(tmp, oof_path(cfg, exp, kind))
    write_table(est_dir / "selection", report.selection_table())
    write_table(est_dir / "metrics_table", report.metrics_table())
    write_table(est_dir / "cv_trace", report.trace_frame())
    classes = [f"class_{c}" for c in range(pooled.confusion.shape[0])]
    for f in report.folds:
        write_table(est_dir / f"confusion_fold_{f.fold}", pd.DataFrame(f.metrics.confusion, columns=classes))
        dump_model(f.model, est_dir / "models" / f"fold_{f.fold}.json")
    write_table(est_dir / "confusion_pooled", pd.DataFrame(pooled.confusion, columns=classes))


def _read_oof(cfg, exp, kind) -> pd.DataFrame:
    path = oof_path(cfg, exp, kind)
    if not path.is_file():
        raise MissingArtifactError(path, "train")
    return pd.read_parquet(path)


def cmd_compare(cfg: AppConfig) -> None:
    banner("Compare configurations")
    out_dir = cfg.output_dir / "comparisons"
    inputs = []
    for c in cfg.comparisons:
        for name in (c.alt, c.null):
            exp = cfg.experiment(name)
            for kind in cfg.ml.estimators:
                if kind in cfg.estimators_for(exp):
                    inputs.append(oof_path(cfg, exp, kind))
    for p in inputs:
        if not p.is_file():
            raise MissingArtifactError(p, "train")
    stamp = Stamp(out_dir, "compare", cfg, inputs=inputs)
    if stamp.fresh([out_dir / "comparisons.json"]):
        return

    n_tests = cfg.n_tests()
    reports = []
    for c in cfg.comparisons:
        alt_exp, null_exp = cfg.experiment(c.alt), cfg.experiment(c.null)
        for kind in cfg.ml.estimators:
            if kind not in cfg.estimators_for(alt_exp) or kind not in cfg.estimators_for(null_exp):
                continue
            alt, null = _read_oof(cfg, alt_exp, kind), _read_oof(cfg, null_exp, kind)
            if list(alt["source_id"]) != list(null["source_id"]) or not np.array_equal(
                alt["label"].to_numpy(), null["label"].to_numpy()
            ):
                raise AlignmentError(f"{c.name} [{kind}]: out-of-fold rows are not paired")
            prob_cols = [col for col in alt.columns if col.startswith("p_")]
            reports.append(
                compare_configurations(
                    alt[prob_cols].to_numpy(),
                    null[prob_cols].to_numpy(),
                    alt["label"].to_numpy(),
                    entry_ids=list(alt["source_id"]),
                    alt_name=c.alt,
                    null_name=c.null,
                    estimator=kind,
                    alpha=cfg.stats.alpha,
                    n_tests=n_tests,
                    n_boot=cfg.stats.n_boot,
                    seed=cfg.seed,
                    zero_method=cfg.stats.zero_method,
                    jobs=cfg.jobs,
                )
            )
    reports = adjust_family(reports, cfg.stats.alpha)
    payload = {
        "provenance": provenance(cfg),
        "family_size": n_tests,
        "comparisons": [r.to_dict() for r in reports],
    }
    write_json(out_dir / "comparisons.json", payload, "comparison")
    write_table(out_dir / "stat_table", stat_table(reports))
    stamp.write()


def cmd_report(cfg: AppConfig) -> None:
    banner("Build report")
    manifest = load_manifest(manifest_path(cfg)) if manifest_path(cfg).is_file() else None
    if manifest is None:
        raise MissingArtifactError(manifest_path(cfg), "ingest")
    summary = {
        "provenance": provenance(cfg),
        "dataset": {
            "n_windows": len(manifest.entries),
            "k": manifest.k,
            "sampling_rate_hz": manifest.sampling_rate_hz,
        },
        "experiments": {},
        "comparisons": [],
    }
    lines = ["# VibroSP report", "", f"Config hash: `{cfg.config_hash()}`  ", f"Seed: {cfg.seed}", ""]
    fold_txt = manifest_path(cfg).parent / "fold_table.txt"
    if fold_txt.is_file():
        lines += ["## Class counts per fold", "", "```", fold_txt.read_text().rstrip(), "```", ""]

    for exp in cfg.experiments:
        search = read_json(search_path(cfg, exp), "optimize-sp")
        entry = {"winners": search["winners"], "tuned": search["tuned"], "metrics": {}}
        lines += [f"## Experiment `{exp.name}`", ""]
        for name in ("stage_table", "ordering_table"):
            lines += [f"{name.replace('_', ' ').capitalize()}:", "", "```",
                      (experiment_dir(cfg, exp) / f"{name}.txt").read_text().rstrip(), "```", ""]
        for kind in cfg.estimators_for(exp):
            metrics = read_json(metrics_path(cfg, exp, kind), "train")
            entry["metrics"][kind] = metrics["pooled"]
            table = experiment_dir(cfg, exp) / kind / "metrics_table.txt"
            lines += [f"Metrics ({kind}):", "", "```", table.read_text().rstrip(), "```", ""]
        summary["experiments"][exp.name] = entry

    if cfg.comparisons:
        comparisons = read_json(cfg.output_dir / "comparisons" / "comparisons.json", "compare")
        summary["comparisons"] = comparisons["comparisons"]
        lines += ["## Comparisons", "", "```",
                  (cfg.output_dir / "comparisons" / "stat_table.txt").read_text().rstrip(), "```", ""]

    write_json(cfg.output_dir / "summary.json", summary, "summary")
    atomic_write_text(cfg.output_dir / "report.md", "\n".join(lines))
    logger.info(f"Report written to {cfg.output_dir / 'report.md'}")


def _selected_experiments(cfg: AppConfig, name: str | None) -> list[ExperimentConfig]:
    return [cfg.experiment(name)] if name else list(cfg.experiments)


def run(command: str, cfg: AppConfig, experiment: str | None = None) -> None:
    if command in ("synth", "all") and (command == "synth" or cfg.data.source == "synth"):
        cmd_synth(cfg)
        if command == "synth":
            return
    if command in ("ingest", "all"):
        cmd_ingest(cfg)
    for exp in _selected_experiments(cfg, experiment):
        if command in ("optimize-sp", "all"):
            cmd_optimize_sp(cfg, exp)
        if command in ("extract", "all"):
            cmd_extract(cfg, exp)
        if command in ("train", "all"):
            cmd_train(cfg, exp)
    if command in ("compare", "all"):
        cmd_compare(cfg)
    if command in ("report", "all"):
        cmd_report(cfg)


# Entry point


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="vibrosp", description=__doc__.splitlines()[1])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--cache-dir", type=str)
    parser.add_argument("--output-dir", type=str)
    parser.add_argument("--experiment", help="restrict per-experiment steps to one experiment")
    parser.add_argument("--full", action="store_true", help="use the full MAFAULDA preset")
    parser.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT, force=True)
    optuna.logging.set_verbosity(optuna.logging.WARNING)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    load_dotenv()
    try:
        cfg = load_config(
            args.config,
            preset="mafaulda_full" if args.full else "fixture",
            overrides={
                "seed": args.seed,
                "jobs": args.jobs,
                "cache_dir": args.cache_dir,
                "output_dir": args.output_dir,
                "log_level": args.log_level,
            },
        )
        configure_logging(cfg.log_level)
        run(args.command, cfg, args.experiment)
    except VibroSPError as exc:
        logging.getLogger(__name__).error(str(exc))
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
