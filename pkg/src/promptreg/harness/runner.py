"""Single runs, seed sweeps, few-shot curves, ablation tables and their
on-disk artifacts."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..prompting import PromptSet
from .config import RunConfig, component_rows
from .evaluation import EvalReport, accuracy, evaluate_base_to_novel, harmonic_mean
from .training import prepare, train

DEFAULT_SHOTS = (1, 2, 4, 8, 16)
AXES = ("components", "matching_metric", "ensembling_mode", "template_count")
RESULTS_LOG = "results.jsonl"
LOSSES_CSV = "losses.csv"
CURVES_CSV = "curves.csv"
SUMMARY_CSV = "summary.csv"


def run_single(run, seed, label=""):
    """Train and evaluate one configuration at one seed; returns (EvalReport, TrainResult)."""
    t0 = time.perf_counter()
    data, pair = prepare(run, seed)
    before = pair.checksum()
    result = train(run, pair, data, seed)
    rep = evaluate_base_to_novel(pair, result.inference_prompts, data, run.prompt.propagate)
    if pair.checksum() != before:
        raise RuntimeError("frozen encoder weights changed during tuning")
    report = dataclasses.replace(
        rep, per_epoch_losses=result.per_epoch_losses(run.epochs), curves=result.curves,
        config_hash=run.config_hash(), seed=int(seed), label=label, frozen_checksum=before,
        wall_clock=time.perf_counter() - t0)
    return report, result


def zero_shot_report(run, seed, label="zero-shot"):
    data, pair = prepare(run, seed)
    return evaluate_base_to_novel(pair, PromptSet([], []), data, config_hash=run.config_hash(), seed=int(seed),
                                  label=label, frozen_checksum=pair.checksum())


def run_seeds(run, label=""):
    return [run_single(run, s, label)[0] for s in run.seeds]


def summarize(reports):
    """Mean and standard deviation of base, novel and hm over a list of reports."""
    arr = np.array([[r.base_acc, r.novel_acc, r.hm] for r in reports])
    mean, spread = arr.mean(axis=0), arr.std(axis=0)
    return {"base": float(mean[0]), "novel": float(mean[1]), "hm": float(mean[2]),
            "base_std": float(spread[0]), "novel_std": float(spread[1]), "hm_std": float(spread[2]),
            "n": len(reports)}


# ---------------------------------------------------------------- few-shot


def few_shot_config(run):
    """Scale the aggregation window with the schedule: mu = sigma2 = 0.6 E."""
    return run.replace(gpa_mu=0.6 * run.epochs, gpa_sigma2=0.6 * run.epochs)


def evaluate_few_shot(run, pair, data, shots=DEFAULT_SHOTS, seed=None):
    """Accuracies after tuning on K samples per base class, for each K.

    ``all`` is accuracy over the test samples of every class, classified among
    all C classes; base/novel/hm are the usual split metrics.
    """
    seed = run.seeds[0] if seed is None else seed
    shots = list(shots)
    avail = data.spec.samples_per_class_train
    for k in shots:
        if not 1 <= k <= avail:
            raise ValueError(f"{k} shots requested but only {avail} training samples per class")
    out = {}
    for k in shots:
        res = train(run.replace(shots=k), pair, data, seed)
        P, prop = res.inference_prompts, run.prompt.propagate
        base = accuracy(pair, P, data.test, data.base_classes, prop)
        novel = accuracy(pair, P, data.test, data.novel_classes, prop)
        out[k] = {"all": accuracy(pair, P, data.test, range(data.spec.C), prop),
                  "base": base, "novel": novel, "hm": harmonic_mean(base, novel)}
    return out


def few_shot_sweep(run, shots=DEFAULT_SHOTS, label="fewshot"):
    """Per-seed few-shot reports plus mean and spread of each K's all-class accuracy."""
    reports, table = [], {}
    for seed in run.seeds:
        data, pair = prepare(run, seed)
        per = evaluate_few_shot(run, pair, data, shots, seed)
        for k, acc in per.items():
            table.setdefault(k, []).append(acc["all"])
        top = per[max(per)]
        reports.append(EvalReport(top["base"], top["novel"], top["hm"], per_shot=per,
                                  config_hash=run.config_hash(), seed=int(seed), label=label,
                                  frozen_checksum=pair.checksum()))
    stats = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in table.items()}
    return reports, stats


# ---------------------------------------------------------------- ablations


@dataclass
class AblationReport:
    axis: str
    rows: dict = field(default_factory=dict)  # label -> [EvalReport per seed]

    def table(self):
        return {label: summarize(reps) for label, reps in self.rows.items()}

    def reports(self):
        return [r for reps in self.rows.values() for r in reps]

    def format(self):
        lines = [f"{self.axis:<16}{'base':>8}{'novel':>8}{'hm':>8}"]
        for label, s in self.table().items():
            lines.append(f"{label:<16}{s['base']:8.2f}{s['novel']:8.2f}{s['hm']:8.2f}")
        return "\n".join(lines)


def ablation_configs(base, axis):
    if axis == "components":
        return component_rows(base)
    if axis == "matching_metric":
        return {m: base.replace(scl=dataclasses.replace(base.scl, matching_metric=m)) for m in ("L1", "MSE", "cosine")}
    if axis == "ensembling_mode":
        return {m: base.replace(ensembling_mode=m, use_gpa=True) for m in ("gpa", "equal", "ema")}
    if axis == "template_count":
        return {f"N={n}": base.replace(n_templates=n, use_textual_diversity=True) for n in (1, 2, 4, 8)}
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def run_ablation(base, axis):
    configs = ablation_configs(base, axis)
    rep = AblationReport(axis)
    for label, run in configs.items():
        rep.rows[label] = run_seeds(run, label)
    return rep


# ---------------------------------------------------------------- artifacts


def _as_reports(report):
    if isinstance(report, EvalReport):
        return [report]
    if isinstance(report, AblationReport):
        return report.reports()
    return list(report)


def _write_csvs(reports, out):
    with open(out / LOSSES_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "seed", "config_hash", "epoch", "loss"])
        for r in reports:
            for e, v in enumerate(r.per_epoch_losses, start=1):
                w.writerow([r.label, r.seed, r.config_hash, e, repr(float(v))])
    with open(out / CURVES_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "seed", "config_hash", "epoch", "base_acc", "novel_acc"])
        for r in reports:
            for epoch, b, n in r.curves:
                w.writerow([r.label, r.seed, r.config_hash, int(epoch), b, n])
    groups = {}
    for r in reports:
        groups.setdefault((r.label, r.config_hash), []).append(r)
    with open(out / SUMMARY_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "config_hash", "n", "base", "base_std", "novel", "novel_std", "hm", "hm_std"])
        for (label, h), reps in groups.items():
            s = summarize(reps)
            w.writerow([label, h, s["n"], s["base"], s["base_std"], s["novel"], s["novel_std"], s["hm"], s["hm_std"]])


def emit_report(report, out_dir):
    """Append one JSON line per run to the results log and rewrite the CSVs for this batch."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        reports = _as_reports(report)
        with open(out / RESULTS_LOG, "a") as fh:
            for r in reports:
                fh.write(r.to_json() + "\n")
        _write_csvs(reports, out)
    except OSError as exc:
        raise OSError(f"cannot write report artifacts under {out}: {exc}") from exc
    return out


def load_results(path):
    with open(path) as fh:
        return [EvalReport.from_json(line) for line in fh if line.strip()]


def render_from_log(log_path, out_dir=None):
    """Rebuild the CSV artifacts from an existing results log."""
    log_path = Path(log_path)
    out = Path(out_dir) if out_dir is not None else log_path.parent
    out.mkdir(parents=True, exist_ok=True)
    reports = load_results(log_path)
    _write_csvs(reports, out)
    return reports


__all__ = [
    "AXES", "AblationReport", "DEFAULT_SHOTS", "RunConfig", "emit_report", "evaluate_few_shot",
    "few_shot_config", "few_shot_sweep", "load_results", "render_from_log", "run_ablation",
    "run_seeds", "run_single", "summarize", "zero_shot_report",
]
