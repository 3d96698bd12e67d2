"""Binary-classification metrics and the leave-one-out evaluation harness."""
from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .data import DatasetBundle, atomic_write_text, holdout


class EvaluationError(ValueError):
    """Invalid metric input or harness configuration."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise EvaluationError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    @classmethod
    def from_pairs(cls, predictions: Sequence[int], labels: Sequence[int]) -> "ConfusionCounts":
        if len(predictions) != len(labels):
            raise EvaluationError(
                f"{len(predictions)} predictions for {len(labels)} labels"
            )
        tp = fp = tn = fn = 0
        for pred, label in zip(predictions, labels):
            if pred not in (0, 1) or label not in (0, 1):
                raise EvaluationError(f"binary values expected, got pred={pred!r} label={label!r}")
            if pred == 1 and label == 1:
                tp += 1
            elif pred == 1 and label == 0:
                fp += 1
            elif pred == 0 and label == 0:
                tn += 1
            else:
                fn += 1
        return cls(tp, fp, tn, fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise EvaluationError("accuracy of zero scored examples is undefined")
    return (counts.tp + counts.tn) / counts.total


def f1(counts: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; zero denominators yield 0.0."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def threshold_predict(prob: float) -> int:
    """Label 1 iff prob >= 0.5 (the boundary maps to 1)."""
    if not 0.0 <= prob <= 1.0:
        raise EvaluationError(f"probability out of [0, 1]: {prob}")
    return 1 if prob >= 0.5 else 0


def accuracy_of(predictions: Sequence[int], labels: Sequence[int]) -> float:
    return accuracy(ConfusionCounts.from_pairs(predictions, labels))


def f1_of(predictions: Sequence[int], labels: Sequence[int]) -> float:
    return f1(ConfusionCounts.from_pairs(predictions, labels))


METRICS = {"accuracy": accuracy_of, "f1": f1_of}


@dataclass
class RunReport:
    """Result of one leave-one-out cell (one held-out domain, all seeds)."""

    held_out: str
    seeds: tuple[int, ...]
    per_seed: list[dict] = field(default_factory=list)
    accuracy: float | None = None
    f1: float | None = None
    mixing_weights: list[dict | None] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "held_out": self.held_out,
            "seeds": list(self.seeds),
            "per_seed": self.per_seed,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "mixing_weights": self.mixing_weights,
            "artifacts": self.artifacts,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class LooResult:
    variant: str
    reports: list[RunReport]
    macro_accuracy: float | None
    micro_f1: float | None
    micro_f1_per_seed: list[float]
    pooled_counts_per_seed: list[ConfusionCounts]
    table: str

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "cells": [r.to_dict() for r in self.reports],
            "aggregate": {
                "macro_accuracy": self.macro_accuracy,
                "micro_f1": self.micro_f1,
                "micro_f1_per_seed": self.micro_f1_per_seed,
                "pooled_counts_per_seed": [c.to_dict() for c in self.pooled_counts_per_seed],
            },
        }


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _run_cell(variant: str, bundle: DatasetBundle, config, domain: str, seed: int) -> dict:
    """Train on the held-out view (without its labels) and score on them."""
    from .training import train  # deferred: training imports evaluation metrics

    cell = holdout(bundle, domain)
    trained, _history = train(variant, cell.training_view(), config, seed=seed)
    texts = [ex.text for ex in cell.target_test]
    labels = [ex.label for ex in cell.target_test]
    probs = trained.predict_proba(texts)
    preds = [threshold_predict(p) for p in probs]
    counts = ConfusionCounts.from_pairs(preds, labels)
    return {
        "seed": seed,
        "accuracy": accuracy(counts),
        "f1": f1(counts),
        "counts": counts.to_dict(),
        "mixing_weights": trained.mixing_weights_dict(),
    }


def loo_run(
    variant: str,
    bundle: DatasetBundle,
    config,
    seeds: Sequence[int],
    jobs: int = 1,
    table_metric: str = "accuracy",
) -> LooResult:
    """Leave-one-out cross-validation over every source domain.

    Each cell trains fresh models per seed with the held-out domain as the
    transductive target (labels structurally absent from the training view)
    and scores on the held-out labels. A failed cell is flagged and the
    remaining cells still run. Cells are independent and may run in
    parallel; the reduce is deterministic in (domain, seed) order.
    """
    if bundle.num_sources < 2:
        raise EvaluationError("leave-one-out needs at least 2 source domains")
    if not seeds:
        raise EvaluationError("need at least one seed")
    tasks = [(domain, seed) for domain in bundle.domains for seed in seeds]
    results: dict[tuple[str, int], dict] = {}
    errors: dict[tuple[str, int], str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            futures = {
                (domain, seed): pool.submit(_run_cell, variant, bundle, config, domain, seed)
                for domain, seed in tasks
            }
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as err:  # noqa: BLE001 - cell isolation is the contract
                    errors[key] = f"{type(err).__name__}: {err}"
    else:
        for domain, seed in tasks:
            try:
                results[(domain, seed)] = _run_cell(variant, bundle, config, domain, seed)
            except Exception as err:  # noqa: BLE001
                errors[(domain, seed)] = "".join(
                    traceback.format_exception_only(type(err), err)
                ).strip()

    reports = []
    for domain in bundle.domains:
        report = RunReport(held_out=domain, seeds=tuple(seeds))
        cell_errors = [errors[(domain, s)] for s in seeds if (domain, s) in errors]
        if cell_errors:
            report.failed = True
            report.error = cell_errors[0]
        else:
            report.per_seed = [results[(domain, s)] for s in seeds]
            report.accuracy = _mean([r["accuracy"] for r in report.per_seed])
            report.f1 = _mean([r["f1"] for r in report.per_seed])
            report.mixing_weights = [r["mixing_weights"] for r in report.per_seed]
        reports.append(report)

    ok = [r for r in reports if not r.failed]
    macro_accuracy = _mean([r.accuracy for r in ok]) if ok else None
    pooled_per_seed = []
    micro_f1_per_seed = []
    if ok:
        for i, _seed in enumerate(seeds):
            pooled = ConfusionCounts()
            for r in ok:
                pooled = pooled + ConfusionCounts(**r.per_seed[i]["counts"])
            pooled_per_seed.append(pooled)
            micro_f1_per_seed.append(f1(pooled))
    micro_f1 = _mean(micro_f1_per_seed) if micro_f1_per_seed else None
    table = render_table(variant, reports, macro_accuracy, micro_f1, metric=table_metric)
    return LooResult(
        variant=variant,
        reports=reports,
        macro_accuracy=macro_accuracy,
        micro_f1=micro_f1,
        micro_f1_per_seed=micro_f1_per_seed,
        pooled_counts_per_seed=pooled_per_seed,
        table=table,
    )


def _worker_init() -> None:
    import torch

    torch.set_num_threads(1)


def render_table(
    variant: str,
    reports: Sequence[RunReport],
    macro_accuracy: float | None,
    micro_f1: float | None,
    metric: str = "accuracy",
) -> str:
    """One-row results table: one column per held-out domain plus aggregates."""

    def fmt(value: float | None) -> str:
        return "failed" if value is None else f"{100.0 * value:.1f}"

    headers = ["Method"] + [r.held_out for r in reports] + ["macroA", "uF1"]
    row = [variant]
    for r in reports:
        row.append(fmt(r.accuracy if metric == "accuracy" else r.f1))
    row.append(fmt(macro_accuracy))
    row.append(fmt(micro_f1))
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    vals = "  ".join(v.ljust(w) for v, w in zip(row, widths))
    return line + "\n" + vals + "\n"


def write_report(result: LooResult, out_dir: str | Path, config_dict: dict) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["config"] = config_dict
    json_path = out / "report.json"
    atomic_write_text(json_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    txt_path = out / "report.txt"
    atomic_write_text(txt_path, result.table)
    return json_path, txt_path
