"""Sentence-level accuracy scorers and run accounting."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

STEP_CSV_HEADER = ("t", "p_t", "explored", "chosen_model", "accuracy",
                   "energy_joules", "queue", "latency_seconds")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _overlap(candidate: Sequence[str], reference: Sequence[str]) -> int:
    ref_counts = Counter(reference)
    return sum(min(n, ref_counts[w]) for w, n in Counter(candidate).items())


def bleu1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Clipped unigram precision times the brevity penalty. No smoothing."""
    if not candidate:
        return 0.0
    precision = _overlap(candidate, reference) / len(candidate)
    if len(candidate) >= len(reference):
        bp = 1.0
    else:
        bp = math.exp(1.0 - len(reference) / len(candidate))
    return bp * precision


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f1: float


def rouge1_scores(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    overlap = _overlap(candidate, reference)
    if overlap == 0:
        return RougeScore(0.0, 0.0, 0.0)
    p = overlap / len(candidate)
    r = overlap / len(reference)
    return RougeScore(p, r, 2 * p * r / (p + r))


def rouge1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Unigram ROUGE, F1 of overlap precision and recall."""
    return rouge1_scores(candidate, reference).f1


SCORERS = {"bleu1": bleu1, "rouge1": rouge1}


def score_text(candidate: str, reference: str, scorer: str = "bleu1") -> float:
    try:
        fn = SCORERS[scorer]
    except KeyError:
        raise ValueError(f"unknown scorer {scorer!r}; choose from {sorted(SCORERS)}") from None
    return fn(tokenize(candidate), tokenize(reference))


@dataclass
class StepResult:
    t: int
    p_t: float
    explored: bool
    chosen_model: int
    accuracy: float
    energy_joules: float
    queue: float
    latency_seconds: float
    # max of per-model latencies on exploration steps (parallel fan-out reading);
    # equals latency_seconds on exploitation steps
    latency_parallel_seconds: float = 0.0
    exploration_overhead_joules: float = 0.0

    def csv_row(self) -> list[str]:
        return [
            str(self.t),
            repr(float(self.p_t)),
            "1" if self.explored else "0",
            str(self.chosen_model),
            repr(float(self.accuracy)),
            repr(float(self.energy_joules)),
            repr(float(self.queue)),
            repr(float(self.latency_seconds)),
        ]


@dataclass
class RunReport:
    policy_name: str
    num_models: int
    sla_alpha: float
    q_init: float = 0.0
    T: int = 0
    mean_accuracy: float = 0.0
    total_energy_joules: float = 0.0
    mean_energy_joules: float = 0.0
    sla_met: bool = False
    exploration_count: int = 0
    exploration_overhead_joules: float = 0.0
    queue_trajectory: list[float] = field(default_factory=list)
    per_model_selection_counts: list[int] = field(default_factory=list)
    mean_latency_seconds: float = 0.0
    mean_latency_parallel_seconds: float = 0.0
    wall_clock_seconds: float = 0.0
    notes: dict = field(default_factory=dict)
    _accuracy_sum: float = field(default=0.0, repr=False)
    _latency_sum: float = field(default=0.0, repr=False)
    _latency_parallel_sum: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if not self.queue_trajectory:
            self.queue_trajectory = [float(self.q_init)]
        if not self.per_model_selection_counts:
            self.per_model_selection_counts = [0] * self.num_models

    @property
    def time_averaged_queue(self) -> float:
        return self.queue_trajectory[-1] / self.T if self.T else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("_accuracy_sum", "_latency_sum", "_latency_parallel_sum"):
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        report = cls(**data)
        report._accuracy_sum = report.mean_accuracy * report.T
        report._latency_sum = report.mean_latency_seconds * report.T
        report._latency_parallel_sum = report.mean_latency_parallel_seconds * report.T
        return report


def update_report(report: RunReport, result: StepResult) -> RunReport:
    """Fold one served request into the running totals."""
    if result.t != report.T + 1:
        raise ValueError(f"step {result.t} does not follow report at T={report.T}")
    report.T += 1
    report._accuracy_sum += result.accuracy
    report.total_energy_joules += result.energy_joules
    report._latency_sum += result.latency_seconds
    report._latency_parallel_sum += result.latency_parallel_seconds
    report.per_model_selection_counts[result.chosen_model] += 1
    if result.explored:
        report.exploration_count += 1
        report.exploration_overhead_joules += result.exploration_overhead_joules
    report.queue_trajectory.append(float(result.queue))

    report.mean_accuracy = report._accuracy_sum / report.T
    report.mean_energy_joules = report.total_energy_joules / report.T
    report.mean_latency_seconds = report._latency_sum / report.T
    report.mean_latency_parallel_seconds = report._latency_parallel_sum / report.T
    report.sla_met = sla_check(report, report.sla_alpha)
    return report


def sla_check(report: RunReport, alpha: float) -> bool:
    # Rounded to 6 decimals so a run sitting exactly on alpha does not flap.
    if report.T < 1:
        raise RuntimeError("SLA check needs at least one served request")
    return round(report.mean_accuracy, 6) >= round(alpha, 6)


def write_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_steps_csv(steps: Iterable[StepResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_CSV_HEADER)
        for s in steps:
            writer.writerow(s.csv_row())


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    mu = sum(values) / n
    if n == 1:
        return mu, 0.0
    var = sum((v - mu) ** 2 for v in values) / (n - 1)
    return mu, math.sqrt(var)


def comparison_table(reports: dict[str, list[RunReport]], alpha: float | None = None) -> str:
    """Plain-text comparison, one row per policy, multi-seed mean ± stddev.

    Accuracy is printed on both the unit scale and the percent scale.
    """
    rows = [("Policy", "Accuracy", "Accuracy (%)", "Energy (J)", "K", "Meets alpha")]
    for name, runs in reports.items():
        acc_mu, acc_sd = mean_std([r.mean_accuracy for r in runs])
        e_mu, e_sd = mean_std([r.mean_energy_joules for r in runs])
        k_mu, _ = mean_std([r.exploration_count for r in runs])
        a = alpha if alpha is not None else runs[0].sla_alpha
        meets = all(sla_check(r, a) for r in runs)
        rows.append((
            name,
            f"{acc_mu:.4f} ± {acc_sd:.4f}",
            f"{100 * acc_mu:.1f} ± {100 * acc_sd:.1f}",
            f"{e_mu:.3f} ± {e_sd:.3f}",
            f"{k_mu:.0f}",
            "Yes" if meets else "No",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
