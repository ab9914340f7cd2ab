"""Policy runner, baselines and parameter sweeps over replayable traces."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import controller as ctl
from .controller import ControllerConfig
from .metrics import RunReport, StepResult, mean_std, update_report, write_report, write_steps_csv
from .predictor import DEFAULT_DIM, FeatureVector, HoldoutSet, OnlinePredictor, featurize
from .zoo import (PRESETS, ConfigError, SynthConfig, TraceBackend, TraceRecord, ZooBackend,
                  load_trace, query_all, synth_trace)

log = logging.getLogger(__name__)

POLICY_KINDS = ("mess_plus", "smallest_only", "largest_only", "random_constrained", "fixed")


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class Policy:
    kind: str = "mess_plus"
    q_large: float | None = None
    model_index: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {self.kind!r}; choose from {POLICY_KINDS}")
        if self.q_large is not None and not 0.0 <= self.q_large <= 1.0:
            raise ConfigError(f"random_constrained probability must lie in [0, 1], got {self.q_large}")
        if self.kind == "fixed" and (self.model_index is None or self.model_index < 0):
            raise ConfigError("fixed policy needs a model index, e.g. fixed:0")

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """``mess_plus``, ``largest_only``, ``random_constrained[:q]``, ``fixed:i`` ..."""
        kind, _, arg = text.strip().partition(":")
        if kind == "fixed":
            try:
                return cls(kind, model_index=int(arg))
            except ValueError:
                raise ConfigError(f"bad model index in {text!r}") from None
        if kind == "random_constrained" and arg:
            return cls(kind, q_large=float(arg))
        if arg:
            raise ConfigError(f"policy {kind!r} takes no argument")
        return cls(kind)

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed:{self.model_index}"
        if self.kind == "random_constrained" and self.q_large is not None:
            return f"random_constrained:{self.q_large}"
        return self.kind


@dataclass
class TraceSource:
    """Either a trace file or synthetic generator settings."""

    path: str | None = None
    preset: str = "wmt14"
    num_requests: int = 1000
    seed: int = 0
    generator: dict = field(default_factory=dict)

    def synth_config(self) -> SynthConfig:
        try:
            factory = PRESETS[self.preset]
        except KeyError:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}") from None
        return factory(self.num_requests, **self.generator)

    def load(self) -> tuple[list[TraceRecord], list[float] | None]:
        """Records plus the declared per-model mean accuracies, if the source has them."""
        if self.path:
            return load_trace(self.path), None
        cfg = self.synth_config()
        return synth_trace(cfg, self.seed), cfg.mean_accuracies()


@dataclass
class PredictorSettings:
    dim: int = DEFAULT_DIM
    hash_seed: int = 0
    link: str = "logistic"


@dataclass
class ExperimentConfig:
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    policy: Policy = field(default_factory=Policy)
    trace: TraceSource = field(default_factory=TraceSource)
    predictor: PredictorSettings = field(default_factory=PredictorSettings)
    scorer: str = "bleu1"
    out_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    alpha_sla: float = 0.52
    alpha_margin: float = 0.0
    calibration_means: list[float] | None = None
    v_grid: list[float] | None = None
    c_grid: list[float] | None = None
    holdout_size: int = 500
    loss_every: int = 10

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 <= self.alpha_sla + self.alpha_margin <= 1.0:
            raise ConfigError("alpha_sla + alpha_margin must lie in [0, 1]")

    @property
    def alpha(self) -> float:
        return self.alpha_sla + self.alpha_margin

    def controller_for(self, seed: int, num_models: int, **overrides) -> ControllerConfig:
        return dataclasses.replace(self.controller, alpha=self.alpha, seed=seed,
                                   num_models=num_models, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policy"] = str(self.policy)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "controller" in data:
                data["controller"] = ControllerConfig(**data["controller"])
            if "policy" in data:
                data["policy"] = Policy.parse(data["policy"])
            if "trace" in data:
                data["trace"] = TraceSource(**data["trace"])
            if "predictor" in data:
                data["predictor"] = PredictorSettings(**data["predictor"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class LossPoint:
    exploration_count: int
    t: int
    losses: list[float]


@dataclass
class RunResult:
    report: RunReport
    steps: list[StepResult]
    loss_curve: list[LossPoint] = field(default_factory=list)
    predictor: OnlinePredictor | None = None


def calibrate_random_constrained(mean_accuracies: Sequence[float], alpha: float) -> float:
    """Probability of routing to the largest model so the expected accuracy equals alpha.

    Only the smallest and largest models are mixed.
    """
    if len(mean_accuracies) < 2:
        raise ConfigError("random_constrained needs at least two models")
    if alpha > max(mean_accuracies):
        raise InfeasibleError(f"alpha={alpha} exceeds every model's mean accuracy")
    small, large = mean_accuracies[0], mean_accuracies[-1]
    if alpha <= small:
        return 0.0
    if large <= small:
        raise InfeasibleError("largest model is not more accurate than the smallest")
    return min(1.0, max(0.0, (alpha - small) / (large - small)))


def featurize_trace(trace: Sequence[TraceRecord], settings: PredictorSettings) -> list[FeatureVector]:
    return [featurize(r.text, settings.dim, settings.hash_seed) for r in trace]


def _oracle_means(trace: Sequence[TraceRecord]) -> list[float]:
    m_count = len(trace[0].per_model)
    return [float(np.mean([r.per_model[m].accuracy for r in trace])) for m in range(m_count)]


def run_policy(
    config: ExperimentConfig,
    trace: Sequence[TraceRecord],
    seed: int | None = None,
    *,
    backend: ZooBackend | None = None,
    features: Sequence[FeatureVector] | None = None,
    holdout: Sequence[TraceRecord] | None = None,
    holdout_features: Sequence[FeatureVector] | None = None,
    calibration_means: Sequence[float] | None = None,
    controller_overrides: dict[str, Any] | None = None,
) -> RunResult:
    """Serve every request of ``trace`` in order under ``config.policy``.

    ``holdout`` enables predictor loss tracking: every ``config.loss_every``
    exploration steps the per-model squared error on the holdout is recorded.
    """
    if not trace:
        raise ConfigError("trace is empty")
    backend = backend or TraceBackend.for_trace(trace)
    m_count = backend.num_models
    if any(len(r.per_model) != m_count for r in trace):
        raise ConfigError(f"trace records do not all carry {m_count} models")
    seed = config.seeds[0] if seed is None else seed
    cc = config.controller_for(seed, m_count, **(controller_overrides or {}))
    policy = config.policy
    state = ctl.ControllerState.initial(cc)
    report = RunReport(str(policy), m_count, config.alpha_sla, q_init=cc.q_init)
    steps: list[StepResult] = []
    loss_curve: list[LossPoint] = []

    predictor = None
    if policy.kind == "mess_plus":
        ps = config.predictor
        predictor = OnlinePredictor.create(m_count, cc.eta, ps.dim, seed, ps.hash_seed, ps.link)
        if features is None:
            features = featurize_trace(trace, ps)
        if holdout is not None and holdout_features is None:
            holdout_features = featurize_trace(holdout, ps)
    holdout_set = None
    if predictor is not None and holdout:
        holdout_set = HoldoutSet.build(holdout_features,
                                       [[r.accuracy for r in rec.per_model] for rec in holdout])
        loss_curve.append(LossPoint(0, 0, predictor.losses(holdout_set)))

    fixed_choice = {"smallest_only": 0, "largest_only": m_count - 1}.get(policy.kind)
    if policy.kind == "fixed":
        if policy.model_index >= m_count:
            raise ConfigError(f"fixed model {policy.model_index} outside zoo of {m_count}")
        fixed_choice = policy.model_index
    q_large = None
    baseline_rng = np.random.default_rng([seed, 1])
    if policy.kind == "random_constrained":
        q_large = policy.q_large
        if q_large is None:
            source = "declared"
            means = calibration_means or config.calibration_means
            if means is None:
                means, source = _oracle_means(trace), "oracle"
            q_large = calibrate_random_constrained(means, config.alpha)
            report.notes["random_constrained_means"] = {"source": source, "means": list(means)}
        report.notes["random_constrained_q_large"] = q_large

    started = time.perf_counter()
    for i, record in enumerate(trace):
        t = state.t
        explored = False
        overhead = 0.0
        p_t = 0.0
        if predictor is not None:
            fv = features[i]
            decision = ctl.step(state, cc, backend.energy_forecast(record), predictor.predict_all(fv))
            p_t = decision.p_t
            if decision.explored:
                explored = True
                results = query_all(backend, record)
                accs = [r.accuracy for r in results]
                predictor.update_all(fv, accs)
                chosen = ctl.exploration_choice(accs, cc.exploration_choice)
                energy = sum(r.energy_joules for r in results)
                overhead = energy - results[chosen].energy_joules
                latency = sum(r.latency_seconds for r in results)
                latency_par = max(r.latency_seconds for r in results)
                accuracy = results[chosen].accuracy
            else:
                chosen = decision.chosen_model
        elif fixed_choice is not None:
            chosen = fixed_choice
        else:
            chosen = m_count - 1 if baseline_rng.random() < q_large else 0

        if not explored:
            res = backend.query(chosen, record)
            accuracy, energy = res.accuracy, res.energy_joules
            latency = latency_par = res.latency_seconds

        q = ctl.commit(state, cc, accuracy, explored)
        step_result = StepResult(t, p_t, explored, chosen, accuracy, energy, q,
                                 latency, latency_par, overhead)
        update_report(report, step_result)
        steps.append(step_result)

        if (holdout_set is not None and explored
                and state.explorations % config.loss_every == 0):
            loss_curve.append(LossPoint(state.explorations, t, predictor.losses(holdout_set)))

    report.wall_clock_seconds = time.perf_counter() - started
    return RunResult(report, steps, loss_curve, predictor)


def split_holdout(trace: Sequence[TraceRecord], size: int) -> tuple[list[TraceRecord], list[TraceRecord]]:
    """Reserve the last ``size`` records for predictor evaluation."""
    size = max(0, min(size, len(trace) - 1))
    if size == 0:
        return list(trace), []
    return list(trace[:-size]), list(trace[-size:])


@dataclass
class SweepPoint:
    value: float
    runs: list[RunResult]

    @property
    def reports(self) -> list[RunReport]:
        return [r.report for r in self.runs]

    def summary(self) -> dict[str, float]:
        acc_mu, acc_sd = mean_std([r.mean_accuracy for r in self.reports])
        e_mu, e_sd = mean_std([r.mean_energy_joules for r in self.reports])
        lat_mu, lat_sd = mean_std([r.mean_latency_seconds for r in self.reports])
        par_mu, _ = mean_std([r.mean_latency_parallel_seconds for r in self.reports])
        wall_mu, _ = mean_std([r.wall_clock_seconds / r.T for r in self.reports])
        k_mu, _ = mean_std([r.exploration_count for r in self.reports])
        return {
            "accuracy_mean": acc_mu, "accuracy_std": acc_sd,
            "energy_mean": e_mu, "energy_std": e_sd,
            "latency_mean": lat_mu, "latency_std": lat_sd,
            "latency_parallel_mean": par_mu,
            "wall_clock_per_request": wall_mu,
            "explorations_mean": k_mu,
            "sla_met_fraction": sum(r.sla_met for r in self.reports) / len(self.reports),
        }


def _sweep(config, grid, trace, param, **run_kwargs) -> list[SweepPoint]:
    if not grid:
        raise ConfigError(f"{param} grid must be non-empty")
    features = None
    if config.policy.kind == "mess_plus":
        features = featurize_trace(trace, config.predictor)
    points = []
    for value in grid:
        runs = []
        for seed in config.seeds:
            try:
                runs.append(run_policy(config, trace, seed, features=features,
                                       controller_overrides={param: float(value)}, **run_kwargs))
            except Exception as exc:
                raise RuntimeError(f"{param}={value}, seed={seed}: {exc}") from exc
        log.info("%s=%s done", param, value)
        points.append(SweepPoint(float(value), runs))
    return points


def sweep_v(config: ExperimentConfig, grid: Sequence[float], trace: Sequence[TraceRecord],
            **run_kwargs) -> list[SweepPoint]:
    """One run per (V, seed)."""
    return _sweep(config, grid, trace, "V", **run_kwargs)


def sweep_c(config: ExperimentConfig, grid: Sequence[float], trace: Sequence[TraceRecord],
            holdout: Sequence[TraceRecord] | None = None, **run_kwargs) -> list[SweepPoint]:
    """One run per (c, seed) with predictor loss curves on ``holdout``.

    When no holdout is given the last ``config.holdout_size`` records are
    split off the trace.
    """
    if holdout is None:
        trace, holdout = split_holdout(trace, config.holdout_size)
    holdout_features = featurize_trace(holdout, config.predictor) if holdout else None
    return _sweep(config, grid, trace, "c", holdout=holdout or None,
                  holdout_features=holdout_features, **run_kwargs)


SWEEP_CSV_HEADER = ("value", "accuracy_mean", "accuracy_std", "energy_mean", "energy_std",
                    "latency_mean", "latency_std", "latency_parallel_mean",
                    "explorations_mean", "sla_met_fraction")


def write_sweep_csv(points: Sequence[SweepPoint], path: str | Path, param: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow((param,) + SWEEP_CSV_HEADER[1:])
        for pt in points:
            s = pt.summary()
            writer.writerow([repr(pt.value)] + [repr(s[k]) for k in SWEEP_CSV_HEADER[1:]])


def write_loss_curves_csv(points: Sequence[SweepPoint], seeds: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("c", "seed", "model", "exploration_count", "t", "loss"))
        for pt in points:
            for seed, run in zip(seeds, pt.runs):
                for lp in run.loss_curve:
                    for m, loss in enumerate(lp.losses):
                        writer.writerow([repr(pt.value), seed, m, lp.exploration_count, lp.t, repr(loss)])


def new_run_dir(out_dir: str | Path, label: str) -> Path:
    """Fresh timestamped directory under ``out_dir``; never reuses an existing one."""
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    n = 0
    while True:
        candidate = base / (f"{label}-{stamp}" + (f"-{n}" if n else ""))
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1


def save_run(result: RunResult, run_dir: Path, config: ExperimentConfig, seed: int) -> None:
    write_report(result.report, run_dir / f"report-seed{seed}.json")
    write_steps_csv(result.steps, run_dir / f"steps-seed{seed}.csv")


def save_config(config: ExperimentConfig, run_dir: Path) -> None:
    with open(run_dir / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
