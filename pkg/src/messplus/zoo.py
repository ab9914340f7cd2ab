"""Model zoo: profiles, replayable traces, a synthetic trace generator and
backends that answer "what happens if model m serves this request"."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, Sequence

import httpx
import numpy as np
from scipy import integrate, optimize, stats

from .metrics import score_text, tokenize

log = logging.getLogger(__name__)


class TraceError(ValueError):
    pass


class TraceParseError(TraceError):
    pass


class TraceSchemaError(TraceError):
    pass


class TraceValidationError(TraceError):
    pass


class ConfigError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


class ScoringError(ValueError):
    pass


class ZooQueryError(RuntimeError):
    def __init__(self, model_index: int, cause: Exception):
        super().__init__(f"model {model_index} failed: {cause}")
        self.model_index = model_index
        self.cause = cause


@dataclass(frozen=True)
class ModelProfile:
    name: str
    size_rank: int
    energy_base: float = 0.0
    energy_per_input_token: float = 0.0
    energy_per_output_token: float = 0.0
    # used to forecast energy before a live call returns
    typical_output_tokens: float = 0.0

    def __post_init__(self):
        coeffs = (self.energy_base, self.energy_per_input_token, self.energy_per_output_token)
        if any(not math.isfinite(x) or x < 0 for x in coeffs):
            raise ConfigError(f"{self.name}: energy coefficients must be finite and >= 0")


def validate_zoo(profiles: Sequence[ModelProfile]) -> None:
    ranks = sorted(p.size_rank for p in profiles)
    if ranks != list(range(len(profiles))):
        raise ConfigError(f"size ranks must be distinct and contiguous from 0, got {ranks}")


def energy_estimate(profile: ModelProfile, input_tokens: int, output_tokens: int) -> float:
    return (profile.energy_base
            + profile.energy_per_input_token * input_tokens
            + profile.energy_per_output_token * output_tokens)


def fit_energy_profile(
    name: str,
    size_rank: int,
    input_tokens: Sequence[int],
    output_tokens: Sequence[int],
    joules: Sequence[float],
) -> ModelProfile:
    """Least-squares fit of the affine energy model to measured calls."""
    X = np.column_stack([np.ones(len(joules)), input_tokens, output_tokens]).astype(float)
    coef, *_ = np.linalg.lstsq(X, np.asarray(joules, dtype=float), rcond=None)
    base, per_in, per_out = (max(0.0, float(c)) for c in coef)
    return ModelProfile(name, size_rank, base, per_in, per_out,
                        typical_output_tokens=float(np.mean(output_tokens)))


class ModelResult(NamedTuple):
    accuracy: float
    energy_joules: float
    latency_seconds: float
    output_text: str | None = None


@dataclass
class TraceRecord:
    request_id: str
    text: str
    reference: str | None
    per_model: list[ModelResult]
    model_names: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        models = []
        for name, r in zip(self.model_names, self.per_model):
            entry = {"name": name, "accuracy": r.accuracy,
                     "energy_joules": r.energy_joules, "latency_seconds": r.latency_seconds}
            if r.output_text is not None:
                entry["output_text"] = r.output_text
            models.append(entry)
        return {"request_id": self.request_id, "text": self.text,
                "reference": self.reference, "models": models}


def _number(value, what: str, lineno: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TraceValidationError(f"line {lineno}: {what} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise TraceValidationError(f"line {lineno}: {what} must be finite")
    return value


def parse_record(obj: dict, lineno: int) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceSchemaError(f"line {lineno}: record must be an object")
    missing = {"request_id", "text", "reference", "models"} - obj.keys()
    if missing:
        raise TraceSchemaError(f"line {lineno}: missing fields {sorted(missing)}")
    if not isinstance(obj["request_id"], str) or not isinstance(obj["text"], str):
        raise TraceSchemaError(f"line {lineno}: request_id and text must be strings")
    if obj["reference"] is not None and not isinstance(obj["reference"], str):
        raise TraceSchemaError(f"line {lineno}: reference must be a string or null")
    models = obj["models"]
    if not isinstance(models, list) or not models:
        raise TraceSchemaError(f"line {lineno}: models must be a non-empty array")

    names, results = [], []
    for m, entry in enumerate(models):
        if not isinstance(entry, dict) or not {"name", "accuracy", "energy_joules",
                                               "latency_seconds"} <= entry.keys():
            raise TraceSchemaError(f"line {lineno}: models[{m}] lacks required fields")
        acc = _number(entry["accuracy"], f"models[{m}].accuracy", lineno)
        if not 0.0 <= acc <= 1.0:
            raise TraceValidationError(f"line {lineno}: models[{m}].accuracy={acc} outside [0, 1]")
        energy = _number(entry["energy_joules"], f"models[{m}].energy_joules", lineno)
        latency = _number(entry["latency_seconds"], f"models[{m}].latency_seconds", lineno)
        if energy < 0:
            raise TraceValidationError(f"line {lineno}: models[{m}].energy_joules is negative")
        if latency < 0:
            raise TraceValidationError(f"line {lineno}: models[{m}].latency_seconds is negative")
        output = entry.get("output_text")
        if output is not None and not isinstance(output, str):
            raise TraceSchemaError(f"line {lineno}: models[{m}].output_text must be a string")
        names.append(str(entry["name"]))
        results.append(ModelResult(acc, energy, latency, output))
    return TraceRecord(obj["request_id"], obj["text"], obj["reference"], results, names)


def load_trace(path: str | Path) -> list[TraceRecord]:
    records: list[TraceRecord] = []
    names: list[str] | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"line {lineno}: {exc.msg}") from exc
            rec = parse_record(obj, lineno)
            if names is None:
                names = rec.model_names
            elif len(rec.model_names) != len(names):
                raise TraceSchemaError(
                    f"line {lineno}: {len(rec.model_names)} models, expected {len(names)}")
            elif rec.model_names != names:
                raise TraceSchemaError(f"line {lineno}: model order differs from line 1")
            records.append(rec)
    return records


def write_trace(records: Sequence[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


# --- synthetic traces -------------------------------------------------------

@dataclass
class SynthModel:
    name: str
    mean_accuracy: float
    mean_energy_joules: float
    latency_base: float = 0.2
    latency_per_output_token: float = 0.01
    sharpness: float | None = None  # defaults to SynthConfig.sharpness


@dataclass
class SynthConfig:
    """Generator settings.

    Each request gets a latent difficulty d ~ Beta(difficulty_a, difficulty_b),
    sampled by strata.
    Model m's mean accuracy at d is

        floor + span * sigmoid(sharpness * (capacity_m - d))

    with capacity_m solved so the average over d hits ``mean_accuracy``.
    Observed accuracies are Beta draws with that mean. Request texts mix
    words tied to the difficulty bin with filler words.
    """

    models: list[SynthModel]
    num_requests: int = 1000
    difficulty_a: float = 1.0
    difficulty_b: float = 1.0
    accuracy_floor: float = 0.1
    accuracy_span: float = 0.85
    sharpness: float = 50.0
    concentration: float = 10.0
    n_bins: int = 24
    words_per_bin: int = 4
    filler_words: int = 200
    signal_fraction: float = 0.6
    min_words: int = 12
    max_words: int = 30
    mean_output_tokens: float = 24.0
    energy_split: tuple[float, float, float] = (0.2, 0.3, 0.5)
    energy_noise_std: float = 0.0
    vocab_seed: int = 12345

    def profiles(self) -> list[ModelProfile]:
        """Affine energy profiles whose expectation matches each model's mean energy."""
        mean_in = (self.min_words + self.max_words) / 2
        f_base, f_in, f_out = self.energy_split
        return [
            ModelProfile(
                m.name, rank,
                energy_base=f_base * m.mean_energy_joules,
                energy_per_input_token=f_in * m.mean_energy_joules / mean_in,
                energy_per_output_token=f_out * m.mean_energy_joules / self.mean_output_tokens,
                typical_output_tokens=self.mean_output_tokens,
            )
            for rank, m in enumerate(self.models)
        ]

    def mean_accuracies(self) -> list[float]:
        return [m.mean_accuracy for m in self.models]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _curve_mean(cfg: SynthConfig, capacity: float, sharpness: float) -> float:
    dist = stats.beta(cfg.difficulty_a, cfg.difficulty_b)
    val, _ = integrate.quad(
        lambda d: _sigmoid(sharpness * (capacity - d)) * dist.pdf(d), 0.0, 1.0, limit=200)
    return cfg.accuracy_floor + cfg.accuracy_span * val


def solve_capacities(cfg: SynthConfig) -> list[float]:
    caps = []
    lo, hi = cfg.accuracy_floor, cfg.accuracy_floor + cfg.accuracy_span
    for m in cfg.models:
        k = m.sharpness or cfg.sharpness
        if not lo < m.mean_accuracy < hi:
            raise ConfigError(
                f"{m.name}: mean accuracy {m.mean_accuracy} outside curve range ({lo}, {hi})")
        caps.append(optimize.brentq(
            lambda cap: _curve_mean(cfg, cap, k) - m.mean_accuracy, -3.0, 4.0, xtol=1e-12))
    return caps


def accuracy_curves(cfg: SynthConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized d -> (len(d), M) array of mean accuracies. Checks rank ordering."""
    caps = solve_capacities(cfg)
    ks = [m.sharpness or cfg.sharpness for m in cfg.models]

    def curves(d):
        d = np.atleast_1d(np.asarray(d, dtype=float))
        return np.column_stack([
            cfg.accuracy_floor + cfg.accuracy_span * _sigmoid(k * (cap - d))
            for cap, k in zip(caps, ks)
        ])

    grid = curves(np.linspace(0.0, 1.0, 401))
    if np.any(np.diff(grid, axis=1) < -1e-12):
        raise ConfigError("mean accuracy must not decrease with model size rank")
    return curves


_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "da", "fe", "gu", "ho",
              "ji", "po", "ze", "bu", "ce", "wa", "xi", "yo"]


def _vocabulary(cfg: SynthConfig) -> tuple[list[list[str]], list[str]]:
    rng = np.random.default_rng(cfg.vocab_seed)
    seen: set[str] = set()

    def word():
        while True:
            w = "".join(rng.choice(_SYLLABLES, size=rng.integers(2, 4)))
            if w not in seen:
                seen.add(w)
                return w

    bins = [[word() for _ in range(cfg.words_per_bin)] for _ in range(cfg.n_bins)]
    filler = [word() for _ in range(cfg.filler_words)]
    return bins, filler


def synth_trace(cfg: SynthConfig, seed: int = 0) -> list[TraceRecord]:
    if not cfg.models:
        raise ConfigError("at least one model is required")
    curves = accuracy_curves(cfg)
    profiles = cfg.profiles()
    names = [m.name for m in cfg.models]
    bins, filler = _vocabulary(cfg)
    rng = np.random.default_rng(seed)
    n = cfg.num_requests
    # Stratified difficulty: one draw per quantile slot, in random order, so the
    # trace-level means track the calibration targets closely.
    slots = (rng.permutation(n) + rng.random(n)) / max(n, 1)
    difficulties = stats.beta(cfg.difficulty_a, cfg.difficulty_b).ppf(slots)
    records = []
    for i in range(n):
        d = float(difficulties[i])
        b = min(cfg.n_bins - 1, int(d * cfg.n_bins))
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        signal = rng.random(n_words) < cfg.signal_fraction
        words = [bins[b][rng.integers(cfg.words_per_bin)] if s
                 else filler[rng.integers(cfg.filler_words)] for s in signal]
        text = " ".join(words)

        means = curves(d)[0]
        results = []
        for m, (model, profile) in enumerate(zip(cfg.models, profiles)):
            mu = float(np.clip(means[m], 1e-6, 1 - 1e-6))
            acc = float(rng.beta(cfg.concentration * mu, cfg.concentration * (1 - mu)))
            out_tokens = int(rng.poisson(cfg.mean_output_tokens))
            energy = energy_estimate(profile, n_words, out_tokens)
            if cfg.energy_noise_std > 0:
                energy = max(0.0, energy + float(rng.normal(0.0, cfg.energy_noise_std)))
            latency = model.latency_base + model.latency_per_output_token * out_tokens
            results.append(ModelResult(acc, energy, latency))
        records.append(TraceRecord(f"req-{i:06d}", text, None, results, list(names)))
    return records


def wmt14_like(num_requests: int = 1000, **overrides) -> SynthConfig:
    """Two-model zoo with the translation-task means of the reference measurements."""
    models = [
        SynthModel("TinyLlama-1.1B", 0.491, 44.639, latency_base=0.15, latency_per_output_token=0.012),
        SynthModel("Llama-2-13B", 0.551, 527.870, latency_base=0.4, latency_per_output_token=0.045),
    ]
    return SynthConfig(models=models, num_requests=num_requests, **overrides)


def cnn_dailymail_like(num_requests: int = 1000, **overrides) -> SynthConfig:
    """Two-model zoo with the summarization-task means of the reference measurements."""
    models = [
        SynthModel("TinyLlama-1.1B", 0.309, 142.080, latency_base=0.2, latency_per_output_token=0.012),
        SynthModel("Llama-2-13B", 0.322, 750.285, latency_base=0.5, latency_per_output_token=0.045),
    ]
    return SynthConfig(models=models, num_requests=num_requests, mean_output_tokens=60.0, **overrides)


PRESETS = {"wmt14": wmt14_like, "cnn_dailymail": cnn_dailymail_like}


# --- backends ---------------------------------------------------------------

class ZooBackend(Protocol):
    num_models: int

    def query(self, model_index: int, record: TraceRecord) -> ModelResult: ...

    def energy_forecast(self, record: TraceRecord) -> list[float]: ...


class TraceBackend:
    """Replays precomputed per-model outcomes. Pure and reentrant."""

    def __init__(self, num_models: int, model_names: Sequence[str] | None = None):
        self.num_models = num_models
        self.model_names = list(model_names or [])

    @classmethod
    def for_trace(cls, records: Sequence[TraceRecord]) -> "TraceBackend":
        if not records:
            raise ConfigError("empty trace")
        return cls(len(records[0].per_model), records[0].model_names)

    def query(self, model_index: int, record: TraceRecord) -> ModelResult:
        if len(record.per_model) != self.num_models:
            raise ConfigError(
                f"{record.request_id}: {len(record.per_model)} models, zoo has {self.num_models}")
        return record.per_model[model_index]

    def energy_forecast(self, record: TraceRecord) -> list[float]:
        return [r.energy_joules for r in record.per_model]


def query_all(backend: ZooBackend, record: TraceRecord, parallel: bool = False) -> list[ModelResult]:
    """Query every model for one request (an exploration step)."""

    def one(m):
        try:
            return backend.query(m, record)
        except ConfigError:
            raise
        except Exception as exc:
            raise ZooQueryError(m, exc) from exc

    indices = range(backend.num_models)
    if parallel and backend.num_models > 1:
        with ThreadPoolExecutor(max_workers=backend.num_models) as pool:
            return list(pool.map(one, indices))
    return [one(m) for m in indices]


@dataclass
class EndpointConfig:
    base_url: str
    api_key_env: str | None = None
    timeout_seconds: float = 60.0
    max_retries: int = 3
    backoff_seconds: float = 0.5
    max_tokens: int | None = None


def _chat_completion(client: httpx.Client, endpoint: EndpointConfig, body: dict,
                     sleep: Callable[[float], None]) -> dict:
    headers = {}
    if endpoint.api_key_env:
        token = os.environ.get(endpoint.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    last_error: Exception | None = None
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            sleep(endpoint.backoff_seconds * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body, headers=headers, timeout=endpoint.timeout_seconds)
            resp.raise_for_status()
            data = resp.json()
            data["choices"][0]["message"]["content"]
            return data
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            last_error = exc
            log.warning("chat completion attempt %d failed: %s", attempt + 1, exc)
    raise TransportError(f"{url}: giving up after {endpoint.max_retries + 1} attempts: {last_error}")


def live_query(
    endpoint: EndpointConfig,
    model_name: str,
    prompt: str,
    reference: str | None,
    scorer: str = "bleu1",
    profile: ModelProfile | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ModelResult:
    """Send one prompt to a chat-completions endpoint and score the answer."""
    if reference is None:
        raise ScoringError("live scoring needs a reference text")
    body: dict = {"model": model_name, "messages": [{"role": "user", "content": prompt}]}
    if endpoint.max_tokens is not None:
        body["max_tokens"] = endpoint.max_tokens

    own_client = client is None
    client = client or httpx.Client()
    try:
        start = time.perf_counter()
        data = _chat_completion(client, endpoint, body, sleep)
        latency = time.perf_counter() - start
    finally:
        if own_client:
            client.close()

    output = data["choices"][0]["message"]["content"] or ""
    usage = data.get("usage") or {}
    in_tokens = usage.get("prompt_tokens", len(tokenize(prompt)))
    out_tokens = usage.get("completion_tokens", len(tokenize(output)))
    energy = energy_estimate(profile, in_tokens, out_tokens) if profile else 0.0
    return ModelResult(score_text(output, reference, scorer), energy, latency, output)


class LiveBackend:
    """Routes queries to real endpoints; accuracy comes from scoring against the reference."""

    def __init__(self, endpoint: EndpointConfig, profiles: Sequence[ModelProfile],
                 scorer: str = "bleu1", client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        validate_zoo(profiles)
        self.endpoint = endpoint
        self.profiles = sorted(profiles, key=lambda p: p.size_rank)
        self.num_models = len(self.profiles)
        self.model_names = [p.name for p in self.profiles]
        self.scorer = scorer
        self.client = client
        self.sleep = sleep

    def query(self, model_index: int, record: TraceRecord) -> ModelResult:
        profile = self.profiles[model_index]
        return live_query(self.endpoint, profile.name, record.text, record.reference,
                          self.scorer, profile, self.client, self.sleep)

    def energy_forecast(self, record: TraceRecord) -> list[float]:
        n_in = len(tokenize(record.text))
        return [energy_estimate(p, n_in, round(p.typical_output_tokens)) for p in self.profiles]
