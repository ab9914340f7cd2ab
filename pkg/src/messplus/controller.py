"""Per-request decision core: exploration sampling, drift-plus-penalty
selection and the virtual queue that enforces the time-averaged accuracy floor.

The caller owns the request loop. For every request it calls :func:`step`,
queries the chosen model (or every model when the step explores), and then
calls :func:`commit` with the realized accuracy of the model whose output was
served.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EXPLORATION_CHOICES = ("argmax_accuracy", "largest_model")


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class ControllerConfig:
    V: float = 0.1
    alpha: float = 0.52
    c: float = 3.0
    eta: float = 1.0
    num_models: int = 2
    seed: int = 0
    q_init: float = 0.0
    exploration_choice: str = "argmax_accuracy"

    def __post_init__(self):
        for name in ("V", "alpha", "c", "eta", "q_init"):
            _require_finite(name, getattr(self, name))
        if self.V < 0:
            raise ValueError(f"V must be >= 0, got {self.V}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.c <= 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.num_models < 1:
            raise ValueError(f"num_models must be >= 1, got {self.num_models}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")
        if self.q_init < 0:
            raise ValueError(f"q_init must be >= 0, got {self.q_init}")
        if self.exploration_choice not in EXPLORATION_CHOICES:
            raise ValueError(
                f"exploration_choice must be one of {EXPLORATION_CHOICES}, "
                f"got {self.exploration_choice!r}"
            )


@dataclass
class ControllerState:
    q: float = 0.0
    t: int = 1
    explorations: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def initial(cls, config: ControllerConfig) -> "ControllerState":
        return cls(q=float(config.q_init), t=1, explorations=0,
                   rng=np.random.default_rng(config.seed))


@dataclass
class Decision:
    chosen_model: int
    explored: bool
    p_t: float
    objectives: list[float] = field(default_factory=list)
    predicted_accuracies: list[float] = field(default_factory=list)


def exploration_probability(t: int, c: float) -> float:
    """p_t = min(1, c / t^(1/3))."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if not c > 0 or not math.isfinite(c):
        raise ValueError(f"c must be a positive finite number, got {c}")
    # Integer cube roots are exact so that e.g. t=27, c=3 gives exactly 1.
    root = round(t ** (1.0 / 3.0))
    cbrt = float(root) if root ** 3 == t else t ** (1.0 / 3.0)
    return min(1.0, c / cbrt)


def sample_exploration(p: float, state: ControllerState) -> bool:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"exploration probability must lie in [0, 1], got {p}")
    # random() is in [0, 1): p=1 always explores, p=0 never does.
    return bool(state.rng.random() < p)


def per_request_objective(V: float, energy: float, q: float, alpha: float, a_hat: float) -> float:
    for name, value in (("V", V), ("energy", energy), ("q", q), ("alpha", alpha), ("a_hat", a_hat)):
        _require_finite(name, value)
    return V * energy + q * (alpha - a_hat)


def select_model(objectives: Sequence[float], energies: Sequence[float] | None = None) -> int:
    """Index of the smallest objective.

    Ties go to the lower-energy model, then to the lower index. Linear scan.
    """
    if len(objectives) == 0:
        raise ValueError("objectives must be non-empty")
    if energies is not None and len(energies) != len(objectives):
        raise ValueError("energies and objectives differ in length")
    best = 0
    for m in range(len(objectives)):
        _require_finite("objective", objectives[m])
        if m == 0:
            continue
        if objectives[m] < objectives[best]:
            best = m
        elif objectives[m] == objectives[best] and energies is not None and energies[m] < energies[best]:
            best = m
    return best


def queue_update(q: float, alpha: float, accuracy: float) -> float:
    """Q(t+1) = max(0, Q(t) + alpha - accuracy)."""
    if q < 0:
        raise ValueError(f"queue length must be >= 0, got {q}")
    return max(0.0, q + alpha - accuracy)


def clamp_accuracy(value: float) -> float:
    if math.isnan(value):
        return 0.0
    return min(1.0, max(0.0, value))


def step(
    state: ControllerState,
    config: ControllerConfig,
    energies: Sequence[float],
    predicted_accuracies: Sequence[float],
) -> Decision:
    """Decide how request ``state.t`` is served.

    An exploring decision carries ``chosen_model = -1``; the caller resolves
    it with :func:`exploration_choice` once every model's true accuracy is in.
    The queue is not touched here, see :func:`commit`.
    """
    m_count = config.num_models
    if len(energies) != m_count or len(predicted_accuracies) != m_count:
        raise ValueError(
            f"expected {m_count} energies and predictions, got "
            f"{len(energies)} and {len(predicted_accuracies)}"
        )
    if state.t < 1:
        raise ValueError(f"request index must be >= 1, got {state.t}")

    p_t = exploration_probability(state.t, config.c)
    if sample_exploration(p_t, state):
        return Decision(chosen_model=-1, explored=True, p_t=p_t)

    a_hat = [clamp_accuracy(float(a)) for a in predicted_accuracies]
    objectives = [
        per_request_objective(config.V, float(energies[m]), state.q, config.alpha, a_hat[m])
        for m in range(m_count)
    ]
    chosen = select_model(objectives, energies)
    return Decision(chosen_model=chosen, explored=False, p_t=p_t,
                    objectives=objectives, predicted_accuracies=a_hat)


def exploration_choice(accuracies: Sequence[float], mode: str = "argmax_accuracy") -> int:
    """Model whose output is served on an exploration step.

    Models are ordered by size rank, so the largest model is the last index
    and accuracy ties resolve toward it.
    """
    if len(accuracies) == 0:
        raise ValueError("accuracies must be non-empty")
    if mode == "largest_model":
        return len(accuracies) - 1
    if mode != "argmax_accuracy":
        raise ValueError(f"unknown exploration choice {mode!r}")
    best = 0
    for m, a in enumerate(accuracies):
        if a >= accuracies[best]:
            best = m
    return best


def commit(state: ControllerState, config: ControllerConfig, accuracy: float, explored: bool) -> float:
    """Apply the queue update for the served output and advance to the next request."""
    state.q = queue_update(state.q, config.alpha, accuracy)
    state.t += 1
    if explored:
        state.explorations += 1
    return state.q


class Controller:
    """Stateful convenience wrapper around :func:`step` and :func:`commit`."""

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.state = ControllerState.initial(config)

    @property
    def q(self) -> float:
        return self.state.q

    def decide(self, energies: Sequence[float], predicted_accuracies: Sequence[float]) -> Decision:
        return step(self.state, self.config, energies, predicted_accuracies)

    def resolve_exploration(self, accuracies: Sequence[float]) -> int:
        return exploration_choice(accuracies, self.config.exploration_choice)

    def observe(self, accuracy: float, explored: bool) -> float:
        return commit(self.state, self.config, accuracy, explored)
