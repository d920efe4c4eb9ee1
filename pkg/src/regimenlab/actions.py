"""Dose action spaces shared by policies, the simulator, and baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONTINUOUS_MAX = 100.0
BINARY_LEVELS = (0.0, 50.0)


@dataclass(frozen=True)
class ActionSpace:
    """Admissible per-drug doses: continuous [0, 100] or binary {0, 50}."""

    kind: str  # "continuous" | "binary"

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown action space kind: {self.kind!r}")

    def project(self, score: float) -> float:
        """Map a raw policy score into the action space.

        Continuous scores clamp to [0, 100]; binary scores snap to the
        nearest of {0, 50} with ties going to 0.
        """
        if self.kind == "continuous":
            return float(min(max(score, 0.0), CONTINUOUS_MAX))
        return 50.0 if score > 25.0 else 0.0

    def sample_uniform(self, rng: np.random.Generator) -> float:
        if self.kind == "continuous":
            return float(rng.uniform(0.0, CONTINUOUS_MAX))
        return float(BINARY_LEVELS[rng.integers(0, len(BINARY_LEVELS))])


CONTINUOUS = ActionSpace("continuous")
BINARY = ActionSpace("binary")


def action_space(name: str) -> ActionSpace:
    return ActionSpace(name)
