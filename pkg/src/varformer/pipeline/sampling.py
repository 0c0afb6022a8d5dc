"""Task-weighted sampling of (clean image, degradation) training pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ..degradations import DegradationSpec
from ..errors import DataError, DomainError

# share of each task in one batch
DEFAULT_TASK_WEIGHTS = {
    "haze": 0.3,
    "low_light": 0.1,
    "rain": 0.2,
    "gaussian_noise": 0.2,
    "real_noise": 0.1,
    "motion_blur": 0.1,
}


@dataclass(frozen=True)
class TaskWeighting:
    weights: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise DomainError("task weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise DomainError(f"task weights sum to {sum(self.weights.values())}, expected 1")
        # validates family names
        for fam in self.weights:
            DegradationSpec(fam)

    @property
    def families(self) -> List[str]:
        return list(self.weights)

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.weights[f] for f in self.families])


def random_params(family: str, rng: np.random.Generator) -> Dict[str, float]:
    """Draw training-time parameters for one family."""
    if family == "gaussian_noise":
        return {"sigma": float(rng.choice([15.0, 25.0, 50.0]))}
    if family == "real_noise":
        return {"peak": float(rng.uniform(10, 60)), "read_sigma": float(rng.uniform(2, 10))}
    if family == "motion_blur":
        return {"length": float(rng.integers(3, 10)), "angle": float(rng.uniform(0, 180))}
    if family == "haze":
        return {"transmission": float(rng.uniform(0.35, 0.8)), "airlight": float(rng.uniform(0.8, 1.0))}
    if family == "low_light":
        return {"gamma": float(rng.uniform(1.5, 2.5)), "brightness": float(rng.uniform(0.35, 0.7))}
    if family == "rain":
        return {"density": float(rng.uniform(0.01, 0.04)), "angle": float(rng.uniform(60, 80))}
    return {}


def sample_task_batch(
    weighting: TaskWeighting, batch_size: int, rng: np.random.Generator, corpus: np.ndarray
) -> List[Tuple[np.ndarray, DegradationSpec]]:
    """Draw ``batch_size`` (clean image, DegradationSpec) pairs; families follow ``weighting``."""
    if corpus is None or len(corpus) == 0:
        raise DataError("empty training corpus")
    fams = weighting.families
    picks = rng.choice(len(fams), size=batch_size, p=weighting.probs)
    out = []
    for f in picks:
        fam = fams[int(f)]
        img = corpus[int(rng.integers(len(corpus)))]
        spec = DegradationSpec(fam, random_params(fam, rng), int(rng.integers(0, 2**63 - 1)))
        out.append((img, spec))
    return out
