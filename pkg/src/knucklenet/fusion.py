"""Weighted-sum score-level fusion over modalities with min-max normalization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import AlignmentError, ConfigError, MetricError, NormalizationError
from .metrics import ScoreSet, compute_di, eer


@dataclass(frozen=True)
class FusionWeights:
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        w = np.array([v for _, v in self.weights], dtype=float)
        if w.size == 0:
            raise ConfigError("fusion needs at least one weight")
        if np.any(w < 0):
            raise ConfigError(f"fusion weights must be >= 0, got {dict(self.weights)}")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"fusion weights must sum to 1, got {w.sum()}")

    @classmethod
    def of(cls, mapping: Mapping[str, float]) -> "FusionWeights":
        return cls(tuple((k, float(v)) for k, v in mapping.items()))

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


@dataclass
class AlignedScores:
    """Per-modality raw scores over one shared ordered pair list."""
    scores: dict[str, np.ndarray]
    genuine: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=bool)
        self.scores = {k: np.asarray(v, dtype=np.float64) for k, v in self.scores.items()}
        if not self.scores:
            raise AlignmentError("no modalities given")
        for name, v in self.scores.items():
            if v.shape != self.genuine.shape:
                raise AlignmentError(
                    f"modality {name} has {v.size} scores, pair list has {self.genuine.size}")

    @property
    def modalities(self) -> list[str]:
        return list(self.scores)

    def score_set(self, name: str) -> ScoreSet:
        v = self.scores[name]
        return ScoreSet(v[self.genuine], v[~self.genuine])

    @classmethod
    def from_score_sets(cls, sets: Mapping[str, ScoreSet]) -> "AlignedScores":
        """Align ScoreSets produced by the same (gallery, probe) enumeration."""
        items = list(sets.items())
        ng, ni = items[0][1].genuine.size, items[0][1].impostor.size
        for name, s in items:
            if (s.genuine.size, s.impostor.size) != (ng, ni):
                raise AlignmentError(f"modality {name} has a different genuine/impostor labeling")
        labels = np.concatenate([np.ones(ng, bool), np.zeros(ni, bool)])
        return cls({n: np.concatenate([s.genuine, s.impostor]) for n, s in items}, labels)


@dataclass(frozen=True)
class MinMax:
    lo: float
    hi: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "MinMax":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise NormalizationError("cannot normalize an empty score list")
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            raise NormalizationError(f"cannot min-max normalize constant scores ({lo})")
        return cls(lo, hi)

    def apply(self, values: np.ndarray) -> np.ndarray:
        # clipping only matters for scores outside the fitting range (e.g. test vs validation)
        return np.clip((np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def normalize_scores(scores: ScoreSet, stats: MinMax | None = None) -> ScoreSet:
    """Min-max to [0, 1] using min/max over genuine and impostor together."""
    stats = stats or MinMax.fit(np.concatenate([scores.genuine, scores.impostor]))
    return ScoreSet(stats.apply(scores.genuine), stats.apply(scores.impostor))


def fit_normalizers(aligned: AlignedScores) -> dict[str, MinMax]:
    return {name: MinMax.fit(v) for name, v in aligned.scores.items()}


def fuse_values(aligned: AlignedScores, weights: FusionWeights,
                normalizers: Mapping[str, MinMax] | None = None) -> np.ndarray:
    w = weights.as_dict()
    if set(w) != set(aligned.scores):
        raise AlignmentError(
            f"weights cover {sorted(w)} but scores provide {sorted(aligned.scores)}")
    normalizers = normalizers or fit_normalizers(aligned)
    fused = np.zeros(aligned.genuine.shape)
    for name in aligned.modalities:
        fused = fused + w[name] * normalizers[name].apply(aligned.scores[name])
    return fused


def fuse(aligned: AlignedScores, weights: FusionWeights,
         normalizers: Mapping[str, MinMax] | None = None) -> ScoreSet:
    """Weighted sum of normalized scores at each aligned position.

    ``normalizers`` default to min-max statistics of ``aligned`` itself; pass
    statistics fitted on validation data to score a test set without leakage.
    """
    fused = fuse_values(aligned, weights, normalizers)
    return ScoreSet(fused[aligned.genuine], fused[~aligned.genuine])


def simplex_grid(n: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors on the ``step`` lattice of the (n-1)-simplex, one-hot vertices included."""
    k = round(1.0 / step)
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise ConfigError(f"grid_step must divide 1, got {step}")
    points = []
    for bars in itertools.combinations(range(k + n - 1), n - 1):
        parts = np.diff([-1, *bars, k + n - 1]) - 1
        points.append(tuple(float(p) / k for p in parts))
    return sorted(points)


def _di_or_floor(s: ScoreSet) -> float:
    try:
        return compute_di(s)
    except MetricError:
        return -np.inf


def select_weights(aligned: AlignedScores, grid_step: float = 0.05, return_table: bool = False):
    """Grid-search the weight simplex for the lowest fused EER on ``aligned``.

    Ties on EER go to the higher DI, then to the lexicographically smallest
    weight tuple (in modality order).
    """
    names = aligned.modalities
    normalizers = fit_normalizers(aligned)
    table = []
    for point in simplex_grid(len(names), grid_step):
        w = FusionWeights(tuple(zip(names, point)))
        s = fuse(aligned, w, normalizers)
        table.append((eer(s), -_di_or_floor(s), point))
    best = min(table)
    chosen = FusionWeights(tuple(zip(names, best[2])))
    if return_table:
        return chosen, table
    return chosen
