"""Matching scores and verification/identification metrics.

Scores are squared L2 distances between unit embeddings, so lower means a
better match and every score lies in [0, 4]. FAR(t) counts impostor scores
``<= t`` (accepted); FRR(t) counts genuine scores ``> t`` (rejected).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricError, ProtocolError

HIST_BINS = 4096
SCORE_RANGE = (0.0, 4.0)


class DegenerateCurveWarning(UserWarning):
    pass


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        for name in ("genuine", "impostor"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise MetricError(f"{name} scores contain non-finite values")
            if v.size and v.min() < 0:
                raise MetricError(f"{name} scores must be >= 0")

    def require_nonempty(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise MetricError("metric needs at least one genuine and one impostor score")


@dataclass
class HistogramScores:
    """Counting-histogram stand-in for a ScoreSet too large to hold in memory."""
    genuine_counts: np.ndarray
    impostor_counts: np.ndarray
    edges: np.ndarray
    # running (count, sum, sum of squares), so DI stays exact
    genuine_moments: tuple[int, float, float] = (0, 0.0, 0.0)
    impostor_moments: tuple[int, float, float] = (0, 0.0, 0.0)

    @classmethod
    def empty(cls, bins: int = HIST_BINS, lo: float = SCORE_RANGE[0], hi: float = SCORE_RANGE[1]):
        return cls(np.zeros(bins, np.int64), np.zeros(bins, np.int64), np.linspace(lo, hi, bins + 1))

    def add(self, scores: np.ndarray, genuine: np.ndarray) -> None:
        scores = np.asarray(scores, dtype=np.float64)
        genuine = np.asarray(genuine, dtype=bool)
        nb = len(self.genuine_counts)
        lo, hi = self.edges[0], self.edges[-1]
        idx = np.clip(((scores - lo) / (hi - lo) * nb).astype(np.int64), 0, nb - 1)
        self.genuine_counts += np.bincount(idx[genuine], minlength=nb)
        self.impostor_counts += np.bincount(idx[~genuine], minlength=nb)
        for attr, sel in (("genuine_moments", genuine), ("impostor_moments", ~genuine)):
            n, s, ss = getattr(self, attr)
            x = scores[sel]
            setattr(self, attr, (n + x.size, s + float(x.sum()), ss + float((x * x).sum())))

    @property
    def genuine_count(self) -> int:
        return int(self.genuine_counts.sum())

    @property
    def impostor_count(self) -> int:
        return int(self.impostor_counts.sum())


@dataclass
class ROCCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "far", "frr"])
            for t, a, r in zip(self.thresholds, self.far, self.frr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


@dataclass
class EvalReport:
    eer: float
    crr: float
    di: float
    genuine_count: int
    impostor_count: int
    parameter_count: int | None = None
    protocol: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def match_score(e1, e2) -> float:
    d = np.asarray(e1, dtype=np.float64) - np.asarray(e2, dtype=np.float64)
    return float(d @ d)


def score_matrix(gallery: np.ndarray, probe: np.ndarray, chunk: int = 256) -> np.ndarray:
    """(P, G) squared distances by direct differences; exact and order-stable."""
    g = np.asarray(gallery, dtype=np.float64)
    p = np.asarray(probe, dtype=np.float64)
    out = np.empty((len(p), len(g)))
    step = max(1, chunk * 1024 // max(1, len(g) * g.shape[1]))
    for s in range(0, len(p), step):
        d = p[s:s + step, None, :] - g[None, :, :]
        out[s:s + step] = np.einsum("pgk,pgk->pg", d, d)
    return out


def score_all_pairs(gallery: np.ndarray, gallery_labels: Sequence, probe: np.ndarray,
                    probe_labels: Sequence) -> ScoreSet:
    if len(gallery) == 0 or len(probe) == 0:
        raise ProtocolError("score_all_pairs needs a nonempty gallery and probe set")
    m = score_matrix(gallery, probe)
    same = np.asarray(probe_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    return ScoreSet(m[same], m[~same])


def stream_histogram(gallery: np.ndarray, gallery_labels: Sequence, probe: np.ndarray,
                     probe_labels: Sequence, bins: int = HIST_BINS, rows: int = 512) -> HistogramScores:
    """Score every cross pair into counting histograms, ``rows`` probes at a time."""
    if len(gallery) == 0 or len(probe) == 0:
        raise ProtocolError("stream_histogram needs a nonempty gallery and probe set")
    hist = HistogramScores.empty(bins)
    gl = np.asarray(gallery_labels)
    pl = np.asarray(probe_labels)
    for s in range(0, len(probe), rows):
        m = score_matrix(gallery, probe[s:s + rows])
        hist.add(m.ravel(), (pl[s:s + rows, None] == gl[None, :]).ravel())
    return hist


def _rates(sorted_gen: np.ndarray, sorted_imp: np.ndarray, t: np.ndarray):
    far = np.searchsorted(sorted_imp, t, side="right") / sorted_imp.size
    frr = (sorted_gen.size - np.searchsorted(sorted_gen, t, side="right")) / sorted_gen.size
    return far, frr


def compute_roc(scores: ScoreSet | HistogramScores, thresholds: int | None = None) -> ROCCurve:
    """FAR/FRR sweep.

    With ``thresholds=None`` the sweep visits every distinct observed score,
    every midpoint between neighbours, and one point just below the minimum.
    An integer asks for a uniform grid over [0, 4] instead.
    """
    if isinstance(scores, HistogramScores):
        return _histogram_roc(scores)
    scores.require_nonempty()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    if thresholds is None:
        uniq = np.unique(np.concatenate([gen, imp]))
        mids = (uniq[:-1] + uniq[1:]) / 2.0
        t = np.unique(np.concatenate([[np.nextafter(uniq[0], -np.inf)], uniq, mids]))
    else:
        if thresholds < 2:
            raise MetricError("a threshold grid needs at least 2 points")
        t = np.linspace(*SCORE_RANGE, int(thresholds))
    far, frr = _rates(gen, imp, t)
    return ROCCurve(t, far, frr)


def _histogram_roc(h: HistogramScores) -> ROCCurve:
    if h.genuine_count == 0 or h.impostor_count == 0:
        raise MetricError("metric needs at least one genuine and one impostor score")
    # a score in bin k counts as <= t from the bin's upper edge onward
    t = h.edges
    far = np.concatenate([[0.0], np.cumsum(h.impostor_counts) / h.impostor_count])
    frr = (h.genuine_count - np.concatenate([[0], np.cumsum(h.genuine_counts)])) / h.genuine_count
    return ROCCurve(t, far, frr)


def compute_eer(roc: ROCCurve) -> float:
    """Equal error rate in percent, linearly interpolated at the FAR = FRR crossing."""
    if len(roc) == 0:
        raise MetricError("empty ROC curve")
    diff = roc.far - roc.frr
    above = np.nonzero(diff >= 0)[0]
    if above.size == 0 or (above[0] == 0 and diff[0] > 0):
        k = int(np.argmin(np.abs(diff)))
        warnings.warn("FAR and FRR never cross; reporting the closest point", DegenerateCurveWarning)
        return 100.0 * float(roc.far[k] + roc.frr[k]) / 2.0
    k = int(above[0])
    if diff[k] == 0:
        return 100.0 * float(roc.far[k] + roc.frr[k]) / 2.0
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    far = roc.far[k - 1] + alpha * (roc.far[k] - roc.far[k - 1])
    frr = roc.frr[k - 1] + alpha * (roc.frr[k] - roc.frr[k - 1])
    return 100.0 * float(far + frr) / 2.0


def eer(scores: ScoreSet | HistogramScores) -> float:
    return compute_eer(compute_roc(scores))


def crr_from_matrix(m: np.ndarray, gallery_labels: Sequence, probe_labels: Sequence) -> float:
    """Rank-1 rate in percent; ties go to the lowest gallery index."""
    if m.shape[1] == 0:
        raise ProtocolError("CRR needs a nonempty gallery")
    if m.shape[0] == 0:
        raise ProtocolError("CRR needs a nonempty probe set")
    best = np.argmin(m, axis=1)
    hits = np.asarray(gallery_labels)[best] == np.asarray(probe_labels)
    return 100.0 * float(hits.mean())


def compute_crr(gallery: np.ndarray, gallery_labels: Sequence, probe: np.ndarray,
                probe_labels: Sequence) -> float:
    if len(gallery) == 0:
        raise ProtocolError("CRR needs a nonempty gallery")
    return crr_from_matrix(score_matrix(gallery, probe), gallery_labels, probe_labels)


def _moments(x: np.ndarray):
    return x.size, float(x.mean()), float(x.var())


def compute_di(scores: ScoreSet | HistogramScores) -> float:
    """Decidability index |mu_imp - mu_gen| / sqrt((var_gen + var_imp) / 2), population variances."""
    if isinstance(scores, HistogramScores):
        stats = []
        for n, s, ss in (scores.genuine_moments, scores.impostor_moments):
            if n < 2:
                raise MetricError("DI needs at least two scores per class")
            mu = s / n
            stats.append((n, mu, max(ss / n - mu * mu, 0.0)))
        (_, mg, vg), (_, mi, vi) = stats
    else:
        if scores.genuine.size < 2 or scores.impostor.size < 2:
            raise MetricError("DI needs at least two scores per class")
        _, mg, vg = _moments(scores.genuine)
        _, mi, vi = _moments(scores.impostor)
    pooled = (vg + vi) / 2.0
    if pooled <= 0:
        raise MetricError("DI undefined: genuine and impostor scores have zero variance")
    return abs(mi - mg) / float(np.sqrt(pooled))


def emit_report(report: EvalReport, roc: ROCCurve, out_dir, loss_trace=None) -> dict[str, Path]:
    """Write ``report.json``, ``roc.csv`` and optionally ``loss.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "roc": out / "roc.csv"}
    paths["report"].write_text(report.to_json())
    roc.to_csv(paths["roc"])
    if loss_trace is not None:
        paths["loss"] = out / "loss.csv"
        loss_trace.to_csv(paths["loss"])
    return paths
