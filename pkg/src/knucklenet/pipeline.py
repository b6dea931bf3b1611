"""Glue between the modules: manifest -> training pool, embeddings, score tables, reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augmentation import augment_dataset
from .config import RunConfig
from .dataset import DatasetManifest, ImageSample, load_samples, save_image, split
from .errors import AlignmentError, LoadError, ProtocolError
from .metrics import (EvalReport, HistogramScores, ROCCurve, ScoreSet, compute_di, compute_eer,
                      compute_roc, crr_from_matrix, score_matrix)
from .network import NetworkParams, embed
from .trainer import TrainingPool

log = logging.getLogger(__name__)

# above this many cross pairs, evaluation switches to streaming histograms
MAX_EXACT_PAIRS = 5_000_000


def network_samples(manifest: DatasetManifest, cfg: RunConfig) -> list[ImageSample]:
    size = (cfg.network.input_height, cfg.network.input_width)
    samples = load_samples(manifest, cfg.component, size)
    if not samples:
        raise ProtocolError(f"manifest has no {cfg.component!r} images")
    return samples


def training_pool(manifest: DatasetManifest, cfg: RunConfig, export_dir=None) -> TrainingPool:
    """Gallery split of the configured component, augmented per subject."""
    gallery, _ = split(network_samples(manifest, cfg), cfg.protocol)
    augmented = augment_dataset(gallery, cfg.augmentation)
    log.info("augmented %d originals to %d training images", len(gallery), len(augmented))
    if export_dir is not None:
        export_augmented(augmented, export_dir)
    return TrainingPool.from_samples(augmented)


def export_augmented(samples: Sequence[ImageSample], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "subject", "component", "index"])
        for s in samples:
            k = counters.get(s.subject, 0)
            counters[s.subject] = k + 1
            rel = f"{s.subject}/{s.component}_aug{k:03d}.png"
            (out / s.subject).mkdir(exist_ok=True)
            save_image(s.pixels, out / rel)
            w.writerow([rel, s.subject, s.component, k])


@dataclass
class ScoreTable:
    """Every (probe, gallery) score, probe-major, as read from or written to a score CSV."""
    probe_keys: list[str]
    gallery_keys: list[str]
    matrix: np.ndarray          # (P, G)

    @staticmethod
    def subject_of(key: str) -> str:
        return key.rsplit(":", 1)[0]

    @property
    def probe_subjects(self) -> list[str]:
        return [self.subject_of(k) for k in self.probe_keys]

    @property
    def gallery_subjects(self) -> list[str]:
        return [self.subject_of(k) for k in self.gallery_keys]

    @property
    def genuine_mask(self) -> np.ndarray:
        return np.asarray(self.probe_subjects)[:, None] == np.asarray(self.gallery_subjects)[None, :]

    def score_set(self) -> ScoreSet:
        g = self.genuine_mask
        return ScoreSet(self.matrix[g], self.matrix[~g])

    def to_csv(self, path) -> None:
        g = self.genuine_mask
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["probe", "gallery", "label", "score"])
            for i, pk in enumerate(self.probe_keys):
                for j, gk in enumerate(self.gallery_keys):
                    w.writerow([pk, gk, "genuine" if g[i, j] else "impostor", repr(float(self.matrix[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        probes: dict[str, int] = {}
        gallery: dict[str, int] = {}
        cells = {}
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise LoadError(f"cannot open score file {path}: {exc}") from exc
        with fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["probe", "gallery", "label", "score"]:
                raise LoadError(f"{path}:1: expected header probe,gallery,label,score")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 4:
                    raise LoadError(f"{path}:{lineno}: expected 4 fields")
                pk, gk, label, score = row
                expected = "genuine" if cls.subject_of(pk) == cls.subject_of(gk) else "impostor"
                if label != expected:
                    raise LoadError(f"{path}:{lineno}: label {label!r} contradicts the subject keys")
                try:
                    cells[(probes.setdefault(pk, len(probes)), gallery.setdefault(gk, len(gallery)))] = float(score)
                except ValueError:
                    raise LoadError(f"{path}:{lineno}: score {score!r} is not a number") from None
        m = np.full((len(probes), len(gallery)), np.nan)
        for (i, j), v in cells.items():
            m[i, j] = v
        if np.isnan(m).any() or len(cells) != m.size:
            raise LoadError(f"{path}: score file does not cover every probe x gallery pair")
        return cls(list(probes), list(gallery), m)

    def aligned_to(self, other: "ScoreTable") -> "ScoreTable":
        """Reorder rows/columns to ``other``'s key order."""
        if set(self.probe_keys) != set(other.probe_keys) or set(self.gallery_keys) != set(other.gallery_keys):
            raise AlignmentError("score tables cover different probe/gallery keys")
        pi = {k: i for i, k in enumerate(self.probe_keys)}
        gi = {k: i for i, k in enumerate(self.gallery_keys)}
        rows = [pi[k] for k in other.probe_keys]
        cols = [gi[k] for k in other.gallery_keys]
        return ScoreTable(list(other.probe_keys), list(other.gallery_keys), self.matrix[np.ix_(rows, cols)])


def embed_samples(params: NetworkParams, samples: Sequence[ImageSample]) -> np.ndarray:
    return embed(params, np.stack([s.pixels for s in samples]))


def match(params: NetworkParams, manifest: DatasetManifest, cfg: RunConfig) -> ScoreTable:
    gallery, probe = split(network_samples(manifest, cfg), cfg.protocol)
    g = embed_samples(params, gallery)
    p = embed_samples(params, probe)
    return ScoreTable([s.key for s in probe], [s.key for s in gallery], score_matrix(g, p))


def evaluate_table(table: ScoreTable, protocol: str = "", parameter_count: int | None = None,
                   max_exact_pairs: int = MAX_EXACT_PAIRS) -> tuple[EvalReport, ROCCurve]:
    if table.matrix.size > max_exact_pairs:
        scores = histogram_scores(table)
    else:
        scores = table.score_set()
    roc = compute_roc(scores)
    genuine = int(table.genuine_mask.sum())
    report = EvalReport(
        eer=compute_eer(roc),
        crr=crr_from_matrix(table.matrix, table.gallery_subjects, table.probe_subjects),
        di=compute_di(scores),
        genuine_count=genuine,
        impostor_count=int(table.matrix.size - genuine),
        parameter_count=parameter_count,
        protocol=protocol,
    )
    return report, roc


def histogram_scores(table: ScoreTable) -> HistogramScores:
    hist = HistogramScores.empty()
    mask = table.genuine_mask
    for i in range(0, table.matrix.shape[0], 512):
        hist.add(table.matrix[i:i + 512].ravel(), mask[i:i + 512].ravel())
    return hist
