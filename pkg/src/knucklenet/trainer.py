"""Triplet training: hard-triplet mining, adaptive margin, Adam, the loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError, NumericalError, ProtocolError
from .network import NetworkConfig, NetworkParams, build_network, count_parameters, embed, loss_and_gradients

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    hard: bool = True


@dataclass(frozen=True)
class MarginState:
    beta: float = 0.2
    step: float = 0.05
    beta_max: float = 0.5
    low_yield: int = 0
    yield_threshold: float = 0.10
    patience: int = 3

    def __post_init__(self):
        if not 0 < self.beta <= self.beta_max:
            raise ConfigError(f"margin beta must lie in (0, {self.beta_max}], got {self.beta}")


def update_margin(state: MarginState, yield_fraction: float) -> MarginState:
    """Step beta up after ``patience`` consecutive batches with a low hard-triplet yield."""
    if yield_fraction >= state.yield_threshold:
        return replace(state, low_yield=0)
    if state.low_yield + 1 < state.patience:
        return replace(state, low_yield=state.low_yield + 1)
    return replace(state, beta=step_beta(state), low_yield=0)


def step_beta(state: MarginState) -> float:
    # rounding keeps beta on the exact decimal grid 0.2, 0.25, ... instead of drifting
    return min(round(state.beta + state.step, 10), state.beta_max)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update. Pure: returns new tensors and a new state."""
    if set(params) != set(grads):
        raise DimensionError(f"gradient names do not match parameters: {sorted(set(params) ^ set(grads))}")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - hyper.b1 ** t
    c2 = 1.0 - hyper.b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m = state.m.get(name, torch.zeros_like(p)) * hyper.b1 + (1.0 - hyper.b1) * g
        v = state.v.get(name, torch.zeros_like(p)) * hyper.b2 + (1.0 - hyper.b2) * g * g
        new_p[name] = p - hyper.lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


@dataclass
class TrainingPool:
    """Augmented training images with integer class labels."""
    images: np.ndarray            # (M, H, W) float32
    labels: np.ndarray            # (M,) int
    subjects: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DimensionError("images and labels differ in length")

    @classmethod
    def from_samples(cls, samples: Sequence) -> "TrainingPool":
        subjects = sorted({s.subject for s in samples})
        lookup = {s: i for i, s in enumerate(subjects)}
        return cls(np.stack([s.pixels for s in samples]), np.array([lookup[s.subject] for s in samples]), subjects)

    def __len__(self) -> int:
        return len(self.labels)


class _Sampler:
    """Uniform candidate triplets: subject with >= 2 images, ordered positive pair, any negative."""

    def __init__(self, labels: np.ndarray):
        self.order = np.argsort(labels, kind="stable")
        sorted_labels = labels[self.order]
        classes, start, count = np.unique(sorted_labels, return_index=True, return_counts=True)
        if len(classes) < 2:
            raise ProtocolError("triplet mining needs at least two subjects")
        ok = count >= 2
        if not ok.any():
            raise ProtocolError("triplet mining needs a subject with at least two images")
        self.start, self.count = start[ok], count[ok]
        self.total = len(labels)

    def draw(self, rng: np.random.Generator, n: int):
        pick = rng.integers(0, len(self.start), size=n)
        start, count = self.start[pick], self.count[pick]
        a = rng.integers(0, count)
        p = rng.integers(0, count - 1)
        p = p + (p >= a)
        j = rng.integers(0, self.total - count)
        neg = np.where(j < start, j, j + count)
        return self.order[start + a], self.order[start + p], self.order[neg]


def mine_hard_triplets(pool: TrainingPool, params: NetworkParams, margin: MarginState,
                       candidates: int, want: int, rng: np.random.Generator,
                       sampler: _Sampler | None = None):
    """Sample ``candidates`` triplets, keep those with ``d_n - d_p <= beta``.

    Returns ``(triplets, yield_fraction)``. The batch is the first ``want``
    qualifying candidates in draw order, i.e. a uniform random subset of the
    hard ones. Taking the highest-loss ones instead collapses the embedding
    within a few epochs. When too few qualify, the batch is topped up with
    the highest-loss easy candidates (``hard=False``). The returned list is
    ordered by loss, highest first.
    """
    if want < 1 or candidates < want:
        raise ConfigError(f"need 1 <= want <= candidates, got want={want}, candidates={candidates}")
    sampler = sampler or _Sampler(pool.labels)
    a, p, n = sampler.draw(rng, candidates)
    used, inverse = np.unique(np.concatenate([a, p, n]), return_inverse=True)
    emb = embed(params, pool.images[used]).astype(np.float64)
    ea, ep, en = (emb[inverse[k * candidates:(k + 1) * candidates]] for k in range(3))
    d_p = ((ea - ep) ** 2).sum(1)
    d_n = ((ea - en) ** 2).sum(1)
    hard = d_n - d_p <= margin.beta
    chosen = np.nonzero(hard)[0][:want]
    if chosen.size < want:
        easy = np.nonzero(~hard)[0]
        easy = easy[np.argsort(d_n[easy] - d_p[easy], kind="stable")]
        chosen = np.concatenate([chosen, easy[:want - chosen.size]])
    chosen = chosen[np.argsort(d_n[chosen] - d_p[chosen], kind="stable")]
    triplets = [Triplet(int(a[i]), int(p[i]), int(n[i]), bool(hard[i])) for i in chosen]
    return triplets, float(hard.sum()) / candidates


@dataclass(frozen=True)
class TrainConfig:
    batch_triplets: int = 35
    epochs: int = 500
    candidate_pool: int = 1000
    adam: AdamConfig = AdamConfig()
    margin: MarginState = MarginState()
    margin_trigger: str = "yield"          # or "epochs"
    margin_every_epochs: int = 75
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.adam, dict):
            object.__setattr__(self, "adam", AdamConfig(**self.adam))
        if isinstance(self.margin, dict):
            object.__setattr__(self, "margin", MarginState(**self.margin))

    def validate(self) -> None:
        if self.batch_triplets < 1:
            raise ConfigError("batch_triplets must be >= 1")
        if self.candidate_pool < self.batch_triplets:
            raise ConfigError("candidate_pool must be >= batch_triplets")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.margin_trigger not in ("yield", "epochs"):
            raise ConfigError(f"margin_trigger must be 'yield' or 'epochs', got {self.margin_trigger!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    beta: float
    yield_fraction: float


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def betas(self) -> np.ndarray:
        return np.array([r.beta for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss", "beta", "yield"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.loss), repr(r.beta), repr(r.yield_fraction)])

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([TraceRecord(int(r["iter"]), float(r["loss"]), float(r["beta"]), float(r["yield"]))
                    for r in rows])


def iterations_per_epoch(n_images: int, batch_triplets: int) -> int:
    return max(1, n_images // (3 * batch_triplets))


def train(pool: TrainingPool, net_config: NetworkConfig, config: TrainConfig,
          params: NetworkParams | None = None,
          on_epoch: Callable[[int, NetworkParams, MarginState], None] | None = None):
    """Train from scratch (or from ``params``); returns ``(params, trace)``.

    Each iteration mines a batch against the current parameters, takes one
    Adam step on its mean triplet loss and records (loss, beta, yield).
    ``on_epoch(epoch, params, margin)`` runs after every epoch, e.g. for
    checkpointing.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = params or build_network(net_config, seed=config.seed, dtype=config.torch_dtype)
    log.info("training %d images, %d subjects, %d parameters, seed %d",
             len(pool), len(np.unique(pool.labels)), count_parameters(params), config.seed)
    sampler = _Sampler(pool.labels)
    per_epoch = iterations_per_epoch(len(pool), config.batch_triplets)
    margin = config.margin
    adam = AdamState()
    trace = LossTrace()
    it = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(per_epoch):
            it += 1
            triplets, yld = mine_hard_triplets(pool, params, margin, config.candidate_pool,
                                               config.batch_triplets, rng, sampler)
            idx = np.array([[t.anchor, t.positive, t.negative] for t in triplets])
            batch = torch.from_numpy(pool.images[idx])
            try:
                loss, grads = loss_and_gradients(params, batch, margin.beta)
            except NumericalError as exc:
                raise NumericalError(f"iteration {it} (beta={margin.beta}): {exc}") from exc
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at iteration {it} (beta={margin.beta})")
            trace.append(TraceRecord(it, loss, margin.beta, yld))
            tensors, adam = adam_step(params.tensors, grads, adam, config.adam)
            params = params.replace(tensors)
            if config.margin_trigger == "yield":
                margin = update_margin(margin, yld)
        if config.margin_trigger == "epochs" and epoch % config.margin_every_epochs == 0:
            margin = replace(margin, beta=step_beta(margin))
        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            recent = trace.losses[-per_epoch:]
            log.info("epoch %d: mean loss %.4f, beta %.2f", epoch, recent.mean(), margin.beta)
        if on_epoch is not None:
            on_epoch(epoch, params, margin)
    return params, trace


def save_trace(trace: LossTrace, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(path)
