"""Manifests, image files, split protocols and the synthetic finger generator."""

from __future__ import annotations

import csv
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import expit

from .errors import ConfigError, LoadError, ProtocolError

log = logging.getLogger(__name__)

COMPONENTS = ("major", "minor", "nail", "full")
MANIFEST_HEADER = ["path", "subject", "component", "index"]

# Row band (start fraction, height fraction) of each component inside the full image.
# Bands overlap so every crop stays taller than wide.
COMPONENT_BANDS = {"nail": (0.0, 0.4), "minor": (0.3, 0.4), "major": (0.6, 0.4)}


@dataclass
class ImageSample:
    pixels: np.ndarray
    subject: str
    component: str = "full"
    index: int = 0
    split: str = ""

    @property
    def key(self) -> str:
        """Identifies the physical sample, shared by all its component crops."""
        return f"{self.subject}:{self.index}"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: str
    component: str
    index: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def filter(self, component: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.component == component], self.root)

    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"cannot open manifest {path}: {exc}") from exc
    entries, seen = [], {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise LoadError(f"{path}:1: bad manifest header {header}, expected {MANIFEST_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LoadError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rel, subject, component, index = row
            if component not in COMPONENTS:
                raise LoadError(f"{path}:{lineno}: unknown component {component!r}")
            try:
                index = int(index)
            except ValueError:
                raise LoadError(f"{path}:{lineno}: sample index {index!r} is not an integer") from None
            key = (subject, component, index)
            if key in seen:
                raise LoadError(f"{path}:{lineno}: duplicate entry {key}, first seen on line {seen[key]}")
            seen[key] = lineno
            entries.append(ManifestEntry(rel, subject, component, index))
    manifest = DatasetManifest(entries, path.parent)
    if check_files:
        for lineno, e in enumerate(entries, start=2):
            if not manifest.resolve(e).is_file():
                raise LoadError(f"{path}:{lineno}: image file {e.path} does not exist")
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            w.writerow([e.path, e.subject, e.component, e.index])


def load_image(path, subject: str = "", component: str = "full", index: int = 0) -> ImageSample:
    """Decode an 8-bit grayscale PNG/PGM to float32 pixels in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from exc
    return ImageSample(arr / np.float32(255.0), subject, component, index)


def save_image(pixels: np.ndarray, path) -> None:
    data = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so a save/load round trip is lossless."""
    q = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255)
    return (q.astype(np.float32) / np.float32(255.0))


def resize_image(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    im = Image.fromarray(np.asarray(pixels, dtype=np.float32), mode="F")
    out = np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def load_samples(manifest: DatasetManifest, component: str | None = None,
                 size: tuple[int, int] | None = None) -> list[ImageSample]:
    """Load every image of ``manifest`` (optionally one component), resizing if asked."""
    if component is not None:
        manifest = manifest.filter(component)
    samples = []
    resized = 0
    for e in manifest.entries:
        s = load_image(manifest.resolve(e), e.subject, e.component, e.index)
        if size is not None and s.pixels.shape != tuple(size):
            s.pixels = resize_image(s.pixels, size)
            resized += 1
        samples.append(s)
    if resized:
        log.info("resized %d of %d images to %dx%d network input", resized, len(samples), *size)
    return samples


# ---------------------------------------------------------------- protocols

@dataclass(frozen=True)
class SplitProtocol:
    name: str = "fki-2/3"
    train_per_subject: int = 2
    test_per_subject: int = 3


FKP_PROTOCOL = SplitProtocol("fkp-6/6", 6, 6)
FKI_PROTOCOL = SplitProtocol("fki-2/3", 2, 3)


def group_by_subject(samples: Iterable) -> dict[str, list]:
    groups: dict[str, list] = defaultdict(list)
    for s in samples:
        groups[s.subject].append(s)
    return dict(sorted(groups.items()))


def split(samples: Sequence, protocol: SplitProtocol):
    """Deterministic gallery/probe split by ascending sample index.

    Works on anything with ``subject`` and ``index`` attributes (samples or
    manifest entries). Gallery gets the first ``train_per_subject`` samples of
    every subject, probe the next ``test_per_subject``.
    """
    need = protocol.train_per_subject + protocol.test_per_subject
    gallery, probe = [], []
    for subject, items in group_by_subject(samples).items():
        if len(items) < need:
            raise ProtocolError(
                f"subject {subject} has {len(items)} samples, protocol {protocol.name} needs {need}")
        items = sorted(items, key=lambda s: s.index)
        tr = items[:protocol.train_per_subject]
        te = items[protocol.train_per_subject:need]
        if isinstance(items[0], ImageSample):
            tr = [replace(s, split="gallery") for s in tr]
            te = [replace(s, split="probe") for s in te]
        gallery.extend(tr)
        probe.extend(te)
    return gallery, probe


def count_pairs(gallery_subjects: Sequence[str], probe_subjects: Sequence[str]) -> tuple[int, int]:
    """(genuine, impostor) cross-pair counts without materializing any pair."""
    g = defaultdict(int)
    for s in gallery_subjects:
        g[s] += 1
    p = defaultdict(int)
    for s in probe_subjects:
        p[s] += 1
    genuine = sum(n * p.get(s, 0) for s, n in g.items())
    return genuine, len(gallery_subjects) * len(probe_subjects) - genuine


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    identities: int = 50
    samples_per_identity: int = 5
    height: int = 96
    width: int = 32
    creases: tuple[int, int] = (3, 6)
    shift_px: float = 0.7
    rotation_deg: float = 1.5
    illumination: float = 0.05
    noise: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.identities < 2:
            raise ConfigError("identities must be >= 2")
        if self.samples_per_identity < 2:
            raise ConfigError("samples_per_identity must be >= 2")
        if self.height <= self.width:
            raise ConfigError("height must exceed width")
        if not 1 <= self.creases[0] <= self.creases[1]:
            raise ConfigError("creases must be a nondecreasing (min, max) range with min >= 1")


def component_rows(component: str, height: int) -> slice:
    start_frac, height_frac = COMPONENT_BANDS[component]
    band = int(round(height_frac * height))
    start = min(int(round(start_frac * height)), height - band)
    return slice(start, start + band)


def _identity_seed(seed: int, key: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(key.encode())])


@dataclass
class _Finger:
    """Persistent per-identity appearance, in normalized (row, col) in [0,1]^2 coordinates."""
    texture: np.ndarray
    base: float
    half_width: float
    strokes: np.ndarray        # rows of (y0, curvature, tilt, x_lo, x_hi, thickness, darkness)
    nail: tuple[float, float, float, float, float]  # (cy, cx, ry, rx, brightness)


def _draw_finger(rng: np.random.Generator, cfg: SynthConfig) -> _Finger:
    texture = ndimage.gaussian_filter(rng.standard_normal((cfg.height, cfg.width)), 1.2)
    texture *= 0.06 / (texture.std() + 1e-12)
    strokes = []
    # (band centre, band half-height) for major and minor knuckles
    for centre, spread, lo_hi in ((0.78, 0.09, cfg.creases), (0.48, 0.07, (max(1, cfg.creases[0] - 1), cfg.creases[1] - 1))):
        for _ in range(int(rng.integers(lo_hi[0], max(lo_hi[0], lo_hi[1]) + 1))):
            y0 = centre + rng.uniform(-spread, spread)
            x_lo = rng.uniform(0.05, 0.4)
            x_hi = rng.uniform(0.6, 0.95)
            strokes.append((y0, rng.uniform(-0.35, 0.35), rng.uniform(-0.08, 0.08),
                            x_lo, x_hi, rng.uniform(0.006, 0.016), rng.uniform(0.2, 0.45)))
    nail = (rng.uniform(0.13, 0.19), rng.uniform(0.45, 0.55), rng.uniform(0.08, 0.12),
            rng.uniform(0.25, 0.33), rng.uniform(0.15, 0.3))
    return _Finger(texture, rng.uniform(0.45, 0.6), rng.uniform(0.36, 0.46), np.array(strokes), nail)


def _render(f: _Finger, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    # per-sample rigid jitter: sample the identity's appearance at moved coordinates
    theta = np.deg2rad(rng.normal(0.0, cfg.rotation_deg))
    dy, dx = rng.normal(0.0, cfg.shift_px, size=2)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r0, c0 = rr - cy, cc - cx
    sr = np.cos(theta) * r0 - np.sin(theta) * c0 + cy + dy
    sc = np.sin(theta) * r0 + np.cos(theta) * c0 + cx + dx
    y, x = sr / (h - 1), sc / (w - 1)

    img = f.base + ndimage.map_coordinates(f.texture, [sr, sc], order=1, mode="nearest")
    # finger silhouette: bright skin fading to dark background at the sides
    edge = np.abs(x - 0.5) - f.half_width
    img = img * expit(-edge / 0.02) + 0.08
    ny, nx, ry, rx, nb = f.nail
    nail = ((y - ny) / ry) ** 2 + ((x - nx) / rx) ** 2
    img += nb * expit((1.0 - nail) / 0.08)
    for y0, curv, tilt, x_lo, x_hi, thick, dark in f.strokes:
        u = x - 0.5
        curve = y0 + curv * u * u + tilt * u
        along = expit((x - x_lo) / 0.02) * expit((x_hi - x) / 0.02)
        img -= dark * along * np.exp(-((y - curve) / thick) ** 2)

    gain = 1.0 + rng.normal(0.0, cfg.illumination)
    offset = rng.normal(0.0, cfg.illumination / 2)
    ramp = rng.normal(0.0, cfg.illumination / 2) * (y - 0.5)
    img = img * gain + offset + ramp + rng.normal(0.0, cfg.noise, size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0))


def render_identity(subject: str, cfg: SynthConfig) -> list[np.ndarray]:
    """Full-finger images of one identity, one per sample index."""
    ss = _identity_seed(cfg.seed, subject)
    appearance_ss, *sample_ss = ss.spawn(1 + cfg.samples_per_identity)
    finger = _draw_finger(np.random.default_rng(appearance_ss), cfg)
    return [_render(finger, np.random.default_rng(s), cfg) for s in sample_ss]


def crop_component(full: np.ndarray, component: str) -> np.ndarray:
    if component == "full":
        return full
    return full[component_rows(component, full.shape[0])]


def generate_synthetic(cfg: SynthConfig, out_dir=None) -> tuple[DatasetManifest, list[ImageSample]]:
    """Render the dataset; with ``out_dir`` also write PNGs and ``manifest.csv``."""
    cfg.validate()
    samples, entries = [], []
    out = Path(out_dir) if out_dir is not None else None
    for i in range(cfg.identities):
        subject = f"id{i:04d}"
        for index, full in enumerate(render_identity(subject, cfg)):
            for comp in COMPONENTS:
                pix = crop_component(full, comp)
                rel = f"{subject}/{comp}_{index}.png"
                samples.append(ImageSample(pix, subject, comp, index))
                entries.append(ManifestEntry(rel, subject, comp, index))
                if out is not None:
                    (out / subject).mkdir(parents=True, exist_ok=True)
                    save_image(pix, out / rel)
    manifest = DatasetManifest(entries, out if out is not None else Path())
    if out is not None:
        write_manifest(manifest, out / "manifest.csv")
    return manifest, samples
