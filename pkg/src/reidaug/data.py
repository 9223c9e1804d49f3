"""Pedestrian image datasets: directory ingestion, manifests, synthetic corpora.

Pixels are kept as ``float32`` arrays of shape ``(3, H, W)`` holding values in
``[0, 255]``.  Normalisation to network ranges happens in the model code.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

JUNK_ID = -1
SPLITS = ("train", "query", "gallery")
MANIFEST_NAME = "manifest.tsv"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Market-1501 style: 0002_c1s1_000451_01.jpg, -1_c3s2_000000_00.jpg
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


class DataError(Exception):
    """Fatal ingestion problem (missing directory, nothing loadable)."""


def _frozen(pixels: np.ndarray) -> np.ndarray:
    arr = np.array(pixels, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PersonImage:
    pixels: np.ndarray
    identity: int
    camera: int
    source: str = "real"
    origin_path: str | None = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[0] != 3:
            raise ValueError(f"pixels must have shape (3, H, W), got {px.shape}")
        if px.size and not (np.isfinite(px).all() and px.min() >= 0 and px.max() <= 255):
            raise ValueError("pixel values must lie in [0, 255]")
        if self.source not in ("real", "generated"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.identity < JUNK_ID or self.camera < 0:
            raise ValueError(f"bad labels identity={self.identity} camera={self.camera}")
        if px.flags.writeable or px.dtype != np.float32:
            object.__setattr__(self, "pixels", _frozen(px))

    @property
    def is_junk(self) -> bool:
        return self.identity == JUNK_ID


@dataclass(frozen=True)
class LoadReport:
    """Files that could not be turned into samples, with the reason."""

    unparsed: tuple[str, ...] = ()
    errors: tuple[tuple[str, str], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.unparsed and not self.errors


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[PersonImage, ...]
    split: str = "train"
    name: str = ""
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def without_junk(self) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if not s.is_junk), self.split, self.name)

    def stack(self) -> np.ndarray:
        """All pixels as one ``(N, 3, H, W)`` array; images must share a size."""
        if not self.samples:
            raise ValueError("empty dataset")
        shapes = {s.pixels.shape for s in self.samples}
        if len(shapes) != 1:
            raise ValueError(f"images have mixed shapes {sorted(shapes)}")
        return np.stack([s.pixels for s in self.samples])


@dataclass(frozen=True)
class ChannelStats:
    mean_r: float
    mean_g: float
    mean_b: float
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")
        for v in self.fill:
            if not 0.0 <= v <= 255.0:
                raise ValueError(f"channel mean {v} outside [0, 255]")

    @property
    def fill(self) -> tuple[float, float, float]:
        return (self.mean_r, self.mean_g, self.mean_b)

    def combine(self, other: "ChannelStats") -> "ChannelStats":
        """Pixel-count-weighted merge of two statistics."""
        n = self.count + other.count
        means = [(a * self.count + b * other.count) / n for a, b in zip(self.fill, other.fill)]
        return ChannelStats(*means, count=n)


def parse_filename(name: str) -> tuple[int, int] | None:
    """Return ``(identity, camera)`` for a benchmark-style filename, else None."""
    m = _NAME_RE.match(Path(name).name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    return rgb.transpose(2, 0, 1)


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels)), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    # optimize=False and no metadata keep the encoded bytes a function of the pixels only
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_manifest(path: str | Path) -> list[tuple[str, int, int]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rel, ident, cam = parts
            records.append((rel, int(ident), int(cam)))
    return records


def write_manifest(path: str | Path, records: Iterable[tuple[str, int, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, ident, cam in records:
            fh.write(f"{rel}\t{ident}\t{cam}\n")


def manifest_from_filenames(root: str | Path) -> tuple[list[tuple[str, int, int]], list[str]]:
    """Build manifest records from filenames; returns ``(records, unparsed)``."""
    root = Path(root)
    records, unparsed = [], []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = p.relative_to(root).as_posix()
        labels = parse_filename(p.name)
        if labels is None:
            unparsed.append(rel)
        else:
            records.append((rel, *labels))
    return records, unparsed


def load_directory(path: str | Path, split: str = "train") -> Dataset:
    """Load a directory of pedestrian crops.

    A ``manifest.tsv`` sidecar is used when present; otherwise labels are
    parsed from benchmark-style filenames.  Files that do not match the
    naming pattern or fail to decode end up in ``Dataset.report``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        records, unparsed = read_manifest(manifest), []
    else:
        records, unparsed = manifest_from_filenames(root)
    for rel in unparsed:
        log.warning("filename does not match the id_cam pattern: %s", rel)

    samples, errors = [], []
    for rel, ident, cam in records:
        try:
            px = read_image(root / rel)
            samples.append(PersonImage(px, ident, cam, "real", rel))
        except (OSError, ValueError) as exc:
            errors.append((rel, str(exc)))
            log.warning("could not load %s: %s", rel, exc)
    if not samples:
        raise DataError(f"no images found in {root}")
    return Dataset(tuple(samples), split, root.name, LoadReport(tuple(unparsed), tuple(errors)))


def save_dataset(ds: Dataset, root: str | Path) -> list[tuple[str, int, int]]:
    """Write every sample as PNG plus a manifest; returns the manifest records.

    Samples without an ``origin_path`` get a name derived from their labels
    and position.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(ds.samples):
        rel = s.origin_path or f"{s.identity:04d}_c{s.camera}_{i:06d}.png"
        rel = str(Path(rel).with_suffix(".png").as_posix())
        out = root / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        write_image(out, s.pixels)
        records.append((rel, s.identity, s.camera))
    write_manifest(root / MANIFEST_NAME, records)
    return records


def channel_means(ds: Dataset | Sequence[PersonImage]) -> ChannelStats:
    """Per-channel mean over every pixel of every image (float64 accumulation)."""
    samples = ds.samples if isinstance(ds, Dataset) else tuple(ds)
    if not samples:
        raise ValueError("channel_means of an empty dataset")
    sums = np.zeros(3, dtype=np.float64)
    count = 0
    for s in samples:
        sums += s.pixels.astype(np.float64).sum(axis=(1, 2))
        count += s.pixels.shape[1] * s.pixels.shape[2]
    means = np.clip(sums / count, 0.0, 255.0)
    return ChannelStats(*(float(m) for m in means), count=count)


# ---------------------------------------------------------------------------
# synthetic pedestrians
# ---------------------------------------------------------------------------

def _identity_signature(seed: int, identity: int) -> dict:
    rng = np.random.default_rng([seed, identity, 0x5EED])
    return {
        "torso": rng.uniform(20, 235, 3),
        "legs": rng.uniform(20, 235, 3),
        "head": rng.uniform(20, 235, 3),
        "stripe": rng.uniform(20, 235, 3),
        "stripe_period": int(rng.integers(2, 5)),
        "stripe_phase": int(rng.integers(0, 4)),
        "torso_frac": rng.uniform(0.30, 0.42),
        "width_frac": rng.uniform(0.45, 0.75),
    }


def _render_person(sig: dict, h: int, w: int, rng: np.random.Generator, gain: np.ndarray) -> np.ndarray:
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = rng.uniform(60, 190, 3)[:, None, None]
    img += rng.normal(0, 6, (3, h, w))

    dx = int(rng.integers(-1, 2))
    dy = int(rng.integers(-1, 2))
    bw = max(2, int(round(sig["width_frac"] * w)))
    x0 = min(max((w - bw) // 2 + dx, 0), w - bw)
    head_h = max(1, h // 6)
    torso_h = max(1, int(round(sig["torso_frac"] * h)))
    top = min(max(1 + dy, 0), h - 1)
    head_w = max(1, bw // 2)
    hx = x0 + (bw - head_w) // 2

    def paint(color, r0, r1, c0, c1):
        r0, r1 = max(r0, 0), min(r1, h)
        if r1 > r0 and c1 > c0:
            jitter = rng.normal(0, 8, 3)
            img[:, r0:r1, c0:c1] = (color + jitter)[:, None, None]

    paint(sig["head"], top, top + head_h, hx, hx + head_w)
    t0 = top + head_h
    paint(sig["torso"], t0, t0 + torso_h, x0, x0 + bw)
    period = sig["stripe_period"]
    for r in range(t0 + sig["stripe_phase"] % period, min(t0 + torso_h, h), period * 2):
        img[:, r, x0:x0 + bw] = sig["stripe"][:, None]
    l0 = t0 + torso_h
    gap = max(1, bw // 5)
    leg_w = max(1, (bw - gap) // 2)
    paint(sig["legs"], l0, h - 1, x0, x0 + leg_w)
    paint(sig["legs"], l0, h - 1, x0 + bw - leg_w, x0 + bw)

    img *= gain[:, None, None]
    img += rng.normal(0, 4, (3, h, w))
    return np.clip(img, 0, 255).astype(np.float32)


def synth_corpus(n_ids: int, imgs_per_id: int, h: int, w: int, seed: int = 0, *,
                 n_cameras: int = 4, first_id: int = 0, split: str = "train",
                 name: str | None = None) -> Dataset:
    """Deterministic synthetic pedestrians.

    Each identity gets a colour/stripe signature derived from ``(seed, identity)``;
    each image adds pose shift, colour jitter, per-camera illumination and
    sensor noise.  Image ``j`` of an identity is seen by camera ``j % n_cameras``.
    Identities are ``first_id .. first_id + n_ids - 1`` in id-major order.
    """
    if min(n_ids, imgs_per_id, n_cameras) < 1:
        raise ValueError("n_ids, imgs_per_id and n_cameras must be positive")
    if h < 8 or w < 8:
        raise ValueError("h and w must be at least 8")
    if first_id < 0:
        raise ValueError("first_id must be non-negative")
    cam_rng = np.random.default_rng([seed, 0xCA3])
    gains = cam_rng.uniform(0.8, 1.15, (n_cameras, 3))
    samples = []
    for k in range(n_ids):
        ident = first_id + k
        sig = _identity_signature(seed, ident)
        for j in range(imgs_per_id):
            cam = j % n_cameras
            rng = np.random.default_rng([seed, ident, j])
            px = _render_person(sig, h, w, rng, gains[cam])
            samples.append(PersonImage(px, ident, cam, "real", f"{ident:04d}_c{cam}_{j:04d}.png"))
    return Dataset(tuple(samples), split, name or f"synth-{seed}")


def split_query_gallery(ds: Dataset, per_identity_queries: int = 2) -> tuple[Dataset, Dataset]:
    """First ``per_identity_queries`` images of each identity become queries."""
    seen: dict[int, int] = {}
    query, gallery = [], []
    for s in ds.samples:
        n = seen.get(s.identity, 0)
        (query if n < per_identity_queries else gallery).append(s)
        seen[s.identity] = n + 1
    return Dataset(tuple(query), "query", ds.name), Dataset(tuple(gallery), "gallery", ds.name)
