"""Synthetic rotation-invariant imagery, folder ingestion, splits, rotation.

The synthetic generator is a desk-scale stand-in for a nine-class tissue
corpus: each class is a fixed count of isotropic Gaussian bumps with a
class-specific radius and signed amplitude, placed uniformly on the disc
inscribed in the image.  Disc placement makes the class-conditional image
distribution closed under rotation about the center, so class identity can
never encode orientation.  Images are written as 8-bit PNGs in a
class-per-folder layout so the same loader ingests real corpora laid out
the same way.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

# per-class generator table: bump count, bump radius (px, cycling), and
# signed amplitude (alternating, scaled per channel for color contrast)
CLASS_BUMP_COUNTS = (2, 5, 9, 14, 20, 27, 35, 44, 54)
CLASS_BUMP_RADII_CYCLE = (2.5, 4.0, 6.0)
AMPLITUDE = 0.32
CHANNEL_SCALE = (1.0, 0.8, 0.6)
BACKGROUND = 0.5


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 9
    img_size: int = 64
    channels: int = 3
    seed: int = 0

    def class_name(self, class_id: int) -> str:
        return f"class{class_id:02d}"

    def bump_count(self, class_id: int) -> int:
        return CLASS_BUMP_COUNTS[class_id % len(CLASS_BUMP_COUNTS)]

    def bump_radius(self, class_id: int) -> float:
        return CLASS_BUMP_RADII_CYCLE[class_id % len(CLASS_BUMP_RADII_CYCLE)]

    def amplitude(self, class_id: int) -> float:
        return AMPLITUDE if class_id % 2 == 0 else -AMPLITUDE


@dataclass
class DatasetIndex:
    entries: list[tuple[str, int]]
    class_names: list[str]
    _cache: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def counts(self) -> list[int]:
        out = [0] * len(self.class_names)
        for _, cid in self.entries:
            out[cid] += 1
        return out

    def labels(self) -> np.ndarray:
        return np.array([cid for _, cid in self.entries], dtype=np.int64)

    def images(self) -> np.ndarray:
        """Decode every image to f32 [n, C, S, S] in [0, 1]; cached."""
        if self._cache is None:
            arrs = [decode_image(path) for path, _ in self.entries]
            self._cache = (np.stack(arrs), self.labels())
        return self._cache[0]

    def subset(self, entry_ids) -> "DatasetIndex":
        return DatasetIndex([self.entries[i] for i in entry_ids], list(self.class_names))


def synth_image(spec: SynthSpec, class_id: int, index: int) -> np.ndarray:
    """Deterministic [C, S, S] f32 image in [0, 1] for (seed, class, index)."""
    if not 0 <= class_id < spec.n_classes:
        raise DataError(f"class_id {class_id} out of range for {spec.n_classes} classes")
    rng = np.random.default_rng([spec.seed, class_id, index])
    s = spec.img_size
    center = (s - 1) / 2.0
    placement_radius = s / 2.0 - 2.0
    n_bumps = spec.bump_count(class_id)
    sigma = spec.bump_radius(class_id)
    amp = spec.amplitude(class_id)

    rr = placement_radius * np.sqrt(rng.random(n_bumps))
    phi = 2.0 * np.pi * rng.random(n_bumps)
    py = center + rr * np.cos(phi)
    px = center + rr * np.sin(phi)

    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    bump_map = np.zeros((s, s), dtype=np.float64)
    for by, bx in zip(py, px):
        bump_map += np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * sigma * sigma))

    img = np.empty((spec.channels, s, s), dtype=np.float64)
    for c in range(spec.channels):
        img[c] = BACKGROUND + amp * CHANNEL_SCALE[c % len(CHANNEL_SCALE)] * bump_map
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(spec: SynthSpec, n_per_class: int, out_dir) -> DatasetIndex:
    """Write ``out_dir/<class>/<index>.png`` plus manifest.json; returns the index."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries: list[tuple[str, int]] = []
    class_names = [spec.class_name(c) for c in range(spec.n_classes)]
    for cid, cname in enumerate(class_names):
        cdir = root / cname
        cdir.mkdir(exist_ok=True)
        for i in range(n_per_class):
            img = synth_image(spec, cid, i)
            path = cdir / f"{i:05d}.png"
            arr = to_uint8(img).transpose(1, 2, 0)
            Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6)
            entries.append((str(path), cid))
    digest = folder_digest(root)
    manifest = {
        "n_classes": spec.n_classes,
        "img_size": spec.img_size,
        "channels": spec.channels,
        "seed": spec.seed,
        "n_per_class": n_per_class,
        "file_count": len(entries),
        "sha256": digest,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return DatasetIndex(entries=entries, class_names=class_names)


def folder_digest(root) -> str:
    """Hex sha256 of all image bytes, concatenated in sorted relative-path order."""
    root = Path(root)
    h = hashlib.sha256()
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in (".png", ".tif", ".tiff"))
    for p in paths:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def decode_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_folder(root) -> DatasetIndex:
    """Ingest a class-per-subdirectory image folder; classes sorted lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class subdirectories")
    entries: list[tuple[str, int]] = []
    class_names = [p.name for p in class_dirs]
    for cid, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in (".png", ".tif", ".tiff")
        )
        if not files:
            raise DataError(f"class directory {cdir} contains no PNG/TIFF files")
        for p in files:
            entries.append((str(p), cid))
    index = DatasetIndex(entries=entries, class_names=class_names)
    # fail fast on an undecodable corpus member
    decode_image(index.entries[0][0])
    return index


def stratified_split(index: DatasetIndex, frac: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Per-class shuffle; first round(frac * count) of each class go to test."""
    if not 0.0 < frac < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, (_, cid) in enumerate(index.entries):
        by_class.setdefault(cid, []).append(i)
    train_ids: list[int] = []
    test_ids: list[int] = []
    for cid in sorted(by_class):
        ids = by_class[cid]
        if len(ids) < 2:
            raise DataError(f"class {index.class_names[cid]} has {len(ids)} item(s); cannot split")
        order = rng.permutation(len(ids))
        n_test = int(np.floor(frac * len(ids) + 0.5))
        shuffled = [ids[j] for j in order]
        test_ids.extend(shuffled[:n_test])
        train_ids.extend(shuffled[n_test:])
    return index.subset(train_ids), index.subset(test_ids)


def channel_mean(images: np.ndarray) -> np.ndarray:
    """Per-channel mean over [n, C, S, S], f32."""
    return images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)


def _rotation_sample_grid(s: int, angle_deg: float):
    """Source coordinates and bilinear weights for one rotation angle."""
    center = (s - 1) / 2.0
    th = np.deg2rad(angle_deg)
    ii, jj = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    di, dj = ii - center, jj - center
    sr = di * np.cos(th) + dj * np.sin(th) + center
    sc = -di * np.sin(th) + dj * np.cos(th) + center
    inside = (sr >= 0) & (sr <= s - 1) & (sc >= 0) & (sc <= s - 1)
    r0 = np.clip(np.floor(sr).astype(np.int64), 0, max(s - 2, 0))
    c0 = np.clip(np.floor(sc).astype(np.int64), 0, max(s - 2, 0))
    r1 = np.minimum(r0 + 1, s - 1)
    c1 = np.minimum(c0 + 1, s - 1)
    t = np.clip(sr - r0, 0.0, 1.0)
    u = np.clip(sc - c0, 0.0, 1.0)
    return inside, (r0, c0, r1, c1), (t, u)


def rotate_batch(images: np.ndarray, angle_deg: float, fill) -> np.ndarray:
    """Rotate [..., S, S] images about the center; 90-degree multiples are exact.

    ``fill`` is a scalar or per-channel vector applied where the inverse map
    leaves the image support.  Bilinear interpolation elsewhere.
    """
    s = images.shape[-1]
    if images.shape[-2] != s:
        raise DataError(f"rotation requires square images, got {images.shape}")
    angle = float(angle_deg) % 360.0
    if angle % 90.0 == 0.0:
        return np.ascontiguousarray(np.rot90(images, int(angle // 90), axes=(-2, -1)))
    inside, (r0, c0, r1, c1), (t, u) = _rotation_sample_grid(s, angle)
    x = images.astype(np.float32)
    val = (
        (1 - t) * (1 - u) * x[..., r0, c0]
        + (1 - t) * u * x[..., r0, c1]
        + t * (1 - u) * x[..., r1, c0]
        + t * u * x[..., r1, c1]
    ).astype(np.float32)
    fill_arr = np.asarray(fill, dtype=np.float32)
    if fill_arr.ndim == 1:
        lead = (1,) * (images.ndim - 3)
        fill_arr = fill_arr.reshape(lead + (fill_arr.shape[0], 1, 1))
    out = np.where(inside, val, fill_arr.astype(np.float32))
    return np.ascontiguousarray(out.astype(np.float32))


def rotate_image(img: np.ndarray, angle_deg: float, fill, interp: str = "bilinear") -> np.ndarray:
    """Rotate one [C, S, S] image; see rotate_batch."""
    if interp != "bilinear":
        raise DataError(f"unsupported interpolation {interp!r}")
    if img.ndim != 3:
        raise DataError(f"expected [C, S, S] image, got shape {img.shape}")
    return rotate_batch(img, angle_deg, fill)
