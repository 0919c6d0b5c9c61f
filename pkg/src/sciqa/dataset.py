"""Image database handling: manifests, grayscale conversion, patch extraction,
content-disjoint splits, and synthetic distorted corpora for desk-scale runs.

Manifest format is a UTF-8 CSV with header
``dist_path,ref_path,ref_id,distortion_type,distortion_level,dmos``.
An empty ``ref_path`` marks an entry usable only without a reference.
Paths are relative to the directory containing the manifest file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.ndimage
from PIL import Image

PATCH_SIZE = 32

DISTORTION_TYPES = ("GN", "GB", "MB", "CC", "JC", "J2C", "LSC", "OTHER")

# Severity parameter tables for synthetic distortions, indexed by level 1..5.
# These are the normative definitions published in docs/synthetic-corpus.md.
GN_NOISE_STD = {1: 2.0, 2: 5.0, 3: 10.0, 4: 20.0, 5: 40.0}
GB_KERNEL_STD = {1: 0.5, 2: 1.0, 3: 2.0, 4: 3.0, 5: 5.0}
MB_KERNEL_LEN = {1: 3, 2: 5, 3: 9, 4: 13, 5: 17}
CC_CONTRAST_GAIN = {1: 0.9, 2: 0.75, 3: 0.6, 4: 0.45, 5: 0.3}
JC_QUANT_STEP = {1: 8.0, 2: 16.0, 3: 32.0, 4: 64.0, 5: 128.0}

SYNTH_KINDS = ("GN", "GB", "MB", "CC", "JC")

# Proxy subjective score for synthetic corpora: a documented monotone map of
# (kind, level), not a model of human ratings.
PROXY_DMOS_BASE = 20.0
PROXY_DMOS_LEVEL_STEP = 14.0
PROXY_DMOS_KIND_OFFSETS = (0.0, 2.0, 4.0)


class ManifestError(ValueError):
    """Raised for unreadable or malformed manifest files."""


@dataclass(frozen=True)
class ManifestEntry:
    dist_path: str
    ref_path: str | None
    ref_id: str
    distortion_type: str
    distortion_level: int
    dmos: float


@dataclass
class DatabaseManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def ref_ids(self) -> list[str]:
        """Distinct reference ids in first-appearance order."""
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.ref_id, None)
        return list(seen)

    def subset(self, entries: list[ManifestEntry]) -> "DatabaseManifest":
        return DatabaseManifest(root=self.root, entries=list(entries))


@dataclass
class PatchBatch:
    """A batch of 32x32 grayscale patches in [0, 1] with per-patch labels."""

    patches: np.ndarray  # (B, 32, 32) float32
    labels: np.ndarray  # (B,) float32, the source image's DMOS
    source_ids: np.ndarray  # (B,) str
    grid_positions: np.ndarray  # (B, 2) int, (row, col) grid indices

    def __len__(self) -> int:
        return self.patches.shape[0]

    def take(self, indices) -> "PatchBatch":
        """Sub-batch at the given positions, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        return PatchBatch(
            patches=self.patches[indices],
            labels=self.labels[indices],
            source_ids=self.source_ids[indices],
            grid_positions=self.grid_positions[indices],
        )


def load_manifest(path: str | Path) -> DatabaseManifest:
    """Parse a manifest CSV. Image paths are recorded, not opened."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    entries: list[ManifestEntry] = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        expected = {"dist_path", "ref_path", "ref_id", "distortion_type",
                    "distortion_level", "dmos"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ManifestError(
                f"manifest {path} is missing columns: "
                f"{sorted(expected - set(reader.fieldnames or []))}")
        for row_no, row in enumerate(reader, start=2):
            entries.append(_parse_row(row, row_no))
    return DatabaseManifest(root=path.parent, entries=entries)


def _parse_row(row: dict, row_no: int) -> ManifestEntry:
    dist_path = (row["dist_path"] or "").strip()
    if not dist_path:
        raise ManifestError(f"row {row_no}: empty dist_path")
    ref_path = (row["ref_path"] or "").strip() or None
    ref_id = (row["ref_id"] or "").strip()
    if not ref_id:
        raise ManifestError(f"row {row_no}: empty ref_id")
    dtype = (row["distortion_type"] or "").strip().upper()
    if dtype not in DISTORTION_TYPES:
        raise ManifestError(
            f"row {row_no}: unknown distortion_type {dtype!r} "
            f"(expected one of {', '.join(DISTORTION_TYPES)})")
    try:
        level = int(row["distortion_level"])
    except (TypeError, ValueError):
        raise ManifestError(
            f"row {row_no}: non-integer distortion_level "
            f"{row['distortion_level']!r}") from None
    if level < 1:
        raise ManifestError(f"row {row_no}: distortion_level must be >= 1")
    try:
        dmos = float(row["dmos"])
    except (TypeError, ValueError):
        raise ManifestError(
            f"row {row_no}: non-numeric dmos {row['dmos']!r}") from None
    if not math.isfinite(dmos):
        raise ManifestError(f"row {row_no}: non-finite dmos")
    return ManifestEntry(dist_path, ref_path, ref_id, dtype, level, dmos)


def save_manifest(manifest: DatabaseManifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["dist_path", "ref_path", "ref_id", "distortion_type",
                         "distortion_level", "dmos"])
        for e in manifest.entries:
            writer.writerow([e.dist_path, e.ref_path or "", e.ref_id,
                             e.distortion_type, e.distortion_level,
                             repr(e.dmos)])


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, output in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(rgb)):
        raise ValueError("non-finite pixel values")
    if rgb.ndim == 2:
        return rgb.copy()
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 array, got shape {rgb.shape}")
    return rgb @ np.array([0.299, 0.587, 0.114])


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file into a grayscale H x W float array in [0, 255]."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16", "I"):
            arr = np.asarray(img.convert("L"), dtype=np.float64)
            return arr
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return to_grayscale(arr)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a grayscale array in [0, 255] as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels), 0.0, 255.0)
    Image.fromarray(np.round(arr).astype(np.uint8), mode="L").save(path)


def patch_grid(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 32x32 grid from the top-left corner.

    Right/bottom remainders narrower than a patch are dropped. Returns
    (patches, positions) with patches (B, 32, 32) in [0, 1] float32 and
    positions (B, 2) int grid indices.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(
            f"image {h}x{w} is smaller than {PATCH_SIZE} in one dimension")
    rows, cols = h // PATCH_SIZE, w // PATCH_SIZE
    cropped = img[: rows * PATCH_SIZE, : cols * PATCH_SIZE]
    tiles = cropped.reshape(rows, PATCH_SIZE, cols, PATCH_SIZE)
    patches = tiles.transpose(0, 2, 1, 3).reshape(-1, PATCH_SIZE, PATCH_SIZE)
    patches = (patches / 255.0).astype(np.float32)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    positions = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)
    return patches, positions


def extract_patches(img: np.ndarray, label: float, source_id: str) -> PatchBatch:
    """Split one image into labeled 32x32 patches. Every patch inherits the
    image's DMOS."""
    patches, positions = patch_grid(img)
    n = patches.shape[0]
    return PatchBatch(
        patches=patches,
        labels=np.full(n, label, dtype=np.float32),
        source_ids=np.array([source_id] * n),
        grid_positions=positions,
    )


def concat_batches(batches: list[PatchBatch]) -> PatchBatch:
    if not batches:
        raise ValueError("no batches to concatenate")
    return PatchBatch(
        patches=np.concatenate([b.patches for b in batches]),
        labels=np.concatenate([b.labels for b in batches]),
        source_ids=np.concatenate([b.source_ids for b in batches]),
        grid_positions=np.concatenate([b.grid_positions for b in batches]),
    )


def load_patch_dataset(
    manifest: DatabaseManifest, with_refs: bool = False
) -> tuple[PatchBatch, np.ndarray | None]:
    """Extract every 32x32 patch from every distorted image in a manifest.

    With ``with_refs`` the aligned reference patches come back as a second
    array in the same order, for full-reference training; every entry must
    then carry a ref_path and the reference must match the distorted image
    in size. Each distinct reference file is read once.
    """
    if len(manifest) == 0:
        raise ValueError("manifest has no entries")
    batches: list[PatchBatch] = []
    ref_parts: list[np.ndarray] = []
    ref_cache: dict[str, np.ndarray] = {}
    for e in manifest.entries:
        img = load_image(manifest.root / e.dist_path)
        batches.append(extract_patches(img, e.dmos, e.dist_path))
        if not with_refs:
            continue
        if e.ref_path is None:
            raise ValueError(
                f"entry {e.dist_path} has no ref_path; reference patches "
                "were requested")
        if e.ref_path not in ref_cache:
            ref_cache[e.ref_path] = load_image(manifest.root / e.ref_path)
        ref = ref_cache[e.ref_path]
        if ref.shape != img.shape:
            raise ValueError(
                f"reference {e.ref_path} is {ref.shape} but "
                f"{e.dist_path} is {img.shape}")
        ref_parts.append(patch_grid(ref)[0])
    batch = concat_batches(batches)
    if not with_refs:
        return batch, None
    return batch, np.concatenate(ref_parts)


def split_by_reference(
    manifest: DatabaseManifest, train_fraction: float, seed: int
) -> tuple[DatabaseManifest, DatabaseManifest]:
    """Split so that all entries of a reference image land on one side.

    The train side receives round(train_fraction * #groups) whole groups
    (half-up rounding). Deterministic for a given seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    groups = sorted(manifest.ref_ids())
    if len(groups) < 2:
        raise ValueError("need at least 2 reference groups to split")
    n_train = int(math.floor(train_fraction * len(groups) + 0.5))
    if n_train < 1 or n_train > len(groups) - 1:
        raise ValueError(
            f"fraction {train_fraction} leaves no group on one side "
            f"({n_train} of {len(groups)} for training)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    train_ids = {groups[i] for i in order[:n_train]}
    train = [e for e in manifest.entries if e.ref_id in train_ids]
    test = [e for e in manifest.entries if e.ref_id not in train_ids]
    return manifest.subset(train), manifest.subset(test)


def synth_distort(img: np.ndarray, kind: str, level: int, seed: int) -> np.ndarray:
    """Apply one synthetic distortion at a severity level in 1..5.

    Severity parameters come from the module-level tables. Deterministic
    given the seed; output clamped to [0, 255].
    """
    kind = kind.upper()
    if kind not in SYNTH_KINDS:
        raise ValueError(
            f"unknown distortion kind {kind!r} (expected one of {', '.join(SYNTH_KINDS)})")
    if level not in (1, 2, 3, 4, 5):
        raise ValueError(f"level must be in 1..5, got {level}")
    img = np.asarray(img, dtype=np.float64)
    if kind == "GN":
        rng = np.random.default_rng(seed)
        out = img + rng.normal(0.0, GN_NOISE_STD[level], size=img.shape)
    elif kind == "GB":
        out = scipy.ndimage.gaussian_filter(img, GB_KERNEL_STD[level], mode="reflect")
    elif kind == "MB":
        # horizontal box kernel, the classic linear-motion approximation
        length = MB_KERNEL_LEN[level]
        kernel = np.full(length, 1.0 / length)
        out = scipy.ndimage.correlate1d(img, kernel, axis=1, mode="reflect")
    elif kind == "CC":
        out = 128.0 + CC_CONTRAST_GAIN[level] * (img - 128.0)
    else:  # JC: blockwise DCT quantization, a JPEG-like degradation
        out = _block_dct_quantize(img, JC_QUANT_STEP[level])
    return np.clip(out, 0.0, 255.0)


def _block_dct_quantize(img: np.ndarray, step: float) -> np.ndarray:
    """Quantize 8x8 block DCT coefficients with a flat step size."""
    h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect")
    hh, ww = padded.shape
    blocks = padded.reshape(hh // 8, 8, ww // 8, 8)
    coeffs = scipy.fft.dctn(blocks, axes=(1, 3), norm="ortho")
    coeffs = np.round(coeffs / step) * step
    rebuilt = scipy.fft.idctn(coeffs, axes=(1, 3), norm="ortho")
    return rebuilt.reshape(hh, ww)[:h, :w]


def proxy_dmos(kind: str, level: int, kinds: list[str]) -> float:
    """Documented monotone proxy label: 20 + 14*level + per-kind offset."""
    offset = PROXY_DMOS_KIND_OFFSETS[kinds.index(kind) % len(PROXY_DMOS_KIND_OFFSETS)]
    return PROXY_DMOS_BASE + PROXY_DMOS_LEVEL_STEP * level + offset


def _glyph_region(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Text-like area: rows of small dark glyph blocks on a light ground."""
    region = np.full((height, width), 235.0)
    cell_h, cell_w = 12, 8
    for top in range(2, height - cell_h, cell_h + 4):
        for left in range(2, width - cell_w, cell_w + 2):
            if rng.random() < 0.15:  # word gaps
                continue
            ink = rng.uniform(0.0, 60.0)
            # a glyph is a few straight strokes inside the cell
            for _ in range(rng.integers(2, 5)):
                if rng.random() < 0.5:
                    r = rng.integers(0, cell_h)
                    c0, c1 = sorted(rng.integers(0, cell_w, size=2))
                    region[top + r, left + c0: left + c1 + 1] = ink
                else:
                    c = rng.integers(0, cell_w)
                    r0, r1 = sorted(rng.integers(0, cell_h, size=2))
                    region[top + r0: top + r1 + 1, left + c] = ink
    return region


def _gradient_region(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Pictorial area: smooth low-frequency cosine mixture."""
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    region = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        region += rng.uniform(0.3, 1.0) * np.cos(
            2 * np.pi * (fy * yy + fx * xx) + phase)
    lo, hi = region.min(), region.max()
    return 60.0 + 160.0 * (region - lo) / (hi - lo)


def make_reference_image(seed: int, size: int = 192) -> np.ndarray:
    """Procedural screen-content-like reference: one half text-like glyphs,
    the other half smooth gradients, split horizontally or vertically."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size))
    half = size // 2
    if rng.random() < 0.5:
        img[:half] = _glyph_region(rng, half, size)
        img[half:] = _gradient_region(rng, size - half, size)
    else:
        img[:, :half] = _glyph_region(rng, size, half)
        img[:, half:] = _gradient_region(rng, size, size - half)
    return np.clip(img, 0.0, 255.0)


def make_synthetic_manifest(
    out_dir: str | Path,
    n_refs: int,
    kinds: list[str] | None = None,
    levels: int = 5,
    seed: int = 0,
    size: int = 192,
) -> DatabaseManifest:
    """Generate a distorted corpus on disk and return its manifest.

    Writes reference PNGs, every kind x level distortion of each, and
    ``manifest.csv`` under ``out_dir``. Proxy DMOS labels follow
    :func:`proxy_dmos`. Fully deterministic for a given seed.
    """
    if n_refs < 2:
        raise ValueError("need at least 2 reference images")
    kinds = [k.upper() for k in (kinds or ["GN", "GB", "CC"])]
    for k in kinds:
        if k not in SYNTH_KINDS:
            raise ValueError(f"unknown distortion kind {k!r}")
    if not 1 <= levels <= 5:
        raise ValueError("levels must be in 1..5")
    out_dir = Path(out_dir)
    try:
        (out_dir / "refs").mkdir(parents=True, exist_ok=True)
        (out_dir / "dist").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    entries: list[ManifestEntry] = []
    for i in range(n_refs):
        ref_id = f"ref{i:02d}"
        ref = make_reference_image(seed=seed * 100003 + i, size=size)
        ref_path = f"refs/{ref_id}.png"
        save_image(ref, out_dir / ref_path)
        for kind in kinds:
            for level in range(1, levels + 1):
                dist = synth_distort(ref, kind, level,
                                     seed=_distortion_seed(seed, i, kind, level))
                dist_path = f"dist/{ref_id}_{kind}_{level}.png"
                save_image(dist, out_dir / dist_path)
                entries.append(ManifestEntry(
                    dist_path=dist_path,
                    ref_path=ref_path,
                    ref_id=ref_id,
                    distortion_type=kind,
                    distortion_level=level,
                    dmos=proxy_dmos(kind, level, kinds),
                ))
    manifest = DatabaseManifest(root=out_dir, entries=entries)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def _distortion_seed(seed: int, ref_index: int, kind: str, level: int) -> int:
    # stable across processes, unlike hash()
    return (seed * 1000003 + ref_index * 4093
            + SYNTH_KINDS.index(kind) * 31 + level) % (2 ** 31)
