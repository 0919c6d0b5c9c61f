"""Activity-weighted fusion of patch scores into one image score.

Each pixel gets a Gaussian-weighted local standard deviation (LSD); each
32x32 patch footprint then gets the population variance of its LSD values
(VLSD). Text and graphics produce scattered LSD histograms and thus high
VLSD, smooth pictorial regions produce low VLSD, so VLSD-weighted pooling
emphasizes the regions that dominate perceived quality in screen content
while staying robust to noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import PATCH_SIZE, patch_grid
from .network import Model, score_in_chunks

DEFAULT_WINDOW_HALF = 3  # pixels on each side: half 3 -> 7x7 window
DEFAULT_SIGMA = 1.5
ZERO_WEIGHT_FLOOR = 1e-12

POOLING_MODES = ("vlsd", "average")


@dataclass
class LsdMap:
    values: np.ndarray  # (H, W), >= 0 everywhere
    window_half: tuple[int, int]
    sigma: float


@dataclass
class LocalQualityMap:
    positions: np.ndarray  # (N, 2) patch grid indices (row, col)
    scores: np.ndarray  # (N,) per-patch network scores
    weights: np.ndarray  # (N,) pooling weights, >= 0
    fused: float
    pooling: str


def gaussian_window(half_rows: int, half_cols: int, sigma: float) -> np.ndarray:
    """Circularly symmetric Gaussian weights normalized to sum 1."""
    if half_rows < 1 or half_cols < 1:
        raise ValueError("window half-extents must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    rows = np.arange(-half_rows, half_rows + 1, dtype=np.float64)
    cols = np.arange(-half_cols, half_cols + 1, dtype=np.float64)
    w = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def lsd_map(img: np.ndarray, half_rows: int = DEFAULT_WINDOW_HALF,
            half_cols: int = DEFAULT_WINDOW_HALF,
            sigma: float = DEFAULT_SIGMA) -> LsdMap:
    """Per-pixel Gaussian-weighted local standard deviation.

    Borders use reflect padding. The variance is accumulated around the
    weighted local mean directly (not as a difference of moments), which
    keeps it non-negative and precise.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale array, got shape {img.shape}")
    h, w = img.shape
    if h < 2 * half_rows + 1 or w < 2 * half_cols + 1:
        raise ValueError(
            f"image {h}x{w} smaller than the {2 * half_rows + 1}x"
            f"{2 * half_cols + 1} window")
    weights = gaussian_window(half_rows, half_cols, sigma)
    padded = np.pad(img, ((half_rows, half_rows), (half_cols, half_cols)),
                    mode="reflect")

    mean = np.zeros((h, w))
    for dy in range(2 * half_rows + 1):
        for dx in range(2 * half_cols + 1):
            mean += weights[dy, dx] * padded[dy:dy + h, dx:dx + w]
    var = np.zeros((h, w))
    for dy in range(2 * half_rows + 1):
        for dx in range(2 * half_cols + 1):
            var += weights[dy, dx] * (padded[dy:dy + h, dx:dx + w] - mean) ** 2
    values = np.sqrt(np.maximum(var, 0.0))
    return LsdMap(values=values, window_half=(half_rows, half_cols), sigma=sigma)


def vlsd(lsd: LsdMap, top: int, left: int, height: int = PATCH_SIZE,
         width: int = PATCH_SIZE) -> float:
    """Population variance of the LSD values inside one patch footprint."""
    h, w = lsd.values.shape
    if height < 1 or width < 1:
        raise ValueError("region must be at least 1x1")
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(
            f"region [{top}:{top + height}, {left}:{left + width}] outside "
            f"{h}x{w} map")
    region = lsd.values[top:top + height, left:left + width]
    return float(region.var())


def weighted_pool(scores: np.ndarray, weights: np.ndarray) -> float:
    """S = sum(score * weight) / sum(weight); near-zero total weight falls
    back to the plain mean so constant images still get a score."""
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.shape != weights.shape or scores.ndim != 1:
        raise ValueError(
            f"scores and weights must be equal-length 1-D, got "
            f"{scores.shape} and {weights.shape}")
    if scores.size == 0:
        raise ValueError("empty score list")
    if np.any(weights < 0):
        raise ValueError("negative pooling weight")
    total = weights.sum()
    # uniform weights reduce to the plain mean; computing them that way
    # keeps the equality exact instead of within rounding
    if total <= ZERO_WEIGHT_FLOOR or np.ptp(weights) == 0.0:
        return float(scores.mean())
    return float((scores * weights).sum() / total)


def average_pool(scores: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score list")
    return float(scores.mean())


def vlsd_patch_weights(img: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """VLSD for each patch footprint of an image's patch grid."""
    lsd = lsd_map(img)
    return np.array([
        vlsd(lsd, int(r) * PATCH_SIZE, int(c) * PATCH_SIZE)
        for r, c in positions
    ])


def score_image(model: Model, img: np.ndarray, ref: np.ndarray | None = None,
                pooling: str = "vlsd", chunk_size: int = 256) -> LocalQualityMap:
    """Patch-score an image and fuse into one quality number.

    Activity weights always come from the distorted image; the reference
    (required by FR models, identical size) feeds the network only.
    """
    if pooling not in POOLING_MODES:
        raise ValueError(
            f"unknown pooling {pooling!r} (expected one of {', '.join(POOLING_MODES)})")
    img = np.asarray(img, dtype=np.float64)
    patches, positions = patch_grid(img)
    if model.config.mode == "FR":
        if ref is None:
            raise ValueError("full-reference model needs a reference image")
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != img.shape:
            raise ValueError(
                f"reference size {ref.shape} does not match image {img.shape}")
        ref_patches, _ = patch_grid(ref)
    else:
        if ref is not None:
            raise ValueError("no-reference model scored with a reference image")
        ref_patches = None
    scores = score_in_chunks(model, patches, ref_patches=ref_patches,
                             chunk_size=chunk_size).astype(np.float64)
    if pooling == "vlsd":
        weights = vlsd_patch_weights(img, positions)
        fused = weighted_pool(scores, weights)
    else:
        weights = np.ones_like(scores)
        fused = average_pool(scores)
    return LocalQualityMap(positions=positions, scores=scores,
                           weights=weights, fused=fused, pooling=pooling)


def patch_gradient_entropy(img: np.ndarray, positions: np.ndarray,
                           bins: int = 32) -> np.ndarray:
    """Shannon entropy of gradient magnitudes per patch footprint.

    Comparison baseline only: noisier than VLSD because entropy reacts to
    any added randomness, not just structure.
    """
    img = np.asarray(img, dtype=np.float64)
    gy, gx = np.gradient(img)
    magnitude = np.hypot(gx, gy)
    out = np.empty(len(positions))
    for n, (r, c) in enumerate(positions):
        region = magnitude[int(r) * PATCH_SIZE:(int(r) + 1) * PATCH_SIZE,
                           int(c) * PATCH_SIZE:(int(c) + 1) * PATCH_SIZE]
        hist, _ = np.histogram(region, bins=bins,
                               range=(0.0, max(region.max(), 1e-12)))
        p = hist / hist.sum()
        p = p[p > 0]
        out[n] = float(-(p * np.log2(p)).sum())
    return out


def export_quality_map_csv(quality: LocalQualityMap, path: str | Path) -> None:
    """One row per patch: grid cell, network score, pooling weight."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "col", "score", "vlsd"])
        for (r, c), score, weight in zip(quality.positions, quality.scores,
                                         quality.weights):
            writer.writerow([int(r), int(c), repr(float(score)),
                             repr(float(weight))])


def render_heatmap(quality: LocalQualityMap, path: str | Path) -> None:
    """Side-by-side per-patch score and weight maps as a PNG."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    from matplotlib import pyplot as plt

    rows = int(quality.positions[:, 0].max()) + 1
    cols = int(quality.positions[:, 1].max()) + 1
    score_grid = np.full((rows, cols), np.nan)
    weight_grid = np.full((rows, cols), np.nan)
    for (r, c), score, weight in zip(quality.positions, quality.scores,
                                     quality.weights):
        score_grid[int(r), int(c)] = score
        weight_grid[int(r), int(c)] = weight

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, grid, title in ((axes[0], score_grid, "patch score"),
                            (axes[1], weight_grid, "pooling weight")):
        im = ax.imshow(grid, interpolation="nearest")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(f"fused score {quality.fused:.2f} ({quality.pooling})")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
