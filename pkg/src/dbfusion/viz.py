"""PCA colouring of patch features with first-component foreground thresholding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateOutputError, IngestionError
from .tensor import Tensor, pca_fit


@dataclass
class PatchVisualization:
    rgb: np.ndarray  # (rows, cols, 3) in [0, 1]; background cells are zero
    foreground: np.ndarray  # (rows, cols) bool
    task: str
    threshold: float
    eigenvalues: np.ndarray

    @property
    def grid(self) -> tuple[int, int]:
        return self.foreground.shape

    def sidecar(self) -> dict:
        return {"task": self.task, "threshold": self.threshold,
                "eigenvalues": [float(e) for e in self.eigenvalues],
                "foreground_count": int(self.foreground.sum()),
                "grid": list(self.grid)}


def two_means_split(scores: np.ndarray, max_iter: int = 100) -> tuple[float, np.ndarray]:
    """1-D 2-means; returns (midpoint threshold, mask of the side whose mean has larger |mean|)."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    span = hi - lo
    if span <= 1e-12 * max(1.0, np.abs(s).max()):
        raise DegenerateOutputError("first-component scores are constant; no foreground")
    c0, c1 = lo, hi
    upper = s > (c0 + c1) / 2
    for _ in range(max_iter):
        c0, c1 = s[~upper].mean(), s[upper].mean()
        new = s > (c0 + c1) / 2
        if (new == upper).all():
            break
        upper = new
    thr = float((c0 + c1) / 2)
    fg = s > thr if abs(c1) >= abs(c0) else s <= thr
    return thr, fg


def visualize_feature(feature, patch_grid: tuple[int, int], task: str = "") -> PatchVisualization:
    x = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    rows, cols = patch_grid
    n = x.shape[0]
    if n != rows * cols or n < 4:
        raise ValueError(f"{n} feature rows do not fill a {rows}x{cols} grid (need >= 4)")
    if np.ptp(x, axis=0).max() <= 1e-12 * max(1.0, np.abs(x).max()):
        raise DegenerateOutputError("feature rows are identical; PCA is degenerate")
    _, scores, eig = pca_fit(x, 3)
    s = scores.data
    thr, fg = two_means_split(s[:, 0])
    if not fg.any():
        raise DegenerateOutputError("every patch classified as background")
    rgb = np.zeros((n, 3))
    f = s[fg]
    span = f.max(axis=0) - f.min(axis=0)
    safe = np.where(span > 0, span, 1.0)
    rgb[fg] = np.where(span > 0, (f - f.min(axis=0)) / safe, 0.0)
    return PatchVisualization(rgb.reshape(rows, cols, 3), fg.reshape(rows, cols), task, thr, eig)


def render_ppm(viz: PatchVisualization, path, scale: int = 8) -> Path:
    if scale < 1:
        raise ValueError("scale must be >= 1")
    cells = np.round(np.clip(viz.rgb, 0.0, 1.0) * 255).astype(np.uint8)
    cells[~viz.foreground] = 0
    img = np.repeat(np.repeat(cells, scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 file into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos: pos + 1].isspace():
            pos += 1
        if data[pos: pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos: pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise IngestionError(f"{path}: not a P6 file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise IngestionError(f"{path}: maxval {maxval} unsupported")
    pixels = data[pos + 1: pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise IngestionError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
