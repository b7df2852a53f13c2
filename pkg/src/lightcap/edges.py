"""Classic edge detectors and the six-channel fused model input.

All detectors work on luminance in [0, 1] and use reflect borders (edge
sample repeated), which avoids spurious border responses and keeps the
normalized Gaussian sum-preserving. Canny and the Laplacian
zero-crossing detector emit binary maps; Sobel emits magnitude
normalized by its maximum.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

EDGE_METHODS = ("canny", "sobel", "laplacian")


class EdgeConfigError(ValueError):
    """Invalid detector settings."""


@dataclass
class EdgeConfig:
    method: str = "canny"
    gaussian_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.3
    log_sigma: float = 2.0
    log_threshold: float = 0.1  # fraction of the peak Laplacian response

    def __post_init__(self):
        if self.method not in EDGE_METHODS:
            raise EdgeConfigError(f"unknown method {self.method!r}; choose from {EDGE_METHODS}")
        if self.gaussian_sigma <= 0 or self.log_sigma <= 0:
            raise EdgeConfigError("sigmas must be positive")
        if not (0.0 <= self.canny_low < self.canny_high <= 1.0):
            raise EdgeConfigError(
                f"need 0 <= low < high <= 1, got low={self.canny_low}, high={self.canny_high}"
            )


def _check_gray(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        raise EdgeConfigError(f"detectors need a 2-d image at least 3x3, got {g.shape}")
    return g


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luminance: 0.299 R + 0.587 G + 0.114 B."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise EdgeConfigError(f"expected [3, H, W], got {img.shape}")
    w = np.array([0.299, 0.587, 0.114])
    return np.tensordot(w, img.astype(np.float64), axes=1)


def _correlate2d(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    gp = np.pad(g, ((ph, ph), (pw, pw)), mode="symmetric")
    out = np.zeros_like(g)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * gp[i : i + g.shape[0], j : j + g.shape[1]]
    return out


def gaussian_blur(g: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3*sigma), kernel normalized to 1."""
    g = _check_gray(g)
    if sigma <= 0:
        raise EdgeConfigError("sigma must be positive")
    r = int(np.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    gp = np.pad(g, ((r, r), (0, 0)), mode="symmetric")
    out = np.zeros_like(g)
    for i in range(2 * r + 1):
        out += k[i] * gp[i : i + g.shape[0], :]
    gp = np.pad(out, ((0, 0), (r, r)), mode="symmetric")
    out = np.zeros_like(g)
    for i in range(2 * r + 1):
        out += k[i] * gp[:, i : i + g.shape[1]]
    return out


def sobel_gradients(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = _check_gray(g)
    return _correlate2d(g, SOBEL_X), _correlate2d(g, SOBEL_Y)


def sobel_magnitude(g: np.ndarray) -> np.ndarray:
    """Gradient magnitude normalized by its max; flat image -> zeros."""
    gx, gy = sobel_gradients(g)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin ridges to one pixel along the quantized gradient direction.

    Ties along the direction keep the first pixel (>= ahead, > behind),
    so a symmetric two-pixel ridge collapses to a single line.
    """
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # sector offsets: 0deg -> horizontal neighbors, 90deg -> vertical
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    h, w = mag.shape
    for s, (dy, dx) in offsets.items():
        ahead = np.full_like(mag, -np.inf)
        behind = np.full_like(mag, -np.inf)
        ys, ye = max(0, -dy), min(h, h - dy)
        xs, xe = max(0, -dx), min(w, w - dx)
        ahead[ys:ye, xs:xe] = mag[ys + dy : ye + dy, xs + dx : xe + dx]
        ys, ye = max(0, dy), min(h, h + dy)
        xs, xe = max(0, dx), min(w, w + dx)
        behind[ys:ye, xs:xe] = mag[ys - dy : ye - dy, xs - dx : xe - dx]
        m = sector == s
        keep |= m & (mag >= ahead) & (mag > behind) & (mag > 0)
    return keep


def _hysteresis(mag: np.ndarray, keep: np.ndarray, low: float, high: float) -> np.ndarray:
    """Breadth-first growth: weak pixels survive only when 8-connected
    to a strong pixel."""
    strong = keep & (mag >= high)
    weak = keep & (mag >= low) & ~strong
    out = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    h, w = mag.shape
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    queue.append((ny, nx))
    return out


def canny(g: np.ndarray, cfg: EdgeConfig | None = None) -> np.ndarray:
    """Blur, Sobel gradients, non-maximum suppression, double threshold,
    hysteresis. Thresholds are fractions of the max gradient magnitude.
    Returns a binary {0, 1} map."""
    cfg = cfg or EdgeConfig(method="canny")
    g = _check_gray(g)
    smoothed = gaussian_blur(g, cfg.gaussian_sigma)
    gx, gy = sobel_gradients(smoothed)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0:
        return np.zeros_like(g)
    mag = mag / peak
    keep = _nms(mag, gx, gy)
    out = _hysteresis(mag, keep, cfg.canny_low, cfg.canny_high)
    return out.astype(np.float64)


def log_zero_crossings(g: np.ndarray, cfg: EdgeConfig | None = None) -> np.ndarray:
    """Laplacian-of-Gaussian: mark pixels where the second derivative
    changes sign (horizontally, vertically, or diagonally) with contrast
    above the threshold. Returns a binary {0, 1} map."""
    cfg = cfg or EdgeConfig(method="laplacian")
    g = _check_gray(g)
    lap = _correlate2d(gaussian_blur(g, cfg.log_sigma), LAPLACIAN)
    h, w = lap.shape
    out = np.zeros((h, w), dtype=bool)
    # threshold scales with the strongest response, so flat-area noise
    # crossings are rejected regardless of image contrast
    thr = cfg.log_threshold * np.abs(lap).max()
    interior = out[1 : h - 1, 1 : w - 1]
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        fwd = lap[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        bwd = lap[1 - dy : h - 1 - dy, 1 - dx : w - 1 - dx]
        interior |= (fwd * bwd < 0) & (np.abs(fwd - bwd) > thr)
    return out.astype(np.float64)


def detect_edges(img_rgb: np.ndarray, cfg: EdgeConfig) -> np.ndarray:
    """Run the configured detector on an RGB image's luminance."""
    g = to_grayscale(img_rgb)
    if cfg.method == "canny":
        return canny(g, cfg)
    if cfg.method == "sobel":
        return sobel_magnitude(g)
    return log_zero_crossings(g, cfg)


def fuse_six(img: np.ndarray, edge: np.ndarray) -> np.ndarray:
    """Stack the original RGB with the edge map replicated to 3 channels."""
    img = np.asarray(img)
    edge = np.asarray(edge)
    if img.ndim != 3 or img.shape[0] != 3:
        raise EdgeConfigError(f"expected RGB [3, H, W], got {img.shape}")
    if edge.shape != img.shape[1:]:
        raise EdgeConfigError(f"edge map {edge.shape} does not match image {img.shape[1:]}")
    rep = np.broadcast_to(edge, (3,) + edge.shape)
    return np.concatenate([img, rep], axis=0).astype(np.float32)
