"""Turn class-activation maps into bounding-box prompts.

A map is binarized at a threshold relative to its peak, connected foreground
regions become tight pixel-coordinate boxes, and boxes are normalized to
[0, 1] for the prompt encoder.  Tiny regions are dropped and the box list is
capped, largest regions first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class ThresholdConfig:
    omega: float = 0.5              # threshold as a fraction of the map peak
    threshold_mode: str = "relative"  # or "absolute": omega used as-is
    connectivity: int = 8
    min_area_px: int = 9
    max_boxes: int = 3
    merge_boxes: bool = False

    def __post_init__(self) -> None:
        if self.threshold_mode not in ("relative", "absolute"):
            raise ValueError(f"threshold_mode must be 'relative' or 'absolute', got {self.threshold_mode!r}")
        if self.threshold_mode == "relative" and not 0.0 < self.omega <= 1.0:
            raise ValueError(f"relative omega must be in (0, 1], got {self.omega}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area_px < 0:
            raise ValueError(f"min_area_px must be >= 0, got {self.min_area_px}")
        if self.max_boxes < 1:
            raise ValueError(f"max_boxes must be >= 1, got {self.max_boxes}")


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel box, 0 <= x_min <= x_max < W and 0 <= y_min <= y_max < H."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (0 <= self.x_min <= self.x_max and 0 <= self.y_min <= self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)


def _check_cam(cam: np.ndarray) -> np.ndarray:
    g = np.asarray(cam)
    if g.ndim != 2:
        raise ValueError(f"activation map must be 2D, got shape {g.shape}")
    if not np.isfinite(g).all():
        raise ValueError("activation map contains non-finite values")
    return g


def threshold_cam(cam: np.ndarray, cfg: ThresholdConfig) -> np.ndarray:
    """Binary mask of pixels at or above the threshold.

    relative mode: tau = omega * max(cam); a map whose max is 0 gives an
    all-zero mask rather than an everywhere-true one.
    """
    g = _check_cam(cam)
    if cfg.threshold_mode == "relative":
        peak = g.max(initial=0.0)
        if peak <= 0.0:
            return np.zeros(g.shape, dtype=bool)
        tau = cfg.omega * peak
    else:
        tau = cfg.omega
    return g >= tau


def label_regions(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Connected foreground regions as boolean masks, largest area first;
    area ties break on (y_min, x_min) of the region's tight box."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, n = ndimage.label(m, structure=structure)
    regions = []
    for k in range(1, n + 1):
        region = labels == k
        ys, xs = np.nonzero(region)
        regions.append((int(region.sum()), int(ys.min()), int(xs.min()), region))
    regions.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [r[3] for r in regions]


def extract_boxes(mask: np.ndarray, cfg: ThresholdConfig) -> list[BoxPrompt]:
    """Tight boxes around connected regions, filtered by area and capped.

    Regions smaller than min_area_px are dropped.  With merge_boxes set, the
    surviving boxes collapse into their common bounding box.
    """
    boxes = []
    for region in label_regions(mask, cfg.connectivity):
        area = int(region.sum())
        if area < cfg.min_area_px:
            continue
        ys, xs = np.nonzero(region)
        boxes.append(
            BoxPrompt(x_min=int(xs.min()), y_min=int(ys.min()), x_max=int(xs.max()), y_max=int(ys.max()))
        )
        if len(boxes) == cfg.max_boxes:
            break
    if cfg.merge_boxes and len(boxes) > 1:
        boxes = [
            BoxPrompt(
                x_min=min(b.x_min for b in boxes),
                y_min=min(b.y_min for b in boxes),
                x_max=max(b.x_max for b in boxes),
                y_max=max(b.y_max for b in boxes),
            )
        ]
    return boxes


def boxes_to_prompt_coords(boxes: list[BoxPrompt], image_size: tuple[int, int]) -> np.ndarray:
    """Normalize pixel boxes by image size: (x / W, y / H), shape (n, 4) float64.

    Corners stay in [0, 1); e.g. pixel corner 255 of a 256-wide image maps to
    255/256 = 0.99609375.
    """
    h, w = int(image_size[0]), int(image_size[1])
    if h < 1 or w < 1:
        raise ValueError(f"image_size must be positive, got {image_size}")
    out = np.zeros((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        if b.x_max >= w or b.y_max >= h:
            raise ValueError(f"box {b} exceeds image size {image_size}")
        out[i] = (b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h)
    return out


def cam_to_boxes(cam: np.ndarray, cfg: ThresholdConfig) -> list[BoxPrompt]:
    """Full map-to-prompts path: threshold, label, box, filter."""
    return extract_boxes(threshold_cam(cam, cfg), cfg)


def mask_bounding_box(mask: np.ndarray) -> BoxPrompt | None:
    """Tight box around all foreground of a mask, or None when empty."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        return None
    return BoxPrompt(x_min=int(xs.min()), y_min=int(ys.min()), x_max=int(xs.max()), y_max=int(ys.max()))
