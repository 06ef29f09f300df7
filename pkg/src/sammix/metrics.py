"""Overlap and boundary metrics, run aggregation, report export, overlays.

Distances are in pixels, not millimetres.  When exactly one of prediction and
ground truth is empty the boundary distance is undefined; those samples carry
an infinite sentinel and are excluded from means, with the exclusion counted.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

DOMAIN_TAGS = ("in_domain", "cross_domain")


@dataclass
class SampleEval:
    sample_id: str
    dice: float
    hausdorff_px: float  # math.inf when undefined (exactly one side empty)


@dataclass
class EvalReport:
    """Per-sample metrics for one trained model on one split."""

    run_seed: int
    domain: str
    samples: list[SampleEval] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.domain not in DOMAIN_TAGS:
            raise ValueError(f"domain must be one of {DOMAIN_TAGS}, got {self.domain!r}")

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.samples])) if self.samples else float("nan")

    @property
    def hausdorff_values(self) -> list[float]:
        return [s.hausdorff_px for s in self.samples if math.isfinite(s.hausdorff_px)]

    @property
    def hausdorff_excluded(self) -> int:
        return sum(1 for s in self.samples if not math.isfinite(s.hausdorff_px))

    @property
    def mean_hausdorff(self) -> float:
        vals = self.hausdorff_values
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "run_seed": self.run_seed,
            "domain": self.domain,
            "mean_dice": json_float(self.mean_dice),
            "mean_hausdorff_px": json_float(self.mean_hausdorff),
            "hausdorff_excluded": self.hausdorff_excluded,
            "samples": [
                {
                    "id": s.sample_id,
                    "dice": s.dice,
                    "hausdorff_px": None if not math.isfinite(s.hausdorff_px) else s.hausdorff_px,
                }
                for s in self.samples
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        samples = [
            SampleEval(
                sample_id=e["id"],
                dice=float(e["dice"]),
                hausdorff_px=math.inf if e["hausdorff_px"] is None else float(e["hausdorff_px"]),
            )
            for e in d["samples"]
        ]
        return EvalReport(run_seed=int(d["run_seed"]), domain=d["domain"], samples=samples)


def json_float(v: float) -> float | None:
    """None for values JSON cannot carry (nan/inf), else the float itself."""
    return float(v) if math.isfinite(v) else None


def _as_bool_mask(a: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {m.shape}")
    return m.astype(bool)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2 |P & G| / (|P| + |G|); two empty masks agree perfectly (1.0)."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    The image border counts as background, so a mask touching the edge still
    has a boundary there.
    """
    m = _as_bool_mask(mask, "mask")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray, percentile: float | None = None) -> float:
    """Symmetric boundary-to-boundary distance in pixels.

    The directed distance from A to B is the maximum (or the given percentile)
    over A's boundary pixels of the Euclidean distance to B's nearest boundary
    pixel; the result is the larger of the two directions.  Both masks empty
    gives 0.0; exactly one empty gives the inf sentinel.
    """
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if percentile is not None and not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return math.inf
    pb = np.argwhere(boundary_pixels(p)).astype(np.float64)
    gb = np.argwhere(boundary_pixels(g)).astype(np.float64)

    def directed(src: np.ndarray, dst: np.ndarray) -> float:
        dists, _ = cKDTree(dst).query(src, k=1)
        if percentile is None:
            return float(dists.max())
        return float(np.percentile(dists, percentile))

    return max(directed(pb, gb), directed(gb, pb))


def format_mean_std(mean: float, std: float, decimals: int = 3) -> str:
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


@dataclass
class AggregateResult:
    n_runs: int
    mean_dice: float
    std_dice: float
    mean_hausdorff_px: float
    std_hausdorff_px: float
    hausdorff_excluded: int

    def dice_summary(self) -> str:
        return format_mean_std(self.mean_dice, self.std_dice)

    def hausdorff_summary(self) -> str:
        return format_mean_std(self.mean_hausdorff_px, self.std_hausdorff_px)


def _mean_std(values: list[float]) -> tuple[float, float]:
    # sample std (ddof=1); a single run has no spread
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate_runs(reports: list[EvalReport]) -> AggregateResult:
    """Mean and sample std of per-run means across seeds."""
    if not reports:
        raise ValueError("need at least one report")
    dice_mean, dice_std = _mean_std([r.mean_dice for r in reports])
    hd_runs = [r.mean_hausdorff for r in reports if not math.isnan(r.mean_hausdorff)]
    if hd_runs:
        hd_mean, hd_std = _mean_std(hd_runs)
    else:
        hd_mean, hd_std = float("nan"), 0.0
    return AggregateResult(
        n_runs=len(reports),
        mean_dice=dice_mean,
        std_dice=dice_std,
        mean_hausdorff_px=hd_mean,
        std_hausdorff_px=hd_std,
        hausdorff_excluded=sum(r.hausdorff_excluded for r in reports),
    )


def quartile_data(values: list[float]) -> dict:
    """Box-plot statistics with linearly interpolated quartiles."""
    arr = np.asarray(sorted(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    q1, med, q3 = (float(np.quantile(arr, q)) for q in (0.25, 0.5, 0.75))
    return {
        "min": float(arr[0]),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(arr[-1]),
        "n": int(arr.size),
    }


def export_report(reports: list[EvalReport], out_dir: str | Path) -> dict[str, Path]:
    """Write per-sample CSV, a summary JSON, and box-plot quartiles.

    Output is a pure function of the reports: exporting the same list twice
    produces byte-identical files.
    """
    if not reports:
        raise ValueError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ordered = sorted(reports, key=lambda r: (r.domain, r.run_seed))
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["domain", "run_seed", "sample_id", "dice", "hausdorff_px"])
    for r in ordered:
        for s in r.samples:
            hd = "" if not math.isfinite(s.hausdorff_px) else f"{s.hausdorff_px:.6f}"
            writer.writerow([r.domain, r.run_seed, s.sample_id, f"{s.dice:.6f}", hd])
    csv_path = out_dir / "per_sample.csv"
    csv_path.write_text(csv_buf.getvalue())

    domains = sorted({r.domain for r in ordered})
    summary: dict = {"runs": [r.to_dict() for r in ordered], "domains": {}}
    for d in domains:
        in_domain = [r for r in ordered if r.domain == d]
        agg = aggregate_runs(in_domain)
        pooled = [s.dice for r in in_domain for s in r.samples]
        summary["domains"][d] = {
            "n_runs": agg.n_runs,
            "dice": agg.dice_summary(),
            "hausdorff_px": agg.hausdorff_summary(),
            "mean_dice": json_float(agg.mean_dice),
            "std_dice": json_float(agg.std_dice),
            "mean_hausdorff_px": json_float(agg.mean_hausdorff_px),
            "std_hausdorff_px": json_float(agg.std_hausdorff_px),
            "hausdorff_excluded": agg.hausdorff_excluded,
            "dice_quartiles": quartile_data(pooled) if pooled else None,
        }
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"csv": csv_path, "json": json_path}


def render_overlay(
    image: np.ndarray,
    gt: np.ndarray | None,
    pred: np.ndarray,
    out_path: str | Path | None = None,
) -> np.ndarray:
    """Grayscale base, green tint where ground truth is set, red predicted contour.

    Returns the (H, W, 3) uint8 array; also writes a PNG when out_path is set.
    Deterministic for fixed inputs.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {img.shape}")
    base = np.clip(img * 255.0, 0.0, 255.0)
    rgb = np.stack([base, base, base], axis=-1)
    if gt is not None:
        g = _as_bool_mask(gt, "gt")
        if g.shape != img.shape:
            raise ValueError("gt shape mismatch")
        rgb[g, 0] *= 0.4
        rgb[g, 1] = 0.6 * rgb[g, 1] + 0.4 * 255.0
        rgb[g, 2] *= 0.4
    p = _as_bool_mask(pred, "pred")
    if p.shape != img.shape:
        raise ValueError("pred shape mismatch")
    contour = boundary_pixels(p)
    rgb[contour] = (255.0, 0.0, 0.0)
    out = np.floor(rgb + 0.5).clip(0, 255).astype(np.uint8)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out, mode="RGB").save(out_path, format="PNG")
    return out
