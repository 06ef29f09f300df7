"""Volumes, slice samples, supervision splits, and the on-disk dataset format.

The pipeline consumes 2D slices taken from CT-like volumes.  A volume is
windowed to [0, 1], a centered band of slices is extracted, each slice is
resized to the working resolution, and a per-slice class label is derived
from its mask.  Datasets are saved as raw little-endian grids plus a JSON
index per split so round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

DATASET_FORMAT_VERSION = 1
VOLUME_FORMAT_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(Exception):
    """Base class for dataset and volume I/O failures."""


class DatasetFormatError(DatasetError):
    """Header or index is structurally malformed (bad JSON, missing fields)."""


class DatasetVersionError(DatasetError):
    """On-disk format_version is not supported by this code."""


class DataIntegrityError(DatasetError):
    """Contents contradict the header (sizes, labels, missing files, non-finite values)."""


@dataclass
class RawVolume:
    """A stack of axial slices in scanner units (HU-like), shape (S, H, W)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise DataIntegrityError(f"volume must be 3D (S, H, W), got shape {v.shape}")
        self.voxels = v
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def n_slices(self) -> int:
        return int(self.voxels.shape[0])


@dataclass
class Sample:
    """One 2D training example.

    image      : (H, W) float32 in [0, 1]
    seg_label  : (H, W) uint8 mask in {0, 1}, or None when supervision was dropped
    cls_label  : 1 iff the slice contains foreground, else 0
    sample_id  : unique within its dataset
    """

    image: np.ndarray
    seg_label: np.ndarray | None
    cls_label: int
    sample_id: str

    def validate(self) -> None:
        img = self.image
        if img.ndim != 2 or img.dtype != np.float32:
            raise DataIntegrityError(
                f"sample {self.sample_id}: image must be 2D float32, got {img.dtype} {img.shape}"
            )
        if not np.isfinite(img).all():
            raise DataIntegrityError(f"sample {self.sample_id}: non-finite image values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DataIntegrityError(f"sample {self.sample_id}: image values outside [0, 1]")
        if self.cls_label not in (0, 1):
            raise DataIntegrityError(f"sample {self.sample_id}: cls_label must be 0 or 1")
        if self.seg_label is not None:
            seg = self.seg_label
            if seg.shape != img.shape or seg.dtype != np.uint8:
                raise DataIntegrityError(
                    f"sample {self.sample_id}: mask must be uint8 with image shape"
                )
            if not np.isin(seg, (0, 1)).all():
                raise DataIntegrityError(f"sample {self.sample_id}: mask values outside {{0, 1}}")
            # class label and mask must agree whenever the mask is present
            if self.cls_label != int(seg.max(initial=0)):
                raise DataIntegrityError(
                    f"sample {self.sample_id}: cls_label={self.cls_label} but mask max is {int(seg.max(initial=0))}"
                )


@dataclass
class Dataset:
    """An ordered list of samples for one split, plus the ids carrying seg supervision."""

    samples: list[Sample]
    split: str
    labeled_ids: set[str] = field(default_factory=set)

    def validate(self) -> None:
        if self.split not in SPLIT_NAMES:
            raise DataIntegrityError(f"unknown split name {self.split!r}")
        seen: set[str] = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DataIntegrityError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)
            s.validate()
        for sid in self.labeled_ids:
            if sid not in seen:
                raise DataIntegrityError(f"labeled id {sid!r} not present in split")
        by_id = {s.sample_id: s for s in self.samples}
        for sid in self.labeled_ids:
            if by_id[sid].seg_label is None:
                raise DataIntegrityError(f"labeled id {sid!r} has no seg mask")

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# slice extraction and intensity windowing
# ---------------------------------------------------------------------------


def window_level(volume: RawVolume, width: float = 400.0, center: float = 40.0) -> RawVolume:
    """Map scanner units into [0, 1] with a linear window, clamping outside it.

    value -> clamp((value - (center - width/2)) / width, 0, 1)
    """
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    v = volume.voxels
    if not np.isfinite(v).all():
        raise DataIntegrityError("volume contains non-finite voxels")
    lo = center - width / 2.0
    out = np.clip((v.astype(np.float64) - lo) / width, 0.0, 1.0).astype(np.float32)
    return RawVolume(voxels=out, spacing=volume.spacing)


def extract_middle_slices(volume: RawVolume, fraction: float) -> list[int]:
    """Indices of the centered band covering `fraction` of the slices.

    The band has round(S * fraction) slices; when the leftover margin is odd
    the extra slice goes below the band, so margin_below - margin_above is 0 or 1.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    s = volume.n_slices
    count = round(s * fraction)
    if count < 1:
        raise DataIntegrityError(f"volume with {s} slices yields an empty band at fraction {fraction}")
    start = (s - count + 1) // 2
    return list(range(start, start + count))


def resize_grid(grid: np.ndarray, target: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize a 2D grid to (H, W). Bilinear uses the aligned-corners convention;
    masks should be resized with mode="nearest" so values are never invented."""
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"mode must be 'bilinear' or 'nearest', got {mode!r}")
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError(f"grid must be 2D with both dims >= 2, got shape {g.shape}")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    t = torch.from_numpy(np.ascontiguousarray(g, dtype=np.float32))[None, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=True)
    else:
        out = F.interpolate(t, size=(th, tw), mode="nearest")
    return out[0, 0].numpy()


def derive_class_label(mask: np.ndarray) -> int:
    """1 if the mask has any foreground pixel, else 0."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise DataIntegrityError("mask values outside {0, 1}")
    return int(m.max(initial=0))


# ---------------------------------------------------------------------------
# supervision split
# ---------------------------------------------------------------------------


def split_supervision(dataset: Dataset, n_labeled: int, seed: int) -> Dataset:
    """Keep seg masks on a random subset of n_labeled positive samples, drop the rest.

    Only positive samples that actually carry a mask are eligible.  The draw is
    a deterministic function of `seed` and the dataset order.  Class labels are
    kept on every sample.  The input dataset is not modified.
    """
    if n_labeled < 0:
        raise ValueError(f"n_labeled must be >= 0, got {n_labeled}")
    eligible = [s.sample_id for s in dataset.samples if s.cls_label == 1 and s.seg_label is not None]
    if n_labeled > len(eligible):
        raise ValueError(
            f"requested {n_labeled} labeled samples but only {len(eligible)} positive samples are eligible"
        )
    rng = np.random.default_rng(seed)
    chosen_idx = rng.choice(len(eligible), size=n_labeled, replace=False) if n_labeled else []
    chosen = {eligible[int(i)] for i in chosen_idx}
    samples = []
    for s in dataset.samples:
        if s.sample_id in chosen:
            samples.append(replace(s, seg_label=s.seg_label.copy()))
        else:
            samples.append(replace(s, seg_label=None))
    out = Dataset(samples=samples, split=dataset.split, labeled_ids=chosen)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# phantom generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomConfig:
    """Generator constants. These are pinned; the acceptance suite measures
    organ coverage and learnability against them, so change with care."""

    image_size: int = 64
    raw_size: int = 96
    slices_min: int = 12
    slices_max: int = 16
    window_width: float = 400.0
    window_center: float = 40.0
    slice_fraction: float = 1.0
    background_hu: tuple[float, float] = (-80.0, -20.0)
    background_texture_hu: float = 30.0
    background_noise_hu: float = 8.0
    organ_hu: tuple[float, float] = (70.0, 110.0)
    organ_texture_hu: float = 6.0
    organ_z_fraction: tuple[float, float] = (0.14, 0.26)
    organ_axis_fraction: tuple[float, float] = (0.16, 0.30)
    distractor_count: tuple[int, int] = (1, 3)
    distractor_radius_fraction: tuple[float, float] = (0.05, 0.11)
    distractor_dark_hu: tuple[float, float] = (-300.0, -150.0)
    distractor_bright_hu: tuple[float, float] = (150.0, 300.0)
    train_fraction: float = 0.7
    val_fraction: float = 0.1


def _phantom_volume(rng: np.random.Generator, cfg: PhantomConfig) -> tuple[RawVolume, np.ndarray]:
    """One synthetic volume in HU-like units plus its voxel-exact organ mask."""
    s = int(rng.integers(cfg.slices_min, cfg.slices_max + 1))
    n = cfg.raw_size

    base = rng.uniform(*cfg.background_hu)
    vol = np.full((s, n, n), base, dtype=np.float64)
    # low-frequency texture: smoothed white noise, renormalized to unit std
    tex = ndimage.gaussian_filter(rng.standard_normal((s, n, n)), sigma=(1.0, 4.0, 4.0))
    tstd = tex.std()
    if tstd > 0:
        vol += tex / tstd * cfg.background_texture_hu
    vol += rng.standard_normal((s, n, n)) * cfg.background_noise_hu

    zz, yy, xx = np.meshgrid(np.arange(s), np.arange(n), np.arange(n), indexing="ij")

    def ellipsoid(cz, cy, cx, az, ay, ax, theta):
        dy, dx = yy - cy, xx - cx
        ry = dy * math.cos(theta) - dx * math.sin(theta)
        rx = dy * math.sin(theta) + dx * math.cos(theta)
        return ((zz - cz) / az) ** 2 + (ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0

    # distractors first so the organ overwrites any overlap
    for _ in range(int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))):
        r = rng.uniform(*cfg.distractor_radius_fraction) * n
        rz = max(1.0, r * s / n * rng.uniform(1.0, 2.0))
        cz = rng.uniform(rz, s - 1 - rz) if s - 1 > 2 * rz else (s - 1) / 2
        cy = rng.uniform(r + 1, n - r - 2)
        cx = rng.uniform(r + 1, n - r - 2)
        hu_range = cfg.distractor_bright_hu if rng.uniform() < 0.5 else cfg.distractor_dark_hu
        blob = ellipsoid(cz, cy, cx, rz, r * rng.uniform(0.7, 1.3), r, rng.uniform(0, math.pi))
        vol[blob] = rng.uniform(*hu_range)

    az = rng.uniform(*cfg.organ_z_fraction) * s
    ay = rng.uniform(*cfg.organ_axis_fraction) * n
    ax = rng.uniform(*cfg.organ_axis_fraction) * n
    cz = rng.uniform(az, s - 1 - az)
    cy = rng.uniform(ay + 2, n - ay - 3)
    cx = rng.uniform(ax + 2, n - ax - 3)
    organ = ellipsoid(cz, cy, cx, az, ay, ax, rng.uniform(0, math.pi))
    vol[organ] = rng.uniform(*cfg.organ_hu)
    vol[organ] += rng.standard_normal(int(organ.sum())) * cfg.organ_texture_hu

    return RawVolume(vol), organ.astype(np.uint8)


def volume_to_samples(
    volume: RawVolume,
    organ_mask: np.ndarray,
    id_prefix: str,
    cfg: PhantomConfig,
) -> list[Sample]:
    """Window, band-extract, and resize a volume into per-slice samples."""
    windowed = window_level(volume, cfg.window_width, cfg.window_center)
    indices = extract_middle_slices(volume, cfg.slice_fraction)
    size = (cfg.image_size, cfg.image_size)
    out = []
    for k in indices:
        img = resize_grid(windowed.voxels[k], size, mode="bilinear")
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        seg = resize_grid(organ_mask[k], size, mode="nearest").astype(np.uint8)
        out.append(
            Sample(
                image=img,
                seg_label=seg,
                cls_label=derive_class_label(seg),
                sample_id=f"{id_prefix}_s{k:03d}",
            )
        )
    return out


def _split_counts(n_volumes: int, cfg: PhantomConfig) -> dict[str, int]:
    if n_volumes < 1:
        raise ValueError("need at least one volume")
    if n_volumes == 1:
        return {"train": 1, "val": 0, "test": 0}
    if n_volumes == 2:
        return {"train": 1, "val": 0, "test": 1}
    n_train = max(1, int(round(n_volumes * cfg.train_fraction)))
    n_val = max(1, int(round(n_volumes * cfg.val_fraction)))
    while n_train + n_val > n_volumes - 1:
        n_train -= 1
    return {"train": n_train, "val": n_val, "test": n_volumes - n_train - n_val}


def generate_phantoms(
    n_volumes: int,
    seed: int,
    out_dir: str | Path,
    cfg: PhantomConfig | None = None,
    keep_raw: bool = True,
) -> dict[str, Dataset]:
    """Generate synthetic CT-like volumes and write a ready-to-train dataset.

    Parameters
    ----------
    n_volumes : int
        Number of volumes.  Volumes are assigned to train/val/test in order,
        roughly 70/10/20, with each non-empty split getting at least one.
    seed : int
        Drives every random draw; the same (n_volumes, seed, cfg) always
        produces byte-identical files.
    out_dir : path
        Dataset root.  Split directories are written beneath it, plus a raw/
        directory with the unwindowed volumes when keep_raw is set.

    Returns
    -------
    dict mapping split name to the in-memory Dataset that was written.

    Each volume holds one ellipsoidal organ (contiguous in z, covering a
    minority band of slices), a noisy background, and a few bright or dark
    distractor blobs, all in HU-like units.  Per-slice masks are exact by
    construction.
    """
    cfg = cfg or PhantomConfig()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = _split_counts(n_volumes, cfg)

    assignments: list[str] = (
        ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    )
    buckets: dict[str, list[Sample]] = {name: [] for name in SPLIT_NAMES}
    raw_dir = out_dir / "raw"
    for vi in range(n_volumes):
        volume, organ = _phantom_volume(rng, cfg)
        prefix = f"v{vi:03d}"
        if keep_raw:
            save_raw_volume(volume, raw_dir / prefix)
            save_raw_volume(RawVolume(organ.astype(np.float64), volume.spacing), raw_dir / f"{prefix}_mask")
        buckets[assignments[vi]].extend(volume_to_samples(volume, organ, prefix, cfg))

    result = {}
    for name in SPLIT_NAMES:
        if not buckets[name]:
            continue
        ds = Dataset(
            samples=buckets[name],
            split=name,
            labeled_ids={s.sample_id for s in buckets[name] if s.seg_label is not None},
        )
        save_dataset(ds, out_dir)
        result[name] = ds
    (out_dir / "phantom_config.json").write_text(
        json.dumps({"n_volumes": n_volumes, "seed": seed, "config": cfg.__dict__}, indent=2, sort_keys=True)
    )
    return result


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def save_raw_volume(volume: RawVolume, path_stem: str | Path) -> None:
    """Write a volume as <stem>.vol.json (header) + <stem>.vol.f32 (payload)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": VOLUME_FORMAT_VERSION,
        "shape": [int(d) for d in volume.voxels.shape],
        "spacing": list(volume.spacing),
        "dtype": "<f4",
    }
    stem.with_suffix(".vol.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    stem.with_suffix(".vol.f32").write_bytes(
        np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    )


def load_raw_volume(path_stem: str | Path) -> RawVolume:
    stem = Path(path_stem)
    try:
        header = json.loads(stem.with_suffix(".vol.json").read_text())
        version = header["format_version"]
        shape = tuple(int(d) for d in header["shape"])
        spacing = tuple(float(x) for x in header["spacing"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed volume header for {stem}: {exc}") from exc
    if version != VOLUME_FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported volume format_version {version!r}")
    raw = stem.with_suffix(".vol.f32").read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataIntegrityError(
            f"volume payload for {stem} holds {len(raw)} bytes, header implies {expected}"
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return RawVolume(voxels, spacing)


def _img_path(root: Path, split: str, sid: str) -> Path:
    return root / split / f"{sid}.img.f32"


def _msk_path(root: Path, split: str, sid: str) -> Path:
    return root / split / f"{sid}.msk.u8"


def save_dataset(dataset: Dataset, root: str | Path) -> None:
    """Write one split: raw 32-bit LE image grids, 8-bit masks, JSON index.

    save -> load -> save is byte-identical.
    """
    dataset.validate()
    root = Path(root)
    split_dir = root / dataset.split
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        h, w = s.image.shape
        _img_path(root, dataset.split, s.sample_id).write_bytes(
            np.ascontiguousarray(s.image, dtype="<f4").tobytes()
        )
        if s.seg_label is not None:
            _msk_path(root, dataset.split, s.sample_id).write_bytes(
                np.ascontiguousarray(s.seg_label, dtype=np.uint8).tobytes()
            )
        entries.append(
            {
                "id": s.sample_id,
                "height": int(h),
                "width": int(w),
                "cls_label": int(s.cls_label),
                "has_seg_label": s.seg_label is not None,
            }
        )
    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "split": dataset.split,
        "labeled_ids": sorted(dataset.labeled_ids),
        "samples": entries,
    }
    (split_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_dataset(root: str | Path, split: str) -> Dataset:
    """Load one split in index order; errors distinguish malformed headers,
    unsupported versions, and payload/index mismatches."""
    root = Path(root)
    index_path = root / split / "index.json"
    if not index_path.exists():
        raise DatasetFormatError(f"no index.json for split {split!r} under {root}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"index.json for split {split!r} is not valid JSON: {exc}") from exc
    if not isinstance(index, dict):
        raise DatasetFormatError("index.json must hold a JSON object")
    try:
        version = index["format_version"]
        entries = index["samples"]
        labeled_ids = set(index["labeled_ids"])
        index_split = index["split"]
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"index.json missing required field: {exc}") from exc
    if version != DATASET_FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset format_version {version!r}")
    if index_split != split:
        raise DataIntegrityError(f"index names split {index_split!r}, loaded as {split!r}")

    samples = []
    for e in entries:
        try:
            sid, h, w = e["id"], int(e["height"]), int(e["width"])
            cls_label, has_seg = int(e["cls_label"]), bool(e["has_seg_label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed sample entry {e!r}: {exc}") from exc
        raw = _img_path(root, split, sid).read_bytes()
        if len(raw) != h * w * 4:
            raise DataIntegrityError(
                f"sample {sid}: image payload holds {len(raw)} bytes, index implies {h * w * 4}"
            )
        image = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
        seg = None
        if has_seg:
            mpath = _msk_path(root, split, sid)
            if not mpath.exists():
                raise DataIntegrityError(f"sample {sid}: mask file missing but index expects one")
            mraw = mpath.read_bytes()
            if len(mraw) != h * w:
                raise DataIntegrityError(
                    f"sample {sid}: mask payload holds {len(mraw)} bytes, index implies {h * w}"
                )
            seg = np.frombuffer(mraw, dtype=np.uint8).reshape(h, w).copy()
        elif sid in labeled_ids:
            raise DataIntegrityError(f"sample {sid} is in labeled_ids but carries no mask")
        samples.append(Sample(image=image, seg_label=seg, cls_label=cls_label, sample_id=sid))

    ds = Dataset(samples=samples, split=split, labeled_ids=labeled_ids)
    ds.validate()
    return ds
