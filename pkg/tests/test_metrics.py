import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sammix.metrics import (
    EvalReport,
    SampleEval,
    aggregate_runs,
    boundary_pixels,
    dice_score,
    export_report,
    format_mean_std,
    hausdorff_distance,
    quartile_data,
    render_overlay,
)
from tests.oracles import boundary_points, dice_exact, hausdorff_all_pairs


def random_mask(rng, shape=(12, 12), p=0.4):
    return rng.uniform(size=shape) < p


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_pinned_cases():
    a = np.zeros((4, 4), dtype=bool)
    a[1:3, 1:3] = True
    assert dice_score(a, a) == 1.0
    b = np.zeros((4, 4), dtype=bool)
    b[0, 0] = True
    assert dice_score(a, b) == 0.0
    empty = np.zeros((4, 4), dtype=bool)
    assert dice_score(empty, empty) == 1.0
    assert dice_score(a, empty) == 0.0
    # half overlap: pred 2 px, gt 2 px, 1 shared -> 2*1/(2+2)
    c = np.zeros((4, 4), dtype=bool)
    c[1, 1] = c[3, 3] = True
    d = np.zeros((4, 4), dtype=bool)
    d[1, 1] = d[0, 3] = True
    assert dice_score(c, d) == 0.5


def test_dice_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        p, g = random_mask(rng), random_mask(rng)
        assert dice_score(p, g) == dice_exact(p, g)


def test_dice_rejects_bad_shapes():
    with pytest.raises(ValueError):
        dice_score(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        dice_score(np.zeros(9), np.zeros(9))


# ---------------------------------------------------------------------------
# boundaries and hausdorff
# ---------------------------------------------------------------------------


def test_boundary_pixels_border_counts_as_background():
    full = np.ones((3, 3), dtype=bool)
    # every pixel of a 3x3 block touches the image border except the center
    want = full.copy()
    want[1, 1] = False
    assert np.array_equal(boundary_pixels(full), want)


def test_boundary_pixels_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        m = random_mask(rng, shape=(10, 14))
        got = set(map(tuple, np.argwhere(boundary_pixels(m))))
        assert got == set(boundary_points(m))


def test_hausdorff_pinned_cases():
    a = np.zeros((8, 8), dtype=bool)
    a[2:5, 2:5] = True
    assert hausdorff_distance(a, a) == 0.0
    empty = np.zeros((8, 8), dtype=bool)
    assert hausdorff_distance(empty, empty) == 0.0
    assert math.isinf(hausdorff_distance(a, empty))
    assert math.isinf(hausdorff_distance(empty, a))
    # two single pixels: distance is the euclidean gap
    p = np.zeros((8, 8), dtype=bool)
    p[0, 0] = True
    q = np.zeros((8, 8), dtype=bool)
    q[3, 4] = True
    assert hausdorff_distance(p, q) == pytest.approx(5.0, abs=1e-12)


def test_hausdorff_matches_all_pairs_oracle():
    rng = np.random.default_rng(23)
    checked = 0
    for _ in range(200):
        p, g = random_mask(rng), random_mask(rng)
        if p.any() != g.any():
            continue
        assert hausdorff_distance(p, g) == pytest.approx(hausdorff_all_pairs(p, g), abs=1e-9)
        checked += 1
    assert checked > 100


def test_hausdorff_percentile():
    rng = np.random.default_rng(31)
    for _ in range(30):
        p, g = random_mask(rng), random_mask(rng)
        if not (p.any() and g.any()):
            continue
        got = hausdorff_distance(p, g, percentile=95.0)
        want = hausdorff_all_pairs(p, g, percentile=95.0)
        assert got == pytest.approx(want, abs=1e-9)
        assert got <= hausdorff_distance(p, g) + 1e-12
    with pytest.raises(ValueError):
        hausdorff_distance(p, g, percentile=0.0)
    with pytest.raises(ValueError):
        hausdorff_distance(p, g, percentile=101.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hausdorff_symmetric(seed):
    rng = np.random.default_rng(seed)
    p, g = random_mask(rng), random_mask(rng)
    assert hausdorff_distance(p, g) == hausdorff_distance(g, p)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def report(seed, dices, domain="in_domain", hds=None):
    hds = hds if hds is not None else [0.0] * len(dices)
    samples = [SampleEval(f"s{i}", d, h) for i, (d, h) in enumerate(zip(dices, hds))]
    return EvalReport(run_seed=seed, domain=domain, samples=samples)


def test_aggregate_sample_std():
    reports = [report(0, [0.946]), report(1, [0.948]), report(2, [0.950])]
    agg = aggregate_runs(reports)
    assert agg.mean_dice == pytest.approx(0.948)
    assert agg.std_dice == pytest.approx(np.std([0.946, 0.948, 0.950], ddof=1))
    assert agg.dice_summary() == "0.948 ± 0.002"


def test_aggregate_single_run_has_zero_std():
    agg = aggregate_runs([report(0, [0.7, 0.9])])
    assert agg.n_runs == 1
    assert agg.std_dice == 0.0


def test_aggregate_counts_hausdorff_exclusions():
    reports = [
        report(0, [0.9, 0.8], hds=[1.0, math.inf]),
        report(1, [0.9, 0.8], hds=[math.inf, math.inf]),
    ]
    agg = aggregate_runs(reports)
    assert agg.hausdorff_excluded == 3
    assert agg.mean_hausdorff_px == pytest.approx(1.0)  # run 2 contributes nothing


def test_format_mean_std():
    assert format_mean_std(0.94799, 0.00249) == "0.948 ± 0.002"
    assert format_mean_std(12.0, 0.0) == "12.000 ± 0.000"


def test_quartiles_linear_interpolation():
    data = quartile_data([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    assert data["q1"] == pytest.approx(0.275)
    assert data["median"] == pytest.approx(0.45)
    assert data["q3"] == pytest.approx(0.625)
    assert data["min"] == 0.1 and data["max"] == 0.8 and data["n"] == 8
    with pytest.raises(ValueError):
        quartile_data([])


def test_eval_report_round_trip_and_means():
    r = report(3, [0.5, 0.7, 1.0], hds=[2.0, math.inf, 0.0])
    assert r.mean_dice == pytest.approx(2.2 / 3)
    assert r.mean_hausdorff == pytest.approx(1.0)
    assert r.hausdorff_excluded == 1
    back = EvalReport.from_dict(r.to_dict())
    assert back.run_seed == r.run_seed
    assert back.domain == r.domain
    assert [(s.sample_id, s.dice, s.hausdorff_px) for s in back.samples] == [
        (s.sample_id, s.dice, s.hausdorff_px) for s in r.samples
    ]
    with pytest.raises(ValueError):
        EvalReport(run_seed=0, domain="nonsense")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def test_export_report_files_and_reexport_identical(tmp_path):
    reports = [
        report(0, [0.9, 0.8], hds=[1.5, math.inf]),
        report(1, [0.85, 0.95]),
        report(0, [0.6], domain="cross_domain"),
    ]
    paths = export_report(reports, tmp_path / "a")
    csv_text = paths["csv"].read_text()
    lines = csv_text.strip().split("\n")
    assert lines[0] == "domain,run_seed,sample_id,dice,hausdorff_px"
    assert len(lines) == 1 + 5
    assert "cross_domain,0,s0,0.600000,0.000000" in lines
    assert "in_domain,0,s1,0.800000," in lines  # inf hausdorff -> empty cell

    summary = json.loads(paths["json"].read_text())
    assert set(summary["domains"]) == {"in_domain", "cross_domain"}
    dom = summary["domains"]["in_domain"]
    assert dom["n_runs"] == 2
    assert dom["hausdorff_excluded"] == 1
    assert dom["dice_quartiles"]["n"] == 4

    paths2 = export_report(list(reversed(reports)), tmp_path / "b")
    assert paths2["csv"].read_bytes() == paths["csv"].read_bytes()
    assert paths2["json"].read_bytes() == paths["json"].read_bytes()


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def overlay_fixture():
    rng = np.random.default_rng(42)
    image = rng.uniform(size=(16, 16)).astype(np.float32)
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[4:10, 5:11] = 1
    pred = np.zeros((16, 16), dtype=np.uint8)
    pred[5:11, 4:10] = 1
    return image, gt, pred


def test_overlay_colors():
    image, gt, pred = overlay_fixture()
    out = render_overlay(image, gt, pred)
    assert out.shape == (16, 16, 3) and out.dtype == np.uint8
    contour = boundary_pixels(pred.astype(bool))
    assert np.all(out[contour] == np.array([255, 0, 0], dtype=np.uint8))
    # ground truth pixels off the contour are tinted green
    tinted = gt.astype(bool) & ~contour
    ys, xs = np.nonzero(tinted)
    base = np.clip(image.astype(np.float64) * 255.0, 0, 255)
    for y, x in zip(ys, xs):
        r, g, b = out[y, x]
        assert g > r and g > b
        assert g == int(np.floor(0.6 * base[y, x] + 0.4 * 255.0 + 0.5))
    # untouched pixels stay gray
    plain = ~gt.astype(bool) & ~contour
    ys, xs = np.nonzero(plain)
    assert np.all(out[ys, xs, 0] == out[ys, xs, 1])
    assert np.all(out[ys, xs, 1] == out[ys, xs, 2])


def test_overlay_golden_checksum(tmp_path):
    image, gt, pred = overlay_fixture()
    out = render_overlay(image, gt, pred, out_path=tmp_path / "o.png")
    digest = hashlib.sha256(out.tobytes()).hexdigest()
    assert digest == "64e9439b0b8ef87b2dd53066f465ac3ab1f24c4d4e4590e94e71de085189d6bd"
    assert (tmp_path / "o.png").exists()
    from PIL import Image

    back = np.asarray(Image.open(tmp_path / "o.png"))
    assert np.array_equal(back, out)


def test_overlay_without_gt():
    image, _, pred = overlay_fixture()
    out = render_overlay(image, None, pred)
    contour = boundary_pixels(pred.astype(bool))
    off = ~contour
    assert np.all(out[off, 0] == out[off, 1])


def test_overlay_rejects_mismatched_shapes():
    image, gt, pred = overlay_fixture()
    with pytest.raises(ValueError):
        render_overlay(image, gt[:8], pred)
    with pytest.raises(ValueError):
        render_overlay(image, gt, pred[:, :8])
    with pytest.raises(ValueError):
        render_overlay(image[None], gt, pred)
