import csv
import math

import numpy as np
import pytest

from uwadv import evaluation as ev
from uwadv.attack import AttackConfig
from uwadv.dataset import load_paired_dir
from uwadv.models import build_affine, build_tiny_enhancer

IDENTITY = build_affine([1, 1, 1], [0, 0, 0])
FAST = AttackConfig(iters=2)


@pytest.fixture(scope="module")
def model():
    return build_tiny_enhancer(0)


def test_identity_on_clean_pairs_is_infinite(rng):
    xs = rng.random((2, 3, 16, 16)).astype(np.float32)
    rep = ev.evaluate(IDENTITY, (xs, xs), ev.NoiseConfig("none", 0.0))
    assert all(r["psnr_clean"].infinite for r in rep.rows)
    assert all(r["ssim_clean"].value == pytest.approx(1.0) for r in rep.rows)
    mean, n_inf = rep.means()["psnr_clean"]
    assert math.isnan(mean) and n_inf == 2


def test_aggregate_is_row_mean(small_data, model):
    ds = load_paired_dir(small_data, "test")
    rep = ev.evaluate(model, ds, FAST)
    assert len(rep.rows) == 2
    for k in ev.ROW_METRICS:
        assert rep.mean(k) == pytest.approx(np.mean([r[k].value for r in rep.rows]), abs=1e-12)


def test_evaluate_independent_of_jobs(small_data, model):
    ds = load_paired_dir(small_data)
    a = ev.evaluate(model, ds, FAST, jobs=1)
    b = ev.evaluate(model, ds, FAST, jobs=3)
    assert [r["psnr_adv"] for r in a.rows] == [r["psnr_adv"] for r in b.rows]


def test_empty_split_rejected(model):
    with pytest.raises(ev.EvalError):
        ev.evaluate(model, (np.zeros((0, 3, 16, 16)), np.zeros((0, 3, 16, 16))), FAST)


def test_single_cell_sweep_equals_evaluate(small_data, model):
    ds = load_paired_dir(small_data, "test")
    grid = ev.sweep(model, ds, [4 / 255], [2])
    rep = ev.evaluate(model, ds, AttackConfig(epsilon=4 / 255, iters=2))
    assert grid.cell(4 / 255, 2)[0] == rep.mean("psnr_adv")


def test_sweep_grid_complete(small_data, model):
    ds = load_paired_dir(small_data, "test")
    grid = ev.sweep(model, ds, [1 / 255, 2 / 255], [1, 2, 3])
    assert grid.psnr.shape == (2, 3) and np.all(np.isfinite(grid.psnr))
    with pytest.raises(ev.EvalError):
        ev.sweep(model, ds, [], [1])


def test_noise_compare_none_is_clean(small_data, model):
    ds = load_paired_dir(small_data, "test")
    nc = ev.noise_compare(model, ds, 8 / 255, FAST)
    clean = ev.evaluate(model, ds, FAST)
    assert [m.value for m in nc.psnr["none"]] == [r["psnr_clean"].value for r in clean.rows]
    again = ev.noise_compare(model, ds, 8 / 255, FAST)
    assert nc.psnr == again.psnr
    s = nc.summary()
    assert set(s) == {"adversarial", "gaussian", "uniform", "none"}
    assert s["none"]["psnr"]["q1"] <= s["none"]["psnr"]["median"] <= s["none"]["psnr"]["q3"]


def test_histogram_report(small_data, model):
    x, y = load_paired_dir(small_data)[0]
    hr = ev.histogram_report(model, x, y, FAST)
    totals = {k: h.sum(axis=1).tolist() for k, h in hr.histograms.items()}
    assert len({tuple(t) for t in totals.values()}) == 1
    zero = ev.histogram_report(model, x, y, AttackConfig(epsilon=0.0))
    for k in ("pixel", "color"):
        np.testing.assert_array_equal(zero.histograms[k], zero.histograms["clean"])


def test_displacement_gray_has_no_chroma():
    a = np.full((3, 4, 4), 0.2)
    luma, chroma = ev.displacement(a, a + 0.1)
    assert luma == pytest.approx(0.1) and chroma == pytest.approx(0.0, abs=1e-12)


def test_psnr_floor():
    assert ev.psnr_floor(AttackConfig(epsilon=8 / 255)) == pytest.approx(20 * math.log10(255 / 8))
    sc = AttackConfig(epsilon=8 / 255, alpha=2 / 255, iters=5, projection="step-clip", init="zero")
    assert ev.psnr_floor(sc) == pytest.approx(28.13, abs=0.01)


def test_imperceptibility_rows(small_data, model):
    ds = load_paired_dir(small_data, "test")
    rows = ev.imperceptibility_report(model, ds, [1 / 255, 8 / 255], iters=5)
    assert [r["eps"] for r in rows] == [1, 8]
    for r in rows:
        assert r["min_psnr"] >= r["floor_psnr"] - 1e-4


def test_write_reports_deterministic_and_consistent(tmp_path, small_data, model):
    ds = load_paired_dir(small_data, "test")

    def build(out):
        rep = ev.evaluate(model, ds, FAST)
        grid = ev.sweep(model, ds, [2 / 255], [1, 2])
        nc = ev.noise_compare(model, ds, 8 / 255, FAST)
        x, y = ds[0]
        hr = ev.histogram_report(model, x, y, FAST)
        imp = ev.imperceptibility_report(model, ds, [8 / 255], 2)
        return ev.write_reports(out, rep, grid, nc, hr, imp, meta={"k": 1})

    files = build(tmp_path / "a")
    build(tmp_path / "b")
    names = sorted(p.name for p in files)
    assert names == sorted(["per_image.csv", "summary.csv", "sweep.csv", "noise.csv", "hist.csv", "impercept.csv", "meta.json"])
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    rows = list(csv.DictReader(open(tmp_path / "a" / "per_image.csv")))
    assert len(rows) == len(ds)
    assert rows[0]["eps"] == "8"
    summary = {r["metric"]: r for r in csv.DictReader(open(tmp_path / "a" / "summary.csv"))}
    for k in ev.ROW_METRICS:
        vals = [float(r[k]) for r in rows if r[k] != "inf"]
        assert float(summary[k]["mean"]) == pytest.approx(sum(vals) / len(vals), abs=1e-9)


def test_method_names():
    assert ev.method_name(AttackConfig(loss="color-shift")) == "color"
    assert ev.method_name(AttackConfig(mask="B")) == "channel-b"
    assert ev.method_name(ev.NoiseConfig("uniform")) == "uniform"
    assert ev.to_255(8 / 255) == 8
