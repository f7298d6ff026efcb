import json

import numpy as np
import pytest

from uwadv import dataset
from uwadv.imagecore import save_image


def test_degrade_identity_at_zero_depth(rng):
    y = rng.random((3, 8, 8)).astype(np.float32)
    p = dataset.DegradationParams(noise_sigma=0.0)
    np.testing.assert_allclose(dataset.degrade(y, 0.0, p, 0), y, atol=1e-7)


def test_degrade_hand_value():
    y = np.ones((3, 2, 2))
    p = dataset.DegradationParams(beta=(1.0, 1.0, 1.0), backscatter=(0.2, 0.2, 0.2), noise_sigma=0.0)
    np.testing.assert_allclose(dataset.degrade(y, 0.7, p, 0), 0.59727, atol=1e-5)


def test_red_attenuates_more_than_blue():
    y = dataset.synth_clean(3, 32)
    p = dataset.DegradationParams(backscatter=(0.0, 0.0, 0.0), noise_sigma=0.0)
    x = dataset.degrade(y, 1.0, p, 0)
    atten = 1 - x.mean(axis=(1, 2)) / y.mean(axis=(1, 2))
    assert atten[0] > atten[2]


def test_blur_smooths(rng):
    y = rng.random((3, 16, 16))
    sharp = dataset.degrade(y, 0.5, dataset.DegradationParams(noise_sigma=0.0), 0)
    soft = dataset.degrade(y, 0.5, dataset.DegradationParams(noise_sigma=0.0, blur=True), 0)
    assert np.abs(np.diff(soft, axis=2)).mean() < np.abs(np.diff(sharp, axis=2)).mean()


@pytest.mark.parametrize(
    "kw", [{"beta": (-1.0, 0.5, 0.3)}, {"backscatter": (0.1, 2.0, 0.1)}, {"depth_range": (1.0, 0.5)}, {"noise_sigma": -0.1}]
)
def test_params_validation(kw):
    with pytest.raises(ValueError):
        dataset.DegradationParams(**kw)


def test_generate_is_deterministic(tmp_path):
    a = dataset.generate_dataset(tmp_path / "a", 5, size=16, seed=3)
    dataset.generate_dataset(tmp_path / "b", 5, size=16, seed=3)
    for sub in ("clean", "degraded"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
    assert len(a) == 5


def test_splits(small_data):
    manifest = json.loads((small_data / "manifest.json").read_text())
    train = dataset.load_paired_dir(small_data, "train")
    test = dataset.load_paired_dir(small_data, "test")
    assert len(train) == 8 and len(test) == 2
    assert not set(manifest["splits"]["train"]) & set(manifest["splits"]["test"])
    x, y = test[0]
    assert x.shape == y.shape == (3, 32, 32)
    lo, hi = manifest["params"]["depth_range"]
    assert all(lo <= d <= hi for d in manifest["depths"])


def test_params_round_trip(small_data):
    manifest = json.loads((small_data / "manifest.json").read_text())
    assert dataset.DegradationParams.from_dict(manifest["params"]) == dataset.WATER_TYPES["II"]


def _pair_dir(tmp_path, names_clean, names_deg, sizes=None):
    for sub, names in (("clean", names_clean), ("degraded", names_deg)):
        for i, n in enumerate(names):
            h = (sizes or {}).get((sub, n), 8)
            save_image(np.zeros((3, h, 8)), tmp_path / sub / n)
    return tmp_path


def test_unmatched_file(tmp_path):
    _pair_dir(tmp_path, ["a.png", "b.png"], ["a.png"])
    with pytest.raises(ValueError, match="unmatched file clean/b.png"):
        dataset.load_paired_dir(tmp_path)


def test_size_mismatch(tmp_path):
    _pair_dir(tmp_path, ["a.png"], ["a.png"], {("degraded", "a.png"): 9})
    with pytest.raises(ValueError, match="size mismatch"):
        dataset.load_paired_dir(tmp_path)


def test_empty_and_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataset.load_paired_dir(tmp_path)
    (tmp_path / "clean").mkdir()
    (tmp_path / "degraded").mkdir()
    with pytest.raises(ValueError):
        dataset.load_paired_dir(tmp_path)


def test_split_without_manifest(tmp_path):
    _pair_dir(tmp_path, ["a.png"], ["a.png"])
    assert len(dataset.load_paired_dir(tmp_path)) == 1
    with pytest.raises(ValueError):
        dataset.load_paired_dir(tmp_path, "test")


def test_batch_iter():
    batches = dataset.batch_iter(10, 4, seed=1, epoch=0)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    again = dataset.batch_iter(10, 4, seed=1, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = dataset.batch_iter(10, 4, seed=1, epoch=1)
    assert not all(np.array_equal(a, b) for a, b in zip(batches, other))
