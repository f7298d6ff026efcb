import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from uwadv import attack as atk
from uwadv import autodiff as ad
from uwadv import imagecore as ic
from uwadv.models import build_affine, build_tiny_enhancer

TINY = build_tiny_enhancer(11)
AFFINE = build_affine([1.3, 0.7, -0.4], [0.05, 0.2, 0.6])


def image(seed, h=8, w=8):
    return np.random.default_rng(seed).random((3, h, w)).astype(np.float32)


seeds = st.integers(0, 2**31 - 1)
eps_255 = st.integers(0, 16)


@settings(max_examples=40, deadline=None)
@given(seeds, eps_255, st.integers(1, 4), st.sampled_from(atk.LOSSES), st.sampled_from(atk.MASKS), st.booleans())
def test_cumulative_attack_stays_in_budget(seed, e, iters, loss, mask, affine):
    x, y = image(seed), image(seed + 1)
    cfg = atk.AttackConfig(epsilon=e / 255, alpha=3 / 255, iters=iters, loss=loss, mask=mask, seed=seed)
    res = atk.pgd_attack(AFFINE if affine else TINY, x, y, cfg)
    assert np.max(np.abs(res.x_adv.astype(np.float64) - x)) <= e / 255 + 1e-6
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1
    if mask != "none":
        off = [c for c in range(3) if c != "RGB".index(mask)]
        np.testing.assert_array_equal(res.x_adv[off], x[off])
    assert len(res.loss_trace) == iters + 1


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(1, 16), st.integers(1, 8), st.integers(1, 6), st.sampled_from(atk.INITS))
def test_step_clip_bound(seed, e, a, iters, init):
    x, y = image(seed), image(seed + 1)
    eps, alpha = e / 255, a / 255
    cfg = atk.AttackConfig(epsilon=eps, alpha=alpha, iters=iters, projection="step-clip", init=init, seed=seed)
    res = atk.pgd_attack(TINY, x, y, cfg)
    bound = min(iters * min(alpha, eps) + (eps if init == "uniform" else 0.0), 1.0)
    assert res.linf <= bound + 1e-6


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_loss_nonnegative_and_zero_on_equal(seed):
    a, b = image(seed), image(seed + 7)
    for fn in atk.LOSS_FUNCTIONS.values():
        assert fn(a, b).item() >= 0
        assert fn(a, a).item() == 0


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-0.5, 0.5))
def test_color_shift_ignores_luma_shift(seed, shift):
    a = image(seed).astype(np.float64)
    b = image(seed + 3).astype(np.float64)
    base = atk.color_shift_loss(a, b).item()
    assert abs(atk.color_shift_loss(a + shift, b).item() - base) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_metric_symmetry_and_bounds(seed):
    a, b = image(seed, 12, 12), image(seed + 1, 12, 12)
    assert ic.psnr(a, b).value == ic.psnr(b, a).value
    s = ic.ssim(a, b).value
    assert -1 <= s <= 1
    assert abs(s - ic.ssim(b, a).value) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_yuv_round_trip(seed):
    a = image(seed).astype(np.float64)
    assert np.max(np.abs(ic.yuv_to_rgb(ic.rgb_to_yuv(a)) - a)) <= 1e-5


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_tape_replay_is_deterministic(seed):
    x = image(seed).astype(np.float64)

    def run():
        tape = ad.Tape()
        xt = tape.variable(x, "x")
        params = {k: ad.constant(v.astype(np.float64)) for k, v in TINY.params.items()}
        return ad.backward(ad.reduce(TINY.graph(xt, params), "l2norm"))["x"]

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(0, 16))
def test_random_noise_within_budget(seed, e):
    x = image(seed)
    u = atk.random_noise(x, "uniform", e / 255, seed)
    assert np.max(np.abs(u.astype(np.float64) - x)) <= e / 255 + 1e-6
    assert u.min() >= 0 and u.max() <= 1
