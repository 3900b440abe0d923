import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loralign import tasks
from loralign.tasks import KINDS, TaskError, TaskSpec, degrade, gen_clean, make_pair, psnr, ssim


def naive_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    mse = total / a.size
    return 100.0 if mse < 1e-10 else 10 * math.log10(1 / mse)


def naive_ssim(a, b, w=8):
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - w + 1):
            for j in range(a.shape[1] - w + 1):
                x = a[i : i + w, j : j + w, ch].ravel()
                y = b[i : i + w, j : j + w, ch].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# --- clean images -------------------------------------------------------


def test_gen_clean_deterministic_and_in_range():
    a = gen_clean(11)
    assert a.shape == (32, 32, 3)
    assert np.array_equal(a, gen_clean(11))
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_different_seeds_differ():
    for s in range(100):
        a, b = gen_clean(s), gen_clean(s + 1000)
        frac = np.mean(np.any(a != b, axis=2))
        assert frac >= 0.01


# --- degradations -------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_degrade_deterministic_and_clamped(kind):
    a, b = make_pair(kind, 5), make_pair(kind, 5)
    assert np.array_equal(a.clean, b.clean) and np.array_equal(a.degraded, b.degraded)
    for img in a:
        assert np.all(np.isfinite(img)) and img.min() >= 0.0 and img.max() <= 1.0


@pytest.mark.parametrize("kind", KINDS)
def test_mean_degraded_psnr_bounded(kind):
    vals = [psnr(*make_pair(kind, s)) for s in range(100)]
    assert np.mean(vals) <= 30.0


def test_fog_forced_endpoints():
    clean = gen_clean(3)
    assert np.array_equal(degrade(clean, TaskSpec("fog", 0, {"t": (1.0, 1.0)})), clean)
    assert np.all(degrade(clean, TaskSpec("fog", 0, {"t": (0.0, 0.0)})) == 0.8)


def test_fog_formula():
    clean = gen_clean(4)
    out = degrade(clean, TaskSpec("fog", 0, {"t": (0.5, 0.5)}))
    np.testing.assert_allclose(out, 0.5 * clean + 0.4, atol=1e-15)


def test_rain_without_streaks_is_identity():
    clean = gen_clean(3)
    assert np.array_equal(degrade(clean, TaskSpec("rain", 1, {"count": (0, 0)})), clean)


def test_rain_and_snow_only_brighten():
    clean = gen_clean(8)
    for kind in ("rain", "snow"):
        out = degrade(clean, TaskSpec(kind, 2))
        assert np.all(out >= clean)
        assert np.any(out > clean)


def test_raindrop_only_touches_inside_drops():
    clean = gen_clean(9)
    out = degrade(clean, TaskSpec("raindrop", 0, {"count": (1, 1), "radius": (3.0, 3.0)}))
    changed = np.any(out != clean, axis=2)
    # a single 3 px drop with a 1 px soft edge covers at most a 9x9 box
    ys, xs = np.nonzero(changed)
    assert 0 < changed.sum() <= 81
    assert ys.max() - ys.min() <= 8 and xs.max() - xs.min() <= 8


def test_task_spec_errors():
    with pytest.raises(TaskError, match="unknown degradation kind"):
        TaskSpec("hail")
    with pytest.raises(TaskError, match="unknown parameter"):
        TaskSpec("fog", params={"count": (1, 2)})
    with pytest.raises(TaskError, match="empty range"):
        TaskSpec("fog", params={"t": (0.7, 0.3)})
    with pytest.raises(TaskError):
        degrade(np.zeros((16, 16, 3)), TaskSpec("fog"))


def test_make_batch_stacks_pairs():
    clean, deg = tasks.make_batch("snow", [1, 2, 3])
    assert clean.shape == deg.shape == (3, 32, 32, 3)
    assert np.array_equal(deg[1], make_pair("snow", 2).degraded)


def test_save_png(tmp_path):
    from PIL import Image

    img = gen_clean(0)
    tasks.save_png(tmp_path / "x.png", img)
    back = np.asarray(Image.open(tmp_path / "x.png"), dtype=np.float64) / 255.0
    assert back.shape == (32, 32, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


# --- metrics ------------------------------------------------------------


def test_psnr_examples():
    x = gen_clean(1)
    assert psnr(x, x) == 100.0
    assert psnr(np.full((4, 4, 3), 0.3), np.full((4, 4, 3), 0.4)) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(TaskError, match="shape"):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_psnr_matches_naive(rng):
    for _ in range(5):
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        assert psnr(a, b) == pytest.approx(naive_psnr(a, b), abs=1e-9)


def test_ssim_identity_and_inverse():
    for s in range(20):
        x = gen_clean(s)
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    # high-variance image against its negative
    hv = np.indices((32, 32)).sum(axis=0) % 2
    hv = np.repeat(hv[..., None], 3, axis=2).astype(np.float64)
    assert ssim(hv, 1 - hv) < 0.5
    for s in range(20):
        x = gen_clean(s)
        if x.std() > 0.15:
            assert ssim(x, 1 - x) < 0.5


def test_ssim_constant_images_closed_form():
    a, b = 0.4, 0.5
    got = ssim(np.full((16, 16, 3), a), np.full((16, 16, 3), b))
    c1 = 0.01**2
    assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), abs=1e-12)


def test_ssim_matches_naive(rng):
    a = rng.random((12, 10, 2))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-10)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_ssim_bounded(seed, kind):
    pair = make_pair(kind, seed)
    assert -1.0 <= ssim(pair.clean, pair.degraded) <= 1.0


def test_ssim_window_too_large():
    with pytest.raises(TaskError, match="smaller than"):
        ssim(np.zeros((7, 9, 3)), np.zeros((7, 9, 3)))
