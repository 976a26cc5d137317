"""Renderer and preprocessing tests with direct-evaluation oracles."""

import fractions

import numpy as np
import pytest

from pixelfb import camera as cam
from pixelfb.cartpole import CartpoleState

CFG = cam.CameraConfig()
POLE_LEN = 0.352


def foreground_centroid_col(obs: cam.PixelObservation, cfg: cam.CameraConfig) -> float:
    img = obs.image(cfg) - cfg.background_level
    total = img.sum()
    cols = np.arange(cfg.width_px)
    return float((img.sum(axis=0) * cols).sum() / total)


def otsu_oracle_threshold(pixels: np.ndarray) -> int:
    """Exhaustive search over all 256 thresholds in exact integer arithmetic.

    Between-class variance for split t is proportional to
    (S0*N1 - S1*N0)^2 / (N0*N1) with integer bin counts N and level sums S,
    so thresholds can be ranked exactly; ties resolve to the lowest t.
    """
    bins = np.minimum((pixels * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins, minlength=256)
    total = int(hist.sum())
    level_sum = int((hist * np.arange(256)).sum())
    best_t, best_var = 0, fractions.Fraction(-1)
    n0 = s0 = 0
    for t in range(256):
        n0 += int(hist[t])
        s0 += int(hist[t]) * t
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            var = fractions.Fraction(0)
        else:
            num = (s0 * n1 - (level_sum - s0) * n0) ** 2
            var = fractions.Fraction(num, n0 * n1)
        if var > best_var:
            best_var, best_t = var, t
    return best_t


class TestRender:
    def test_out_of_view_is_background(self):
        obs = cam.render(CartpoleState(p=100.0), CFG, POLE_LEN)
        assert np.allclose(obs.pixels, CFG.background_level)

    def test_deterministic(self):
        s = CartpoleState(0.07, 0.0, 0.3, 0.0)
        a = cam.render(s, CFG, POLE_LEN)
        b = cam.render(s, CFG, POLE_LEN)
        assert np.array_equal(a.pixels, b.pixels)

    def test_centroid_at_origin_column(self):
        obs = cam.render(CartpoleState(), CFG, POLE_LEN)
        assert abs(foreground_centroid_col(obs, CFG) - CFG.origin_px[0]) <= 1.0

    def test_range_and_length(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = CartpoleState(rng.uniform(-0.5, 0.5), 0.0, rng.uniform(-3, 3), 0.0)
            obs = cam.render(s, CFG, POLE_LEN)
            assert obs.pixels.shape == (CFG.n_pixels,)
            assert obs.pixels.min() >= 0.0 and obs.pixels.max() <= 1.0

    def test_translation_by_whole_pixels(self):
        shift_px = 4
        a = cam.render(CartpoleState(p=0.0, theta=0.2), CFG, POLE_LEN).image(CFG)
        b = cam.render(
            CartpoleState(p=shift_px * CFG.meters_per_px, theta=0.2), CFG, POLE_LEN
        ).image(CFG)
        assert np.allclose(a[:, : -shift_px], b[:, shift_px:], atol=1e-12)
        ca = foreground_centroid_col(cam.PixelObservation(a.reshape(-1)), CFG)
        cb = foreground_centroid_col(cam.PixelObservation(b.reshape(-1)), CFG)
        assert abs((cb - ca) - shift_px) <= 1.0

    def test_hanging_pole_visible(self):
        obs = cam.render(CartpoleState(theta=np.pi), CFG, POLE_LEN)
        img = obs.image(CFG)
        below = img[CFG.origin_px[1] + 3 :, :]
        assert below.max() > 0.5


class TestGaussianBlur:
    def test_sigma_zero_identity(self):
        obs = cam.render(CartpoleState(), CFG, POLE_LEN)
        out = cam.gaussian_blur(obs, 0.0, CFG)
        assert np.array_equal(out.pixels, obs.pixels)

    def test_constant_image_preserved(self):
        obs = cam.PixelObservation(np.full(CFG.n_pixels, 0.4))
        out = cam.gaussian_blur(obs, 2.0, CFG)
        assert np.allclose(out.pixels, 0.4, atol=1e-12)

    def test_impulse_matches_direct_kernel(self):
        img = np.zeros((CFG.height_px, CFG.width_px))
        r, c = CFG.height_px // 2, CFG.width_px // 2
        img[r, c] = 1.0
        out = cam.gaussian_blur(cam.PixelObservation(img.reshape(-1)), 1.0, CFG).image(CFG)
        offs = np.arange(-3, 4)
        k1 = np.exp(-0.5 * offs**2)
        k1 /= k1.sum()
        kernel2d = np.outer(k1, k1)
        expected = np.zeros_like(img)
        expected[r - 3 : r + 4, c - 3 : c + 4] = kernel2d
        assert np.max(np.abs(out - expected)) < 1e-6

    def test_negative_sigma_rejected(self):
        obs = cam.PixelObservation(np.zeros(CFG.n_pixels))
        with pytest.raises(ValueError):
            cam.gaussian_blur(obs, -1.0, CFG)


class TestOtsu:
    def test_two_level_image_separates_exactly(self):
        rng = np.random.default_rng(1)
        px = np.where(rng.random(CFG.n_pixels) < 0.3, 0.9, 0.1)
        out = cam.otsu_threshold(cam.PixelObservation(px))
        assert np.array_equal(out.pixels, (px > 0.5).astype(float))

    def test_matches_exhaustive_oracle_on_random_images(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            px = rng.random(64)
            got = cam.otsu_threshold(cam.PixelObservation(px)).pixels
            t = otsu_oracle_threshold(px)
            expected = (np.minimum((px * 256).astype(np.int64), 255) > t).astype(float)
            assert np.array_equal(got, expected)

    def test_single_level_raises(self):
        with pytest.raises(cam.DegenerateImageError):
            cam.otsu_threshold(cam.PixelObservation(np.full(100, 0.5)))

    def test_idempotent_on_binary(self):
        rng = np.random.default_rng(3)
        px = (rng.random(200) < 0.4).astype(float)
        once = cam.otsu_threshold(cam.PixelObservation(px)).pixels
        twice = cam.otsu_threshold(cam.PixelObservation(once)).pixels
        assert np.array_equal(once, twice)


class TestObserve:
    def test_raw_equals_render(self):
        s = CartpoleState(0.1, 0.0, -0.4, 0.0)
        assert np.array_equal(
            cam.observe(s, CFG, "raw", pole_length=POLE_LEN).pixels,
            cam.render(s, CFG, POLE_LEN).pixels,
        )

    def test_blur_otsu_is_binary(self):
        out = cam.observe(CartpoleState(), CFG, "blur_otsu", sigma=1.0, pole_length=POLE_LEN)
        assert set(np.unique(out.pixels)) <= {0.0, 1.0}

    def test_blur_otsu_foreground_count_close_to_raw(self):
        raw = cam.observe(CartpoleState(), CFG, "raw", pole_length=POLE_LEN)
        proc = cam.observe(CartpoleState(), CFG, "blur_otsu", sigma=0.5, pole_length=POLE_LEN)
        raw_count = np.sum(raw.pixels > 0.5 * CFG.foreground_level)
        proc_count = np.sum(proc.pixels > 0.5)
        assert abs(proc_count - raw_count) <= 0.2 * raw_count

    def test_unknown_pipeline_rejected(self):
        with pytest.raises(ValueError):
            cam.observe(CartpoleState(), CFG, "sobel")


class TestPgm:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.random((8, 16))
        path = tmp_path / "frame.pgm"
        cam.write_pgm(path, img)
        back = cam.read_pgm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9

    def test_header_format(self, tmp_path):
        path = tmp_path / "frame.pgm"
        cam.write_pgm(path, np.zeros((4, 6)))
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n6 4\n255\n")
        assert len(raw) == len(b"P5\n6 4\n255\n") + 24
