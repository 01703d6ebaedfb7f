import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosaic_sr.mosaic import (
    BAYER,
    DEAD,
    MS4X4,
    ImageCube,
    augment,
    bicubic_resize,
    bicubic_upscale_mosaic,
    bicubic_weights,
    center_crop_divisible,
    cube_to_mosaic,
    generate_pair,
    get_pattern,
    mosaic_to_packed_cube,
    mosaic_to_zero_padded_cube,
    to_network_input,
)

PATTERNS = [BAYER, MS4X4]


def random_mosaic(rng, pattern, th=3, tw=5):
    m = rng.random((pattern.tile_h * th, pattern.tile_w * tw))
    return m * pattern.valid_mask(*m.shape)


class TestPattern:
    def test_bayer(self):
        assert (BAYER.tile_h, BAYER.tile_w, BAYER.n_wavelengths) == (2, 2, 4)
        assert BAYER.dead_cells == []

    def test_ms(self):
        assert (MS4X4.tile_h, MS4X4.tile_w, MS4X4.n_wavelengths, MS4X4.n_cells) == (4, 4, 14, 16)
        assert MS4X4.dead_cells == [(3, 2), (3, 3)]

    def test_custom_cell_map(self):
        pat = get_pattern("ms4x4", [[13, 12, 11, 10], [9, 8, 7, 6], [5, 4, 3, 2], [DEAD, 1, 0, DEAD]])
        assert pat.n_wavelengths == 14
        assert pat.cell_of(0) == (3, 2)

    @pytest.mark.parametrize("bad", [[[0, 0], [1, 2]], [[0, 1], [2, 5]], [[0, -2], [1, 2]]])
    def test_invalid_cell_map(self, bad):
        with pytest.raises(ValueError):
            get_pattern("x", bad)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            get_pattern("rgbw")

    def test_valid_mask(self):
        mask = MS4X4.valid_mask(8, 8)
        assert mask.sum() == 64 - 8
        assert not mask[3, 2] and not mask[7, 7] and mask[3, 1]


class TestPackedCube:
    def test_paper_ms_dims(self):
        cube = np.zeros((14, 240, 480), dtype=np.float32)
        assert cube_to_mosaic(cube, MS4X4).shape == (960, 1920)

    def test_constant_cube(self):
        m = cube_to_mosaic(np.full((14, 3, 2), 0.3), MS4X4)
        np.testing.assert_array_equal(m, 0.3 * MS4X4.valid_mask(12, 8))

    def test_bayer_packing_dims(self):
        m = np.zeros((1086, 2046), dtype=np.float32)
        assert mosaic_to_packed_cube(m, BAYER).shape == (4, 543, 1023)

    def test_zero_mosaic(self):
        assert np.all(mosaic_to_packed_cube(np.zeros((8, 8)), MS4X4) == 0)

    def test_pixel_law(self, rng):
        cube = rng.random((14, 3, 4))
        m = cube_to_mosaic(cube, MS4X4)
        for a in range(4):
            for b in range(4):
                wl = MS4X4.cell_map[a][b]
                expect = 0.0 if wl == DEAD else cube[wl, 2, 1]
                assert m[4 * 2 + a, 4 * 1 + b] == expect

    def test_rejects_zero_padded_kind(self):
        with pytest.raises(ValueError):
            cube_to_mosaic(ImageCube(np.zeros((16, 4, 4)), "zero_padded"), MS4X4)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            mosaic_to_packed_cube(np.zeros((6, 8)), MS4X4)

    @pytest.mark.parametrize("pattern", PATTERNS, ids=lambda p: p.name)
    def test_round_trips(self, rng, pattern):
        for _ in range(50):
            m = random_mosaic(rng, pattern, *rng.integers(1, 6, size=2))
            cube = mosaic_to_packed_cube(m, pattern)
            np.testing.assert_array_equal(cube_to_mosaic(cube, pattern), m)
            np.testing.assert_array_equal(mosaic_to_packed_cube(cube_to_mosaic(cube, pattern), pattern), cube)


class TestZeroPaddedCube:
    def test_paper_lr_dims(self):
        assert mosaic_to_zero_padded_cube(np.zeros((320, 640), np.float32), MS4X4).shape == (16, 320, 640)

    @pytest.mark.parametrize("pattern", PATTERNS, ids=lambda p: p.name)
    def test_channel_sum_and_partition(self, rng, pattern):
        m = random_mosaic(rng, pattern, 4, 3)
        cube = mosaic_to_zero_padded_cube(m, pattern)
        np.testing.assert_array_equal(cube.sum(axis=0), m)
        supports = np.zeros(m.shape, dtype=int)
        for k in range(cube.shape[0]):
            a, b = divmod(k, pattern.tile_w)
            site = np.zeros(m.shape, dtype=bool)
            site[a::pattern.tile_h, b::pattern.tile_w] = True
            assert not np.any(cube[k][~site])
            assert site.sum() == m.size // pattern.n_cells
            if pattern.cell_map[a][b] != DEAD:
                supports += site
        np.testing.assert_array_equal(supports.astype(bool), pattern.valid_mask(*m.shape))
        assert supports.max() == 1

    def test_network_input_formats(self, rng):
        ms = np.stack([random_mosaic(rng, MS4X4, 2, 2) for _ in range(3)])
        assert to_network_input(ms, MS4X4, "mosaic").shape == (3, 1, 8, 8)
        assert to_network_input(ms, MS4X4, "zero_padded_cube").shape == (3, 16, 8, 8)
        with pytest.raises(ValueError):
            to_network_input(ms, MS4X4, "packed")


class TestBicubic:
    def test_constant(self):
        out = bicubic_resize(np.full((2, 9, 12), 0.4), 3, 4)
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    def test_identity_same_size(self, rng):
        x = rng.random((5, 7))
        np.testing.assert_allclose(bicubic_resize(x, 5, 7), x, atol=1e-12)

    def test_linear_ramp_downsample(self):
        # half-pixel centres: output pixel i samples input coordinate 3i + 1
        n = 30
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        ramp = 0.01 * yy + 0.02 * xx + 0.1
        out = bicubic_resize(ramp, n // 3, n // 3)
        oy, ox = np.mgrid[0:n // 3, 0:n // 3] * 3.0 + 1.0
        np.testing.assert_allclose(out, 0.01 * oy + 0.02 * ox + 0.1, atol=1e-12)

    def test_linear_ramp_32_bit(self):
        ramp = (np.arange(24, dtype=np.float32)[None, :] / 24).repeat(6, 0)
        out = bicubic_resize(ramp, 2, 8)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out[0], (np.arange(8) * 3 + 1) / 24, atol=1e-6)

    def test_weights_rows_sum_to_one(self):
        for n_in, n_out in [(9, 3), (3, 9), (7, 11), (1, 4)]:
            np.testing.assert_allclose(bicubic_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_kernel_values(self):
        # upsampling x2, output 8 sits at source 3.75: taps 2..5 at distances 1.75, 0.75, 0.25, 1.25
        w = bicubic_weights(8, 16)[8]
        a = -0.75
        k = lambda t: ((a + 2) * t**3 - (a + 3) * t**2 + 1) if t <= 1 else (a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a)  # noqa: E731
        np.testing.assert_allclose(w[2:6], [k(1.75), k(0.75), k(0.25), k(1.25)], atol=1e-12)

    def test_non_positive_dims(self):
        with pytest.raises(ValueError):
            bicubic_resize(np.zeros((4, 4)), 0, 2)


class TestGeneratePair:
    def test_paper_ms_dims(self):
        lr, hr = generate_pair(np.zeros((960, 1920), np.float32), MS4X4)
        assert lr.shape == (320, 640) and hr.shape == (960, 1920)

    def test_bayer_crop_rule(self):
        # 1086 = 6 * 181 and 2046 = 6 * 341 already satisfy scale * tile = 6
        hr = center_crop_divisible(np.zeros((1086, 2046), np.float32), 6)
        assert hr.shape == (1086, 2046)
        lr, _ = generate_pair(hr, BAYER)
        assert lr.shape == (362, 682)
        assert center_crop_divisible(np.zeros((1091, 2050)), 6).shape == (1086, 2046)

    def test_center_crop_is_centred(self):
        m = np.arange(14 * 14).reshape(14, 14)
        np.testing.assert_array_equal(center_crop_divisible(m, 12), m[1:13, 1:13])
        np.testing.assert_array_equal(center_crop_divisible(m, 12, align=2), m[0:12, 0:12])

    def test_constant(self):
        lr, _ = generate_pair(np.full((24, 24), 0.6) * MS4X4.valid_mask(24, 24), MS4X4)
        np.testing.assert_allclose(lr, 0.6 * MS4X4.valid_mask(8, 8), atol=1e-12)

    def test_phase_preserved(self, rng):
        hr = random_mosaic(rng, MS4X4, 6, 9)
        lr, _ = generate_pair(hr, MS4X4)
        assert np.all(lr[~MS4X4.valid_mask(*lr.shape)] == 0)
        # x3 half-pixel decimation picks the centre sample of each 3x3 block of cube pixels
        np.testing.assert_allclose(mosaic_to_packed_cube(lr, MS4X4),
                                   mosaic_to_packed_cube(hr, MS4X4)[:, 1::3, 1::3], atol=1e-12)

    def test_requires_divisibility(self):
        with pytest.raises(ValueError):
            generate_pair(np.zeros((16, 24)), MS4X4)

    def test_bicubic_upscale_shape_and_dead(self, rng):
        up = bicubic_upscale_mosaic(random_mosaic(rng, MS4X4, 2, 3), MS4X4)
        assert up.shape == (24, 36)
        assert np.all(up[~MS4X4.valid_mask(24, 36)] == 0)
        assert up.min() >= 0 and up.max() <= 1


class TestAugment:
    @pytest.fixture
    def pair(self, rng):
        hr = random_mosaic(rng, MS4X4, 24, 24)
        return generate_pair(hr, MS4X4)

    def test_identity_transform(self, pair, rng):
        lr, hr = pair
        a, b = augment(lr, hr, rng, MS4X4, crop_lr=32, rotate=0, flip=False)
        assert a.shape == (32, 32) and b.shape == (96, 96)
        # locate the crop: it must be a contiguous tile-aligned window of the source
        found = [(t, l) for t in range(0, lr.shape[0] - 31, 4) for l in range(0, lr.shape[1] - 31, 4)
                 if np.array_equal(lr[t:t + 32, l:l + 32], a)]
        assert found
        t, l = found[0]
        np.testing.assert_array_equal(hr[3 * t:3 * t + 96, 3 * l:3 * l + 96], b)

    def test_double_flip_identity(self, pair):
        lr, hr = pair
        r1 = np.random.default_rng(5)
        a1, b1 = augment(lr, hr, r1, MS4X4, crop_lr=32, rotate=0, flip=True)
        a2, b2 = augment(a1, b1, np.random.default_rng(0), MS4X4, crop_lr=32, rotate=0, flip=True)
        a0, b0 = augment(lr, hr, np.random.default_rng(5), MS4X4, crop_lr=32, rotate=0, flip=False)
        np.testing.assert_array_equal(a2, a0)
        np.testing.assert_array_equal(b2, b0)

    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("flip", [False, True])
    def test_transform_commutes_with_downsampling(self, pair, k, flip):
        lr, hr = pair
        a, b = augment(lr, hr, np.random.default_rng(1), MS4X4, crop_lr=32, rotate=k, flip=flip)
        lr_from_b, _ = generate_pair(b, MS4X4)
        np.testing.assert_allclose(lr_from_b, a, atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_phase_never_mixes(self, seed):
        rng = np.random.default_rng(seed)
        hr = rng.random((48 * 3, 40 * 3)) * MS4X4.valid_mask(144, 120)
        lr, hr = generate_pair(hr, MS4X4)
        a, b = augment(lr, hr, rng, MS4X4, crop_lr=24)
        assert np.all(a[~MS4X4.valid_mask(24, 24)] == 0)
        assert np.all(b[~MS4X4.valid_mask(72, 72)] == 0)
        assert np.all(a[MS4X4.valid_mask(24, 24)] > 0)

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            augment(np.zeros((40, 40)), np.zeros((120, 120)), rng, MS4X4, crop_lr=60)

    def test_unaligned_crop(self, rng):
        with pytest.raises(ValueError):
            augment(np.zeros((64, 64)), np.zeros((192, 192)), rng, MS4X4, crop_lr=30)

    def test_transform_frequencies(self):
        # a 4x4 Bayer LR packs to 2x2 planes with distinct values, so all eight
        # rotation/flip outcomes are distinguishable; each should have p = 1/8
        rng = np.random.default_rng(0)
        lr = np.arange(16.0).reshape(4, 4) + 1
        hr = np.kron(lr, np.ones((3, 3)))
        counts = {}
        n = 4000
        for _ in range(n):
            a, _ = augment(lr, hr, rng, BAYER, crop_lr=4, scale=3)
            key = a.tobytes()
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 8
        sd = np.sqrt(n * (1 / 8) * (7 / 8))
        assert all(abs(c - n / 8) < 5 * sd for c in counts.values())
