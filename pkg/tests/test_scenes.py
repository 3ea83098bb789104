from collections import deque

import numpy as np
import pytest

from dida import pnm
from dida.rng import XorShift64Star, splitmix64
from dida.scenes import (CONTRAST, DataConfig, SceneObject, augment, downsample_mask,
                         generate_dataset, generate_scene, read_dataset, split_holdout,
                         upsample_bilinear, write_dataset)


def components(mask):
    """Number of 4-connected components of a binary mask."""
    seen = np.zeros(mask.shape, bool)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        queue = deque([start])
        seen[start] = True
        while queue:
            r, c = queue.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
    return count


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(DataConfig(seed=17), 40)


class TestRng:
    def test_splitmix_reference_value(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_streams_are_reproducible(self):
        a, b = XorShift64Star(1, 2, 3), XorShift64Star(1, 2, 3)
        assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]

    def test_nearby_keys_differ(self):
        assert XorShift64Star(1, 2).next_u64() != XorShift64Star(1, 3).next_u64()

    def test_ranges(self):
        r = XorShift64Star(9)
        u = r.uniforms(1000, -1.0, 1.0)
        assert min(u) >= -1.0 and max(u) < 1.0
        ints = {r.randint(2, 4) for _ in range(200)}
        assert ints == {2, 3, 4}


class TestGenerate:
    def test_deterministic(self):
        cfg = DataConfig(seed=3)
        a, b = generate_scene(cfg, 5), generate_scene(cfg, 5)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.saliency.tobytes() == b.saliency.tobytes()
        assert a.objects == b.objects

    def test_indices_differ(self):
        cfg = DataConfig(seed=3)
        assert not np.array_equal(generate_scene(cfg, 0).image, generate_scene(cfg, 1).image)

    def test_value_ranges(self, scenes):
        for s in scenes:
            assert s.image.shape == (3, 32, 32) and s.saliency.shape == (32, 32)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert set(np.unique(s.saliency)) <= {0.0, 1.0}

    def test_saliency_is_union_of_footprints(self, scenes):
        for s in scenes:
            union = np.zeros((32, 32), bool)
            for obj in s.objects:
                fp = obj.footprint(32, 32)
                assert not np.any(union & fp), "objects overlap"
                union |= fp
            np.testing.assert_array_equal(s.saliency, union.astype(float))

    def test_object_count_and_frame(self, scenes):
        for s in scenes:
            assert 1 <= len(s.objects) <= 3
            for obj in s.objects:
                r0, c0, r1, c1 = obj.bbox()
                assert r0 >= 0 and c0 >= 0 and r1 <= 32 and c1 <= 32

    def test_area_matches_analytic_footprint(self, scenes):
        for s in scenes:
            for obj in s.objects:
                fp = obj.footprint(32, 32)
                rows = np.count_nonzero(fp.any(axis=1))
                assert abs(fp.sum() - obj.area()) <= rows, (obj.shape, obj.size)

    @pytest.mark.parametrize("shape", ["disk", "square", "triangle"])
    def test_area_oracle_per_shape(self, shape):
        rng = np.random.default_rng(0)
        for _ in range(50):
            size = float(rng.integers(4, 15))
            center = tuple(rng.uniform(size / 2, 32 - size / 2, 2))
            obj = SceneObject(shape, (1, 1, 1), center, size)
            fp = obj.footprint(32, 32)
            assert abs(fp.sum() - obj.area()) <= np.count_nonzero(fp.any(axis=1))

    def test_single_disk_is_one_component(self):
        cfg = DataConfig(min_objects=1, max_objects=1, seed=2)
        for i in range(20):
            s = generate_scene(cfg, i)
            assert components(s.saliency) == 1

    def test_objects_are_separate_components(self):
        cfg = DataConfig(min_objects=2, max_objects=2, seed=4)
        for i in range(20):
            assert components(generate_scene(cfg, i).saliency) == 2

    def test_mask_image_alignment(self, scenes):
        # every object pixel differs from every background pixel by >= CONTRAST per channel
        for s in scenes:
            fg = s.saliency == 1
            for obj in s.objects:
                fp = obj.footprint(32, 32)
                np.testing.assert_allclose(s.image[:, fp], np.array(obj.color)[:, None] * np.ones(fp.sum()))
            bg = s.image[:, ~fg]
            for obj in s.objects:
                gap = np.abs(bg - np.array(obj.color)[:, None]).min(axis=1)
                assert np.all(gap >= CONTRAST - 1e-12)

    def test_noise_variant_keeps_layout(self):
        cfg = DataConfig(seed=8)
        a, b = generate_scene(cfg, 3), generate_scene(cfg, 3, noise_variant=1)
        assert a.objects == b.objects
        np.testing.assert_array_equal(a.saliency, b.saliency)
        fg = a.saliency == 1
        np.testing.assert_array_equal(a.image[:, fg], b.image[:, fg])
        assert not np.array_equal(a.image[:, ~fg], b.image[:, ~fg])

    def test_gradient_background(self):
        s = generate_scene(DataConfig(background="gradient", seed=1), 0)
        assert s.image.min() >= 0 and s.image.max() <= 1

    @pytest.mark.parametrize("kwargs", [
        dict(min_objects=0), dict(max_objects=4), dict(min_objects=3, max_objects=2),
        dict(min_size=1), dict(max_size=40), dict(background="stripes"),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            DataConfig(**kwargs)

    def test_split_holdout_takes_last_fifth(self, scenes):
        train, held = split_holdout(scenes)
        assert len(held) == 8 and held[0].index == 32 and train[-1].index == 31


class TestAugment:
    def test_double_flip_is_identity(self, scenes):
        s = scenes[0]
        twice = augment(augment(s, 0, flip=True, jitter=0.0), 0, flip=True, jitter=0.0)
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.saliency, s.saliency)

    def test_no_op(self, scenes):
        s = scenes[1]
        out = augment(s, 0, flip=False, jitter=0.0)
        np.testing.assert_array_equal(out.image, s.image)

    def test_flip_preserves_mask_area(self, scenes):
        s = scenes[2]
        assert augment(s, 0, flip=True).saliency.sum() == s.saliency.sum()

    def test_transform_is_shared_and_clamped(self, scenes):
        s = scenes[3]
        out = augment(s, 0, flip=True, jitter=0.1)
        np.testing.assert_array_equal(out.saliency, s.saliency[:, ::-1])
        np.testing.assert_allclose(out.image, np.clip(s.image[:, :, ::-1] + 0.1, 0, 1))

    def test_drawn_transform_depends_on_seed(self, scenes):
        draws = {augment(scenes[0], seed).image.tobytes() for seed in range(8)}
        assert len(draws) > 1

    def test_jitter_range_enforced(self, scenes):
        with pytest.raises(ValueError):
            augment(scenes[0], 0, jitter=0.2)


class TestResampling:
    def test_constant(self):
        np.testing.assert_allclose(downsample_mask(np.full((32, 32), 0.3), 4, 4), np.full((4, 4), 0.3))

    def test_quadrants(self):
        m = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], float)
        np.testing.assert_array_equal(downsample_mask(m, 2, 2), [[1, 0], [0, 1]])

    def test_mean_preserved(self):
        m = np.random.default_rng(0).uniform(0, 1, (32, 32))
        assert downsample_mask(m, 4, 8).mean() == pytest.approx(m.mean(), rel=1e-14)

    def test_non_dividing_grid(self):
        m = np.zeros((5, 5))
        m[:, :2] = 1
        out = downsample_mask(m, 2, 2)
        np.testing.assert_allclose(out[:, 0], [0.8, 0.8])
        np.testing.assert_allclose(out[:, 1], [0.0, 0.0])

    def test_rejects_upsampling(self):
        with pytest.raises(ValueError):
            downsample_mask(np.zeros((4, 4)), 8, 8)

    def test_bilinear_constant_and_range(self):
        np.testing.assert_allclose(upsample_bilinear(np.full((4, 4), 0.7), 32, 32), 0.7)
        m = np.random.default_rng(1).uniform(0, 1, (4, 4))
        up = upsample_bilinear(m, 32, 32)
        assert up.shape == (32, 32) and up.min() >= m.min() - 1e-15 and up.max() <= m.max() + 1e-15

    def test_bilinear_half_pixel_centres(self):
        up = upsample_bilinear(np.array([[0.0, 1.0]]), 1, 4)
        np.testing.assert_allclose(up, [[0.0, 0.25, 0.75, 1.0]])


class TestPNM:
    def test_round_trip_color(self, tmp_path):
        codes = np.random.default_rng(0).integers(0, 256, (3, 5, 7))
        image = codes / 255.0
        pnm.write_image(tmp_path / "a.ppm", image)
        back = pnm.read_image(tmp_path / "a.ppm")
        assert back.tobytes() == image.tobytes()

    def test_round_trip_gray(self, tmp_path):
        image = np.random.default_rng(1).integers(0, 256, (4, 6)) / 255.0
        pnm.write_image(tmp_path / "a.pgm", image)
        assert pnm.read_image(tmp_path / "a.pgm").tobytes() == image.tobytes()

    def test_quantization_ends(self):
        np.testing.assert_array_equal(pnm.quantize([0.0, 1.0, 0.5]), [0, 255, 128])

    def test_header(self, tmp_path):
        pnm.write_image(tmp_path / "a.ppm", np.zeros((3, 32, 32)))
        assert (tmp_path / "a.ppm").read_text().startswith("P3\n32 32\n255\n")
        pnm.write_image(tmp_path / "a.pgm", np.zeros((2, 3)))
        assert (tmp_path / "a.pgm").read_text() == "P2\n3 2\n255\n0 0 0\n0 0 0\n"

    def test_comments_and_free_whitespace(self, tmp_path):
        (tmp_path / "a.pgm").write_text("P2 # gray\n2 1\n255\n  0\n255 \n")
        np.testing.assert_array_equal(pnm.read_codes(tmp_path / "a.pgm"), [[0, 255]])

    @pytest.mark.parametrize("text", [
        "P5\n1 1\n255\n0\n", "P2\n2 1\n255\n0\n", "P2\n1 1\n65535\n0\n",
        "P2\n1 1\n255\n300\n", "P2\n1 1\n255\nx\n", "P2\n",
    ])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "bad.pgm").write_text(text)
        with pytest.raises(pnm.PNMError):
            pnm.read_image(tmp_path / "bad.pgm")

    def test_out_of_range_values_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            pnm.write_image(tmp_path / "a.pgm", np.array([[1.5]]))


class TestDatasetFiles:
    def test_round_trip(self, tmp_path, scenes):
        manifest = write_dataset(tmp_path, scenes[:3])
        assert manifest.read_text().splitlines()[1] == "1\timage_1.ppm\tmask_1.pgm"
        back = read_dataset(tmp_path)
        assert [s.index for s in back] == [0, 1, 2]
        for a, b in zip(scenes, back):
            np.testing.assert_array_equal(b.saliency, a.saliency)
            np.testing.assert_array_equal(b.image, pnm.quantize(a.image) / 255.0)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("0 image_0.ppm\n")
        with pytest.raises(ValueError):
            read_dataset(tmp_path)
