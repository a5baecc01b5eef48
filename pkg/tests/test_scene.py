import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgrasp.scene import (DEPTH_SENTINEL, TABLE_COLOR, DepthModel, Material, PairedSample, SceneObject, SceneSpec,
                           augment_pair, augment_variant, filter_opaque, generate_scene, lux_to_illum,
                           random_scene_spec, render_depth, render_pair, render_rgb, render_rgb_linear,
                           rotate_flip, silhouette_edges)

CAM = 0.7
QUIET = DepthModel(noise_std=0.0)


def box(x=0.12, y=0.12, w=0.04, length=0.04, h=0.05, material=Material.OPAQUE, rot=0.0):
    return SceneObject("box", x, y, rot, w, length, h, material, (0.9, 0.1, 0.1))


def scene_of(*objs, seed=0):
    return generate_scene(SceneSpec(0.24, 0.24, 0.005, tuple(objs)), seed=seed)


class TestGenerateScene:
    def test_empty(self):
        s = scene_of()
        assert s.heightmap.shape == (48, 48)
        assert not s.heightmap.any()
        assert np.all(s.material_map == Material.OPAQUE.code)
        assert np.all(s.object_map == -1)

    def test_box_plateau_area(self):
        s = scene_of(box())
        plateau = s.heightmap == 0.05
        # 0.04 m at 0.005 m/px is 8 px a side when the box is pixel aligned
        assert plateau.sum() == round(0.04 * 0.04 / 0.005 ** 2)
        assert set(np.unique(s.heightmap)) == {0.0, 0.05}

    def test_deterministic(self):
        spec = random_scene_spec(np.random.default_rng(2), 3, Material.SPECULAR)
        a, b = generate_scene(spec, 5), generate_scene(spec, 5)
        for field in ("heightmap", "material_map", "albedo_map", "object_map", "highlight_map"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_overlap_is_max_composite(self):
        s = scene_of(box(h=0.03), box(x=0.13, h=0.06))
        assert s.heightmap.max() == 0.06
        assert (s.object_map == 1).sum() == 64

    @pytest.mark.parametrize("bad", [box(x=0.01), box(h=0.2), box(h=0.0), box(w=-0.01)])
    def test_invalid_objects(self, bad):
        with pytest.raises(ValueError):
            scene_of(bad)

    def test_heightmap_nonnegative_table_zero(self):
        for seed in range(20):
            spec = random_scene_spec(np.random.default_rng(seed), 4, Material.OPAQUE)
            s = generate_scene(spec, seed)
            assert s.heightmap.min() >= 0
            assert np.all(s.heightmap[s.object_map == -1] == 0)

    def test_remove_object_reduces_volume(self):
        s = scene_of(box(x=0.06), box(x=0.18))
        t = s.remove_object(0)
        assert t.object_ids == (1,)
        assert t.volume() < s.volume()
        with pytest.raises(KeyError):
            t.remove_object(0)

    def test_spec_round_trip(self):
        spec = random_scene_spec(np.random.default_rng(1), 3, [Material.OPAQUE, Material.SPECULAR,
                                                              Material.TRANSPARENT])
        assert SceneSpec.from_dict(spec.to_dict()) == spec
        assert not spec.opaque_only


class TestRenderDepth:
    def test_noise_free_opaque_is_exact(self):
        s = scene_of(box(), box(x=0.05, y=0.05, h=0.02))
        np.testing.assert_array_equal(render_depth(s, CAM, model=QUIET)[0], CAM - s.heightmap)

    def test_height_recoverable_from_opaque_depth(self):
        for seed in range(10):
            s = generate_scene(random_scene_spec(np.random.default_rng(seed), 3, Material.OPAQUE), seed)
            d = render_depth(s, CAM, seed=seed, model=QUIET)
            np.testing.assert_allclose(CAM - d[0], s.heightmap, atol=1e-15)

    def test_transparent_reads_table(self):
        fractions = []
        for seed in range(100):
            s = scene_of(box(material=Material.TRANSPARENT))
            d = render_depth(s, CAM, seed=seed)[0]
            obj = s.object_map >= 0
            fractions.append(np.mean(np.abs(d[obj] - CAM) <= 0.005))
        assert np.mean(fractions) >= 0.85

    def test_transparent_height_underestimated(self):
        s = scene_of(box(material=Material.TRANSPARENT))
        under = []
        for seed in range(100):
            d = render_depth(s, CAM, seed=seed)[0]
            obj = s.object_map >= 0
            under.append(np.mean((CAM - d[obj]) < s.heightmap[obj]))
        assert np.mean(under) >= 0.85

    def test_specular_dropout(self):
        fractions = []
        for seed in range(100):
            s = scene_of(box(material=Material.SPECULAR))
            d = render_depth(s, CAM, seed=seed)[0]
            fractions.append(np.mean(d[s.object_map >= 0] == DEPTH_SENTINEL))
        assert np.mean(fractions) >= 0.6

    def test_depth_range(self):
        for seed in range(10):
            s = generate_scene(random_scene_spec(np.random.default_rng(seed), 3, Material.OPAQUE), seed)
            d = render_depth(s, CAM, seed=seed)
            assert d.shape == (1, 48, 48)
            assert d.min() >= CAM - 0.15 - 0.01 and d.max() <= CAM + 0.01

    def test_camera_must_clear_objects(self):
        with pytest.raises(ValueError):
            render_depth(scene_of(box()), camera_height=0.04)


class TestRenderRgb:
    def test_empty_scene_is_table(self):
        img = render_rgb(scene_of(), 1.0, noise_std=0.0)
        np.testing.assert_allclose(img, np.broadcast_to(np.array(TABLE_COLOR)[:, None, None], (3, 48, 48)))

    def test_transparent_rim_brighter_than_table(self):
        s = scene_of(box(material=Material.TRANSPARENT))
        img = render_rgb(s, 1.0, noise_std=0.0)
        edge = silhouette_edges(s.object_map)
        assert edge.any()
        assert np.all(img.mean(axis=0)[edge] - np.mean(TABLE_COLOR) >= 0.3)

    @pytest.mark.parametrize("material", list(Material))
    def test_edges_visible_for_every_material(self, material):
        for seed in range(60):
            s = generate_scene(random_scene_spec(np.random.default_rng(seed), 1, material), seed)
            img = render_rgb_linear(s)
            edge = silhouette_edges(s.object_map)
            contrast = np.abs(img - np.array(TABLE_COLOR)[:, None, None]).max(axis=0)[edge]
            assert contrast.mean() >= 0.3

    def test_illumination_is_linear(self):
        s = generate_scene(random_scene_spec(np.random.default_rng(0), 3, Material.SPECULAR), 0)
        full = render_rgb_linear(s)
        np.testing.assert_allclose(render_rgb(s, 0.5, noise_std=0.0), np.clip(0.5 * full, 0, 1))

    def test_range_and_bad_illumination(self):
        s = scene_of(box(material=Material.SPECULAR))
        img = render_rgb(s, 2.0, seed=3)
        assert img.min() >= 0 and img.max() <= 1
        with pytest.raises(ValueError):
            render_rgb(s, 3.0)

    def test_specular_highlights_saturate(self):
        s = scene_of(box(material=Material.SPECULAR), seed=4)
        img = render_rgb(s, 1.0, noise_std=0.0)
        assert s.highlight_map.any()
        assert np.all(img[:, s.highlight_map] == 1.0)

    def test_lux_mapping(self):
        assert lux_to_illum(500) == 1.0
        assert lux_to_illum(175) == pytest.approx(0.35)


def _sample(seed=0, material=Material.OPAQUE):
    s = generate_scene(random_scene_spec(np.random.default_rng(seed), 3, material), seed)
    return render_pair(s, f"s{seed}", seed=seed)


class TestAugment:
    def test_count(self):
        assert len(augment_pair(_sample(), seed=1)) == 32

    def test_identity_rotation(self):
        s = _sample()
        r = rotate_flip(s, 0, False)
        np.testing.assert_array_equal(r.depth, s.depth)
        np.testing.assert_array_equal(r.rgb, s.rgb)

    def test_quarter_turns_are_exact(self):
        s = _sample(2)
        r = rotate_flip(s, 8, False)          # 8 bins = 90 degrees
        # positive angles turn clockwise on screen because image y points down
        np.testing.assert_array_equal(r.depth[0], np.rot90(s.depth[0], k=-1))
        four = s
        for _ in range(4):
            four = rotate_flip(four, 8, False)
        np.testing.assert_array_equal(four.depth, s.depth)

    @pytest.mark.parametrize("k,flip", [(1, False), (3, True), (5, False), (11, True)])
    def test_co_registration(self, k, flip):
        s = _sample(3)
        # tag every pixel with its index so the source of each output pixel is visible
        idx = np.arange(48 * 48, dtype=float).reshape(1, 48, 48)
        tagged = PairedSample(depth=idx.copy(), rgb=np.repeat(idx, 3, axis=0), opaque_only=True, scene_id="t",
                              camera_height=-1.0)
        r = rotate_flip(tagged, k, flip)
        inside = r.depth[0] >= 0
        np.testing.assert_array_equal(r.rgb[0][inside], r.depth[0][inside])
        # rotating the real sample reads the same pre-image pixel in both channels
        real = rotate_flip(s, k, flip)
        src = r.depth[0][inside].astype(int)
        np.testing.assert_array_equal(real.depth[0][inside], s.depth[0].ravel()[src])
        np.testing.assert_array_equal(real.rgb[:, inside], s.rgb.reshape(3, -1)[:, src])

    def test_rotation_matches_geometric_rotation(self):
        # rotating the rendered image equals rendering the rotated object on interior pixels
        base = box(x=0.12, y=0.12, w=0.02, length=0.06)
        s = render_pair(scene_of(base), "a", depth_model=QUIET, rgb_noise=0.0)
        turned = render_pair(scene_of(box(x=0.12, y=0.12, w=0.02, length=0.06, rot=math.pi / 2)), "b",
                             depth_model=QUIET, rgb_noise=0.0)
        np.testing.assert_array_equal(rotate_flip(s, 8).depth, turned.depth)

    def test_non_square_images_are_centred_on_a_square_canvas(self):
        s = render_pair(generate_scene(SceneSpec(0.34, 0.20, 0.005, (box(x=0.17, y=0.10),)), 0), "w",
                        depth_model=QUIET, rgb_noise=0.0)
        assert s.shape == (40, 68)
        for k in (0, 3, 8):
            r = rotate_flip(s, k, flip=bool(k % 2))
            assert r.depth.shape == (1, 68, 68) and r.rgb.shape == (3, 68, 68)
        r = rotate_flip(s, 0)
        np.testing.assert_array_equal(r.depth[:, 14:54], s.depth)
        np.testing.assert_array_equal(r.rgb[:, 14:54], s.rgb)
        assert np.all(r.depth[:, :14] == s.camera_height) and np.all(r.depth[:, 54:] == s.camera_height)

    def test_depth_radiometrically_untouched(self):
        s = _sample(4)
        for aug in augment_pair(s, seed=9, count=16):
            assert set(np.unique(aug.depth)) <= set(np.unique(s.depth)) | {s.camera_height}

    def test_jitter_touches_rgb_only(self):
        s = _sample(5)
        plain = augment_variant(s, seed=3, index=7, jitter=False)
        jit = augment_variant(s, seed=3, index=7, jitter=True)
        np.testing.assert_array_equal(plain.depth, jit.depth)
        assert not np.array_equal(plain.rgb, jit.rgb)
        assert jit.rgb.min() >= 0 and jit.rgb.max() <= 1

    def test_variant_regenerates(self):
        s = _sample(6)
        variants = augment_pair(s, seed=11, count=6)
        again = augment_variant(s, seed=11, index=4)
        np.testing.assert_array_equal(variants[4].rgb, again.rgb)


class TestFilterOpaque:
    def test_all_opaque(self):
        data = [_sample(i) for i in range(3)]
        assert filter_opaque(data) == data

    def test_mixed_order_preserved(self):
        mats = [Material.TRANSPARENT, Material.OPAQUE, Material.SPECULAR, Material.OPAQUE, Material.TRANSPARENT,
                Material.OPAQUE, Material.SPECULAR, Material.SPECULAR, Material.OPAQUE, Material.TRANSPARENT]
        data = [_sample(i, m) for i, m in enumerate(mats)]
        kept = filter_opaque(data)
        assert [s.scene_id for s in kept] == ["s1", "s3", "s5", "s8"]

    def test_matches_material_scan(self):
        rng = np.random.default_rng(0)
        specs, data = [], []
        for i in range(30):
            mats = [list(Material)[j] for j in rng.choice(3, size=int(rng.integers(1, 4)), p=[0.7, 0.15, 0.15])]
            spec = random_scene_spec(rng, len(mats), mats)
            specs.append(spec)
            data.append(render_pair(generate_scene(spec, i), f"s{i}", seed=i))
        expected = [d.scene_id for d, spec in zip(data, specs)
                    if all(o.material == Material.OPAQUE for o in spec.objects)]
        assert [d.scene_id for d in filter_opaque(data)] == expected

    def test_empty(self):
        assert filter_opaque([_sample(0, Material.TRANSPARENT)]) == []


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_random_specs_are_valid_and_inside(seed, n):
    spec = random_scene_spec(np.random.default_rng(seed), n, Material.OPAQUE)
    spec.validate()
    s = generate_scene(spec, seed)
    assert s.heightmap.max() <= 0.15
    pair = render_pair(s, "x", seed=seed)
    assert pair.depth.shape == (1, 48, 48) and pair.rgb.shape == (3, 48, 48)
    assert pair.opaque_only
