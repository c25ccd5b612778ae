import json
import os

import numpy as np
import pytest

from dataset_handler import load_manifest, load_sample, read_image, read_png
from iid_errors import ValidationError
from imagecore import apply_gamma, rgb_to_gray
from synth_scene import SHADOW_FACTOR, SynthConfig, save_scenes, scene_fingerprint, synth_scene


class TestSynthScene:
    def test_image_is_albedo_times_shade(self, small_scene):
        product = small_scene.albedo.data * small_scene.shade.data[..., None]
        np.testing.assert_allclose(small_scene.image.data, product, atol=1e-6)

    def test_lidar_sees_albedo_luminance_only(self, small_scene):
        mask = small_scene.lidar.mask
        np.testing.assert_allclose(small_scene.lidar.values[mask], rgb_to_gray(small_scene.albedo.data)[mask],
                                   atol=1e-12)
        assert not small_scene.lidar.values[~mask].any()

    def test_lidar_density(self):
        scene = synth_scene(0, 100, 100, SynthConfig(lidar_density=0.3))
        assert 0.27 <= scene.lidar.density <= 0.33

    def test_single_region_has_constant_albedo(self):
        scene = synth_scene(1, 24, 16, SynthConfig(n_regions=1))
        assert np.ptp(scene.albedo.data.reshape(-1, 3), axis=0).max() == 0.0
        assert scene.shape == (16, 24)

    def test_shade_range(self, small_scene):
        assert small_scene.shade.data.min() >= 0.2 - 1e-12
        assert small_scene.shade.data.max() <= 1.0 + 1e-12

    def test_shadow_darkens_shade(self):
        plain = synth_scene(5, 40, 40, SynthConfig(shadow=False))
        shadowed = synth_scene(5, 40, 40, SynthConfig(shadow=True))
        shadow = shadowed.shadow_mask
        assert shadow.any() and not shadow.all()
        np.testing.assert_allclose(shadowed.shade.data[shadow], SHADOW_FACTOR * plain.shade.data[shadow])
        np.testing.assert_allclose(shadowed.shade.data[~shadow], plain.shade.data[~shadow])
        assert plain.shadow_mask is None

    def test_same_seed_same_fingerprint(self):
        cfg = SynthConfig(shadow=True)
        assert scene_fingerprint(synth_scene(42, 32, 32, cfg)) == scene_fingerprint(synth_scene(42, 32, 32, cfg))
        assert scene_fingerprint(synth_scene(42, 32, 32, cfg)) != scene_fingerprint(synth_scene(43, 32, 32, cfg))

    def test_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(lidar_density=0.0)
        with pytest.raises(ValidationError):
            SynthConfig(n_regions=0)
        with pytest.raises(ValidationError):
            synth_scene(0, 1, 10)


class TestSaveScenes:
    def test_writes_files_and_manifest(self, tmp_path):
        scenes = [synth_scene(seed, 16, 16, SynthConfig(shadow=seed == 1)) for seed in (0, 1)]
        manifest = save_scenes(scenes, str(tmp_path))
        names = sorted(os.listdir(tmp_path))
        assert "scene_0000_image.png" in names and "scene_0001_shadow.png" in names
        assert "scene_0000_shadow.png" not in names
        records = json.loads((tmp_path / "manifest.json").read_text())
        assert [r["id"] for r in records] == ["scene_0000", "scene_0001"]
        assert all(os.path.exists(s.image) and os.path.exists(s.lidar_mask) for s in load_manifest(manifest))

    def test_saved_scene_loads_back_within_quantization(self, tmp_path, shadow_scene):
        manifest = save_scenes([shadow_scene], str(tmp_path))
        sample = load_manifest(manifest)[0]
        image, lidar, annotations = load_sample(sample)
        step = 0.5 / 65535 + 1e-9

        # 16-bit codes live in the gamma-encoded domain
        assert np.max(np.abs(apply_gamma(image) - apply_gamma(shadow_scene.image))) <= step
        albedo = read_image(sample.albedo)
        assert np.max(np.abs(apply_gamma(albedo) - apply_gamma(shadow_scene.albedo))) <= step
        assert np.max(np.abs(read_png(str(tmp_path / "scene_0003_shade.png")) - shadow_scene.shade.data)) <= step
        assert np.array_equal(lidar.mask, shadow_scene.lidar.mask)
        assert np.max(np.abs(lidar.values - shadow_scene.lidar.values)) <= step
        assert np.array_equal(read_png(str(tmp_path / "scene_0003_shadow.png")) > 0.5, shadow_scene.shadow_mask)
        assert annotations is None
