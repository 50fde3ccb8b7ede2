"""Method specs, gradient-weighted maps, and the comparison harness."""

import numpy as np
import pytest

from infomask import baselines as B
from infomask import model as net
from infomask import training as T
from infomask.datagen import SynthConfig, generate
from infomask.objective import LossConfig


def _samples(n, seed=0):
    return generate(n, SynthConfig(image_size=16, blob_radius=(3.0, 5.0), seed=seed))


def _images(samples):
    return np.stack([s.image for s in samples])[:, None, :, :]


class TestMethodSpec:
    def test_infomask(self):
        spec = B.method_spec("infomask", alpha=0.5, eps_samples=2)
        assert spec.loss.variant == "infomask"
        assert spec.loss.alpha == 0.5
        assert spec.loss.eps_samples == 2
        assert spec.map_source == "mask"
        assert spec.classifier_input == "mask"

    def test_featuremask_drops_alpha(self):
        spec = B.method_spec("featuremask", alpha=0.5)
        assert spec.loss.variant == "featuremask"
        assert spec.loss.alpha == 0.0

    def test_regl1(self):
        spec = B.method_spec("regl1", l1_weight=0.3)
        assert spec.loss.variant == "regl1"
        assert spec.loss.l1_weight == 0.3

    def test_gradcam(self):
        spec = B.method_spec("gradcam", gradcam_layer="enc5")
        assert spec.classifier_input == "attention"
        assert spec.map_source == "gradcam"
        assert spec.gradcam_layer == "enc5"

    def test_classifier_input_override(self):
        spec = B.method_spec("infomask", classifier_input="masked_input")
        assert spec.classifier_input == "masked_input"

    def test_unknown(self):
        with pytest.raises(ValueError, match="method"):
            B.method_spec("lime")


class TestGradcamMap:
    def setup_method(self):
        self.params = net.ModelParams.initialize(np.random.default_rng(8), np.float64)
        self.samples = _samples(4, seed=40)
        self.images = _images(self.samples)

    def test_shape_and_range(self):
        maps = B.gradcam_map(self.params, self.images, batch_size=3)
        assert maps.shape == (4, 16, 16)
        assert maps.dtype == np.float64
        assert maps.min() >= 0.0 and maps.max() <= 1.0

    def test_every_nonzero_map_peaks_at_one(self):
        maps = B.gradcam_map(self.params, self.images)
        for m in maps:
            assert m.max() == pytest.approx(1.0) or m.max() == 0.0

    def test_logit_shift_leaves_maps_alone(self):
        shifted = self.params.copy()
        shifted["out_b"].data += 3.7
        a = B.gradcam_map(self.params, self.images)
        b = B.gradcam_map(shifted, self.images)
        np.testing.assert_array_equal(a, b)

    def test_explicit_labels_match_predicted_ones(self):
        maps_auto = B.gradcam_map(self.params, self.images)
        with np.errstate(all="ignore"):
            pred = T.predict_probs(
                self.params, self.samples, classifier_input="attention"
            ).argmax(axis=1)
        maps_given = B.gradcam_map(self.params, self.images, labels=pred)
        np.testing.assert_array_equal(maps_auto, maps_given)

    def test_other_class_changes_maps(self):
        pred = T.predict_probs(self.params, self.samples, classifier_input="attention").argmax(
            axis=1
        )
        flipped = B.gradcam_map(self.params, self.images, labels=1 - pred)
        auto = B.gradcam_map(self.params, self.images)
        assert not np.array_equal(auto, flipped)

    def test_earlier_layer_upsamples_correctly(self):
        maps = B.gradcam_map(self.params, self.images, layer="enc3")
        assert maps.shape == (4, 16, 16)
        # enc3 lives at half resolution, so maps repeat in 2x2 blocks
        np.testing.assert_array_equal(maps[:, ::2, ::2], maps[:, 1::2, ::2])
        np.testing.assert_array_equal(maps[:, ::2, ::2], maps[:, ::2, 1::2])

    def test_bad_layer_listed(self):
        with pytest.raises(ValueError, match="enc1"):
            B.gradcam_map(self.params, self.images, layer="enc9")

    def test_bad_shapes(self):
        with pytest.raises(ValueError, match="images"):
            B.gradcam_map(self.params, self.images[:, 0])
        with pytest.raises(ValueError, match="labels"):
            B.gradcam_map(self.params, self.images, labels=np.zeros(99, dtype=int))

    def test_zero_maps_counted(self, caplog):
        dead = self.params.copy()
        dead["out_w"].data[:] = 0.0  # constant logits: no gradient reaches the encoder
        B.reset_zero_map_count()
        with caplog.at_level("WARNING", logger="infomask.baselines"):
            maps = B.gradcam_map(dead, self.images)
        np.testing.assert_array_equal(maps, 0.0)
        assert B.zero_map_count() == 4
        assert any("all zero" in r.message for r in caplog.records)
        B.reset_zero_map_count()

    def test_params_left_without_grads(self):
        B.gradcam_map(self.params, self.images)
        assert all(t.grad is None for _, t in self.params.items())


def _fit_cfg(**kw):
    base = dict(learning_rate=0.02, batch_size=4, epochs=1, seed=5, dtype="float32")
    base.update(kw)
    return T.TrainConfig(**base)


class TestFitAndCompare:
    def test_fit_mask_method(self):
        fitted = B.fit_method(B.method_spec("infomask"), _samples(8, 50), _samples(6, 51), _fit_cfg())
        assert fitted.spec.method == "infomask"
        assert 0.0 <= fitted.threshold <= 0.95
        assert fitted.checkpoint.epoch == 1

    def test_fit_gradcam_tunes_on_its_own_maps(self):
        fitted = B.fit_method(B.method_spec("gradcam"), _samples(8, 52), _samples(6, 53), _fit_cfg())
        assert np.isnan(fitted.checkpoint.threshold)
        assert np.isfinite(fitted.threshold)
        assert fitted.threshold in T.threshold_grid()

    def test_fit_empty_mask_checkpoint_falls_back(self, monkeypatch, caplog):
        ck = T.Checkpoint(1, net.ModelParams.initialize(np.random.default_rng(0)), 0.9,
                          float("nan"), float("nan"))
        fake = T.TrainResult([ck], [])
        monkeypatch.setattr(T, "train", lambda *a, **k: fake)
        with caplog.at_level("WARNING", logger="infomask.baselines"):
            fitted = B.fit_method(
                B.method_spec("infomask"), _samples(4, 54), _samples(4, 55), _fit_cfg()
            )
        assert fitted.threshold == 0.0
        assert any("thresholding at zero" in r.message for r in caplog.records)

    def test_fit_gradcam_uses_its_maps_for_tuning(self, monkeypatch):
        maps = np.full((6, 16, 16), 0.12)
        for s, m in zip(_samples(6, 53), maps):
            if s.bbox is not None:
                x0, y0, x1, y1 = s.bbox
                m[y0 : y1 + 1, x0 : x1 + 1] = 0.32
        monkeypatch.setattr(B, "gradcam_map", lambda *a, **k: maps)
        fitted = B.fit_method(B.method_spec("gradcam"), _samples(8, 52), _samples(6, 53), _fit_cfg())
        assert fitted.threshold == 0.15

    def test_fit_aborted_training_rejected(self, monkeypatch):
        monkeypatch.setattr(T, "train", lambda *a, **k: T.TrainResult([], [], aborted=True))
        with pytest.raises(RuntimeError, match="aborted"):
            B.fit_method(B.method_spec("infomask"), _samples(4, 56), _samples(4, 57), _fit_cfg())

    def test_localization_maps_dispatch(self):
        val = _samples(6, 59)
        fitted = B.fit_method(B.method_spec("infomask"), _samples(8, 58), val, _fit_cfg())
        maps = B.localization_maps(fitted, val)
        want = T.predict_masks(fitted.params, val)
        np.testing.assert_array_equal(maps, want)

    def test_compare_reports_all_methods(self):
        train, val, test = _samples(8, 60), _samples(6, 61), _samples(6, 62)
        specs = [B.method_spec("infomask"), B.method_spec("gradcam")]
        rows = B.compare(specs, train, val, test, _fit_cfg())
        assert [name for name, _, _ in rows] == ["infomask", "gradcam"]
        for _, report, fitted in rows:
            assert 0.0 <= report.accuracy <= 1.0
            assert len(report.scores) == sum(1 for s in test if s.bbox is not None)
            assert isinstance(fitted, B.FittedMethod)
