import numpy as np
import pytest

from pointfusion import autodiff as ad
from pointfusion import image_features as imf
from pointfusion.errors import MissingFeature, ParseError, ShapeError

RNG = np.random.default_rng(9)


class TestPrecomputed:
    def test_lookup(self):
        vec = RNG.normal(size=imf.FEATURE_DIM)
        ext = imf.PrecomputedExtractor({"000001_0": vec})
        assert np.array_equal(ext.extract(sample_id="000001_0"), vec)
        assert not ext.trainable

    def test_missing_id_raises(self):
        ext = imf.PrecomputedExtractor({})
        with pytest.raises(MissingFeature):
            ext.extract(sample_id="nope")
        with pytest.raises(MissingFeature):
            ext.extract(sample_id=None)

    def test_wrong_dim_rejected(self):
        with pytest.raises(ShapeError):
            imf.PrecomputedExtractor({"a": np.zeros(3)})

    def test_save_load_byte_exact(self, tmp_path):
        table = {"000000_0": RNG.normal(size=imf.FEATURE_DIM),
                 "000000_1": RNG.normal(size=imf.FEATURE_DIM)}
        path = tmp_path / "features.bin"
        imf.save_precomputed(path, table)
        ext = imf.load_precomputed(path)
        for k, v in table.items():
            assert np.array_equal(ext.extract(sample_id=k), v)

    def test_duplicate_manifest_ids_rejected(self, tmp_path):
        path = tmp_path / "features.bin"
        imf.save_precomputed(path, {"a": np.zeros(imf.FEATURE_DIM)})
        import json
        manifest = json.loads((tmp_path / "features.bin.json").read_text())
        manifest.append(dict(manifest[0]))
        (tmp_path / "features.bin.json").write_text(json.dumps(manifest))
        with pytest.raises(ParseError):
            imf.load_precomputed(path)


class TestTinyCnn:
    def test_output_shape_and_determinism(self):
        ext = imf.TinyCnnExtractor(rng=np.random.default_rng(1))
        crop = RNG.random((imf.CROP_SIZE, imf.CROP_SIZE, 3))
        a = ext.extract(crop)
        b = ext.extract(crop)
        assert a.shape == (imf.FEATURE_DIM,)
        assert np.array_equal(a, b)
        assert ext.trainable

    def test_wrong_crop_shape_raises(self):
        ext = imf.TinyCnnExtractor(rng=np.random.default_rng(1))
        with pytest.raises(ShapeError):
            ext.extract(RNG.random((64, 64, 3)))

    def test_sensitive_to_input(self):
        ext = imf.TinyCnnExtractor(rng=np.random.default_rng(1))
        a = ext.extract(np.zeros((imf.CROP_SIZE, imf.CROP_SIZE, 3)))
        b = ext.extract(np.ones((imf.CROP_SIZE, imf.CROP_SIZE, 3)))
        assert not np.allclose(a, b)

    def test_gradient_through_first_conv(self):
        # Finite-difference check of a conv weight on a small surrogate of
        # the same stage structure (full 224x224 is too slow for a check).
        rng = np.random.default_rng(3)
        crop = rng.random((11, 11, 3))
        w = rng.normal(size=(27, 4)) * 0.1
        b = np.zeros(4)

        def fn(t):
            cols = ad.im2col(ad.as_tensor(crop), 3, 2)
            h = ad.relu(ad.add(ad.matmul(cols, t), ad.Tensor(b)))
            return ad.frobenius_sq(h)

        assert ad.check_gradient(fn, w) < 1e-4
