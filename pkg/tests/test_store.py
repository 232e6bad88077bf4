import hashlib
import os
import struct

import numpy as np
import pytest

from stackad import csp
from stackad.mock import MockSpec, generate_mock_dataset, mock_text_embed
from stackad.store import (
    CodecError,
    Dims,
    FeatureBundle,
    ManifestError,
    TextFeature,
    l2_normalize,
    load_manifest,
    load_mask,
    read_feature_file,
    save_mask,
    sclp_read,
    sclp_write,
    validate_manifest,
    write_feature_file,
)

LAYERS = (6, 12, 18, 24)


def make_bundle(rng, g=5, d_img=7, d_txt=3, label="normal", with_mask=False):
    layers = {l: rng.standard_normal((g, g, d_img)).astype(np.float32) for l in LAYERS}
    mask = None
    if with_mask:
        mask = (rng.random((g * 4, g * 4)) > 0.7).astype(np.float32)
    return FeatureBundle(
        image_id="img-001",
        category="cable",
        layers=layers,
        cls=rng.standard_normal(d_txt).astype(np.float32),
        label="anomalous" if with_mask else label,
        mask=mask,
    )


class TestCodecRoundTrip:
    def test_bundle_bitwise_identity(self, rng, tmp_path):
        bundle = make_bundle(rng, with_mask=True)
        path = str(tmp_path / "b.sclp")
        write_feature_file(bundle, path)
        back = read_feature_file(path)
        for l in LAYERS:
            assert back.layers[l].dtype == np.float32
            assert np.array_equal(back.layers[l], bundle.layers[l])
        assert np.array_equal(back.cls, bundle.cls)
        assert np.array_equal(back.mask, bundle.mask)
        assert back.image_id == bundle.image_id
        assert back.category == bundle.category
        assert back.label == bundle.label

    def test_text_feature_round_trip(self, rng, tmp_path):
        feats = []
        for i in range(3):
            v = rng.standard_normal(6)
            w = rng.standard_normal(6)
            feats.append(
                TextFeature(
                    prompt_key=f"cluster/{i}",
                    normal=(v / np.linalg.norm(v)).astype(np.float32),
                    abnormal=(w / np.linalg.norm(w)).astype(np.float32),
                )
            )
        path = str(tmp_path / "t.sclp")
        write_feature_file(feats, path)
        back = read_feature_file(path)
        assert [t.prompt_key for t in back] == [t.prompt_key for t in feats]
        for a, b in zip(back, feats):
            assert np.array_equal(a.normal, b.normal)
            assert np.array_equal(a.abnormal, b.abnormal)

    def test_random_tensor_property(self, tmp_path):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            g = int(rng.integers(1, 6))
            d_img = int(rng.integers(1, 9))
            d_txt = int(rng.integers(1, 9))
            bundle = make_bundle(rng, g=g, d_img=d_img, d_txt=d_txt)
            path = str(tmp_path / f"p{trial}.sclp")
            write_feature_file(bundle, path)
            back = read_feature_file(path)
            for l in LAYERS:
                assert np.array_equal(back.layers[l], bundle.layers[l])
            assert np.array_equal(back.cls, bundle.cls)

    def test_header_echo_g37(self, tmp_path):
        rng = np.random.default_rng(0)
        bundle = make_bundle(rng, g=37, d_img=2)
        path = str(tmp_path / "g37.sclp")
        write_feature_file(bundle, path)
        assert read_feature_file(path).grid_size == 37

    def test_toy_dims_echo(self, tmp_path):
        rng = np.random.default_rng(0)
        bundle = make_bundle(rng, g=4, d_img=16, d_txt=8)
        path = str(tmp_path / "toy.sclp")
        write_feature_file(bundle, path)
        back = read_feature_file(path)
        assert back.layers[6].shape == (4, 4, 16)
        assert back.cls.shape == (8,)


class TestCodecErrors:
    def test_missing_layer(self, rng, tmp_path):
        bundle = make_bundle(rng)
        del bundle.layers[12]
        with pytest.raises(CodecError, match="missing layer"):
            write_feature_file(bundle, str(tmp_path / "x.sclp"))

    def test_empty_layer_map(self, rng, tmp_path):
        bundle = make_bundle(rng)
        bundle.layers = {}
        with pytest.raises(CodecError, match="missing layer"):
            write_feature_file(bundle, str(tmp_path / "x.sclp"))

    def test_bad_magic(self, rng, tmp_path):
        path = str(tmp_path / "x.sclp")
        write_feature_file(make_bundle(rng), path)
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"XXXX"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CodecError, match="bad magic"):
            read_feature_file(path)

    def test_unsupported_version(self, rng, tmp_path):
        path = str(tmp_path / "x.sclp")
        write_feature_file(make_bundle(rng), path)
        raw = bytearray(open(path, "rb").read())
        raw[4:8] = struct.pack("<I", 99)
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CodecError, match="unsupported version"):
            read_feature_file(path)

    def test_payload_underrun(self, rng, tmp_path):
        path = str(tmp_path / "x.sclp")
        write_feature_file(make_bundle(rng), path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-17])
        with pytest.raises(CodecError, match="payload underrun"):
            read_feature_file(path)

    def test_nan_payload(self, rng, tmp_path):
        path = str(tmp_path / "x.sclp")
        write_feature_file(make_bundle(rng), path)
        raw = bytearray(open(path, "rb").read())
        raw[-4:] = struct.pack("<f", float("nan"))
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CodecError, match="NaN payload"):
            read_feature_file(path)

    def test_non_finite_write_rejected(self, rng, tmp_path):
        bundle = make_bundle(rng)
        bundle.layers[6][0, 0, 0] = np.inf
        with pytest.raises(CodecError, match="non-finite"):
            write_feature_file(bundle, str(tmp_path / "x.sclp"))

    def test_inconsistent_grid_names_tensor(self, rng, tmp_path):
        bundle = make_bundle(rng)
        bundle.layers[18] = bundle.layers[18][:2]
        with pytest.raises(CodecError, match="layer 18"):
            write_feature_file(bundle, str(tmp_path / "x.sclp"))


class TestL2Normalize:
    def test_three_four(self):
        out, zero = l2_normalize(np.array([3.0, 4.0]))
        assert np.allclose(out, [0.6, 0.8])
        assert not bool(zero)

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        out, zero = l2_normalize(v)
        assert np.array_equal(out, v)

    def test_zero_flagged(self):
        out, zero = l2_normalize(np.zeros(4))
        assert np.array_equal(out, np.zeros(4))
        assert bool(zero)

    def test_rows(self, rng):
        m = rng.standard_normal((5, 3))
        m[2] = 0.0
        out, zero = l2_normalize(m)
        norms = np.linalg.norm(out, axis=1)
        assert np.allclose(norms[[0, 1, 3, 4]], 1.0, atol=1e-6)
        assert norms[2] == 0.0
        assert list(zero) == [False, False, True, False, False]

    def test_norm_within_tolerance_property(self):
        for trial in range(50):
            rng = np.random.default_rng(trial)
            v = rng.standard_normal(int(rng.integers(1, 12))) * 10.0 ** float(rng.integers(-3, 4))
            out, zero = l2_normalize(v)
            if not bool(zero):
                assert abs(np.linalg.norm(out) - 1.0) < 1e-6


def _tree_hashes(root):
    hashes = {}
    for base, _, names in os.walk(root):
        for name in sorted(names):
            path = os.path.join(base, name)
            rel = os.path.relpath(path, root)
            hashes[rel] = hashlib.sha256(open(path, "rb").read()).hexdigest()
    return hashes


class TestMockGenerator:
    def test_determinism_sha256(self, tmp_path):
        spec = MockSpec(
            groups={"g1": ["aa", "bb"], "g2": ["cc", "dd"]},
            train_categories=["aa", "cc"],
            test_categories=["bb", "dd"],
            images_per_category=3,
            test_images_per_category=2,
            dims=Dims(D_img=12, D_txt=6, G=4, H=16, W=16),
            seed=11,
        )
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        generate_mock_dataset(spec, a)
        generate_mock_dataset(spec, b)
        ha, hb = _tree_hashes(a), _tree_hashes(b)
        assert ha and ha == hb

    def test_group_cosine_structure(self, bench_dataset):
        store = bench_dataset["store"]
        cats = ["boltz", "gearix", "weavon", "feltra"]
        feats = csp.category_text_features(cats, store)
        group_of = {"boltz": 0, "gearix": 0, "weavon": 1, "feltra": 1}
        cos = feats @ feats.T
        intra = [cos[i, j] for i in range(4) for j in range(4) if i < j and group_of[cats[i]] == group_of[cats[j]]]
        cross = [cos[i, j] for i in range(4) for j in range(4) if i < j and group_of[cats[i]] != group_of[cats[j]]]
        assert min(intra) > max(cross)

    def test_anomaly_fraction_zero(self, tmp_path):
        spec = MockSpec(
            groups={"g": ["aa", "bb"]},
            train_categories=["aa"],
            test_categories=["bb"],
            images_per_category=4,
            test_images_per_category=2,
            anomaly_fraction=0.0,
            dims=Dims(D_img=8, D_txt=4, G=4, H=16, W=16),
            seed=3,
        )
        manifest = generate_mock_dataset(spec, str(tmp_path / "d"))
        assert all(e.label == "normal" for e in manifest.entries)
        assert all(e.mask_path is None for e in manifest.entries)
        assert not os.path.isdir(tmp_path / "d" / "masks")

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError, match="anomaly_fraction"):
            MockSpec(
                groups={"g": ["aa"]},
                train_categories=["aa"],
                test_categories=[],
                anomaly_fraction=1.5,
            )

    def test_cls_is_mean_of_projected_patches(self, bench_dataset):
        from stackad.store import load_bundle

        manifest = bench_dataset["manifest"]
        bundle = load_bundle(manifest.entries[0], bench_dataset["root"])
        assert bundle.cls.shape == (8,)
        assert np.all(np.isfinite(bundle.cls))


class TestMockTextEmbed:
    def test_deterministic(self):
        a = mock_text_embed("copper pipe", seed=5)
        b = mock_text_embed("copper pipe", seed=5)
        assert np.array_equal(a.normal, b.normal)
        assert np.array_equal(a.abnormal, b.abnormal)

    def test_unit_norm(self):
        tf = mock_text_embed("copper pipe", seed=5)
        assert abs(np.linalg.norm(tf.normal) - 1.0) < 1e-6
        assert abs(np.linalg.norm(tf.abnormal) - 1.0) < 1e-6

    def test_distinct_strings_not_collinear(self):
        rng = np.random.default_rng(0)
        words = ["w%04d" % i for i in rng.integers(0, 10**8, size=200)]
        worst = 0.0
        for i in range(100):
            a = mock_text_embed(words[2 * i], seed=1)
            b = mock_text_embed(words[2 * i + 1], seed=1)
            worst = max(worst, float(a.normal @ b.normal))
        assert worst < 0.99

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError, match="empty prompt"):
            mock_text_embed("   ", seed=0)


class TestMasks:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = (rng.random((10, 12)) > 0.5).astype(np.float32)
        path = str(tmp_path / "m.png")
        save_mask(path, grid)
        assert np.array_equal(load_mask(path), grid)

    def test_non_binary_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="binary"):
            save_mask(str(tmp_path / "m.png"), np.array([[0.5]]))


class TestManifest:
    def test_validates_and_round_trips(self, bench_dataset, tmp_path):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        validate_manifest(manifest, bench_dataset["root"])
        assert len(manifest.entries) == 56
        assert manifest.categories("train") == ["boltz", "feltra", "gearix", "weavon"]

    def test_dims_mismatch_rejected(self, bench_dataset):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        bad = Dims(D_img=32, D_txt=8, G=8, H=64, W=64)
        manifest.dims = bad
        with pytest.raises(ManifestError, match="does not match dims"):
            validate_manifest(manifest, bench_dataset["root"])

    def test_duplicate_id_rejected(self, bench_dataset):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        manifest.entries.append(manifest.entries[0])
        with pytest.raises(ManifestError, match="duplicate image_id"):
            validate_manifest(manifest, bench_dataset["root"])

    def test_missing_file_rejected(self, bench_dataset):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        manifest.entries[0].feature_path = "feat/nonexistent.sclp"
        with pytest.raises(ManifestError, match="not found"):
            validate_manifest(manifest, bench_dataset["root"])

    def test_anomalous_train_needs_mask(self, bench_dataset):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        entry = next(e for e in manifest.entries if e.split == "train" and e.label == "anomalous")
        entry.mask_path = None
        with pytest.raises(ManifestError, match="no mask"):
            validate_manifest(manifest, bench_dataset["root"], check_files=False)

    def test_normal_with_mask_rejected(self, bench_dataset):
        manifest = load_manifest(os.path.join(bench_dataset["root"], "manifest.json"))
        entry = next(e for e in manifest.entries if e.label == "normal")
        entry.mask_path = "masks/bogus.png"
        with pytest.raises(ManifestError, match="must not reference a mask"):
            validate_manifest(manifest, bench_dataset["root"], check_files=False)


class TestSclpContainer:
    def test_generic_kind_round_trip(self, tmp_path, rng):
        path = str(tmp_path / "k.sclp")
        t1 = rng.standard_normal((3, 4)).astype(np.float32)
        t2 = rng.standard_normal(5).astype(np.float32)
        sclp_write(path, "custom", {"note": "x"}, [("a", t1), ("b", t2)])
        kind, meta, tensors = sclp_read(path)
        assert kind == "custom" and meta == {"note": "x"}
        assert np.array_equal(tensors["a"], t1)
        assert np.array_equal(tensors["b"], t2)
