import json
import os

import numpy as np
import pytest

from solider.analysis import (
    PartFeature,
    build_part_features,
    extract_features,
    intra_image_distance,
    inter_image_distance,
    lambda_sweep,
    write_sweep_csv,
)
from solider.backbone import Backbone, BackboneConfig
from solider.data import (
    SyntheticSpec,
    band_row_counts,
    bilinear_resize,
    denormalize,
    gen_synthetic_corpus,
    ingest_images,
    load_corpus,
    normalize,
    token_labels_from_classes,
)


def _small_spec(**kw):
    base = dict(identities=3, images_per_identity=4)
    base.update(kw)
    return SyntheticSpec(**base)


# -- pixel helpers ---------------------------------------------------------------


def test_normalize_round_trip():
    pixels = np.random.default_rng(0).uniform(0.0, 1.0, size=(3, 8, 8))
    np.testing.assert_allclose(denormalize(normalize(pixels)), pixels, atol=1e-6)
    assert normalize(pixels).dtype == np.float32


def test_band_row_counts_cumulative_floor():
    # 16 rows at (0.4, 0.35, 0.25): boundaries floor(6.4)=6 and floor(12)=12
    assert band_row_counts(16, (0.4, 0.35, 0.25)) == [6, 6, 4]
    assert band_row_counts(64, (0.4, 0.35, 0.25)) == [25, 23, 16]
    assert sum(band_row_counts(17, (0.3, 0.3, 0.4))) == 17


def test_bilinear_resize_identity_and_block_mean():
    img = np.random.default_rng(1).uniform(size=(3, 8, 6))
    np.testing.assert_array_equal(bilinear_resize(img, 8, 6), img)
    # exact 2x downscale with half-pixel centers averages each 2x2 block
    half = bilinear_resize(img, 4, 3)
    expected = img.reshape(3, 4, 2, 3, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(half, expected, atol=1e-12)


def test_token_labels_majority_and_tiebreak():
    classes = np.full((4, 4), 4, dtype=np.int32)
    classes[:3, :2] = 1          # 6 of 8 pixels in the left cell
    labels = token_labels_from_classes(classes, downsample=4)
    assert labels.shape == (1, 1)
    # tie between two classes keeps the first (lowest class id)
    tie = np.array([[1, 2], [2, 1]], dtype=np.int32)
    assert token_labels_from_classes(tie, 2)[0, 0] == 1


# -- synthetic corpus ------------------------------------------------------------


def test_corpus_files_and_manifest(tmp_path):
    out = str(tmp_path / "corpus")
    manifest = gen_synthetic_corpus(_small_spec(), seed=5, out_dir=out)
    assert len(manifest["images"]) == 12
    assert sorted(os.listdir(out)) == sorted(
        [e["file"] for e in manifest["images"]] + ["manifest.json"])
    on_disk = json.load(open(os.path.join(out, "manifest.json")))
    assert on_disk["seed"] == 5
    assert on_disk["downsample"] == 8


def test_corpus_deterministic_per_seed(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    gen_synthetic_corpus(_small_spec(), seed=9, out_dir=a)
    gen_synthetic_corpus(_small_spec(), seed=9, out_dir=b)
    for name in os.listdir(a):
        assert open(os.path.join(a, name), "rb").read() == \
            open(os.path.join(b, name), "rb").read(), name


def test_corpus_load_round_trip(tmp_path):
    out = str(tmp_path / "corpus")
    gen_synthetic_corpus(_small_spec(), seed=2, out_dir=out)
    corpus = load_corpus(out)
    assert corpus.images.shape == (12, 3, 64, 32)
    assert corpus.images.dtype == np.float32
    assert corpus.token_labels.shape == (12, 8, 4)
    assert set(corpus.identities) == {0, 1, 2}
    assert corpus.token_labels.min() >= 1 and corpus.token_labels.max() <= 4
    batch = corpus.batch([0, 5])
    assert batch.pixels.shape == (2, 3, 64, 32)
    assert len(batch.source_ids) == 2


def test_zero_jitter_labels_match_fixed_geometry(tmp_path):
    # with jitter off, every image shares one label grid, frozen here from
    # the band arithmetic: rows 0-2 upper, 3-5 lower, 6-7 shoes; the figure
    # (width 18px at center) covers token columns 1-2 only
    spec = _small_spec(noise_sigma=0.0, center_jitter=0.0, width_jitter=0.0,
                       band_jitter=0.0)
    out = str(tmp_path / "corpus")
    gen_synthetic_corpus(spec, seed=3, out_dir=out)
    corpus = load_corpus(out)
    expected = np.full((8, 4), 4, dtype=np.int32)
    expected[0:3, 1:3] = 1
    expected[3:6, 1:3] = 2
    expected[6:8, 1:3] = 3
    for grid in corpus.token_labels:
        np.testing.assert_array_equal(grid, expected)


def test_spec_validation():
    with pytest.raises(ValueError, match="band fractions"):
        SyntheticSpec(band_upper=0.5).validate()
    with pytest.raises(ValueError, match="at least 16x16"):
        SyntheticSpec(height=8).validate()
    with pytest.raises(ValueError, match="figure_width"):
        SyntheticSpec(figure_width=0.01).validate()


def test_ingest_resizes_and_skips_junk(tmp_path):
    out = str(tmp_path / "imgs")
    gen_synthetic_corpus(_small_spec(identities=1, images_per_identity=2,
                                     height=128, width=64), seed=0, out_dir=out)
    with open(os.path.join(out, "notes.txt"), "w") as fh:
        fh.write("not an image")
    with pytest.warns(UserWarning, match="unreadable"):
        batch, skipped = ingest_images(out, (64, 32))
    assert skipped == 1
    assert batch.pixels.shape == (2, 3, 64, 32)


def test_ingest_empty_dir(tmp_path):
    batch, skipped = ingest_images(str(tmp_path), (64, 32))
    assert len(batch) == 0 and skipped == 0
    assert batch.pixels.shape == (0, 3, 64, 32)


# -- distance analysis -----------------------------------------------------------


def _pf(image_id, part, vec):
    v = np.asarray(vec, dtype=np.float64)
    return PartFeature(image_id, part, v / np.linalg.norm(v))


def test_part_features_unit_norm():
    tokens = np.random.default_rng(4).normal(size=(2, 6, 4, 4)).astype(np.float32)
    labels = np.ones((2, 4, 4), dtype=np.int32)
    labels[:, 2:] = 2
    feats = build_part_features(tokens, labels, n_parts=2)
    assert len(feats) == 4
    for f in feats:
        assert np.linalg.norm(f.vector) == pytest.approx(1.0, abs=1e-6)


def test_intra_distance_orthogonal_parts():
    feats = [_pf(0, 1, [1, 0]), _pf(0, 2, [0, 1])]
    assert intra_image_distance(feats) == pytest.approx(1.0)
    feats = [_pf(0, 1, [1, 0]), _pf(0, 2, [1, 0])]
    assert intra_image_distance(feats) == pytest.approx(0.0, abs=1e-12)
    feats = [_pf(0, 1, [1, 0]), _pf(0, 2, [-1, 0])]
    assert intra_image_distance(feats) == pytest.approx(2.0)


def test_inter_distance_same_part_across_images():
    feats = [_pf(0, 1, [1, 0]), _pf(1, 1, [0, 1]),
             _pf(0, 2, [1, 0]), _pf(1, 2, [1, 0])]
    # part 1 pair is orthogonal (distance 1), part 2 pair identical (0)
    assert inter_image_distance(feats) == pytest.approx(0.5)


def test_distance_requirements():
    with pytest.raises(ValueError, match="two or more parts"):
        intra_image_distance([_pf(0, 1, [1, 0]), _pf(1, 2, [0, 1])])
    with pytest.raises(ValueError, match="shared"):
        inter_image_distance([_pf(0, 1, [1, 0]), _pf(1, 2, [0, 1])])


def test_distances_invariant_to_image_order():
    rng = np.random.default_rng(6)
    feats = [_pf(i, p, rng.normal(size=5)) for i in range(4) for p in (1, 2, 3)]
    shuffled = [feats[i] for i in rng.permutation(len(feats))]
    assert intra_image_distance(feats) == pytest.approx(intra_image_distance(shuffled))
    assert inter_image_distance(feats) == pytest.approx(inter_image_distance(shuffled))


# -- feature extraction and the sweep --------------------------------------------


def _tiny_backbone(seed=0):
    cfg = BackboneConfig(patch_size=2, embed_dim=8, depths=(1, 1), heads=(2, 2),
                         window_size=2, controller_hidden=4)
    return Backbone(cfg, (16, 16), np.random.default_rng(seed))


def test_extract_features_shapes_and_batching():
    backbone = _tiny_backbone()
    images = np.random.default_rng(7).normal(size=(10, 3, 16, 16)).astype(np.float32)
    pooled, tokens = extract_features(backbone, images, 0.5, batch_size=3)
    assert pooled.shape == (10, 16)
    assert tokens.shape == (10, 16, 4, 4)
    pooled_b, _ = extract_features(backbone, images, 0.5, batch_size=10)
    np.testing.assert_allclose(pooled, pooled_b, atol=1e-6)


def test_untrained_sweep_is_lambda_flat(tmp_path):
    # controllers start at identity, so every lambda yields the same features
    backbone = _tiny_backbone()
    images = np.random.default_rng(8).normal(size=(6, 3, 16, 16)).astype(np.float32)
    images[:, :, 4:12, 4:12] *= 5.0  # give every image a high-norm center
    truth = np.ones((6, 4, 4), dtype=np.int32) * 3
    truth[:, 1:3, 1:3] = 1
    truth[:, 3, :] = 2
    report = lambda_sweep(backbone, images, [0.0, 0.5, 1.0], n_parts=2,
                          label_source="truth", truth_labels=truth,
                          identities=np.array([0, 0, 1, 1, 2, 2]), seed=0)
    assert len(report.lambdas) == 3
    assert max(report.intra) - min(report.intra) < 1e-6
    assert max(report.inter) - min(report.inter) < 1e-6
    path = str(tmp_path / "sweep.csv")
    write_sweep_csv(report, path)
    rows = open(path).read().strip().splitlines()
    assert rows[0] == "lambda,intra_image_distance,inter_image_distance,part_probe_acc,identity_probe_acc"
    assert len(rows) == 4


def test_sweep_pseudo_labels_run(tmp_path):
    backbone = _tiny_backbone()
    rng = np.random.default_rng(9)
    images = rng.normal(size=(8, 3, 16, 16)).astype(np.float32)
    images[:, :, 2:14, 4:12] += 3.0
    report = lambda_sweep(backbone, images, [0.0, 1.0], n_parts=2,
                          label_source="pseudo",
                          identities=np.array([0, 0, 0, 0, 1, 1, 1, 1]), seed=1)
    assert len(report.part_probe_acc) == 2
    assert all(0.0 <= v <= 1.0 for v in report.part_probe_acc)
    assert all(0.0 <= v <= 1.0 for v in report.identity_probe_acc)


def test_sweep_rejects_bad_source():
    backbone = _tiny_backbone()
    images = np.zeros((2, 3, 16, 16), dtype=np.float32)
    with pytest.raises(ValueError, match="label_source"):
        lambda_sweep(backbone, images, [0.0], n_parts=2, label_source="guess")
