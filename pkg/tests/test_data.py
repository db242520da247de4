import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chi2
from sklearn.neighbors import NearestCentroid

from scanfer.data import (
    AugmentPolicy,
    DatasetManifest,
    ImbalancedSampler,
    ManifestError,
    PnmError,
    Record,
    Sample,
    ShuffleSampler,
    apply_jitter,
    augment,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    load_dataset,
    load_manifest,
    parse_manifest,
    rebalance,
    resize_bilinear,
    sampler_next,
    synth_dataset,
)

# -- manifests ----------------------------------------------------------------------


def test_manifest_valid(tmp_path):
    (tmp_path / "m.csv").write_text("a.ppm,0\nsub/b.ppm,6\nc d.ppm,3\n")
    m = load_manifest(tmp_path / "m.csv")
    assert [r.path for r in m.records] == ["a.ppm", "sub/b.ppm", "c d.ppm"]
    assert list(m.labels) == [0, 6, 3]
    assert m.resolve(m.records[1]) == tmp_path / "sub/b.ppm"


def test_manifest_label_out_of_range():
    with pytest.raises(ManifestError, match=r":2: .*img\.ppm,9"):
        parse_manifest("ok.ppm,1\nimg.ppm,9\n")


@pytest.mark.parametrize("text,line", [("path,label\na.ppm,1\n", 1), ("a.ppm,1\nno-comma\n", 2),
                                       ("a.ppm,1\nb.ppm,x\n", 2), ("a.ppm,1\nb.ppm,-1\n", 2)])
def test_manifest_malformed_lines(text, line):
    with pytest.raises(ManifestError, match=f":{line}:"):
        parse_manifest(text)


def test_manifest_header_named():
    with pytest.raises(ManifestError, match="header"):
        parse_manifest("path,label\na.ppm,1\n")


def test_manifest_counts_match_line_count(tmp_path):
    r = np.random.default_rng(0)
    labels = r.integers(0, 7, 700)
    text = "".join(f"img/{i:04d}.ppm,{y}\n" for i, y in enumerate(labels))
    (tmp_path / "big.csv").write_text(text)
    m = load_manifest(tmp_path / "big.csv")
    per_label = collections.Counter(line.rsplit(",", 1)[1] for line in text.splitlines())
    assert len(m) == 700
    assert list(m.class_counts) == [per_label[str(c)] for c in range(7)]


def test_manifest_text_round_trip(tmp_path):
    m = DatasetManifest([Record("x.ppm", 2), Record("y.ppm", 5)], tmp_path)
    assert parse_manifest(m.to_text(), tmp_path).records == m.records


# -- PPM / PGM --------------------------------------------------------------------------


def test_decode_white_pixel():
    np.testing.assert_array_equal(decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff"), np.ones((3, 1, 1)))


def test_decode_layout():
    img = decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00\xff\x00\x00")
    np.testing.assert_array_equal(img[:, 0, :], [[0, 1], [0, 0], [0, 0]])


def test_decode_header_comments():
    img = decode_ppm(b"P6 # comment\n1 # w\n1\n255\n\x33\x66\x99")
    np.testing.assert_array_equal(img[:, 0, 0], [0x33 / 255, 0x66 / 255, 0x99 / 255])


def test_ppm_round_trip(rng):
    raw = rng.integers(0, 256, size=(3, 7, 5))
    pixels = raw / 255.0
    data = encode_ppm(pixels)
    assert data.startswith(b"P6\n5 7\n255\n")
    back = decode_ppm(data)
    np.testing.assert_array_equal(back, pixels)
    assert encode_ppm(back) == data


def test_pgm_round_trip(rng):
    v = rng.integers(0, 256, size=(4, 6)) / 255.0
    np.testing.assert_array_equal(decode_pgm(encode_pgm(v)), v)


@pytest.mark.parametrize("data", [b"P5\n1 1\n255\n\x00", b"P3\n1 1\n255\n0 0 0", b"", b"P6\n2 2\n255\n\x00\x00",
                                  b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", b"P6\n0 1\n255\n"])
def test_decode_rejects_bad_payload(data):
    with pytest.raises(PnmError):
        decode_ppm(data)


# -- resize ---------------------------------------------------------------------------------


def pointwise_bilinear(img, out_h, out_w):
    """Per-output-pixel evaluation at half-pixel centres with edge clamping."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        for j in range(out_w):
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[:, i, j] = (img[:, y0, x0] * (1 - dy) * (1 - dx) + img[:, y0, x1] * (1 - dy) * dx
                            + img[:, y1, x0] * dy * (1 - dx) + img[:, y1, x1] * dy * dx)
    return out


def test_resize_constant():
    out = resize_bilinear(np.full((3, 5, 7), 0.37), 11)
    assert out.shape == (3, 11, 11)
    np.testing.assert_allclose(out, 0.37, atol=1e-15)


def test_resize_checkerboard_upscale():
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]] * 3)
    np.testing.assert_allclose(resize_bilinear(board, 4), pointwise_bilinear(board, 4, 4), atol=1e-15)
    centre = resize_bilinear(board, 3)[:, 1, 1]
    np.testing.assert_allclose(centre, board.mean(axis=(1, 2)), atol=1e-15)


def test_resize_matches_pointwise(rng):
    img = rng.uniform(size=(3, 9, 6))
    for size in [(4, 4), (17, 13), (9, 6), (1, 1)]:
        np.testing.assert_allclose(resize_bilinear(img, size), pointwise_bilinear(img, *size), atol=1e-12)


def test_resize_identity(rng):
    img = rng.uniform(size=(3, 8, 8))
    assert np.max(np.abs(resize_bilinear(img, 8) - img)) < 1e-12


# -- augmentation -----------------------------------------------------------------------------


def test_jitter_identity(rng):
    img = rng.uniform(size=(3, 6, 6))
    np.testing.assert_array_equal(apply_jitter(img), img)
    out = augment(Sample(img, 4), rng, AugmentPolicy.identity())
    np.testing.assert_array_equal(out.pixels, img)
    assert out.label == 4


def test_flip_involution(rng):
    img = rng.uniform(size=(3, 5, 7))
    np.testing.assert_array_equal(apply_jitter(apply_jitter(img, flip=True), flip=True), img)
    np.testing.assert_array_equal(apply_jitter(img, flip=True)[:, :, 0], img[:, :, -1])


def test_brightness_halves():
    out = apply_jitter(np.full((3, 4, 4), 0.8), brightness=0.5)
    np.testing.assert_allclose(out, 0.4, atol=1e-15)


def test_saturation_zero_gives_gray(rng):
    out = apply_jitter(rng.uniform(size=(3, 4, 4)), saturation=0.0)
    np.testing.assert_allclose(out[0], out[1], atol=1e-15)
    np.testing.assert_allclose(out[1], out[2], atol=1e-15)


def test_hue_full_turn_is_identity(rng):
    img = rng.uniform(size=(3, 4, 4))
    np.testing.assert_allclose(apply_jitter(img, hue=0.5 + 0.5), img, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)), st.integers(0, 2**31))
def test_augment_stays_in_unit_range(img, seed):
    out = augment(Sample(img, 0), np.random.default_rng(seed)).pixels
    assert out.shape == img.shape
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(brightness=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy(flip_prob=-0.1)


# -- sampling -------------------------------------------------------------------------------------


def test_sampler_single_class():
    draws = ImbalancedSampler([3, 3, 3, 3], 0).draw(500)
    assert set(draws) <= {0, 1, 2, 3}


def test_sampler_balances_ninety_ten():
    labels = np.array([0] * 90 + [1] * 10)
    draws = sampler_next(ImbalancedSampler(labels, np.random.default_rng(0)), 100_000)
    frac = np.mean(labels[draws] == 1)
    assert abs(frac - 0.5) <= 0.01


def test_sampler_seeded():
    labels = np.arange(20) % 3
    a = ImbalancedSampler(labels, 5).draw(1000)
    b = ImbalancedSampler(labels, 5).draw(1000)
    np.testing.assert_array_equal(a, b)


def test_sampler_weights_inverse_frequency():
    s = ImbalancedSampler([0, 0, 0, 1], 0)
    np.testing.assert_allclose(s.weights, [1 / 3, 1 / 3, 1 / 3, 1.0])
    np.testing.assert_allclose(s.probabilities, [1 / 6, 1 / 6, 1 / 6, 1 / 2])


def test_sampler_chi_square_seven_classes():
    counts = [500, 40, 60, 120, 900, 250, 130]
    labels = np.repeat(np.arange(7), counts)
    draws = ImbalancedSampler(labels, np.random.default_rng(11)).draw(100_000)
    observed = np.bincount(labels[draws], minlength=7)
    stat = np.sum((observed - 100_000 / 7) ** 2 / (100_000 / 7))
    assert chi2.ppf(0.999, 6) == pytest.approx(22.458, abs=1e-3)
    assert stat < chi2.ppf(0.999, 6)


def test_shuffle_sampler_covers_each_pass():
    draws = ShuffleSampler(6, 0).draw(12)
    assert sorted(draws[:6]) == list(range(6)) and sorted(draws[6:]) == list(range(6))


def test_empty_sampler_rejected():
    with pytest.raises(ValueError):
        ImbalancedSampler([], 0)


# -- rebalance ----------------------------------------------------------------------------------------


def two_class(a, b):
    return DatasetManifest([Record(f"a{i}", 0) for i in range(a)] + [Record(f"b{i}", 1) for i in range(b)])


def test_rebalance_balanced_unchanged():
    m = two_class(5, 5)
    assert rebalance(m, "oversample").records == m.records


def test_rebalance_oversample_cycles():
    out = rebalance(two_class(10, 4), "oversample")
    assert list(out.class_counts[:2]) == [10, 10]
    reps = collections.Counter(r.path for r in out.records if r.label == 1)
    assert sorted(reps.values()) == [2, 2, 3, 3]


def test_rebalance_undersample():
    out = rebalance(two_class(10, 4), "undersample", seed=3)
    assert list(out.class_counts[:2]) == [4, 4]
    assert rebalance(two_class(10, 4), "undersample", seed=3).records == out.records


def test_rebalance_cap():
    out = rebalance(two_class(10, 4), "oversample", cap=6)
    assert list(out.class_counts[:2]) == [6, 6]
    with pytest.raises(ValueError):
        rebalance(two_class(2, 2), "oversample", cap=0)
    with pytest.raises(ValueError):
        rebalance(two_class(2, 2), "sideways")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=7, max_size=7).filter(lambda c: sum(c) > 0),
       st.sampled_from(["oversample", "undersample"]), st.integers(0, 100))
def test_rebalance_subset_superset(counts, mode, seed):
    m = DatasetManifest([Record(f"c{c}_{i}", c) for c in range(7) for i in range(counts[c])])
    out = rebalance(m, mode, seed=seed)
    present = [n for n in counts if n]
    target = max(present) if mode == "oversample" else min(present)
    for c in range(7):
        before = {r.path for r in m.records if r.label == c}
        after = {r.path for r in out.records if r.label == c}
        if not before:
            assert not after
            continue
        assert out.class_counts[c] == target
        if mode == "oversample":
            assert after == before
        else:
            assert after <= before


# -- synthetic data ---------------------------------------------------------------------------------


def test_synth_layout(synth_dir):
    m = load_manifest(synth_dir / "manifest.csv")
    assert len(list((synth_dir / "images").glob("*.ppm"))) == 70
    assert list(m.class_counts) == [10] * 7


def test_synth_reproducible(tmp_path, synth_dir):
    synth_dataset(tmp_path, per_class=10, size=40, seed=0)
    for f in sorted((synth_dir / "images").glob("*.ppm")):
        assert (tmp_path / "images" / f.name).read_bytes() == f.read_bytes()
    assert (tmp_path / "manifest.csv").read_bytes() == (synth_dir / "manifest.csv").read_bytes()


def test_synth_separable(synth_arrays, tmp_path):
    images, labels = synth_arrays
    clf = NearestCentroid().fit(images.reshape(len(images), -1), labels)
    assert clf.score(images.reshape(len(images), -1), labels) >= 0.90
    held = synth_dataset(tmp_path, per_class=10, size=40, seed=1)
    x2, y2 = load_dataset(held, 40)
    assert clf.score(x2.reshape(len(x2), -1), y2) >= 0.90


def test_synth_rejects_zero():
    with pytest.raises(ValueError):
        synth_dataset("unused", per_class=0)
