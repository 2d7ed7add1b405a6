import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from irisusformer.data import AugmentDraw, DataError, SynthParams, augment, generate_sample, load_dataset, \
    load_image, load_mask, read_manifest, save_image, save_mask, write_manifest
from irisusformer.metrics import evaluate_masks

CLEAN = SynthParams(eyelid_prob=0.0, specular_spots=(0, 0), noise=0.0)


def test_same_seed_and_index_identical_bytes():
    a, b = generate_sample(SynthParams(seed=3), 5), generate_sample(SynthParams(seed=3), 5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_sample(SynthParams(seed=3), 6)
    assert c[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("index", range(5))
def test_clean_sample_is_discretized_annulus(index):
    image, mask, info = generate_sample(CLEAN, index, return_info=True)
    assert set(np.unique(mask)) <= {0, 1}
    assert image.dtype == np.uint8 and image.shape == mask.shape == (64, 64)
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    d = np.hypot(yy - info.cy, xx - info.cx)
    np.testing.assert_array_equal(mask, ((d < info.r_iris) & (d >= info.r_pupil)).astype(np.uint8))
    area = np.pi * (info.r_iris ** 2 - info.r_pupil ** 2)
    band = 2 * np.pi * (info.r_iris + info.r_pupil)
    assert abs(mask.sum() - area) <= band


def test_params_validation():
    with pytest.raises(ValueError):
        SynthParams(pupil_radius=(0.1, 0.3), iris_radius=(0.2, 0.4))


def test_augment_identity_and_flip(rng):
    image, mask = generate_sample(SynthParams(), 0)
    same = augment(image, mask, AugmentDraw())
    assert (same[0] == image).all() and (same[1] == mask).all()
    img_f, msk_f = augment(image, mask, AugmentDraw(flip=True))
    np.testing.assert_array_equal(msk_f, mask[:, ::-1])
    pred = rng.integers(0, 2, size=mask.shape)
    before = evaluate_masks([pred], [mask]).aggregate
    after = evaluate_masks([pred[:, ::-1]], [msk_f]).aggregate
    assert before == after


def test_translation_moves_centroid():
    _, mask = generate_sample(CLEAN, 1)
    _, moved = augment(np.zeros_like(mask), mask, AugmentDraw(dy=3, dx=-2))
    assert moved.sum() == mask.sum()  # annulus stays inside the frame
    c0 = np.argwhere(mask).mean(axis=0)
    c1 = np.argwhere(moved).mean(axis=0)
    np.testing.assert_allclose(c1 - c0, [3, -2], atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_augment_applies_one_geometry_to_both(seed):
    _, mask = generate_sample(SynthParams(), seed % 50)
    img, msk, draw = augment(mask * 255, mask, np.random.default_rng(seed), return_draw=True)
    assert set(np.unique(msk)) <= {0, 1}
    geo, _ = augment(mask * 255, mask, AugmentDraw(draw.flip, draw.dy, draw.dx))
    np.testing.assert_array_equal(geo // 255, msk)


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(16, 12), dtype=np.uint8)
    save_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)
    m = rng.integers(0, 2, size=(16, 12)).astype(np.uint8)
    save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def test_mask_validation(tmp_path):
    bad = np.zeros((4, 4), dtype=np.uint8)
    bad[1, 1] = 128
    Image.fromarray(bad).save(tmp_path / "bad.png")
    with pytest.raises(DataError, match="non-binary"):
        load_mask(tmp_path / "bad.png")
    with pytest.raises(DataError):
        save_mask(tmp_path / "x.png", bad)


def test_rgb_rejected_for_grayscale(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(DataError):
        load_image(tmp_path / "rgb.png", channels=1)
    assert load_image(tmp_path / "rgb.png", channels=3).shape == (4, 4, 3)


def test_manifest_roundtrip(tmp_path):
    recs = []
    for i in range(3):
        image, mask = generate_sample(SynthParams(), i)
        ip, mp = tmp_path / "d" / f"{i}.png", tmp_path / "d" / f"{i}_m.png"
        ip.parent.mkdir(exist_ok=True)
        save_image(ip, image)
        save_mask(mp, mask)
        recs.append((ip, mp))
    write_manifest(tmp_path / "train.tsv", recs)
    assert (tmp_path / "train.tsv").read_text().splitlines()[0] == "d/0.png\td/0_m.png"
    man = read_manifest(tmp_path / "train.tsv")
    assert len(man) == 3
    images, masks = load_dataset(man)
    assert images.shape == masks.shape == (3, 64, 64)
    (tmp_path / "d" / "1.png").unlink()
    with pytest.raises(DataError, match="missing"):
        read_manifest(tmp_path / "train.tsv")
    (tmp_path / "bad.tsv").write_text("only-one-column\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "bad.tsv")
