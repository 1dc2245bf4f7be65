import hashlib
import json
import logging

import numpy as np
import pytest

from egs.data import (
    AugmentationConfig,
    Sample,
    SyntheticSceneSpec,
    area_resize,
    augment,
    generate_synthetic,
    hflip,
    load_png,
    quantize,
    save_png,
    scan_dataset,
)
from egs.equivariant import rotate_image
from egs.errors import DomainError, ManifestError


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*"), key=lambda p: str(p.relative_to(root)).encode()):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def fixture_tree(tmp_path):
    rng = np.random.default_rng(0)
    for view in ("drone", "satellite"):
        (tmp_path / "test" / view).mkdir(parents=True)
        for cid in ("10", "2", "7"):
            for j in range(2 if view == "drone" else 1):
                save_png(tmp_path / "train" / view / cid / f"{j}.png", rng.random((3, 8, 8)))
    # a drone-only class
    save_png(tmp_path / "train" / "drone" / "99" / "0.png", rng.random((3, 8, 8)))
    return tmp_path


def test_scan_fixture_tree(fixture_tree, caplog):
    with caplog.at_level(logging.WARNING):
        m = scan_dataset(fixture_tree, "train")
    assert len(m) == 3
    # byte-lexicographic directory order, not numeric
    assert m.class_ids == [10, 2, 7]
    assert [c.class_id for c in m.unpaired] == [99]
    assert any("99" in w for w in m.warnings)
    assert len(m.images("drone")) == 6 and len(m.images("satellite")) == 3


def test_scan_empty_and_missing(fixture_tree):
    assert len(scan_dataset(fixture_tree, "test")) == 0
    (fixture_tree / "train" / "satellite").rename(fixture_tree / "train" / "sat")
    with pytest.raises(ManifestError, match="satellite"):
        scan_dataset(fixture_tree, "train")


def test_png_round_trip(tmp_path, rng):
    img = quantize(rng.random((3, 5, 5))) / 255.0
    save_png(tmp_path / "a.png", img)
    back = load_png(tmp_path / "a.png")
    assert back.shape == (3, 5, 5) and np.array_equal(quantize(back), quantize(img))


def test_area_resize():
    img = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(area_resize(img, 2)[0], [[2.5, 4.5], [10.5, 12.5]])
    assert np.array_equal(area_resize(img, 4), img)
    const = np.full((3, 7, 7), 0.3)
    np.testing.assert_allclose(area_resize(const, 5), 0.3)


def test_augment_identity_and_involution(rng):
    s = Sample(rng.random((3, 16, 16)), 1, "drone")
    off = AugmentationConfig(rotate90=False, hflip=False, crop_fraction=1.0)
    assert np.array_equal(augment(s, off, np.random.default_rng(0)).image, s.image)
    assert np.array_equal(hflip(hflip(s.image)), s.image)
    assert not np.array_equal(hflip(s.image), s.image)
    cfg = AugmentationConfig()
    a = augment(s, cfg, np.random.default_rng([3, 4])).image
    b = augment(s, cfg, np.random.default_rng([3, 4])).image
    assert np.array_equal(a, b) and a.shape == s.image.shape


def test_augment_rotation_is_shared_primitive(rng):
    s = Sample(rng.random((3, 8, 8)), 0, "drone")
    cfg = AugmentationConfig(rotate90=True, hflip=False, crop_fraction=1.0)
    seen = set()
    for seed in range(20):
        out = augment(s, cfg, np.random.default_rng(seed)).image
        k = next(k for k in range(4) if np.array_equal(out, rotate_image(s.image, k)))
        seen.add(k)
    assert seen == {0, 1, 2, 3}


def test_augment_crop_fraction_validation():
    with pytest.raises(DomainError):
        AugmentationConfig(crop_fraction=0.0)
    with pytest.raises(DomainError):
        AugmentationConfig(crop_fraction=1.5)


def test_synthetic_determinism(tmp_path):
    spec = SyntheticSceneSpec(classes=2, side=64, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    other = SyntheticSceneSpec(classes=2, side=64, seed=8)
    generate_synthetic(other, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_synthetic_layout(tmp_path):
    m = generate_synthetic(SyntheticSceneSpec(classes=3, side=32, seed=1, drone_train=2, drone_test=1), tmp_path)
    assert m.class_ids == [0, 1, 2] and len(m.images("drone")) == 6
    test = scan_dataset(tmp_path, "test")
    assert len(test.images("drone")) == 3
    echo = json.loads((tmp_path / "spec.json").read_text())
    assert echo["spec"]["classes"] == 3 and len(echo["variants"]) == 9


def test_synthetic_zero_classes(tmp_path):
    m = generate_synthetic(SyntheticSceneSpec(classes=0), tmp_path)
    assert len(m) == 0 and m.warnings == []


def _ground_truth_crop(sat, meta):
    top, left, crop = meta["crop"]
    return quantize(area_resize(sat[:, top:top + crop, left:left + crop], sat.shape[-1])) / 255.0


def test_synthetic_ground_truth_and_solvability(tmp_path):
    spec = SyntheticSceneSpec(classes=4, side=32, seed=7, appearance=False, drone_train=3)
    m = generate_synthetic(spec, tmp_path)
    variants = json.loads((tmp_path / "spec.json").read_text())["variants"]
    sats = {cid: load_png(p) for cid, p in m.images("satellite")}
    for cid, path in m.images("drone"):
        key = str(path.relative_to(tmp_path))
        meta = variants[key]
        drone = load_png(path)
        upright = rotate_image(drone, -meta["rot90"])
        assert np.array_equal(quantize(upright), quantize(_ground_truth_crop(sats[cid], meta)))
        # an oracle matcher that knows the crop and angle ranks the right class first
        errs = {c: np.abs(upright - _ground_truth_crop(s, meta)).sum() for c, s in sats.items()}
        assert min(errs, key=errs.get) == cid and errs[cid] == 0.0


def test_appearance_does_not_shift_geometry(tmp_path):
    spec = SyntheticSceneSpec(classes=2, side=32, seed=3)
    plain = SyntheticSceneSpec(classes=2, side=32, seed=3, appearance=False)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(plain, tmp_path / "b")
    va = json.loads((tmp_path / "a" / "spec.json").read_text())["variants"]
    vb = json.loads((tmp_path / "b" / "spec.json").read_text())["variants"]
    for key in va:
        assert va[key]["crop"] == vb[key]["crop"] and va[key]["rot90"] == vb[key]["rot90"]
