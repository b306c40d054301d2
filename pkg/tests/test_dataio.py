import os

import numpy as np
import pytest

from bwseg import dataio as D
from bwseg.weak_labels import UNLABELED


def test_pgm_roundtrip_is_byte_exact(tmp_path):
    pix = np.random.default_rng(0).integers(0, 256, (7, 5)).astype(np.uint8)
    D.write_pgm(tmp_path / "a.pgm", pix)
    blob = (tmp_path / "a.pgm").read_bytes()
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "a.pgm"), pix)
    assert D.encode_pgm(D.decode_pgm(blob)) == blob


def test_image_scaling_and_label_sentinel(tmp_path):
    D.write_pgm(tmp_path / "one.pgm", np.array([[128]], np.uint8))
    assert D.read_image(tmp_path / "one.pgm")[0, 0] == pytest.approx(0.50196, abs=1e-5)
    D.write_labels(tmp_path / "l.pgm", np.array([[0, 255, 3]]))
    assert D.read_labels(tmp_path / "l.pgm")[0, 1] == UNLABELED
    img = np.random.default_rng(1).integers(0, 256, (4, 4)) / 255.0
    D.write_image(tmp_path / "i.pgm", img)
    np.testing.assert_array_equal(D.read_image(tmp_path / "i.pgm"), img)
    with pytest.raises(ValueError):
        D.write_image(tmp_path / "bad.pgm", np.full((2, 2), 1.5))


def test_pgm_header_with_comments():
    blob = b"P5\n# made by hand\n2 1\n255\n\x01\x02"
    np.testing.assert_array_equal(D.decode_pgm(blob), [[1, 2]])


@pytest.mark.parametrize("blob,offset", [
    (b"P6\n1 1\n255\n\x00", 0),
    (b"P5\nx 1\n255\n\x00", 3),
    (b"P5\n2 2\n255\n\x00\x00", 13),
])
def test_pgm_errors_carry_offsets(blob, offset):
    with pytest.raises(D.PGMError) as err:
        D.decode_pgm(blob)
    assert err.value.offset == offset
    assert f"byte {offset}" in str(err.value)


def test_pgm_rejects_wide_maxval():
    with pytest.raises(D.PGMError, match="maxval"):
        D.decode_pgm(b"P5\n1 1\n65535\n\x00\x00")


def test_raw_f64_roundtrip(tmp_path):
    v = np.random.default_rng(2).random((3, 4))
    D.write_raw_f64(tmp_path / "u.f64", v)
    np.testing.assert_array_equal(D.read_raw_f64(tmp_path / "u.f64", (3, 4)), v)
    with pytest.raises(ValueError):
        D.read_raw_f64(tmp_path / "u.f64", (3, 5))


def test_csv_and_kv(tmp_path):
    D.write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, float("nan")]])
    rows = D.read_csv(tmp_path / "t.csv")
    assert rows[0] == {"a": "1", "b": "0.1"} and rows[1]["b"] == "nan"
    kv = D.parse_kv("# comment\n\nlr = 0.01\nseed=3\n")
    assert kv == {"lr": "0.01", "seed": "3"}
    assert D.parse_kv(D.format_kv(kv)) == kv
    with pytest.raises(ValueError, match=":2"):
        D.parse_kv("a=1\nnot a pair")


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "x.bin"
    target.write_bytes(b"old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        D.atomic_write_bytes(target, b"new contents")
    assert target.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["x.bin"]


def test_manifest_records_checksums(tmp_path):
    inp = tmp_path / "in.txt"
    inp.write_text("hello")
    D.write_manifest(tmp_path / "m.txt", {"lr": 0.1}, 5, inputs=[inp], artifacts=[tmp_path / "later"], version="1")
    kv = D.parse_kv((tmp_path / "m.txt").read_text())
    assert kv["seed"] == "5" and kv["config.lr"] == "0.1"
    assert kv[f"input.{inp}"] == D.sha256_file(inp)
    assert kv[f"artifact.{tmp_path / 'later'}"] == "pending"


def test_spec_validation():
    for bad in (dict(n_classes=1), dict(noise=-1), dict(size=30), dict(shapes_min=4, shapes_max=2)):
        with pytest.raises(ValueError):
            D.SyntheticSpec(**bad)


def test_zero_shapes_gives_background():
    spec = D.SyntheticSpec(size=32, shapes_min=0, shapes_max=0, n_train=3, n_val=0, n_test=0)
    for img, lbl, scr in D.generate_synthetic(spec)["train"]:
        assert not lbl.any()
        assert set(np.unique(scr)) <= {0, UNLABELED}


def test_same_seed_gives_identical_files(tmp_path):
    spec = D.SyntheticSpec(size=32, radius_min=3, radius_max=6, n_train=3, n_val=1, n_test=1, seed=11)
    D.generate_synthetic(spec, tmp_path / "a")
    D.generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 16
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    items = D.load_split(tmp_path / "a" / "train")
    assert [i for i, *_ in items] == ["0000", "0001", "0002"]


def test_synthetic_structure():
    spec = D.SyntheticSpec(n_train=10, n_val=0, n_test=0, seed=3)
    for img, lbl, scr in D.generate_synthetic(spec)["train"]:
        assert img.shape == lbl.shape == (64, 64) and 0 <= img.min() and img.max() <= 1
        assert lbl.max() < 4
        lab = scr != UNLABELED
        assert np.all(scr[lab] == lbl[lab])
        # intensity bands are ordered by class
        means = [img[lbl == c].mean() for c in range(4) if (lbl == c).any()]
        assert means == sorted(means)


def test_default_spec_class_presence():
    data = D.generate_synthetic(D.SyntheticSpec())
    labels = [lbl for split in data.values() for _, lbl, _ in split]
    assert len(labels) == 300
    for c in range(4):
        assert np.mean([(lbl == c).any() for lbl in labels]) >= 0.9


def test_unsatisfiable_placement_names_the_constraint():
    spec = D.SyntheticSpec(size=16, shapes_min=8, shapes_max=8, radius_min=5, radius_max=6, max_retries=5)
    with pytest.raises(D.PlacementError, match="shapes_max"):
        D.synth_sample(spec, np.random.default_rng(0))
