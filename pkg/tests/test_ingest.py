import numpy as np
import pytest

from mvrestore.errors import DatasetError
from mvrestore.geometry import CameraPose, Intrinsics, normalize_quaternion
from mvrestore.ingest import depth_mask, load_dataset, read_pfm, write_dataset, write_pfm

from conftest import make_image


def _dataset(n=3):
    rng = np.random.default_rng(1)
    K = Intrinsics(10.0, 11.0, 4.0, 3.0, 8, 6)
    out = []
    for i in range(n):
        q = rng.normal(size=4)
        depth = rng.uniform(0.5, 4.0, size=(6, 8)).astype(np.float32)
        depth[0, i] = np.nan
        depth[1, i] = 0.0
        img = rng.integers(0, 256, size=(6, 8, 3), dtype=np.uint8)
        out.append(make_image(i + 1, CameraPose(normalize_quaternion(q), rng.normal(size=3)), K, depth, img))
    return out


def test_write_load_round_trip(tmp_path):
    images = _dataset()
    write_dataset(tmp_path, images)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == len(images)
    for a, b in zip(images, loaded):
        assert a.equals(b)


def test_missing_depth_values_are_masked(tmp_path):
    write_dataset(tmp_path, _dataset())
    im = load_dataset(tmp_path)[1]
    assert not im.has_depth[0, 1]
    assert not im.has_depth[1, 1]
    assert im.has_depth.sum() == 6 * 8 - 2


@pytest.mark.parametrize(
    "values,expected",
    [([1.0, 0.0, -1.0, np.nan, np.inf, 1e-30], [True, False, False, False, False, True])],
)
def test_depth_mask(values, expected):
    assert depth_mask(np.array(values, dtype=np.float32)).tolist() == expected


def test_pfm_round_trip_keeps_row_order(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(3, 4)
    data[2, 3] = np.nan
    write_pfm(tmp_path / "d.pfm", data)
    back = read_pfm(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back.view(np.uint32), data.view(np.uint32))


def test_pfm_big_endian_is_read(tmp_path):
    data = np.array([[1.5, 2.5], [3.5, 4.5]], dtype=np.float32)
    body = np.flipud(data).astype(">f4").tobytes()
    (tmp_path / "be.pfm").write_bytes(b"Pf\n2 2\n1.0\n" + body)
    np.testing.assert_array_equal(read_pfm(tmp_path / "be.pfm"), data)


def test_color_pfm_rejected(tmp_path):
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(DatasetError, match="grayscale"):
        read_pfm(tmp_path / "c.pfm")


def test_quaternion_normalized_on_load(tmp_path):
    write_dataset(tmp_path, _dataset(1))
    p = tmp_path / "images.txt"
    lines = p.read_text().splitlines()
    f = lines[1].split()
    f[1:5] = ["2", "0", "0", "0"]
    p.write_text("\n".join([lines[0], " ".join(f)]) + "\n")
    im = load_dataset(tmp_path)[0]
    np.testing.assert_array_equal(im.pose.qvec, [1.0, 0.0, 0.0, 0.0])


def _corrupt(root, fname, fn):
    p = root / fname
    p.write_text(fn(p.read_text()))


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda r: (r / "cameras.txt").unlink(), "missing dataset file"),
        (lambda r: (r / "images" / "im001.png").unlink(), "missing image file"),
        (lambda r: (r / "depths" / "im002.pfm").unlink(), "missing depth file"),
        (lambda r: _corrupt(r, "images.txt", lambda t: t.replace(" 1 im001", " 9 im001")), "unknown camera"),
        (lambda r: _corrupt(r, "images.txt", lambda t: t.replace("\n2 ", "\n1 ")), "duplicate image id"),
        (lambda r: _corrupt(r, "cameras.txt", lambda t: t.replace("PINHOLE", "OPENCV")), "PINHOLE"),
        (lambda r: _corrupt(r, "cameras.txt", lambda t: t.replace(" 8 6 ", " 9 6 ")), "dimension mismatch"),
    ],
)
def test_dataset_errors(tmp_path, mutate, match):
    write_dataset(tmp_path, _dataset())
    mutate(tmp_path)
    with pytest.raises(DatasetError, match=match):
        load_dataset(tmp_path)


def test_zero_quaternion_is_dataset_error(tmp_path):
    write_dataset(tmp_path, _dataset(1))
    p = tmp_path / "images.txt"
    lines = p.read_text().splitlines()
    f = lines[1].split()
    f[1:5] = ["0", "0", "0", "0"]
    p.write_text(lines[0] + "\n" + " ".join(f) + "\n")
    with pytest.raises(DatasetError, match="invalid pose"):
        load_dataset(tmp_path)


def test_comments_and_blank_lines_ignored(tmp_path):
    write_dataset(tmp_path, _dataset(2))
    p = tmp_path / "images.txt"
    p.write_text("\n# extra comment\n\n" + p.read_text() + "\n\n")
    assert len(load_dataset(tmp_path)) == 2


def test_images_sorted_by_id(tmp_path):
    write_dataset(tmp_path, _dataset(3))
    p = tmp_path / "images.txt"
    lines = p.read_text().splitlines()
    p.write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
    assert [im.id for im in load_dataset(tmp_path)] == [1, 2, 3]


def test_posed_image_is_read_only():
    im = make_image()
    with pytest.raises(ValueError):
        im.image[0, 0, 0] = 1
    with pytest.raises(ValueError):
        im.depth[0, 0] = 1.0


def test_posed_image_rejects_wrong_dtype():
    with pytest.raises(DatasetError):
        make_image(image=np.zeros((6, 8, 3), dtype=np.float32))
