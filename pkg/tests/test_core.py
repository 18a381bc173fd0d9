import numpy as np
import pytest

from nucleiseg import core
from nucleiseg.core import (RasterError, check_image, connected_components, instance_centroids,
                            minmax, normalize, read_image, read_instance_map, read_points,
                            read_tristate, write_image, write_instance_map, write_points,
                            write_tristate)


def test_check_image_shapes():
    assert check_image(np.zeros((4, 5))).shape == (4, 5, 1)
    with pytest.raises(RasterError):
        check_image(np.zeros((4, 5, 2)))
    with pytest.raises(RasterError):
        check_image(np.full((2, 2), np.nan))


def test_normalize_per_channel():
    img = np.stack([np.arange(4.0).reshape(2, 2), np.full((2, 2), 7.0), -np.ones((2, 2))], -1)
    out = normalize(img)
    np.testing.assert_allclose(out[..., 0], [[0, 1 / 3], [2 / 3, 1]])
    assert np.all(out[..., 1:] == 0)


def test_minmax_constant():
    assert np.all(minmax(np.full(5, 3.0)) == 0)


def test_connected_components_connectivity():
    m = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
    assert connected_components(m, 8).max() == 1
    lab4 = connected_components(m, 4)
    assert lab4.max() == 2 and lab4[0, 0] == 1 and lab4[1, 1] == 2
    with pytest.raises(ValueError):
        connected_components(m, 6)


def test_components_row_major_ids():
    m = np.zeros((5, 5), int)
    m[4, 0] = m[0, 4] = m[2, 2] = 1
    lab = connected_components(m)
    assert lab[0, 4] == 1 and lab[2, 2] == 2 and lab[4, 0] == 3


def test_centroids():
    lab = np.zeros((5, 5), int)
    lab[1:3, 1:3] = 4
    assert instance_centroids(lab) == {4: (1.5, 1.5)}


def test_image_roundtrip_8_and_16_bit(tmp_path, rng):
    img = rng.random((6, 7, 3))
    write_image(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=0.5 / 255 + 1e-12)
    grey = rng.random((6, 7))
    write_image(tmp_path / "b.png", grey, bits=16)
    np.testing.assert_allclose(read_image(tmp_path / "b.png")[..., 0], grey, atol=0.5 / 65535 + 1e-12)


def test_instance_and_tristate_roundtrip(tmp_path, rng):
    lab = rng.integers(0, 40000, size=(8, 8))
    write_instance_map(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(read_instance_map(tmp_path / "l.png"), lab)
    tri = rng.integers(-1, 2, size=(8, 8))
    write_tristate(tmp_path / "t.png", tri)
    np.testing.assert_array_equal(read_tristate(tmp_path / "t.png"), tri)


def test_atomic_write_leaves_no_temp(tmp_path):
    write_points(tmp_path / "p.csv", [(1, 2)])
    assert [p.name for p in tmp_path.iterdir()] == ["p.csv"]


def test_points_roundtrip_and_bounds(tmp_path):
    write_points(tmp_path / "p.csv", [(1, 2), (3, 4)])
    assert read_points(tmp_path / "p.csv", shape=(5, 5)).tolist() == [[1, 2], [3, 4]]
    with pytest.raises(RasterError, match="line 3"):
        read_points(tmp_path / "p.csv", shape=(4, 4))
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(RasterError, match="header"):
        read_points(tmp_path / "bad.csv")


def test_tristate_rejects_other_values():
    with pytest.raises(RasterError):
        core.check_tristate(np.array([[2]]))
