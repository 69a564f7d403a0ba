import numpy as np
import pytest

from conceptsplat.ply import PlyError, read_ply, write_ply


@pytest.mark.parametrize("binary", [True, False])
def test_round_trip(binary, rng):
    cols = {"x": rng.normal(size=50), "y": rng.normal(size=50).astype(np.float32),
            "label": rng.integers(0, 255, 50).astype(np.uint8)}
    out, comments = read_ply(write_ply(cols, binary=binary, comments=["hello world"]))
    assert comments == ["hello world"]
    assert list(out) == ["x", "y", "label"]
    for name in cols:
        assert out[name].dtype == cols[name].dtype
        assert np.array_equal(out[name], cols[name])


def test_header_layout():
    data = write_ply({"x": np.zeros(2), "red": np.zeros(2, np.uint8)}, binary=True)
    head = data.split(b"end_header\n")[0].decode()
    assert head.splitlines() == ["ply", "format binary_little_endian 1.0", "element vertex 2",
                                 "property double x", "property uchar red"]


def test_trailing_elements_are_ignored():
    text = ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
            "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "1.5\n2.5\n3 0 1 1\n")
    cols, _ = read_ply(text.encode())
    assert np.allclose(cols["x"], [1.5, 2.5])


@pytest.mark.parametrize("data", [
    b"not a ply",
    b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n\0\0\0\0",
    b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nend_header\n\0\0\0\0",
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quux x\nend_header\n1\n",
])
def test_malformed(data):
    with pytest.raises(PlyError):
        read_ply(data)


def test_write_rejects_ragged():
    with pytest.raises(PlyError):
        write_ply({"x": np.zeros(2), "y": np.zeros(3)})
