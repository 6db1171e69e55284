import struct

import numpy as np
import pytest

from olseg.dataio import (
    HEADER_SIZE,
    IGNORE,
    SURFACE_NAMES,
    BoundarySet,
    DataFormatError,
    Volume,
    mask_from_boundaries,
    read_annotations,
    read_split_manifest,
    read_volume,
    volume_file_size,
    window_slices,
    write_annotations,
    write_split_manifest,
    write_volume,
)


@pytest.fixture
def volume(rng):
    return Volume(rng.random((4, 20, 18)).astype(np.float32), spacing_um=(3.9, 11.7, 47.2))


def test_float_round_trip_is_bit_identical(tmp_path, volume):
    path = tmp_path / "v.vol"
    write_volume(volume, path)
    back = read_volume(path)
    np.testing.assert_array_equal(back.pixels, volume.pixels)
    assert back.spacing_um == volume.spacing_um
    assert path.stat().st_size == HEADER_SIZE + 4 * 20 * 18 * 4


@pytest.mark.parametrize("dtype,levels", [("uint8", 255), ("uint16", 65535)])
def test_integer_round_trip(tmp_path, rng, dtype, levels):
    codes = rng.integers(0, levels + 1, (3, 16, 16))
    vol = Volume(codes / levels)
    write_volume(vol, tmp_path / "v.vol", dtype=dtype)
    back = read_volume(tmp_path / "v.vol")
    np.testing.assert_array_equal(np.rint(back.pixels.astype(np.float64) * levels), codes)


def test_header_layout(tmp_path, volume):
    path = tmp_path / "v.vol"
    write_volume(volume, path, dtype="uint8")
    raw = path.read_bytes()
    assert HEADER_SIZE == 48
    magic, s, h, w, code = struct.unpack("<8s4I", raw[:24])
    assert (magic, s, h, w, code) == (b"OCTVOL01", 4, 20, 18, 1)
    assert struct.unpack("<3d", raw[24:48]) == volume.spacing_um


def test_full_size_8bit_file_size():
    assert volume_file_size((128, 1024, 512), "uint8") == 48 + 67_108_864


def test_truncated_and_corrupt_files(tmp_path, volume):
    path = tmp_path / "v.vol"
    write_volume(volume, path)
    raw = path.read_bytes()
    (tmp_path / "short.vol").write_bytes(raw[:-7])
    (tmp_path / "head.vol").write_bytes(raw[:20])
    (tmp_path / "magic.vol").write_bytes(b"NOTAVOL!" + raw[8:])
    (tmp_path / "long.vol").write_bytes(raw + b"\0" * 4)
    with pytest.raises(DataFormatError, match="truncated"):
        read_volume(tmp_path / "short.vol")
    with pytest.raises(DataFormatError, match="truncated"):
        read_volume(tmp_path / "head.vol")
    with pytest.raises(DataFormatError, match="magic"):
        read_volume(tmp_path / "magic.vol")
    with pytest.raises(DataFormatError):
        read_volume(tmp_path / "long.vol")


def test_unknown_dtype_code(tmp_path, volume):
    path = tmp_path / "v.vol"
    write_volume(volume, path)
    raw = bytearray(path.read_bytes())
    raw[20:24] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="dtype"):
        read_volume(path)


# -- annotations ----------------------------------------------------------------------------

def test_annotation_round_trip(tmp_path, rng):
    rows = np.sort(rng.uniform(0, 19, (3, 5, 8)), axis=1)
    valid = rng.random(rows.shape) > 0.2
    write_annotations(BoundarySet(rows, valid), tmp_path / "a.csv")
    back = read_annotations(tmp_path / "a.csv", (3, 20, 8))
    np.testing.assert_array_equal(back.valid, valid)
    np.testing.assert_array_equal(back.rows[valid], rows[valid])
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "slice,surface,column,row,valid"


@pytest.mark.parametrize("line,match", [
    ("0,BOGUS,0,3.0,1", "unknown surface"),
    ("0,ILM,99,3.0,1", "out of range"),
    ("0,ILM,0,30.0,1", "outside"),
    ("0,ILM,0,abc,1", "malformed"),
])
def test_bad_annotation_rows(tmp_path, line, match):
    path = tmp_path / "a.csv"
    path.write_text("slice,surface,column,row,valid\n" + line + "\n")
    with pytest.raises(DataFormatError, match=match):
        read_annotations(path, (1, 20, 4))


def test_duplicate_annotation_rejected(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("slice,surface,column,row,valid\n0,ILM,1,3.0,1\n0,ILM,1,4.0,1\n")
    with pytest.raises(DataFormatError, match="duplicate"):
        read_annotations(path, (1, 20, 4))


def test_missing_columns_are_invalid(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("slice,surface,column,row,valid\n0,ILM,1,3.0,1\n")
    b = read_annotations(path, (1, 20, 4))
    assert b.valid.sum() == 1 and b.valid[0, 0, 1]


# -- splits ----------------------------------------------------------------------------------

def test_split_round_trip(tmp_path):
    splits = {"train": ["a", "b"], "validation": ["c"], "test": ["d", "e"]}
    write_split_manifest(splits, tmp_path / "s.txt")
    assert read_split_manifest(tmp_path / "s.txt") == splits


def test_split_overlap_rejected(tmp_path):
    (tmp_path / "s.txt").write_text("[train]\na\n[test]\na\n")
    with pytest.raises(DataFormatError, match="both"):
        read_split_manifest(tmp_path / "s.txt")


# -- windows -------------------------------------------------------------------------------------

def test_windows(volume):
    px = volume.pixels
    np.testing.assert_array_equal(window_slices(volume, 2, 3), px[[1, 2, 3]])
    np.testing.assert_array_equal(window_slices(volume, 0, 3), px[[0, 0, 1]])
    np.testing.assert_array_equal(window_slices(volume, 3, 5), px[[1, 2, 3, 3, 3]])
    np.testing.assert_array_equal(window_slices(volume, 1, 1), px[[1]])


def test_window_always_has_n_slices(volume):
    for c in range(4):
        for n in (1, 3, 5, 7):
            assert window_slices(volume, c, n).shape == (n, 20, 18)


@pytest.mark.parametrize("centre,n,err", [(0, 2, ValueError), (0, 9, ValueError), (4, 3, IndexError)])
def test_window_errors(volume, centre, n, err):
    with pytest.raises(err):
        window_slices(volume, centre, n)


# -- masks ----------------------------------------------------------------------------------------

def test_mask_interval_example():
    rows = np.repeat(np.array([10.0, 20, 30, 40, 50])[:, None], 6, axis=1)
    m = mask_from_boundaries(rows, None, 64, 6)
    assert m[5, 0] == 0 and m[15, 0] == 1 and m[60, 0] == 5
    assert m[10, 0] == 1 and m[9, 0] == 0


def test_touching_boundaries_make_empty_class():
    rows = np.array([[10.0], [20.0], [20.0], [40.0], [50.0]])
    m = mask_from_boundaries(rows, None, 64, 1)[:, 0]
    assert 2 not in m and m[20] == 3


def test_invalid_columns_ignored():
    rows = np.repeat(np.array([10.0, 20, 30, 40, 50])[:, None], 3, axis=1)
    valid = np.ones((5, 3), dtype=bool)
    valid[2, 1] = False
    m = mask_from_boundaries(rows, valid, 64, 3)
    assert np.all(m[:, 1] == IGNORE) and np.all(m[:, 0] != IGNORE)


def test_unordered_boundaries_rejected():
    rows = np.array([[10.0], [30.0], [20.0], [40.0], [50.0]])
    with pytest.raises(ValueError):
        mask_from_boundaries(rows, None, 64, 1)


def test_mask_re_extraction(rng):
    h, w = 80, 30
    rows = np.sort(rng.uniform(1, h - 2, (5, w)), axis=0)
    m = mask_from_boundaries(rows, None, h, w)
    for k in range(1, 6):
        for u in range(w):
            first = np.flatnonzero(m[:, u] >= k)[0]
            assert first == np.ceil(rows[k - 1, u])
            assert abs(first - rows[k - 1, u]) < 1


def test_boundary_set_shape_checked():
    with pytest.raises(ValueError):
        BoundarySet(np.zeros((2, 4, 8)), None)
    assert len(SURFACE_NAMES) == 5
