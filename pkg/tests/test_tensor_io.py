"""Container and CSV format tests.

The binary layout checks below spell the expected bytes out by hand rather
than calling the writer twice, so a format regression cannot hide behind a
matching reader bug.
"""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdtomo.tensor_io import (
    AXIS_LABELS,
    BadMagicError,
    HyperTensor,
    SpectraTable,
    TruncatedFileError,
    UnsupportedVersionError,
    WavelengthGrid,
    export_spectra_csv,
    import_spectra_csv,
    load_tensor,
    save_tensor,
)


def test_header_bytes_2x2_zeros(tmp_path):
    # Hand-assembled expectation for a [row, col] 2x2 zero tensor.
    t = HyperTensor(np.zeros((2, 2)), ("row", "col"))
    path = tmp_path / "z.amdt"
    save_tensor(t, path)
    raw = path.read_bytes()
    expect = b"AMDT"
    expect += struct.pack("<HH", 1, 2)
    expect += struct.pack("<BQ", AXIS_LABELS["row"], 2)
    expect += struct.pack("<BQ", AXIS_LABELS["col"], 2)
    expect += b"\x00" * (4 * 8)
    assert raw == expect
    assert len(raw) == 4 + 2 + 2 + 2 * 9 + 32


def test_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(7)
    t = HyperTensor(rng.normal(size=(3, 4, 5)), ("view", "row", "col"))
    p1, p2 = tmp_path / "a.amdt", tmp_path / "b.amdt"
    save_tensor(t, p1)
    save_tensor(HyperTensor(t.data.copy(), t.axis_labels), p2)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=50, deadline=None)
@given(
    dims=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
)
def test_round_trip_identity(tmp_path_factory, dims, seed):
    labels = tuple(list(AXIS_LABELS)[: len(dims)])
    rng = np.random.default_rng(seed)
    t = HyperTensor(rng.normal(size=tuple(dims)), labels)
    path = tmp_path_factory.mktemp("rt") / "t.amdt"
    save_tensor(t, path)
    back = load_tensor(path)
    assert back.axis_labels == t.axis_labels
    assert back.dims == t.dims
    np.testing.assert_array_equal(back.data, t.data)


def test_flat_index_matches_nested_loop_oracle(tmp_path):
    # Row-major promise: position of element (i, j, k) in the payload is
    # i*d1*d2 + j*d2 + k.  Checked against an explicit triple loop.
    dims = (2, 3, 4)
    vals = np.arange(np.prod(dims), dtype=np.float64).reshape(dims) * 1.5 + 0.25
    t = HyperTensor(vals, ("view", "row", "col"))
    path = tmp_path / "o.amdt"
    save_tensor(t, path)
    payload = np.frombuffer(path.read_bytes()[4 + 4 + 3 * 9:], dtype="<f8")
    flat_pos = 0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                assert payload[flat_pos] == vals[i, j, k]
                flat_pos += 1


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.amdt"
    p.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(BadMagicError):
        load_tensor(p)


def test_bad_version(tmp_path):
    p = tmp_path / "v9.amdt"
    p.write_bytes(b"AMDT" + struct.pack("<HH", 9, 0))
    with pytest.raises(UnsupportedVersionError):
        load_tensor(p)


def test_truncated_payload(tmp_path):
    t = HyperTensor(np.ones((4, 4)), ("row", "col"))
    p = tmp_path / "cut.amdt"
    save_tensor(t, p)
    whole = p.read_bytes()
    p.write_bytes(whole[:-24])
    with pytest.raises(TruncatedFileError):
        load_tensor(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "h.amdt"
    p.write_bytes(b"AMDT\x01")
    with pytest.raises(TruncatedFileError):
        load_tensor(p)


def test_non_finite_rejected():
    bad = np.ones((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        HyperTensor(bad, ("row", "col"))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        HyperTensor(bad, ("row", "col"))


def test_label_validation():
    with pytest.raises(ValueError):
        HyperTensor(np.ones((2, 2)), ("row", "banana"))
    with pytest.raises(ValueError):
        HyperTensor(np.ones((2, 2)), ("row", "row"))
    with pytest.raises(ValueError):
        HyperTensor(np.ones((2, 2, 2)), ("row", "col"))


def test_axis_lookup():
    t = HyperTensor(np.zeros((2, 3, 4, 5)), ("view", "row", "col", "wavelength"))
    assert t.axis("wavelength") == 3
    assert t.axis("view") == 0
    with pytest.raises(KeyError):
        t.axis("material")


def test_wavelength_grid_centers():
    g = WavelengthGrid(1.5, 4.5, 1200)
    c = g.centers()
    assert c.size == 1200
    assert g.bin_width == pytest.approx(0.0025)
    assert c[0] == pytest.approx(1.5 + 0.00125)
    assert c[-1] == pytest.approx(4.5 - 0.00125)
    assert g.nearest_bin(c[37]) == 37


def test_spectra_csv_line_count(tmp_path):
    g = WavelengthGrid(1.5, 4.5, 1200)
    mu = np.abs(np.random.default_rng(0).normal(size=(3, 1200))) + 0.01
    tab = SpectraTable(("a", "b", "c"), g, mu)
    p = tmp_path / "s.csv"
    export_spectra_csv(tab, p)
    lines = p.read_text().splitlines()
    assert len(lines) == 1201
    assert lines[0] == "lambda_angstrom,a,b,c"


def test_spectra_csv_round_trip(tmp_path):
    # 9 significant decimal digits guarantee 5e-9 relative, worst case at
    # mantissa 1.0; assert exactly that bound.
    g = WavelengthGrid(1.5, 4.5, 600)
    rng = np.random.default_rng(3)
    mu = 10.0 ** rng.uniform(-3, 1, size=(2, 600))
    tab = SpectraTable(("m1", "m2"), g, mu)
    p = tmp_path / "rt.csv"
    export_spectra_csv(tab, p)
    back = import_spectra_csv(p)
    assert back.names == tab.names
    rel = np.abs(back.mu - tab.mu) / np.abs(tab.mu)
    assert rel.max() <= 5e-9
    np.testing.assert_allclose(back.grid.centers(), g.centers(), rtol=1e-8)


def test_spectra_csv_zeros(tmp_path):
    g = WavelengthGrid(2.0, 3.0, 5)
    tab = SpectraTable(("x",), g, np.zeros((1, 5)))
    p = tmp_path / "z.csv"
    export_spectra_csv(tab, p)
    back = import_spectra_csv(p)
    np.testing.assert_array_equal(back.mu, 0.0)


def test_spectra_table_validation():
    g = WavelengthGrid(1.5, 4.5, 10)
    with pytest.raises(ValueError):
        SpectraTable(("a", "a"), g, np.ones((2, 10)))
    with pytest.raises(ValueError):
        SpectraTable(("a",), g, np.ones((1, 9)))
    with pytest.raises(ValueError):
        SpectraTable(("a",), g, -np.ones((1, 10)))
    with pytest.raises(ValueError):
        SpectraTable(("a,b",), g, np.ones((1, 10)))
    with pytest.raises(ValueError):
        WavelengthGrid(4.5, 1.5, 10)
