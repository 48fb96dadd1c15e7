import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hbloc.io import (
    RunLockedError,
    file_sha256,
    read_chain_csv,
    read_json,
    read_matrix,
    read_vector_csv,
    run_lock,
    write_chain_csv,
    write_json,
    write_matrix,
    write_vector_csv,
)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(M=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_matrix_roundtrip_is_exact(tmp_path_factory, M):
    p = tmp_path_factory.mktemp("m") / "A"
    write_matrix(p, M, units="V", meta={"k": 1})
    out, hdr = read_matrix(p)
    assert np.array_equal(out, M)
    assert hdr["shape"] == list(M.shape) and hdr["units"] == "V"


def test_binary_layout(tmp_path):
    # documented layout: little-endian float64, row-major, no header bytes
    M = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    write_matrix(tmp_path / "A", M, rows=["a", "b"], cols=[0, 1, 2])
    raw = (tmp_path / "A.bin").read_bytes()
    assert len(raw) == 48
    assert np.array_equal(np.frombuffer(raw, "<f8"), [1, 2, 3, 4, 5, 6])
    hdr = json.loads((tmp_path / "A.json").read_text())
    assert hdr["format"] == "hbloc-matrix/1" and hdr["order"] == "C" and hdr["dtype"] == "<f8"
    assert hdr["rows"] == ["a", "b"]


def test_matrix_errors(tmp_path):
    with pytest.raises(ValueError, match="labels"):
        write_matrix(tmp_path / "A", np.zeros((2, 2)), rows=["a"])
    write_matrix(tmp_path / "A", np.zeros((2, 2)))
    (tmp_path / "A.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError, match="does not match"):
        read_matrix(tmp_path / "A")
    write_json(tmp_path / "B.json", {"format": "other"})
    with pytest.raises(ValueError, match="header"):
        read_matrix(tmp_path / "B")


@settings(max_examples=40, deadline=None)
@given(v=arrays(np.float64, st.integers(0, 20), elements=finite))
def test_vector_csv_roundtrip(tmp_path_factory, v):
    p = tmp_path_factory.mktemp("v") / "v.csv"
    write_vector_csv(p, v)
    assert np.array_equal(read_vector_csv(p), v)


def test_chain_csv(tmp_path):
    rng = np.random.default_rng(0)
    draws = rng.standard_normal((5, 3))
    write_chain_csv(tmp_path / "c.csv", np.arange(1, 6) * 10, draws, components=[7, 8, 9])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "iteration,component,value"
    assert lines[1].startswith("10,7,")
    its, comps, d = read_chain_csv(tmp_path / "c.csv")
    assert np.array_equal(its, np.arange(1, 6) * 10)
    assert np.array_equal(comps, [7, 8, 9])
    assert np.array_equal(d, draws)
    with pytest.raises(ValueError):
        write_chain_csv(tmp_path / "bad.csv", np.arange(4), draws)


def test_json_numpy_and_hash(tmp_path):
    write_json(tmp_path / "a.json", {"x": np.arange(3), "y": np.float64(0.5), "z": np.bool_(True)})
    assert read_json(tmp_path / "a.json") == {"x": [0, 1, 2], "y": 0.5, "z": True}
    h1 = file_sha256(tmp_path / "a.json")
    write_json(tmp_path / "b.json", {"z": True, "y": 0.5, "x": [0, 1, 2]})
    assert file_sha256(tmp_path / "b.json") == h1  # key order does not matter


def test_run_lock(tmp_path):
    with run_lock(tmp_path):
        assert (tmp_path / ".lock").exists()
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()
    with pytest.raises(KeyError):
        with run_lock(tmp_path):
            raise KeyError
    assert not (tmp_path / ".lock").exists()
