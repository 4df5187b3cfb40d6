import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atp.counters import OpCounter, counting, hold, matmul, product_counts, record
from atp.errors import InvalidInputError
from atp.matio import as_matrix, load_matrix, read_csv, read_matx, save_matrix, write_csv, write_matx


# matrix validation


def test_as_matrix_rules():
    assert as_matrix([[1, 2]]).dtype == np.float64
    assert as_matrix(np.ones((2, 2), np.float32)).dtype == np.float32
    for bad in ([1, 2], [[np.inf]], [[1 + 2j]], np.ones((0, 3)), [["a"]]):
        with pytest.raises(InvalidInputError):
            as_matrix(bad)


# MATX


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e300, 1e300)))
def test_matx_round_trip_f64(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("m") / "a.matx"
    write_matx(p, a)
    b = read_matx(p)
    assert b.dtype == np.float64 and np.array_equal(a, b)


def test_matx_layout_and_f32(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "a.matx"
    write_matx(p, a)
    raw = p.read_bytes()
    assert raw[:4] == b"MATX"
    assert struct.unpack("<BBHQQ", raw[4:24]) == (1, 1, 0, 2, 3)
    assert len(raw) == 24 + 6 * 4
    b = read_matx(p)
    assert b.dtype == np.float32 and np.array_equal(a, b)


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:4] + b"\x02" + r[5:],
    lambda r: r[:5] + b"\x07" + r[6:],
    lambda r: r[:6] + b"\x01\x00" + r[8:],
    lambda r: r[:-1],
    lambda r: r[:10],
])
def test_matx_rejects_corruption(tmp_path, mutate):
    p = tmp_path / "a.matx"
    write_matx(p, np.ones((2, 2)))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(InvalidInputError):
        read_matx(p)


def test_matx_rejects_nonfinite_payload(tmp_path):
    p = tmp_path / "a.matx"
    write_matx(p, np.ones((1, 2)))
    raw = bytearray(p.read_bytes())
    raw[24:32] = np.array([np.nan]).tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(InvalidInputError):
        read_matx(p)


# CSV and sniffing


def test_csv_round_trip_exact(tmp_path, rng):
    a = rng.standard_normal((4, 3))
    p = tmp_path / "a.csv"
    write_csv(p, a)
    assert np.array_equal(read_csv(p), a)


def test_csv_single_row_and_bad(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3\n")
    assert read_csv(p).shape == (1, 3)
    p.write_text("1,x\n")
    with pytest.raises(InvalidInputError):
        read_csv(p)


def test_load_and_save_dispatch(tmp_path, rng):
    a = rng.standard_normal((3, 2))
    save_matrix(tmp_path / "a.csv", a)
    save_matrix(tmp_path / "a.bin", a)
    assert (tmp_path / "a.bin").read_bytes()[:4] == b"MATX"
    assert np.array_equal(load_matrix(tmp_path / "a.csv"), a)
    assert np.array_equal(load_matrix(tmp_path / "a.bin"), a)


# counters


def test_product_counts():
    assert product_counts(2, 3, 4) == (24, 16)
    assert product_counts(5, 1, 5) == (25, 0)


def test_matmul_counts_vectors(rng):
    A = rng.standard_normal((4, 3))
    with counting() as c:
        matmul(A, np.ones(3))
        matmul(np.ones(4), A)
    assert c.multiplies == 12 + 12
    assert c.adds == 4 * 2 + 3 * 3


def test_counting_is_local_and_merges():
    record(100, 100)  # outside any region: ignored
    with counting() as outer:
        record(1, 2)
        hold(5)
        with counting() as inner:
            record(10, 20)
            hold(7)
        assert (inner.multiplies, inner.adds, inner.peak_values_held) == (10, 20, 7)
    assert (outer.multiplies, outer.adds, outer.peak_values_held) == (11, 22, 7)


def test_counter_arithmetic():
    a, b = OpCounter(1, 2, 3), OpCounter(10, 20, 1)
    assert a + b == OpCounter(11, 22, 3)
    assert a.scaled(4) == OpCounter(4, 8, 3)
    assert a.to_dict() == {"multiplies": 1, "adds": 2, "peak_values_held": 3}


def test_counting_threads_do_not_share_state():
    from concurrent.futures import ThreadPoolExecutor

    def work(n):
        with counting() as c:
            for _ in range(n):
                record(1)
        return c.multiplies

    with ThreadPoolExecutor(4) as pool:
        assert list(pool.map(work, range(1, 40))) == list(range(1, 40))
