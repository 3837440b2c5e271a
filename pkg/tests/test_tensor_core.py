import numpy as np
import pytest
from hypothesis import given, strategies as st

from ancmatch.errors import FormatError, InvalidArgumentError
from ancmatch.tensor_core import Rng, permute, rng_fill, tns_read, tns_write


class TestPermute:
    def test_involution_on_rank4(self, rng):
        t = rng.normal(0, 1, (2, 3, 4, 5))
        assert np.array_equal(permute(permute(t, (2, 3, 0, 1)), (2, 3, 0, 1)), t)

    def test_shape_arithmetic(self, rng):
        t = rng.normal(0, 1, (1, 2, 3, 4))
        assert permute(t, (2, 3, 0, 1)).shape == (3, 4, 1, 2)

    def test_exhaustive_index_check(self, rng):
        t = rng.normal(0, 1, (2, 2, 2, 2))
        p = permute(t, (2, 3, 0, 1))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    for l in range(2):
                        assert p[i, j, k, l] == t[k, l, i, j]

    def test_bad_order_rejected(self, rng):
        t = rng.normal(0, 1, (2, 3))
        with pytest.raises(InvalidArgumentError):
            permute(t, (0, 0))
        with pytest.raises(InvalidArgumentError):
            permute(t, (0, 1, 2))

    @given(st.data())
    def test_inverse_is_identity(self, data):
        rank = data.draw(st.integers(1, 5))
        shape = tuple(data.draw(st.integers(1, 4)) for _ in range(rank))
        order = tuple(data.draw(st.permutations(range(rank))))
        t = Rng(data.draw(st.integers(0, 10 ** 6))).normal(0, 1, shape)
        inverse = tuple(np.argsort(order))
        assert np.array_equal(permute(permute(t, order), inverse), t)


class TestTnsFormat:
    def test_scalar_file_layout(self, tmp_path):
        path = tmp_path / "s.tns"
        tns_write(np.array([1.0]), path)
        blob = path.read_bytes()
        # 8-byte header + one u32 extent + one float64 payload
        assert len(blob) == 8 + 4 + 8
        assert blob[:4] == b"ANCT"
        assert blob[4] == 1  # version
        assert blob[5] == 1  # float64
        assert blob[6] == 1  # rank

    def test_roundtrip_float32(self, tmp_path, rng):
        t = rng.normal(0, 1, (3, 4), dtype=np.float32)
        tns_write(t, tmp_path / "t.tns")
        back = tns_read(tmp_path / "t.tns")
        assert back.dtype == np.float32
        assert np.array_equal(back, t)

    def test_rank0_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            tns_write(np.array(1.0), tmp_path / "bad.tns")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tns"
        path.write_bytes(b"XXXX" + bytes([1, 1, 1, 0]) + (4).to_bytes(4, "little") + b"\0" * 32)
        with pytest.raises(FormatError):
            tns_read(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.tns"
        # declares 2x2 float64 but carries only 24 payload bytes
        path.write_bytes(
            b"ANCT" + bytes([1, 1, 2, 0])
            + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"\0" * 24
        )
        with pytest.raises(FormatError):
            tns_read(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "odd.tns"
        path.write_bytes(b"ANCT" + bytes([1, 7, 1, 0]) + (1).to_bytes(4, "little") + b"\0" * 8)
        with pytest.raises(FormatError):
            tns_read(path)

    @given(st.data())
    def test_roundtrip_property(self, tmp_path_factory, data):
        rank = data.draw(st.integers(1, 5))
        shape = tuple(data.draw(st.integers(1, 4)) for _ in range(rank))
        dtype = data.draw(st.sampled_from([np.float32, np.float64]))
        t = Rng(data.draw(st.integers(0, 10 ** 6))).normal(0, 1, shape, dtype=dtype)
        path = tmp_path_factory.mktemp("tns") / "p.tns"
        tns_write(t, path)
        back = tns_read(path)
        assert back.dtype == t.dtype
        assert np.array_equal(back, t)


class TestRng:
    def test_uniform_range(self):
        vals = rng_fill(Rng(7), (10_000,), "uniform", lo=0.0, hi=1.0)
        assert vals.min() >= 0.0 and vals.max() < 1.0

    def test_same_seed_same_stream(self):
        a = rng_fill(Rng(42), (100,), "normal")
        b = rng_fill(Rng(42), (100,), "normal")
        assert np.array_equal(a, b)

    def test_normal_moments(self):
        vals = rng_fill(Rng(3), (100_000,), "normal", mean=0.0, std=1.0)
        assert abs(vals.mean()) < 0.02
        assert abs(vals.std() - 1.0) < 0.02

    def test_invalid_params(self):
        with pytest.raises(InvalidArgumentError):
            rng_fill(Rng(0), (3,), "uniform", lo=1.0, hi=1.0)
        with pytest.raises(InvalidArgumentError):
            rng_fill(Rng(0), (3,), "normal", std=0.0)
        with pytest.raises(InvalidArgumentError):
            rng_fill(Rng(0), (3,), "lognormal")

    def test_children_are_independent_but_deterministic(self):
        a1 = Rng(5).child(1).normal(0, 1, (10,))
        a2 = Rng(5).child(1).normal(0, 1, (10,))
        b = Rng(5).child(2).normal(0, 1, (10,))
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)
