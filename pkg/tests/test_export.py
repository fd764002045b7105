import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rsmp.export import (
    ensemble_from_bytes,
    ensemble_from_csv,
    ensemble_to_bytes,
    ensemble_to_csv,
    read_ensemble,
    write_ensemble,
)
from rsmp.paths import TimeGrid, TrajectoryEnsemble

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def ensembles(draw):
    M = draw(st.integers(1, 5))
    n_nodes = draw(st.sampled_from([M, M + 1]))
    N = draw(st.integers(1, 4))
    tail = draw(st.sampled_from([(), (1,), (2,), (2, 2)]))
    values = draw(arrays(np.float64, (n_nodes, N) + tail, elements=finite))
    label = draw(st.text(min_size=0, max_size=12))
    seed = draw(st.integers(0, 2**32))
    return TrajectoryEnsemble(TimeGrid(draw(st.floats(0.1, 10.0)), M), values, label, seed)


def _same(a, b):
    assert a.grid == b.grid and a.label == b.label and a.seed == b.seed
    assert a.values.shape == b.values.shape
    np.testing.assert_array_equal(a.values, b.values)


class TestRoundTrip:
    @given(ensembles())
    def test_binary(self, ens):
        _same(ens, ensemble_from_bytes(ensemble_to_bytes(ens)))

    @given(ensembles())
    def test_csv(self, ens):
        _same(ens, ensemble_from_csv(ensemble_to_csv(ens)))

    def test_files(self, tmp_path):
        ens = TrajectoryEnsemble(TimeGrid(1.0, 3), np.arange(8.0).reshape(4, 2, 1) / 3, "x state", 9)
        paths = write_ensemble(ens, tmp_path / "x", "both")
        assert sorted(p.suffix for p in paths) == [".bin", ".csv"]
        for p in paths:
            _same(ens, read_ensemble(p))


class TestMalformed:
    def test_bad_magic(self):
        ens = TrajectoryEnsemble(TimeGrid(1.0, 2), np.zeros((3, 2)), "x", 0)
        data = ensemble_to_bytes(ens)
        with pytest.raises(ValueError):
            ensemble_from_bytes(b"XXXXXXXX" + data[8:])
        with pytest.raises(ValueError):
            ensemble_from_bytes(data + b"\0")

    def test_missing_metadata(self):
        with pytest.raises(ValueError):
            ensemble_from_csv("path,node,time,v\n")

    def test_unknown_format(self, tmp_path):
        ens = TrajectoryEnsemble(TimeGrid(1.0, 2), np.zeros((3, 2)), "x", 0)
        with pytest.raises(ValueError):
            write_ensemble(ens, tmp_path / "x", "parquet")
