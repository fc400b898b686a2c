import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stgcl.data import (DataError, TimeSeriesDataset, ZScore, batch_iter, read_series_csv, read_stgs,
                        split_counts, synth_generate, window_count, write_stgs)


@pytest.mark.parametrize("total,expected", [
    (16992, (10172, 3375, 3376)),
    (17856, (10690, 3548, 3549)),
])
def test_table_window_counts(total, expected):
    steps = split_counts(total)
    assert tuple(window_count(s) for s in steps) == expected


@given(st.integers(120, 50000))
def test_split_partitions_cover_the_series(total):
    tr, va, te = split_counts(total)
    assert tr + va + te == total
    assert 0 <= 0.6 * total - tr < 1 + 1e-9 and 0 <= 0.2 * total - va < 1 + 1e-9


def test_split_rejects_bad_ratios_and_short_series():
    with pytest.raises(DataError):
        split_counts(1000, (0.5, 0.2, 0.2))
    with pytest.raises(DataError):
        split_counts(50)


def test_dataset_rejects_inconsistent_day_length():
    with pytest.raises(DataError, match="1440"):
        TimeSeriesDataset(np.ones((500, 2)), interval_minutes=5, steps_per_day=48)


def test_zscore_uses_train_split_only():
    series = np.concatenate([np.arange(600.0), np.full(400, 1e6)])[:, None] * np.ones((1, 2))
    ds = TimeSeriesDataset(series, interval_minutes=30, steps_per_day=48)
    train = series[:600]
    assert ds.scaler.mean == pytest.approx(train.mean())
    assert ds.scaler.std == pytest.approx(train.std())
    z = ZScore(3.0, 2.0)
    np.testing.assert_allclose(z.inverse(z.apply([1.0, 5.0])), [1.0, 5.0])


def test_windows_line_up_with_the_series(small_data):
    ds, _ = small_data
    inst = ds.instances("val")
    b = inst.gather([0, 5])
    start = ds.bounds("val")[0]
    np.testing.assert_allclose(ds.scaler.inverse(b.x[1, :, :, 0]), ds.series[start + 5:start + 17])
    np.testing.assert_allclose(b.y[1, :, :, 0], ds.series[start + 17:start + 29])
    np.testing.assert_allclose(b.x[0, :, 0, 1], (np.arange(start, start + 12) % 48) / 48)
    assert b.slots.tolist() == [start % 48, (start + 5) % 48]
    np.testing.assert_allclose(b.full[1, :12], b.x[1, :, :, 0])


def test_windows_never_cross_partitions(small_data):
    ds, _ = small_data
    for name in ("train", "val", "test"):
        lo, hi = ds.bounds(name)
        inst = ds.instances(name)
        last = inst.gather([len(inst) - 1])
        assert last.starts[0] + 24 == hi
        assert not last.has_next[0]
        np.testing.assert_array_equal(last.next_x, last.x[..., 0])


def test_batch_iter_is_keyed_and_complete(small_data):
    ds, _ = small_data
    inst = ds.instances("train")
    a = [b.index.tolist() for b in batch_iter(inst, 16, seed=1, epoch=2)]
    b = [b.index.tolist() for b in batch_iter(inst, 16, seed=1, epoch=2)]
    c = [b.index.tolist() for b in batch_iter(inst, 16, seed=1, epoch=3)]
    assert a == b and a != c
    assert sorted(sum(a, [])) == list(range(len(inst)))
    assert len(a[-1]) == len(inst) % 16 or len(a[-1]) == 16


def test_batch_size_one_is_rejected_with_contrast(small_data):
    ds, _ = small_data
    with pytest.raises(DataError):
        next(batch_iter(ds.instances("train"), 1))
    assert len(next(batch_iter(ds.instances("train"), 1, contrast=False))) == 1


def _autocorr(x, lag):
    x = x - x.mean()
    return float((x[:-lag] * x[lag:]).sum() / (x * x).sum())


def test_synth_has_daily_periodicity():
    ds = synth_generate()
    assert ds.series.shape == (30 * 48, 15)
    day = np.mean([_autocorr(ds.series[:, n], 48) for n in range(15)])
    half = np.mean([_autocorr(ds.series[:, n], 24) for n in range(15)])
    assert day > 0.5 > half


def test_synth_is_seeded():
    a, b, c = synth_generate(seed=4), synth_generate(seed=4), synth_generate(seed=5)
    np.testing.assert_array_equal(a.series, b.series)
    assert not np.array_equal(a.series, c.series)


def test_synth_two_nodes():
    ds = synth_generate(num_nodes=2, days=3)
    assert ds.series.shape == (144, 2)


def test_stgs_round_trip(tmp_path, rng):
    series = rng.normal(size=(100, 3))
    write_stgs(tmp_path / "s.stgs", series, 288, 5)
    back, spd, interval = read_stgs(tmp_path / "s.stgs")
    np.testing.assert_array_equal(back, series)
    assert (spd, interval) == (288, 5)


def test_stgs_rejects_corruption(tmp_path):
    write_stgs(tmp_path / "s.stgs", np.ones((10, 2)), 288, 5)
    raw = (tmp_path / "s.stgs").read_bytes()
    (tmp_path / "bad.stgs").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        read_stgs(tmp_path / "bad.stgs")
    (tmp_path / "short.stgs").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        read_stgs(tmp_path / "short.stgs")


def test_series_csv(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n3,4\n")
    arr, header = read_series_csv(tmp_path / "s.csv")
    assert header == ["a", "b"]
    np.testing.assert_array_equal(arr, [[1, 2], [3, 4]])
