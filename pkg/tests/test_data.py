import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stgat_fuser.data import (CHANNELS, RawSeries, ScalerParams, apply_scaler, chrono_split, fit_scaler, invert_scaler,
                              load_csv, make_windows, num_windows, prepare, synthesize, write_csv)
from stgat_fuser.errors import ConstantChannelError, DuplicateTimestampError, SchemaError, ValidationError

HEADER = "timestamp,mox1,mox2,mox3,mox4,ec,temp,rh,ref_o3\n"


def write(tmp_path, body, header=HEADER):
    path = tmp_path / "c.csv"
    path.write_text(header + body, encoding="utf-8")
    return path


def row(ts, v=1.0):
    return f"{ts}," + ",".join(str(v + k) for k in range(8)) + "\n"


def series_of(length, channels=None, seed=0):
    rng = np.random.default_rng(seed)
    ch = rng.normal(size=(length, 7)) if channels is None else channels
    return RawSeries(3600 * np.arange(length), ch, rng.normal(size=length))


def test_load_three_rows(tmp_path):
    s = load_csv(write(tmp_path, row("2020-01-01T00:00:00") + row("2020-01-01T01:00:00") + row(1577844000)))
    assert len(s) == 3 and s.channel_names == CHANNELS and s.dropped_rows == 0
    assert list(np.diff(s.timestamps)) == [3600, 3600]
    assert s.target[0] == 8.0


def test_empty_cell_dropped(tmp_path):
    bad = "3600,1,2,,4,5,6,7,8\n"
    s = load_csv(write(tmp_path, row(0) + bad + row(7200)))
    assert len(s) == 2 and s.dropped_rows == 1


def test_rows_sorted_by_time(tmp_path):
    s = load_csv(write(tmp_path, row(7200, 3.0) + row(0, 1.0) + row(3600, 2.0)))
    np.testing.assert_array_equal(s.timestamps, [0, 3600, 7200])
    np.testing.assert_array_equal(s.channels[:, 0], [1, 2, 3])


def test_duplicate_timestamp(tmp_path):
    with pytest.raises(DuplicateTimestampError, match="duplicate"):
        load_csv(write(tmp_path, row(0) + row(3600) + row(0)))


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(SchemaError, match=":3:"):
        load_csv(write(tmp_path, row(0) + "3600,1,2,abc,4,5,6,7,8\n"))
    with pytest.raises(SchemaError, match=":2: expected 9 fields"):
        load_csv(write(tmp_path, "0,1,2\n"))


def test_header_checks(tmp_path):
    with pytest.raises(SchemaError, match="header"):
        load_csv(write(tmp_path, row(0), header="time,a,b\n"))
    path = write(tmp_path, "0,1,2,3,4,5,6,7\n", header="timestamp,mox1,mox2,mox3,mox4,ec,temp,ref_o3\n")
    assert load_csv(path).num_channels == 6
    with pytest.raises(SchemaError, match="expected channels"):
        load_csv(path, channels=CHANNELS)


def test_csv_round_trip(tmp_path):
    s = synthesize(50, seed=3)
    back = load_csv(write_csv(s, tmp_path / "s.csv"))
    np.testing.assert_array_equal(back.channels, s.channels)
    np.testing.assert_array_equal(back.target, s.target)
    np.testing.assert_array_equal(back.timestamps, s.timestamps)


def test_synthesize_deterministic():
    a, b = synthesize(300, seed=7), synthesize(300, seed=7)
    assert a.channels.tobytes() == b.channels.tobytes() and a.target.tobytes() == b.target.tobytes()
    assert synthesize(300, seed=8).channels.tobytes() != a.channels.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mox_correlation_positive_but_imperfect(seed):
    s = synthesize(2000, seed=seed)
    for k in range(4):
        r = np.corrcoef(s.channels[:, k], s.target)[0, 1]
        assert 0.2 < r < 0.99, (k, r)


def test_synthesize_validation():
    with pytest.raises(ValidationError, match="window_len"):
        synthesize(13, seed=0)
    from stgat_fuser.data import SynthParams
    with pytest.raises(ValidationError, match="degenerate"):
        synthesize(100, 0, SynthParams(ozone_diurnal=0, ozone_noise=0, drift_scale=0))


def test_split_sizes_and_partition():
    s = series_of(100)
    parts = chrono_split(s)
    assert [len(p) for p in parts] == [80, 10, 10]
    np.testing.assert_array_equal(np.concatenate([p.channels for p in parts]), s.channels)
    np.testing.assert_array_equal(np.concatenate([p.timestamps for p in parts]), s.timestamps)
    assert [p.offset for p in parts] == [0, 80, 90]


def test_split_too_short():
    with pytest.raises(ValidationError, match="val split has 1"):
        chrono_split(series_of(10), window_len=4)


def test_split_fraction_validation():
    with pytest.raises(ValidationError):
        chrono_split(series_of(100), fractions=(0.5, 0.2, 0.2))


def test_scaler_examples():
    train = series_of(2, channels=np.array([[2.0] * 7, [10.0] * 7]))
    p = fit_scaler(train)
    test = series_of(2, channels=np.array([[6.0] * 7, [12.0] * 7]))
    scaled = apply_scaler(test, p).channels
    np.testing.assert_allclose(scaled[0], 0.5)
    np.testing.assert_allclose(scaled[1], 1.25)


def test_constant_channel_named():
    ch = np.random.default_rng(0).normal(size=(20, 7))
    ch[:, 5] = 21.0
    with pytest.raises(ConstantChannelError, match="temp"):
        fit_scaler(series_of(20, channels=ch))


@given(st.integers(0, 2**32 - 1))
def test_scaler_round_trip(seed):
    rng = np.random.default_rng(seed)
    p = fit_scaler(series_of(30, seed=seed))
    x = series_of(30, channels=rng.normal(scale=100, size=(30, 7)), seed=seed + 1)
    back = invert_scaler(apply_scaler(x, p), p)
    np.testing.assert_allclose(back.channels, x.channels, rtol=0, atol=1e-12 * max(1, np.abs(x.channels).max()))
    np.testing.assert_allclose(back.target, x.target, rtol=0, atol=1e-12)


def test_scaler_dict_round_trip():
    p = fit_scaler(series_of(30))
    q = ScalerParams.from_dict(p.to_dict())
    assert q.channel_names == p.channel_names and np.array_equal(q.channel_min, p.channel_min)


def test_prepare_fits_train_only():
    s = synthesize(500, seed=2)
    d = prepare(s)
    train = s.channels[:400]
    np.testing.assert_array_equal(d.scaler.channel_min, train.min(axis=0))
    np.testing.assert_array_equal(d.scaler.channel_max, train.max(axis=0))
    assert d.train.windows.min() >= 0 and d.train.windows.max() <= 1
    assert d.split_sizes == (400, 50, 50)


def test_prepare_uses_given_scaler():
    s = synthesize(500, seed=2)
    fixed = fit_scaler(synthesize(500, seed=3).slice(0, 400))
    assert prepare(s, scaler=fixed).scaler is fixed


def test_window_examples():
    s = series_of(10)
    w = make_windows(s, 4, 1)
    assert len(w) == 7 and w.windows.shape == (7, 4, 7)
    np.testing.assert_array_equal(w.windows[2], s.channels[2:6])
    np.testing.assert_array_equal(w.targets, s.target[3:])
    one = make_windows(series_of(4), 4)
    assert len(one) == 1
    with pytest.raises(ValidationError, match="shorter"):
        make_windows(series_of(3), 4)


def test_windows_stay_inside_split():
    d = prepare(synthesize(1000, seed=0))
    assert (len(d.train), len(d.val), len(d.test)) == (797, 97, 97)
    assert d.val.indices.min() == 800 and d.val.indices.max() + 3 < 900
    assert d.test.indices.min() == 900 and d.test.indices.max() + 3 < 1000


@given(st.integers(1, 60), st.integers(1, 10), st.integers(1, 5))
def test_window_count_formula(length, window_len, stride):
    if length < window_len:
        assert num_windows(length, window_len, stride) == 0
        return
    w = make_windows(series_of(length), window_len, stride)
    assert len(w) == (length - window_len) // stride + 1
    assert (np.diff(w.indices) == stride).all()
