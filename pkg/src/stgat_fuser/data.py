"""Corpus ingestion, synthesis, chronological splitting, min-max scaling, windowing."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConstantChannelError, DuplicateTimestampError, SchemaError, ShapeError, ValidationError

log = logging.getLogger(__name__)

TIMESTAMP = "timestamp"
TARGET = "ref_o3"
CHANNELS = ("mox1", "mox2", "mox3", "mox4", "ec", "temp", "rh")
HOUR = 3600


@dataclass
class RawSeries:
    timestamps: np.ndarray          # int64 epoch seconds, strictly increasing
    channels: np.ndarray            # (time, num_channels)
    target: np.ndarray              # (time,)
    channel_names: tuple[str, ...] = CHANNELS
    dropped_rows: int = 0
    offset: int = 0                 # index of the first step within the parent series

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        n = len(self.timestamps)
        if self.channels.ndim != 2 or self.channels.shape[0] != n or self.target.shape != (n,):
            raise ShapeError(f"series: inconsistent lengths timestamps={n} channels={self.channels.shape} "
                             f"target={self.target.shape}")
        if self.channels.shape[1] != len(self.channel_names):
            raise SchemaError(f"series: {self.channels.shape[1]} channel columns but "
                              f"{len(self.channel_names)} channel names")
        if n > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValidationError("series: timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @property
    def num_channels(self) -> int:
        return self.channels.shape[1]

    def slice(self, start: int, stop: int) -> RawSeries:
        return dataclasses.replace(self, timestamps=self.timestamps[start:stop],
                                   channels=self.channels[start:stop], target=self.target[start:stop],
                                   dropped_rows=0, offset=self.offset + start)


# --------------------------------------------------------------------------
# CSV


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def load_csv(path, channels: tuple[str, ...] | None = None) -> RawSeries:
    """Read ``timestamp,<channels...>,ref_o3``.

    With ``channels=None`` the channel columns are taken from the header;
    otherwise the header must list exactly those channels.  Rows with an empty
    cell are dropped (count in ``dropped_rows``); the result is sorted by time.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header required") from None
        if len(header) < 3 or header[0] != TIMESTAMP or header[-1] != TARGET:
            raise SchemaError(f"{path}: header must be '{TIMESTAMP},<channels...>,{TARGET}', got {','.join(header)}")
        names = tuple(header[1:-1])
        if channels is not None and names != tuple(channels):
            raise SchemaError(f"{path}: expected channels {','.join(channels)}, header has {','.join(names)}")
        stamps, rows, targets = [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if any(cell.strip() == "" for cell in row):
                dropped += 1
                continue
            try:
                stamp = _parse_timestamp(row[0])
                values = [float(cell) for cell in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                dropped += 1
                continue
            stamps.append(stamp)
            rows.append(values[:-1])
            targets.append(values[-1])
    if dropped:
        log.info("%s: dropped %d row(s) with missing values", path, dropped)
    ts = np.asarray(stamps, dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    if len(ts) > 1:
        dup = np.flatnonzero(np.diff(ts) == 0)
        if dup.size:
            raise DuplicateTimestampError(f"{path}: duplicate timestamp {format_timestamp(ts[dup[0]])}")
    ch = np.asarray(rows, dtype=np.float64).reshape(len(ts), len(names))[order]
    tg = np.asarray(targets, dtype=np.float64)[order]
    return RawSeries(ts, ch, tg, names, dropped)


def write_csv(series: RawSeries, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([TIMESTAMP, *series.channel_names, TARGET])
        for ts, row, y in zip(series.timestamps, series.channels, series.target):
            writer.writerow([format_timestamp(ts), *(repr(float(v)) for v in row), repr(float(y))])
    return path


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic ozone corpus (values in µg/m³, °C, %)."""

    start: str = "2017-06-01T00:00:00"
    ozone_base: float = 60.0
    ozone_diurnal: float = 25.0
    ozone_ar: float = 0.9
    ozone_noise: float = 4.0
    drift_scale: float = 8.0
    temp_base: float = 22.0
    temp_diurnal: float = 6.0
    rh_base: float = 60.0
    rh_diurnal: float = 15.0
    mox_noise: float = 0.015
    ec_noise: float = 4.0
    reference_noise: float = 0.3
    glitch_rate: float = 0.01
    glitch_size: float = 0.5


def synthesize(length: int, seed: int, params: SynthParams | None = None, window_len: int = 4) -> RawSeries:
    """Generate a corpus whose reference ozone is a nonlinear, lagged function of the sensors.

    A latent ozone signal (diurnal cycle + slow drift + AR(1) noise) drives
    four MOX channels through lagged power-law responses with multiplicative
    temperature/humidity cross-sensitivity, and one EC channel that is roughly
    linear but temperature-biased.
    """
    p = params or SynthParams()
    if length < window_len + 10:
        raise ValidationError(f"synthesize: length must be >= window_len + 10 = {window_len + 10}, got {length}")
    if p.ozone_diurnal <= 0 and p.ozone_noise <= 0 and p.drift_scale <= 0:
        raise ValidationError("synthesize: degenerate parameters, ozone signal has zero variance")
    if p.temp_diurnal <= 0 or p.rh_diurnal <= 0:
        raise ValidationError("synthesize: degenerate parameters, temperature/humidity have zero variance")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    phase = 2.0 * np.pi * t / 24.0

    drift = _smooth(rng.normal(0.0, 1.0, length), 72)
    drift = drift / (drift.std() + 1e-12)
    ar = np.zeros(length)
    shocks = rng.normal(0.0, p.ozone_noise * math.sqrt(1 - p.ozone_ar ** 2), length)
    for k in range(1, length):
        ar[k] = p.ozone_ar * ar[k - 1] + shocks[k]
    raw = p.ozone_base + p.ozone_diurnal * np.sin(phase - 2.0 * np.pi * 9 / 24) + p.drift_scale * drift + ar
    ozone = 5.0 * np.logaddexp(0.0, raw / 5.0)        # smooth positivity

    weather = _smooth(rng.normal(0.0, 1.0, length), 48)
    weather = weather / (weather.std() + 1e-12)
    temp = (p.temp_base + p.temp_diurnal * np.sin(phase - 2.0 * np.pi * 10 / 24)
            + 1.5 * drift + 2.0 * weather + rng.normal(0.0, 0.5, length))
    rh = np.clip(p.rh_base - p.rh_diurnal * np.sin(phase - 2.0 * np.pi * 10 / 24)
                 - 10.0 * weather + rng.normal(0.0, 3.0, length), 10.0, 100.0)

    channels = np.empty((length, 7))
    lags = (0.35, 0.5, 0.6, 0.45)
    knees = (15.0, 30.0, 20.0, 40.0)
    temp_sens = (0.06, 0.04, 0.07, 0.05)
    rh_sens = (-0.8, 0.6, -0.5, 0.7)
    for k in range(4):
        lagged = np.empty(length)
        lagged[0] = ozone[0]
        a = lags[k]
        for i in range(1, length):
            lagged[i] = a * lagged[i - 1] + (1 - a) * ozone[i]
        # saturating MOX response with multiplicative temperature/humidity cross-sensitivity
        response = 10.0 * np.log1p(lagged / knees[k]) * np.exp(temp_sens[k] * (temp - 20.0)) \
            * (rh / 60.0) ** rh_sens[k]
        channels[:, k] = response * (1.0 + rng.normal(0.0, p.mox_noise, length)) * _glitches(rng, length, p)
    channels[:, 4] = (0.85 * ozone + 0.08 * (temp - 20.0) ** 2 - 0.15 * (rh - 60.0)
                      + rng.normal(0.0, p.ec_noise, length))
    channels[:, 5] = temp
    channels[:, 6] = rh
    target = ozone + rng.normal(0.0, p.reference_noise, length)

    start = _parse_timestamp(p.start)
    stamps = start + HOUR * np.arange(length, dtype=np.int64)
    return RawSeries(stamps, channels, target, CHANNELS)


def _smooth(noise: np.ndarray, hours: int) -> np.ndarray:
    """Moving average; the window is capped so short series keep their length."""
    width = min(hours, len(noise))
    return np.convolve(noise, np.ones(width) / width, mode="same")


def _glitches(rng: np.random.Generator, length: int, p: SynthParams) -> np.ndarray:
    """Multiplicative fault episodes: a sensor reads high or low for a few hours."""
    factor = np.ones(length)
    starts = np.flatnonzero(rng.random(length) < p.glitch_rate)
    for s in starts:
        duration = int(rng.integers(1, 7))
        factor[s:s + duration] *= 1.0 + p.glitch_size * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
    return factor


# --------------------------------------------------------------------------
# splitting and scaling


def split_bounds(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValidationError(f"chrono_split: fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"chrono_split: fractions must sum to 1, got {sum(fractions)}")
    # the epsilon keeps e.g. 0.9 * 1000 = 899.999... from flooring to 899
    first = math.floor(fractions[0] * n + 1e-9)
    second = math.floor((fractions[0] + fractions[1]) * n + 1e-9)
    return first, second


def chrono_split(series: RawSeries, fractions=(0.8, 0.1, 0.1), window_len: int = 4):
    """Contiguous (train, val, test) partition in time order, no shuffling."""
    n = len(series)
    first, second = split_bounds(n, fractions)
    parts = (series.slice(0, first), series.slice(first, second), series.slice(second, n))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < window_len:
            raise ValidationError(f"chrono_split: {name} split has {len(part)} steps, "
                                  f"fewer than window_len={window_len}")
    return parts


@dataclass
class ScalerParams:
    channel_min: np.ndarray
    channel_max: np.ndarray
    target_min: float
    target_max: float
    channel_names: tuple[str, ...] = CHANNELS

    def to_dict(self) -> dict:
        return {
            "channel_names": list(self.channel_names),
            "channel_min": [float(v) for v in self.channel_min],
            "channel_max": [float(v) for v in self.channel_max],
            "target_min": float(self.target_min),
            "target_max": float(self.target_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScalerParams:
        return cls(np.asarray(d["channel_min"], dtype=np.float64), np.asarray(d["channel_max"], dtype=np.float64),
                   float(d["target_min"]), float(d["target_max"]), tuple(d["channel_names"]))


def fit_scaler(train: RawSeries) -> ScalerParams:
    """Per-channel and target min/max of the training split."""
    lo = train.channels.min(axis=0)
    hi = train.channels.max(axis=0)
    for name, a, b in zip(train.channel_names, lo, hi):
        if not b > a:
            raise ConstantChannelError(name)
    t_lo, t_hi = float(train.target.min()), float(train.target.max())
    if not t_hi > t_lo:
        raise ConstantChannelError(TARGET)
    return ScalerParams(lo, hi, t_lo, t_hi, tuple(train.channel_names))


def apply_scaler(series: RawSeries, params: ScalerParams) -> RawSeries:
    """Map to [0, 1] by the training range; values outside it are not clipped."""
    if tuple(series.channel_names) != tuple(params.channel_names):
        raise SchemaError(f"scaler: fitted on channels {params.channel_names}, series has {series.channel_names}")
    channels = (series.channels - params.channel_min) / (params.channel_max - params.channel_min)
    target = scale_target(series.target, params)
    return dataclasses.replace(series, channels=channels, target=target)


def invert_scaler(series: RawSeries, params: ScalerParams) -> RawSeries:
    channels = series.channels * (params.channel_max - params.channel_min) + params.channel_min
    return dataclasses.replace(series, channels=channels, target=invert_target(series.target, params))


def scale_target(values, params: ScalerParams) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - params.target_min) / (params.target_max - params.target_min)


def invert_target(values, params: ScalerParams) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (params.target_max - params.target_min) + params.target_min


# --------------------------------------------------------------------------
# windows


@dataclass
class WindowedDataset:
    windows: np.ndarray     # (N, window_len, channels)
    targets: np.ndarray     # (N,) target at each window's last step
    indices: np.ndarray     # (N,) start index of each window in the parent series

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> WindowedDataset:
        return WindowedDataset(self.windows[idx], self.targets[idx], self.indices[idx])


def num_windows(length: int, window_len: int, stride: int = 1) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def make_windows(series: RawSeries, window_len: int = 4, stride: int = 1) -> WindowedDataset:
    if window_len < 1 or stride < 1:
        raise ValidationError(f"make_windows: window_len and stride must be >= 1, got {window_len}, {stride}")
    n = len(series)
    if n < window_len:
        raise ValidationError(f"make_windows: split of length {n} is shorter than window_len={window_len}")
    count = num_windows(n, window_len, stride)
    starts = np.arange(count) * stride
    steps = starts[:, None] + np.arange(window_len)[None, :]
    windows = series.channels[steps]
    targets = series.target[starts + window_len - 1]
    return WindowedDataset(windows, targets, series.offset + starts)


@dataclass
class PreparedData:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    scaler: ScalerParams
    split_sizes: tuple[int, int, int]


def prepare(series: RawSeries, window_len: int = 4, stride: int = 1,
            fractions=(0.8, 0.1, 0.1), scaler: ScalerParams | None = None) -> PreparedData:
    """Split, fit the scaler on train only, scale every split, then window each split.

    A stored ``scaler`` (from a model file) replaces the fitted one.
    """
    train, val, test = chrono_split(series, fractions, window_len)
    scaler = scaler or fit_scaler(train)
    sets = [make_windows(apply_scaler(part, scaler), window_len, stride) for part in (train, val, test)]
    return PreparedData(*sets, scaler=scaler, split_sizes=(len(train), len(val), len(test)))
