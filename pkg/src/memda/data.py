"""Loading, synthesis, splitting, normalization and periodic windowing of
multivariate urban time series.

A series is stored as a ``(T, N, C)`` array sampled ``p`` times per day.
Every input segment holds exactly ``alpha`` observations that end at the
segment's stated endpoint, so a segment ending at ``s`` covers
``[s - alpha + 1, s]``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, OrderingError, ParseError, WindowError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
STD_FLOOR = 1e-4
MAX_INTERPOLATED_GAP = 3
DEFAULT_START = datetime(2020, 1, 1)


@dataclass
class UrbanSeries:
    values: np.ndarray
    samples_per_day: int
    start_timestamp: datetime = DEFAULT_START
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise DataError(f"values must be (T, N, C), got shape {self.values.shape}")
        if np.isnan(self.values).any():
            raise DataError("series contains NaN")
        p = self.samples_per_day
        if p <= 0 or SECONDS_PER_DAY % p:
            raise DataError(f"samples_per_day={p} does not divide a day into whole seconds")
        if not self.node_ids:
            self.node_ids = [f"n{i}" for i in range(self.n_nodes)]
        if len(self.node_ids) != self.n_nodes:
            raise DataError(f"{len(self.node_ids)} node ids for {self.n_nodes} nodes")

    @property
    def p(self) -> int:
        return self.samples_per_day

    @property
    def T_total(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def interval(self) -> timedelta:
        return timedelta(seconds=SECONDS_PER_DAY // self.samples_per_day)

    def timestamps(self) -> list[datetime]:
        step = self.interval
        return [self.start_timestamp + i * step for i in range(self.T_total)]

    def replace_values(self, values: np.ndarray) -> "UrbanSeries":
        return dataclasses.replace(self, values=values, node_ids=list(self.node_ids))


@dataclass
class DriftAwareInput:
    anchor_t: int
    segments: list[np.ndarray]
    segment_timestamps: list[int]
    K: int
    alpha: int


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class DriftConfig:
    drift_kind: str = "sudden"
    drift_time: int = 480
    magnitude: float = 1.0
    base_period: int = 24
    noise_std: float = 0.1
    n_nodes: int = 8
    n_days: int = 30
    seed: int = 0
    day_variability: float = 0.0

    def validate(self) -> None:
        if self.drift_kind not in ("sudden", "incremental"):
            raise ConfigurationError(f"drift_kind must be 'sudden' or 'incremental', got {self.drift_kind!r}")
        if self.base_period <= 0 or self.n_nodes <= 0 or self.n_days <= 0:
            raise ConfigurationError("base_period, n_nodes and n_days must be positive")
        if not 0 < self.drift_time < self.n_days * self.base_period:
            raise ConfigurationError(
                f"drift_time must lie in (0, {self.n_days * self.base_period}), got {self.drift_time}"
            )
        if self.noise_std < 0 or self.day_variability < 0:
            raise ConfigurationError("noise_std and day_variability must be >= 0")

    @classmethod
    def from_dict(cls, payload: dict) -> "DriftConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - names
        if unknown:
            raise ConfigurationError(f"unknown drift config keys: {sorted(unknown)}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "DriftConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# ingestion


def _interpolate_gaps(column: np.ndarray, label: str) -> np.ndarray:
    missing = np.isnan(column)
    if not missing.any():
        return column
    if missing.all():
        raise DataError(f"column {label} is entirely missing")
    run = 0
    for i, m in enumerate(missing):
        run = run + 1 if m else 0
        if run > MAX_INTERPOLATED_GAP:
            raise DataError(f"column {label}: more than {MAX_INTERPOLATED_GAP} consecutive missing values ending at row {i}")
    idx = np.arange(len(column))
    out = column.copy()
    out[missing] = np.interp(idx[missing], idx[~missing], column[~missing])
    return out


def load_csv(path: str | Path, p: int, channels: int = 1, strict: bool = False) -> UrbanSeries:
    """Read a CSV with an ISO-8601 timestamp column followed by one column per
    node (``channels == 1``) or ``node:channel`` columns grouped by node.

    Empty or ``nan`` cells are linearly interpolated per column when at most
    three in a row are missing; with ``strict=True`` any missing cell fails.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", 1) from None
        if len(header) < 2:
            raise ParseError("header needs a timestamp column and at least one node column", 1)
        columns = [h.strip() for h in header[1:]]
        node_ids = _node_ids_from_header(columns, channels)

        stamps: list[datetime] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line_no)
            try:
                stamp = datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", line_no) from None
            if stamps and stamp <= stamps[-1]:
                raise OrderingError(f"line {line_no}: timestamp {stamp.isoformat()} is not after {stamps[-1].isoformat()}")
            parsed = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "" or cell.lower() == "nan":
                    if strict:
                        raise DataError(f"line {line_no}: missing value under strict mode")
                    parsed.append(math.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", line_no) from None
            stamps.append(stamp)
            rows.append(parsed)

    if not rows:
        raise DataError(f"{path} has no data rows")
    flat = np.asarray(rows, dtype=np.float64)
    for j in range(flat.shape[1]):
        flat[:, j] = _interpolate_gaps(flat[:, j], columns[j])
    if len(rows) % p:
        logger.warning("%s: %d rows is not a whole number of days at p=%d", path, len(rows), p)
    values = flat.reshape(len(rows), len(node_ids), channels)
    return UrbanSeries(values=values, samples_per_day=p, start_timestamp=stamps[0], node_ids=node_ids)


def _node_ids_from_header(columns: list[str], channels: int) -> list[str]:
    if channels == 1:
        return columns
    if len(columns) % channels:
        raise ParseError(f"{len(columns)} value columns is not a multiple of channels={channels}", 1)
    node_ids = []
    for i in range(0, len(columns), channels):
        group = columns[i:i + channels]
        nodes = {c.split(":", 1)[0] for c in group}
        if len(nodes) != 1 or any(":" not in c for c in group):
            raise ParseError(f"columns {group} are not node:channel pairs of one node", 1)
        node_ids.append(nodes.pop())
    return node_ids


def save_csv(series: UrbanSeries, path: str | Path, float_format: str = "%.6f") -> None:
    """Write ``series`` in the layout read by :func:`load_csv`."""
    if series.n_channels == 1:
        header = ["timestamp", *series.node_ids]
    else:
        header = ["timestamp"] + [f"{n}:{c}" for n in series.node_ids for c in range(series.n_channels)]
    flat = series.values.reshape(series.T_total, -1)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for stamp, row in zip(series.timestamps(), flat):
            writer.writerow([stamp.isoformat(), *(float_format % v for v in row)])


# ---------------------------------------------------------------------------
# synthesis


def drift_ramp(config: DriftConfig) -> np.ndarray:
    """Per-step drift intensity in [0, 1]."""
    t = np.arange(config.n_days * config.base_period)
    if config.drift_kind == "sudden":
        return (t >= config.drift_time).astype(np.float64)
    width = 7 * config.base_period
    return np.clip((t - config.drift_time + 1) / width, 0.0, 1.0)


def generate_synthetic_drift(config: DriftConfig) -> UrbanSeries:
    """Sinusoid-plus-harmonics daily pattern per node with one drift event.

    After the drift each node receives an additive level shift of
    ``magnitude`` plus ``magnitude`` times a zero-mean secondary daily shape,
    so the daily mean moves by exactly ``magnitude``. Incremental drift ramps
    the change in linearly over seven days.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    p, n = config.base_period, config.n_nodes
    level = rng.uniform(3.0, 6.0, n)
    amp = rng.uniform(0.5, 1.5, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    h2 = rng.uniform(0.2, 0.6, n)
    h3 = rng.uniform(0.0, 0.3, n)
    psi2 = rng.uniform(0.0, 2 * np.pi, n)
    psi3 = rng.uniform(0.0, 2 * np.pi, n)
    alt_phase = rng.uniform(0.0, 2 * np.pi, n)

    t = np.arange(config.n_days * p)
    theta = 2 * np.pi * (t % p)[:, None] / p
    base = level + amp * (
        np.sin(theta + phase) + h2 * np.sin(2 * theta + psi2) + h3 * np.sin(3 * theta + psi3)
    )
    # zero-mean over a whole day, so it does not move the daily mean
    alt = amp * np.sin(2 * theta + alt_phase)
    ramp = drift_ramp(config)[:, None]
    values = base + config.magnitude * ramp * (1.0 + alt)
    if config.day_variability > 0:
        values = values + _day_level_wander(config, amp, rng)
    if config.noise_std > 0:
        values = values + rng.normal(0.0, config.noise_std, values.shape)
    return UrbanSeries(
        values=values[:, :, None],
        samples_per_day=p,
        start_timestamp=DEFAULT_START,
        node_ids=[f"node{i}" for i in range(n)],
    )


def _day_level_wander(config: DriftConfig, amp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth day-to-day level and amplitude fluctuations.

    Per-day AR(1) offsets (coefficient 0.5) are placed at each day's midpoint
    and linearly interpolated, so consecutive days are alike but not equal.
    """
    p, n, days = config.base_period, config.n_nodes, config.n_days
    sigma = config.day_variability
    offsets = np.zeros((days + 2, n))
    scales = np.zeros((days + 2, n))
    for d in range(1, days + 2):
        offsets[d] = 0.5 * offsets[d - 1] + rng.normal(0.0, sigma, n)
        scales[d] = 0.5 * scales[d - 1] + rng.normal(0.0, sigma, n)
    centers = (np.arange(-1, days + 1) + 0.5) * p
    t = np.arange(days * p)
    level = np.stack([np.interp(t, centers, offsets[:, j]) for j in range(n)], axis=1)
    scale = np.stack([np.interp(t, centers, scales[:, j]) for j in range(n)], axis=1)
    theta = 2 * np.pi * (t % p)[:, None] / p
    return level + scale * amp * np.sin(theta)


# ---------------------------------------------------------------------------
# splitting and windowing


@dataclass(frozen=True)
class Split:
    train: range
    val: range
    test: range


def earliest_anchor(alpha: int, p: int, K: int) -> int:
    return alpha - 1 + p * K


def segment_ends(t: int, alpha: int, p: int, K: int) -> list[int]:
    """End indices ``[t, t-P1, t+a-P1, ..., t-PK, t+a-PK]`` with ``Pk = p*k``."""
    ends = [t]
    for k in range(1, K + 1):
        ends += [t - p * k, t + alpha - p * k]
    return ends


def check_window(t: int, alpha: int, p: int, K: int, T_total: int) -> None:
    if alpha <= 0 or K < 0:
        raise ConfigurationError(f"alpha must be positive and K non-negative (alpha={alpha}, K={K})")
    if K > 0 and p < alpha:
        raise ConfigurationError(f"p={p} < alpha={alpha}: look-back segments would reach past the anchor")
    first = earliest_anchor(alpha, p, K)
    if t < first:
        raise WindowError(f"anchor {t} lacks history; earliest valid anchor is {first}", earliest_valid=first)
    if t >= T_total:
        raise WindowError(f"anchor {t} is beyond the series (T_total={T_total})", earliest_valid=first)


def build_drift_aware_input(series: UrbanSeries, t: int, alpha: int, K: int) -> DriftAwareInput:
    check_window(t, alpha, series.p, K, series.T_total)
    ends = segment_ends(t, alpha, series.p, K)
    segments = [series.values[e - alpha + 1:e + 1] for e in ends]
    return DriftAwareInput(anchor_t=t, segments=segments, segment_timestamps=ends, K=K, alpha=alpha)


def enumerate_samples(series: UrbanSeries, alpha: int, K: int, split_range: range | Sequence[int]) -> list[int]:
    """Anchors inside ``split_range`` with full history and a target
    ``x[t+1 .. t+alpha]`` that ends inside the range."""
    start, stop = _bounds(split_range)
    if start < 0 or stop > series.T_total:
        raise ConfigurationError(f"range [{start}, {stop}) is outside the series [0, {series.T_total})")
    if K > 0 and series.p < alpha:
        raise ConfigurationError(f"p={series.p} < alpha={alpha} is not supported")
    first = max(start, earliest_anchor(alpha, series.p, K))
    last = stop - alpha - 1
    if last < first:
        raise ConfigurationError(
            f"range [{start}, {stop}) holds no valid anchor for alpha={alpha}, K={K}, p={series.p}"
        )
    return list(range(first, last + 1))


def _bounds(split_range) -> tuple[int, int]:
    if isinstance(split_range, range):
        return split_range.start, split_range.stop
    start, stop = split_range
    return int(start), int(stop)


def chronological_split(
    series: UrbanSeries,
    train_end: int,
    val_fraction: float = 0.2,
    alpha: int | None = None,
    K: int | None = None,
) -> Split:
    T = series.T_total
    if not 0 < train_end < T:
        raise ConfigurationError(f"train_end must lie in (0, {T}) so the test range is non-empty, got {train_end}")
    if not 0 <= val_fraction < 1:
        raise ConfigurationError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    cut = int(train_end * (1 - val_fraction))
    split = Split(train=range(0, cut), val=range(cut, train_end), test=range(train_end, T))
    if alpha is not None and K is not None:
        # raises ConfigurationError when the training range is too short
        enumerate_samples(series, alpha, K, split.train)
    return split


def target_window(series_values: np.ndarray, t: int, alpha: int) -> np.ndarray:
    return series_values[t + 1:t + alpha + 1]


# ---------------------------------------------------------------------------
# normalization


def fit_normalization(series: UrbanSeries, train_range: range) -> NormalizationStats:
    chunk = series.values[train_range.start:train_range.stop]
    if len(chunk) == 0:
        raise ConfigurationError("cannot fit normalization on an empty range")
    return NormalizationStats(mean=chunk.mean(axis=0), std=np.maximum(chunk.std(axis=0), STD_FLOOR))


def normalize(series: UrbanSeries, stats: NormalizationStats) -> UrbanSeries:
    return series.replace_values((series.values - stats.mean) / stats.std)


def denormalize(pred, stats: NormalizationStats):
    """Invert :func:`normalize` on any array whose trailing axes are ``(N, C)``."""
    return pred * stats.std + stats.mean
