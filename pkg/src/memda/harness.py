"""Training, chronological online evaluation, baselines and metrics."""
from __future__ import annotations

import copy
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import (
    NormalizationStats,
    Split,
    UrbanSeries,
    chronological_split,
    denormalize,
    enumerate_samples,
    fit_normalization,
    normalize,
    segment_ends,
)
from .errors import ConfigurationError, DivergenceError, OrderingError, ShapeError, WindowError
from .model import MemDAModel
from .replay import ROLLING, TRAINING, ReplayMemory

logger = logging.getLogger(__name__)

MAPE_EPS = 1e-3


# ---------------------------------------------------------------------------
# metrics


def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = np.ones(target.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric mask selects no entries")
    return pred[mask], target[mask]


def metric_mae(pred, target, mask=None) -> float:
    p, t = _masked(pred, target, mask)
    return float(np.mean(np.abs(p - t)))


def metric_rmse(pred, target, mask=None) -> float:
    p, t = _masked(pred, target, mask)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def metric_mape(pred, target, mask=None) -> float:
    """Mean absolute percentage error in percent; targets with
    ``|target| < 1e-3`` are excluded."""
    target = np.asarray(target, dtype=np.float64)
    valid = np.abs(target) >= MAPE_EPS
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    p, t = _masked(pred, target, valid)
    return float(np.mean(np.abs(p - t) / np.abs(t)) * 100.0)


# ---------------------------------------------------------------------------
# data bundle


@dataclass
class ForecastData:
    """A series with its split, training-range statistics and a normalized
    float32 copy used by the model."""

    series: UrbanSeries
    split: Split
    stats: NormalizationStats
    values: torch.Tensor = field(repr=False)

    @property
    def p(self) -> int:
        return self.series.p

    def segment(self, end: int, alpha: int) -> torch.Tensor:
        start = end - alpha + 1
        if start < 0 or end >= self.values.shape[0]:
            raise WindowError(f"segment ending at {end} is outside the series")
        return self.values[start:end + 1]

    def segments(self, ends: Sequence[int], alpha: int) -> torch.Tensor:
        return torch.stack([self.segment(e, alpha) for e in ends])

    def targets(self, anchors: Sequence[int], alpha: int) -> torch.Tensor:
        return torch.stack([self.values[t + 1:t + alpha + 1] for t in anchors])


def prepare_data(
    series: UrbanSeries,
    train_end: int,
    val_fraction: float = 0.2,
    alpha: int | None = None,
    K: int | None = None,
) -> ForecastData:
    split = chronological_split(series, train_end, val_fraction, alpha, K)
    stats = fit_normalization(series, split.train)
    values = torch.from_numpy(normalize(series, stats).values.astype(np.float32))
    return ForecastData(series=series, split=split, stats=stats, values=values)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    embedding_drift: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    encoder_calls: dict[str, int] = field(default_factory=dict)
    calls_per_epoch: list[int] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    n_train_samples: int = 0
    n_val_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_mae": self.val_mae,
            "embedding_drift": self.embedding_drift,
            "epoch_seconds": self.epoch_seconds,
            "encoder_calls": dict(self.encoder_calls),
            "calls_per_epoch": self.calls_per_epoch,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "n_train_samples": self.n_train_samples,
            "n_val_samples": self.n_val_samples,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainHistory":
        return cls(**payload)


@dataclass
class TrainResult:
    model: MemDAModel
    history: TrainHistory
    replay_memory: ReplayMemory | None = None


def set_determinism(config: TrainConfig) -> None:
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _batches(items: Sequence[int], size: int) -> Iterable[list[int]]:
    for i in range(0, len(items), size):
        yield list(items[i:i + size])


class _Encoded:
    """Counts encoder invocations by purpose around a model."""

    def __init__(self, model: MemDAModel, counts: Counter):
        self.model = model
        self.counts = counts

    def __call__(self, segments: torch.Tensor, purpose: str) -> torch.Tensor:
        before = self.model.encoder.calls
        z = self.model.encode(segments)
        self.counts[purpose] += self.model.encoder.calls - before
        return z


def _required_keys(anchors: Iterable[int], alpha: int, p: int, K: int) -> list[int]:
    keys = set()
    for t in anchors:
        keys.update(segment_ends(t, alpha, p, K))
    return sorted(keys)


def _encode_keys(encoder: _Encoded, data: ForecastData, keys: Sequence[int], alpha: int, purpose: str, batch: int = 256):
    out = {}
    with torch.no_grad():
        for chunk in _batches(keys, batch):
            z = encoder(data.segments(chunk, alpha), purpose)
            out.update(zip(chunk, z))
    return out


def _replayed(rm: ReplayMemory, anchors: Sequence[int], alpha: int, p: int, K: int, epoch: int) -> torch.Tensor:
    return torch.stack([torch.stack(rm.gather(t, alpha, p, K, epoch=epoch)) for t in anchors])


def _plain_segments(data: ForecastData, anchors: Sequence[int], alpha: int, K: int) -> torch.Tensor:
    return torch.stack([data.segments(segment_ends(t, alpha, data.p, K), alpha) for t in anchors])


def _forward_batch(model, data, anchors, config, rm, encoder, purpose, epoch):
    """Forecast for a batch of anchors; returns (pred, z_t or None)."""
    alpha, K = config.alpha, model.K
    if not config.replay and model.uses_history:
        segs = _plain_segments(data, anchors, alpha, K)
        before = model.encoder.calls
        pred, _ = model.forward_plain(segs)
        encoder.counts[purpose] += model.encoder.calls - before
        return pred, None
    x_t = data.segments(anchors, alpha)
    if model.revin is not None:
        x_t, stats = model.revin.normalize(x_t)
    z_t = encoder(x_t, purpose)
    replay = _replayed(rm, anchors, alpha, data.p, K, epoch) if model.uses_history else None
    pred, _ = model.head(z_t, replay)
    if model.revin is not None:
        pred = model.revin.denormalize(pred, stats)
    return pred, z_t.detach()


def _validate(model, data, anchors, config, rm, encoder, epoch) -> float:
    model.eval()
    errors = []
    with torch.no_grad():
        for chunk in _batches(anchors, 256):
            pred, _ = _forward_batch(model, data, chunk, config, rm, encoder, "validation", epoch)
            errors.append((pred - data.targets(chunk, config.alpha)).abs().flatten())
    return float(torch.cat(errors).mean())


def train(
    model: MemDAModel,
    data: ForecastData,
    config: TrainConfig,
    state_file: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
) -> TrainResult:
    """Random-batch training with a replay memory refreshed between epochs.

    Loss is MAE in normalized units. Early stopping on validation MAE keeps
    the best-validation parameters. Embeddings written during epoch ``e``
    become visible to replay at epoch ``e + 1``.
    """
    config.validate()
    set_determinism(config)
    alpha, K, p = config.alpha, model.K, data.p

    train_anchors = enumerate_samples(data.series, alpha, K, data.split.train)
    val_anchors: list[int] = []
    if len(data.split.val):
        val_anchors = enumerate_samples(data.series, alpha, K, data.split.val)
    elif config.early_stopping:
        raise ConfigurationError("validation range is empty; disable early_stopping to train without it")

    history = TrainHistory(n_train_samples=len(train_anchors), n_val_samples=len(val_anchors))
    counts: Counter = Counter()
    encoder = _Encoded(model, counts)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    if model.pattern_memory is not None:
        model.pattern_memory.freeze(False)

    best_state = copy.deepcopy(model.state_dict())
    best_val = float("inf")
    best_train = float("inf")
    stale = 0
    start_epoch = 1

    if resume and state_file is not None and Path(state_file).exists():
        state = torch.load(state_file, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        best_state, best_val, best_train, stale = state["best_state"], state["best_val"], state["best_train"], state["stale"]
        history = TrainHistory.from_dict(state["history"])
        counts.update(history.encoder_calls)
        start_epoch = history.epochs_run + 1
        logger.info("resuming at epoch %d", start_epoch)

    use_rm = model.uses_history and config.replay
    rm = ReplayMemory(TRAINING) if use_rm else None
    keys = _required_keys(train_anchors + val_anchors, alpha, p, K) if use_rm else []
    train_set = set(train_anchors)
    aux_keys = [k for k in keys if k not in train_set]
    if use_rm:
        # no embeddings exist before the first epoch: fill the memory once
        for t, z in _encode_keys(encoder, data, keys, alpha, "warmup").items():
            rm.write(t, z, epoch=start_epoch - 1)

    for epoch in range(start_epoch, config.max_epochs + 1):
        tic = time.perf_counter()
        calls_before = counts["train"]
        model.train()
        order = rng.permutation(len(train_anchors))
        staged: dict[int, torch.Tensor] = {}
        losses, weights = [], []
        for idx in _batches(order, config.batch_size):
            anchors = [train_anchors[i] for i in idx]
            pred, z_t = _forward_batch(model, data, anchors, config, rm, encoder, "train", epoch - 1)
            loss = (pred - data.targets(anchors, alpha)).abs().mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(loss.item())
            weights.append(len(anchors))
            if use_rm:
                staged.update(zip(anchors, z_t))
        history.train_loss.append(float(np.average(losses, weights=weights)))
        history.calls_per_epoch.append(counts["train"] - calls_before)

        if use_rm:
            history.embedding_drift.append(_relative_change(rm, staged))
            for t in train_anchors:
                rm.write(t, staged[t], epoch)
            model.eval()
            for t, z in _encode_keys(encoder, data, aux_keys, alpha, "refresh").items():
                rm.write(t, z, epoch)
        history.epoch_seconds.append(time.perf_counter() - tic)

        if val_anchors:
            val = _validate(model, data, val_anchors, config, rm, encoder, epoch)
            history.val_mae.append(val)
            improved = val < best_val
        else:
            val = None
            improved = history.train_loss[-1] < best_train
        history.epochs_run = epoch
        if improved:
            best_val = val if val is not None else best_val
            best_train = min(best_train, history.train_loss[-1])
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        history.encoder_calls = dict(counts)
        logger.debug("epoch %d train %.4f val %s", epoch, history.train_loss[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if state_file is not None:
            torch.save(
                {
                    "model": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "rng": rng.bit_generator.state,
                    "best_state": best_state,
                    "best_val": best_val,
                    "best_train": best_train,
                    "stale": stale,
                    "history": history.to_dict(),
                },
                state_file,
            )
        if config.early_stopping and stale >= config.patience:
            break

    if config.early_stopping or val_anchors:
        model.load_state_dict(best_state)
    history.encoder_calls = dict(counts)
    return TrainResult(model=model, history=history, replay_memory=rm)


def _relative_change(rm: ReplayMemory, staged: dict[int, torch.Tensor]) -> float:
    ratios = []
    for t, z in staged.items():
        old = rm.read(t)
        ratios.append(float(torch.linalg.vector_norm(z - old) / torch.linalg.vector_norm(old).clamp_min(1e-12)))
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# online evaluation


@dataclass
class EvalReport:
    rmse: float
    mae: float
    mape: float
    mae_normalized: float
    anchors: list[int]
    per_day: list[dict]
    weights: np.ndarray | None
    wall_clock: float
    encoder_calls: dict[str, int]
    rm_size: int | None
    variant: str
    predictions: np.ndarray = field(repr=False, default=None)
    targets: np.ndarray = field(repr=False, default=None)

    def to_json(self, config: dict | None = None) -> dict:
        return {
            "variant": self.variant,
            "metrics": {"rmse": self.rmse, "mae": self.mae, "mape": self.mape, "mae_normalized": self.mae_normalized},
            "n_anchors": len(self.anchors),
            "first_anchor": self.anchors[0],
            "last_anchor": self.anchors[-1],
            "per_day": self.per_day,
            "counters": {"encoder_calls": dict(self.encoder_calls), "rm_size": self.rm_size},
            "config": config or {},
        }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["variant", "metrics", "n_anchors", "first_anchor", "last_anchor", "per_day", "counters", "config"],
    "properties": {
        "variant": {"type": "string"},
        "metrics": {
            "type": "object",
            "required": ["rmse", "mae", "mape", "mae_normalized"],
            "properties": {k: {"type": "number", "minimum": 0} for k in ("rmse", "mae", "mape", "mae_normalized")},
        },
        "n_anchors": {"type": "integer", "minimum": 1},
        "first_anchor": {"type": "integer"},
        "last_anchor": {"type": "integer"},
        "per_day": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["day", "n_anchors", "mae", "rmse"],
                "properties": {
                    "day": {"type": "integer"},
                    "n_anchors": {"type": "integer"},
                    "mae": {"type": "number"},
                    "rmse": {"type": "number"},
                },
            },
        },
        "counters": {
            "type": "object",
            "required": ["encoder_calls", "rm_size"],
            "properties": {
                "encoder_calls": {"type": "object", "additionalProperties": {"type": "integer"}},
                "rm_size": {"type": ["integer", "null"]},
            },
        },
        "wall_clock_seconds": {"type": "number"},
        "config": {"type": "object"},
    },
}


def evaluate_online(
    model: MemDAModel,
    data: ForecastData,
    test_range: range | None = None,
    anchors: Sequence[int] | None = None,
    plain: bool = False,
    rm: ReplayMemory | None = None,
) -> EvalReport:
    """Feed anchors one at a time in chronological order.

    Parameters stay fixed; the replay memory rolls with capacity ``p * K``.
    An empty memory is first primed with the ``p * K`` timestamps preceding
    the first anchor; any look-back embedding still missing is encoded on
    demand.
    """
    test_range = data.split.test if test_range is None else test_range
    alpha, K, p = model.alpha, model.K, data.p
    if anchors is None:
        anchors = enumerate_samples(data.series, alpha, K, test_range)
    anchors = list(anchors)
    if not anchors:
        raise ConfigurationError("no anchors to evaluate")
    model.eval()
    if model.pattern_memory is not None:
        model.pattern_memory.freeze(True)
    counts: Counter = Counter()
    encoder = _Encoded(model, counts)
    use_rm = model.uses_history and not plain
    if use_rm and rm is None:
        rm = ReplayMemory(ROLLING, capacity=p * K)

    if use_rm and len(rm) == 0:
        # a stream that was already running would hold the p*K embeddings
        # just before the first anchor; encode them in order so that steady
        # state replay never misses
        first = anchors[0]
        keys = list(range(max(first - p * K, alpha - 1), first))
        for t, z in _encode_keys(encoder, data, keys, alpha, "prime").items():
            rm.write(t, z)

    def fallback(end: int) -> torch.Tensor:
        return encoder(data.segment(end, alpha).unsqueeze(0), "fallback")[0]

    preds, weights = [], []
    tic = time.perf_counter()
    previous = None
    with torch.no_grad():
        for t in anchors:
            if previous is not None and t <= previous:
                raise OrderingError(f"anchors must be strictly increasing; got {t} after {previous}")
            previous = t
            if plain and model.uses_history:
                before = model.encoder.calls
                pred, W = model.forward_plain(_plain_segments(data, [t], alpha, K))
                counts["plain"] += model.encoder.calls - before
            else:
                x_t = data.segment(t, alpha).unsqueeze(0)
                stats = None
                if model.revin is not None:
                    x_t, stats = model.revin.normalize(x_t)
                z_t = encoder(x_t, "anchor")
                replay = None
                if use_rm:
                    replay = torch.stack(rm.gather(t, alpha, p, K, fallback)).unsqueeze(0)
                    rm.write(t, z_t[0])
                pred, W = model.head(z_t, replay)
                if stats is not None:
                    pred = model.revin.denormalize(pred, stats)
            preds.append(pred[0])
            if W is not None:
                weights.append(W[0])
    wall = time.perf_counter() - tic

    pred_n = torch.stack(preds).detach().numpy().astype(np.float64)
    target_n = data.targets(anchors, alpha).numpy().astype(np.float64)
    pred_raw = denormalize(pred_n, data.stats)
    target_raw = np.stack([data.series.values[t + 1:t + alpha + 1] for t in anchors])

    per_day = []
    days = np.asarray(anchors) // p
    for day in np.unique(days):
        sel = days == day
        per_day.append(
            {
                "day": int(day),
                "n_anchors": int(sel.sum()),
                "mae": metric_mae(pred_raw[sel], target_raw[sel]),
                "rmse": metric_rmse(pred_raw[sel], target_raw[sel]),
            }
        )
    return EvalReport(
        rmse=metric_rmse(pred_raw, target_raw),
        mae=metric_mae(pred_raw, target_raw),
        mape=metric_mape(pred_raw, target_raw),
        mae_normalized=metric_mae(pred_n, target_n),
        anchors=anchors,
        per_day=per_day,
        weights=torch.stack(weights).detach().numpy().astype(np.float64) if weights else None,
        wall_clock=wall,
        encoder_calls=dict(counts),
        rm_size=len(rm) if use_rm else None,
        variant=model.variant,
        predictions=pred_raw,
        targets=target_raw,
    )


# ---------------------------------------------------------------------------
# baselines


def baseline_copy_last_day(values: np.ndarray | UrbanSeries, t: int, alpha: int, p: int) -> np.ndarray:
    """Forecast ``x[t+1 .. t+alpha]`` by the same clock times one day earlier."""
    if isinstance(values, UrbanSeries):
        values = values.values
    start, stop = t + 1 - p, t + alpha - p + 1
    if start < 0 or stop > len(values) or p < alpha:
        raise WindowError(f"copy-last-day needs t >= {p - 1} and p >= alpha (t={t}, p={p}, alpha={alpha})")
    return values[start:stop]


def evaluate_copy_last_day(data: ForecastData, anchors: Sequence[int], alpha: int) -> dict:
    values = data.series.values
    pred = np.stack([baseline_copy_last_day(values, t, alpha, data.p) for t in anchors])
    target = np.stack([values[t + 1:t + alpha + 1] for t in anchors])
    return {"rmse": metric_rmse(pred, target), "mae": metric_mae(pred, target), "mape": metric_mape(pred, target)}
