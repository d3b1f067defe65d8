"""Telemetry ingestion, windowing and labeling, and a synthetic client generator.

The CSV layout follows the public Azure predictive-maintenance dataset::

    telemetry: datetime,machineID,volt,rotate,pressure,vibration
    failures:  datetime,machineID,failure        (failure in comp1..comp4)
    meta:      machineID,model,age

A client's data is kept as its raw hourly reading series plus one label per
window; normalized windows are strided views over the normalized series, so a
full year of hourly data for a hundred machines stays small in memory.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FEATURES = ("volt", "rotate", "pressure", "vibration")
COMPONENTS = ("comp1", "comp2", "comp3", "comp4")
TELEMETRY_HEADER = ("datetime", "machineID", *FEATURES)
FAILURES_HEADER = ("datetime", "machineID", "failure")
META_HEADER = ("machineID", "model", "age")
HOUR = np.timedelta64(1, "h")


class DataFormatError(ValueError):
    """A CSV file does not match the expected schema."""


class ReferentialError(ValueError):
    """A failure or metadata row refers to a machine with no telemetry."""


@dataclass
class MachineRecords:
    machine_id: int
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    readings: np.ndarray  # (T, 4)
    failures: list[tuple[np.datetime64, str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def failure_times(self) -> np.ndarray:
        return np.array(sorted(t for t, _ in self.failures), dtype="datetime64[s]")


@dataclass
class Windows:
    """A batch of labeled windows; ``x`` has shape ``(n, window, features)``."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.y.size

    def flat(self) -> np.ndarray:
        return self.x.reshape(len(self), -1)


@dataclass
class ClientDataset:
    client_id: int
    readings: np.ndarray  # (T, F) raw sensor values in time order
    labels: np.ndarray  # (T - window + 1,) label of the window ending at each hour
    window: int = 24
    meta: dict = field(default_factory=dict)

    @property
    def num_windows(self) -> int:
        return self.labels.size


@dataclass
class FederatedClient:
    """One participant of a simulated federation: normalized train/test windows."""

    client_id: int
    train: Windows
    test: Windows
    meta: dict
    mean: np.ndarray
    std: np.ndarray

    @property
    def num_samples(self) -> int:
        return len(self.train)

    def raw_train_readings(self) -> np.ndarray:
        f = self.mean.size
        return self.train.x.reshape(-1, f) * self.std + self.mean


def _parse_time(text: str, path, lineno: int) -> np.datetime64:
    try:
        return np.datetime64(datetime.strptime(text.strip(), "%Y-%m-%d %H:%M:%S"), "s")
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: bad timestamp {text!r}") from None


def _read_rows(path, header):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(header)}") from None
        if tuple(h.strip() for h in got) != tuple(header):
            raise DataFormatError(f"{path}:1: header {got} does not match {list(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _parse_int(text, path, lineno, what) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: bad {what} {text!r}") from None


def load_csv(telemetry_path, failures_path, meta_path=None) -> dict[int, MachineRecords]:
    """Read the three CSV files into per-machine records sorted by time."""
    stamps: dict[int, list] = {}
    values: dict[int, list] = {}
    for lineno, row in _read_rows(telemetry_path, TELEMETRY_HEADER):
        mid = _parse_int(row[1], telemetry_path, lineno, "machineID")
        t = _parse_time(row[0], telemetry_path, lineno)
        try:
            vals = [float(v) for v in row[2:]]
        except ValueError:
            raise DataFormatError(f"{telemetry_path}:{lineno}: non-numeric reading in {row[2:]}") from None
        if not all(np.isfinite(vals)):
            raise DataFormatError(f"{telemetry_path}:{lineno}: non-finite reading in {row[2:]}")
        stamps.setdefault(mid, []).append(t)
        values.setdefault(mid, []).append(vals)

    machines: dict[int, MachineRecords] = {}
    for mid in sorted(stamps):
        ts = np.array(stamps[mid], dtype="datetime64[s]")
        rd = np.array(values[mid], dtype=np.float64)
        if np.any(ts[1:] <= ts[:-1]):
            order = np.argsort(ts, kind="stable")
            ts, rd = ts[order], rd[order]
            if np.any(ts[1:] == ts[:-1]):
                raise DataFormatError(f"{telemetry_path}: duplicate timestamps for machine {mid}")
            warnings.warn(f"machine {mid}: telemetry rows out of time order, re-sorted", stacklevel=2)
        machines[mid] = MachineRecords(mid, ts, rd)

    for lineno, row in _read_rows(failures_path, FAILURES_HEADER):
        mid = _parse_int(row[1], failures_path, lineno, "machineID")
        comp = row[2].strip()
        if comp not in COMPONENTS:
            raise DataFormatError(f"{failures_path}:{lineno}: unknown component {comp!r}")
        if mid not in machines:
            raise ReferentialError(f"{failures_path}:{lineno}: machine {mid} has no telemetry")
        machines[mid].failures.append((_parse_time(row[0], failures_path, lineno), comp))

    if meta_path is not None:
        for lineno, row in _read_rows(meta_path, META_HEADER):
            mid = _parse_int(row[0], meta_path, lineno, "machineID")
            if mid not in machines:
                raise ReferentialError(f"{meta_path}:{lineno}: machine {mid} has no telemetry")
            model_type = row[1].strip()
            if not model_type:
                raise DataFormatError(f"{meta_path}:{lineno}: empty model type")
            machines[mid].meta = {
                "model": model_type,
                "age": _parse_int(row[2], meta_path, lineno, "age"),
            }
    return machines


def failure_labels(timestamps, failure_times, window: int = 24) -> np.ndarray:
    """Label of the window ending at each hour ``t``: any failure in ``(t - window h, t]``."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    ends = ts[window - 1 :]
    if np.size(failure_times) == 0:
        return np.zeros(ends.size, dtype=np.int8)
    ft = np.sort(np.asarray(failure_times, dtype="datetime64[s]"))
    upto_end = np.searchsorted(ft, ends, side="right")
    upto_start = np.searchsorted(ft, ends - window * HOUR, side="right")
    return (upto_end > upto_start).astype(np.int8)


def window_and_label(records: MachineRecords, window: int = 24, mean=None, std=None) -> Windows:
    """Stride-1 windows of ``window`` hours and their failure labels.

    If ``mean``/``std`` are given the readings are z-scored with them first
    (zero-std features map to 0).
    """
    if len(records) < window:
        raise ValueError(f"machine {records.machine_id}: {len(records)} records < window {window}")
    y = failure_labels(records.timestamps, records.failure_times, window)
    readings = records.readings
    if mean is not None:
        readings = normalize(readings, mean, std)
    return Windows(_window_view(readings, window), y)


def _window_view(readings: np.ndarray, window: int) -> np.ndarray:
    return sliding_window_view(readings, window, axis=0).transpose(0, 2, 1)


def normalize(readings, mean, std) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    safe = np.where(std > 0, std, 1.0)
    z = (np.asarray(readings, dtype=np.float64) - mean) / safe
    return np.where(std > 0, z, 0.0)


def to_dataset(records: MachineRecords, window: int = 24) -> ClientDataset:
    if len(records) < window:
        raise ValueError(f"machine {records.machine_id}: {len(records)} records < window {window}")
    labels = failure_labels(records.timestamps, records.failure_times, window)
    return ClientDataset(records.machine_id, records.readings, labels, window, dict(records.meta))


def split(ds: ClientDataset, train_fraction: float = 0.8) -> tuple[Windows, Windows, np.ndarray, np.ndarray]:
    """Chronological train/test split of a client's windows.

    Normalization statistics come only from the readings covered by the
    training windows and are applied to both sides. Returns
    ``(train, test, mean, std)``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = ds.num_windows
    n_train = int(np.floor(train_fraction * n + 1e-9))
    if n_train == 0 or n_train == n:
        raise ValueError(f"client {ds.client_id}: split of {n} windows at {train_fraction} leaves a side empty")
    covered = ds.readings[: n_train + ds.window - 1]
    mean = covered.mean(axis=0)
    std = covered.std(axis=0)
    x = _window_view(normalize(ds.readings, mean, std), ds.window)
    train = Windows(x[:n_train], ds.labels[:n_train])
    test = Windows(x[n_train:], ds.labels[n_train:])
    return train, test, mean, std


def prepare_clients(datasets, train_fraction: float = 0.8) -> list[FederatedClient]:
    clients = []
    for ds in sorted(datasets, key=lambda d: d.client_id):
        train, test, mean, std = split(ds, train_fraction)
        clients.append(FederatedClient(ds.client_id, train, test, dict(ds.meta), mean, std))
    return clients


# --- synthetic heterogeneous clients ---------------------------------------


@dataclass(frozen=True)
class Regime:
    """Data distribution of one planted cohort.

    Readings are ``baseline + scale * z`` with ``z`` a unit-variance AR(1)
    process per feature. A window is positive when ``rule`` applied to the
    mean of ``z`` over its last ``horizon`` hours exceeds ``threshold``
    (in units of that score's standard deviation).
    """

    baseline: tuple[float, ...]
    rule: tuple[float, ...]
    scale: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    threshold: float = 0.5
    horizon: int = 6
    model: str = ""


@dataclass(frozen=True)
class SynthSpec:
    num_clients: int = 20
    cohorts: int | tuple[Regime, ...] = 2
    samples_per_client: int = 1000
    noise: float = 0.0  # label flip probability
    window: int = 24
    baseline_spread: float = 1.0
    client_jitter: float = 1.0
    ar_coef: float = 0.7
    min_rule_angle: float = 60.0  # degrees between any two random rules


def random_regimes(count: int, rng: np.random.Generator, spread: float = 1.0, min_angle: float = 60.0) -> list[Regime]:
    """Draw ``count`` regimes with rules separated by at least ``min_angle`` degrees."""
    max_cos = np.cos(np.deg2rad(min_angle))
    rules: list[np.ndarray] = []
    attempts = 0
    while len(rules) < count:
        r = rng.standard_normal(len(FEATURES))
        r /= np.linalg.norm(r)
        attempts += 1
        if all(float(r @ other) < max_cos for other in rules) or attempts > 10_000:
            rules.append(r)
    regimes = []
    for j, r in enumerate(rules):
        base = rng.standard_normal(len(FEATURES)) * spread
        regimes.append(Regime(baseline=tuple(base), rule=tuple(r), model=f"model{j + 1}"))
    return regimes


def _ar1(rng, steps: int, features: int, coef: float) -> np.ndarray:
    eps = rng.standard_normal((steps, features)) * np.sqrt(1.0 - coef**2)
    z = np.empty((steps, features))
    z[0] = rng.standard_normal(features)
    for t in range(1, steps):
        z[t] = coef * z[t - 1] + eps[t]
    return z


def synth_generate(spec: SynthSpec, seed: int) -> tuple[list[ClientDataset], np.ndarray]:
    """Clients drawn from planted regimes; returns ``(datasets, planted_labels)``.

    Clients are assigned to regimes in balanced proportions under a seeded
    random permutation. Each client's readings get an extra per-client
    baseline offset (``client_jitter``), so raw feature statistics separate
    the regimes only partially while the labeling rules differ cleanly.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec.cohorts, int):
        if spec.cohorts < 1:
            raise ValueError("need at least one planted cohort")
        regimes = random_regimes(spec.cohorts, rng, spec.baseline_spread, spec.min_rule_angle)
    else:
        regimes = list(spec.cohorts)
    if spec.samples_per_client < 1:
        raise ValueError("samples_per_client must be >= 1")

    planted = rng.permutation(np.arange(spec.num_clients) % len(regimes))
    steps = spec.samples_per_client + spec.window - 1
    datasets = []
    for cid in range(spec.num_clients):
        reg = regimes[planted[cid]]
        crng = np.random.default_rng([seed, cid])
        z = _ar1(crng, steps, len(FEATURES), spec.ar_coef)
        offset = np.asarray(reg.baseline) + crng.standard_normal(len(FEATURES)) * spec.client_jitter
        readings = offset + np.asarray(reg.scale) * z

        horizon = min(reg.horizon, spec.window)
        recent = sliding_window_view(z, horizon, axis=0).mean(axis=2)[spec.window - horizon :]
        score = recent @ np.asarray(reg.rule)
        labels = (score > reg.threshold * score.std()).astype(np.int8)
        if spec.noise > 0:
            flip = crng.random(labels.size) < spec.noise
            labels = np.where(flip, 1 - labels, labels).astype(np.int8)

        meta = {"model": reg.model or f"model{planted[cid] + 1}", "age": int(crng.integers(1, 21))}
        datasets.append(ClientDataset(cid, readings, labels, spec.window, meta))
    return datasets, planted


def write_synthetic_csv(directory, num_machines: int = 100, hours: int = 8761, seed: int = 0,
                        failures_per_machine: float = 8.0, start: str = "2015-01-01 06:00:00") -> dict[str, Path]:
    """Write telemetry/failures/meta CSVs in the public dataset's layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    t0 = np.datetime64(datetime.strptime(start, "%Y-%m-%d %H:%M:%S"), "s")
    times = t0 + np.arange(hours) * HOUR
    stamps = [str(t).replace("T", " ") for t in times]
    means = np.array([170.0, 446.0, 100.0, 40.0])
    stds = np.array([15.0, 52.0, 11.0, 5.0])
    models = ["model1", "model2", "model3", "model4"]

    paths = {k: directory / f"{k}.csv" for k in ("telemetry", "failures", "meta")}
    with paths["telemetry"].open("w", newline="") as tel, paths["failures"].open("w", newline="") as fail, \
            paths["meta"].open("w", newline="") as meta:
        tw, fw, mw = csv.writer(tel), csv.writer(fail), csv.writer(meta)
        tw.writerow(TELEMETRY_HEADER)
        fw.writerow(FAILURES_HEADER)
        mw.writerow(META_HEADER)
        for mid in range(1, num_machines + 1):
            model_idx = int(rng.integers(len(models)))
            shift = (model_idx - 1.5) * 0.3 * stds
            readings = means + shift + stds * _ar1(rng, hours, 4, 0.5)
            n_fail = int(rng.poisson(failures_per_machine))
            fail_idx = np.sort(rng.choice(np.arange(24, hours), size=min(n_fail, hours - 24), replace=False))
            # readings drift upward over the day before a failure
            for i in fail_idx:
                lo = max(0, i - 23)
                readings[lo : i + 1] += np.linspace(0.0, 2.0, i + 1 - lo)[:, None] * stds
            for s, row in zip(stamps, readings):
                tw.writerow([s, mid, *(f"{v:.6f}" for v in row)])
            for i in fail_idx:
                fw.writerow([stamps[i], mid, COMPONENTS[int(rng.integers(4))]])
            mw.writerow([mid, models[model_idx], int(rng.integers(0, 21))])
    return paths
