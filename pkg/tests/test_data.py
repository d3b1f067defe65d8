import csv

import numpy as np
import pytest

from licfl.data import (
    HOUR,
    ClientDataset,
    DataFormatError,
    MachineRecords,
    ReferentialError,
    Regime,
    SynthSpec,
    failure_labels,
    load_csv,
    prepare_clients,
    split,
    synth_generate,
    to_dataset,
    window_and_label,
)
from licfl.metrics import f1
from licfl.model import NetworkSpec, client_update, init_params, predict

T0 = np.datetime64("2015-01-01T06:00:00")


def write_csvs(tmp_path, telemetry, failures=(), meta=None):
    paths = {}
    for name, header, rows in [
        ("telemetry", ["datetime", "machineID", "volt", "rotate", "pressure", "vibration"], telemetry),
        ("failures", ["datetime", "machineID", "failure"], failures),
        ("meta", ["machineID", "model", "age"], meta or []),
    ]:
        path = tmp_path / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        paths[name] = path
    return paths


def stamp(i):
    return str(T0 + i * HOUR).replace("T", " ")


def hourly_rows(machine, hours, rng):
    return [[stamp(i), machine, *rng.normal(100, 10, 4).round(4)] for i in range(hours)]


def make_records(hours, failure_hours=()):
    ts = T0 + np.arange(hours) * HOUR
    rng = np.random.default_rng(0)
    return MachineRecords(1, ts, rng.standard_normal((hours, 4)), [(T0 + h * HOUR, "comp1") for h in failure_hours])


def interval_oracle(hours, failure_hours, w):
    """Brute force: window ending at hour i is positive iff some failure f has i - w < f <= i."""
    return np.array([int(any(i - w < f <= i for f in failure_hours)) for i in range(w - 1, hours)])


def test_load_csv_groups_and_meta(tmp_path):
    rng = np.random.default_rng(0)
    tel = hourly_rows(1, 30, rng) + hourly_rows(2, 30, rng)
    paths = write_csvs(tmp_path, tel, [[stamp(5), 2, "comp3"]], [[1, "model3", 18], [2, "model4", 7]])
    machines = load_csv(paths["telemetry"], paths["failures"], paths["meta"])
    assert sorted(machines) == [1, 2]
    assert len(machines[1]) == 30 and machines[1].readings.shape == (30, 4)
    assert machines[2].failures == [(T0 + 5 * HOUR, "comp3")]
    assert machines[1].meta == {"model": "model3", "age": 18}


def test_load_csv_full_year(tmp_path):
    paths = write_csvs(tmp_path, hourly_rows(7, 8761, np.random.default_rng(1)))
    machines = load_csv(paths["telemetry"], paths["failures"])
    assert list(machines) == [7] and len(machines[7]) == 8761
    ds = to_dataset(machines[7])
    assert ds.num_windows == 8738
    assert not ds.labels.any()  # empty failures file


def test_load_csv_resorts_out_of_order(tmp_path):
    rows = hourly_rows(1, 10, np.random.default_rng(2))
    shuffled = [rows[i] for i in [3, 0, 9, 1, 2, 8, 4, 5, 7, 6]]
    paths = write_csvs(tmp_path, shuffled)
    with pytest.warns(UserWarning, match="re-sorted"):
        machines = load_csv(paths["telemetry"], paths["failures"])
    expected = np.array([r[2:] for r in rows], dtype=float)
    np.testing.assert_array_equal(machines[1].readings, expected)
    assert np.all(np.diff(machines[1].timestamps) > np.timedelta64(0))


def test_load_csv_malformed_row_names_line(tmp_path):
    rows = hourly_rows(1, 5, np.random.default_rng(3))
    rows[2][3] = "abc"
    paths = write_csvs(tmp_path, rows)
    with pytest.raises(DataFormatError, match=r"telemetry.csv:4"):
        load_csv(paths["telemetry"], paths["failures"])


def test_load_csv_unknown_machine(tmp_path):
    paths = write_csvs(tmp_path, hourly_rows(1, 5, np.random.default_rng(3)), [[stamp(1), 9, "comp1"]])
    with pytest.raises(ReferentialError, match="machine 9"):
        load_csv(paths["telemetry"], paths["failures"])


def test_window_count_and_no_failures():
    recs = make_records(8761)
    win = window_and_label(recs)
    assert len(win) == 8738
    assert win.x.shape == (8738, 24, 4)
    assert not win.y.any()
    np.testing.assert_array_equal(win.x[0], recs.readings[:24])
    np.testing.assert_array_equal(win.x[-1], recs.readings[-24:])


def test_single_failure_label_span():
    recs = make_records(300, failure_hours=[100])
    y = window_and_label(recs).y
    ends = np.arange(23, 300)
    np.testing.assert_array_equal(ends[y == 1], np.arange(100, 124))


def test_labels_match_interval_oracle():
    rng = np.random.default_rng(5)
    fails = sorted(rng.choice(np.arange(500), size=12, replace=False).tolist())
    recs = make_records(500, fails)
    for w in (1, 6, 24):
        np.testing.assert_array_equal(failure_labels(recs.timestamps, recs.failure_times, w),
                                      interval_oracle(500, fails, w))


def test_too_few_records():
    with pytest.raises(ValueError):
        window_and_label(make_records(10))


def make_dataset(n_windows, window=24, seed=0):
    rng = np.random.default_rng(seed)
    readings = rng.normal(50, 5, (n_windows + window - 1, 4))
    return ClientDataset(0, readings, rng.integers(0, 2, n_windows).astype(np.int8), window)


def test_split_sizes_and_order():
    ds = make_dataset(10)
    train, test, _, _ = split(ds, 0.8)
    assert (len(train), len(test)) == (8, 2)
    # the first test window starts one hour after the last train window
    assert np.array_equal(train.x[-1][1:], test.x[0][:-1])
    big = make_dataset(8738)
    train, test, _, _ = split(big, 0.5)
    assert (len(train), len(test)) == (4369, 4369)


def test_split_uses_train_statistics_only():
    ds = make_dataset(100)
    ds.readings[100:] += 40.0  # shift the late (test-period) readings
    train, test, mean, std = split(ds, 0.5)
    covered = ds.readings[: 50 + 23]
    np.testing.assert_allclose(mean, covered.mean(axis=0))
    np.testing.assert_allclose(train.x.reshape(-1, 4).mean(axis=0), 0.0, atol=0.2)
    assert np.all(test.x[-1].mean(axis=0) > 3.0)  # not re-centered on its own mean


def test_split_rejects_empty_side():
    with pytest.raises(ValueError):
        split(make_dataset(3), 0.1)
    with pytest.raises(ValueError):
        split(make_dataset(3), 1.0)


def test_zero_std_feature_maps_to_zero():
    ds = make_dataset(20)
    ds.readings[:, 2] = 7.0
    train, test, _, _ = split(ds, 0.5)
    assert not train.x[..., 2].any() and not test.x[..., 2].any()


def test_synth_deterministic():
    spec = SynthSpec(num_clients=6, samples_per_client=50)
    a, la = synth_generate(spec, 3)
    b, lb = synth_generate(spec, 3)
    np.testing.assert_array_equal(la, lb)
    for da, db in zip(a, b):
        assert da.readings.tobytes() == db.readings.tobytes()
        assert da.labels.tobytes() == db.labels.tobytes()


def test_synth_single_cohort_exchangeable():
    spec = SynthSpec(num_clients=6, cohorts=1, samples_per_client=3000, client_jitter=0.0)
    datasets, planted = synth_generate(spec, 0)
    assert set(planted) == {0}
    means = np.stack([d.readings.mean(axis=0) for d in datasets])
    assert np.all(means.std(axis=0) < 0.15)
    rates = [d.labels.mean() for d in datasets]
    assert max(rates) - min(rates) < 0.1


def test_synth_balanced_planting():
    _, planted = synth_generate(SynthSpec(num_clients=20, cohorts=2, samples_per_client=30), 1)
    assert np.bincount(planted).tolist() == [10, 10]


def test_opposite_rules_cross_evaluate_badly():
    rule = (0.6, -0.3, 0.7, 0.2)
    regimes = (Regime(baseline=(0, 0, 0, 0), rule=rule),
               Regime(baseline=(0, 0, 0, 0), rule=tuple(-r for r in rule)))
    spec = SynthSpec(num_clients=2, cohorts=regimes, samples_per_client=2000)
    datasets, planted = synth_generate(spec, 0)
    clients = {planted[c.client_id]: c for c in prepare_clients(datasets)}
    a, b = clients[0], clients[1]
    p = init_params(NetworkSpec(96, (16,)), 0)
    p = client_update(p, a.train.x, a.train.y, lr=0.5, epochs=5, seed=0)
    assert f1(predict(p, a.test.x), a.test.y) > 0.5
    assert f1(predict(p, b.test.x), b.test.y) < 0.5
