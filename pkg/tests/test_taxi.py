import io

import numpy as np
import pandas as pd
import pytest

from mfirl.core import PolicyFlow
from mfirl.exceptions import ConfigurationError, ContractViolationError, DataError
from mfirl.taxi import (
    REPORT_COLUMNS,
    TRIP_COLUMNS,
    BoundingBox,
    FleetLedger,
    Grid,
    GridModel,
    PricingConfig,
    ProfitKernel,
    Ride,
    bin_cells,
    bin_to_cell,
    build_grid_model,
    build_pricing_env,
    cell_center,
    clean_trips,
    compare_ledgers,
    ingest_trips,
    pricing_reward,
    reference_note,
    run_pricing_experiment,
    simulate_fleet,
    synthetic_trips,
    validate_prices,
    write_heatmaps,
)

HEADER = "pickup_time,dropoff_time,pickup_lon,pickup_lat,dropoff_lon,dropoff_lat,distance\n"
DIRTY_FILE = HEADER + (
    "2016-06-01 00:02:00,2016-06-01 00:12:00,-73.845,40.753,-73.85,40.75,1.2\n"
    "2016-06-01 00:05:00,2016-06-01 00:01:00,-73.845,40.753,-73.85,40.75,1.0\n"
    "2016-06-01 00:05:00,2016-06-01 00:05:30,-73.845,40.753,-73.85,40.75,0.1\n"
    "2016-06-01 00:05:00,2016-06-01 00:15:00,-74.500,40.753,-73.85,40.75,3.0\n"
    "not a time,2016-06-01 00:15:00,-73.845,40.753,-73.85,40.75,3.0\n"
    "2016-06-01 00:05:00,2016-06-01 00:15:00,-73.845,40.753,-73.85,40.75,3.0,extra\n"
    "2016-06-01 00:07:00,2016-06-01 00:20:00,-73.855,40.745,-73.89,40.71,2.5\n"
)

COARSE = Grid(granularity=0.05)


@pytest.fixture
def coarse_model():
    trips = synthetic_trips(seed=4, count=600, grid=COARSE)
    return build_grid_model(trips, initial_epochs=24, grid=COARSE)


class TestBinning:
    @pytest.mark.parametrize("lon,lat,cell", [(-73.845, 40.753, 55), (-73.9, 40.7, 0), (-73.8, 40.8, 99)])
    def test_cells(self, lon, lat, cell):
        assert bin_to_cell(lon, lat) == cell

    def test_outside_box(self):
        with pytest.raises(ContractViolationError):
            bin_to_cell(-74.0, 40.75)

    def test_center_round_trip(self):
        for cell in (0, 37, 99):
            assert bin_to_cell(*cell_center(cell)) == cell

    def test_coarse_grid(self):
        assert (COARSE.rows, COARSE.cols) == (2, 2)
        assert bin_cells([-73.88, -73.82], [40.71, 40.79], COARSE).tolist() == [0, 3]
        np.testing.assert_array_equal(COARSE.distances()[0], [0, 1, 1, 2])


class TestIngest:
    def test_rejection_counts(self):
        result = ingest_trips(io.StringIO(DIRTY_FILE))
        assert result.total == 7
        assert len(result.trips) == 2
        assert result.rejections == {"unreadable": 2, "timestamp": 1, "duration": 1, "bbox": 1}
        assert result.trips["pickup_cell"].tolist() == [55, 44]

    def test_tlc_header_aliases(self):
        text = (
            "tpep_pickup_datetime,tpep_dropoff_datetime,pickup_longitude,pickup_latitude,"
            "dropoff_longitude,dropoff_latitude,trip_distance,fare_amount\n"
            "2016-06-01 00:02:00,2016-06-01 00:12:00,-73.845,40.753,-73.85,40.75,1.2,9.5\n"
        )
        records = ingest_trips(io.StringIO(text)).records()
        assert len(records) == 1
        assert records[0].distance == pytest.approx(1.2)

    def test_column_map_and_separator(self):
        text = "a;b;c;d;e;f;g\n2016-06-01 00:02:00;2016-06-01 00:12:00;-73.845;40.753;-73.85;40.75;1.2\n"
        column_map = dict(zip(["pickup_time", "dropoff_time", "pickup_lon", "pickup_lat", "dropoff_lon", "dropoff_lat", "distance"], "abcdefg"))
        assert len(ingest_trips(io.StringIO(text), column_map=column_map, sep=";").trips) == 1

    def test_missing_columns(self):
        with pytest.raises(DataError):
            ingest_trips(io.StringIO("pickup_time,distance\n2016-06-01 00:02:00,1.0\n"))

    def test_synthetic_corruption_hits_each_rule(self):
        frame = synthetic_trips(seed=1, count=300, dirty_fraction=0.1)
        result = ingest_trips(io.StringIO(frame.to_csv(index=False)), chunksize=64)
        assert result.rejections == {"unreadable": 0, "timestamp": 10, "duration": 10, "bbox": 10}
        assert len(result.trips) == 270

    @pytest.mark.parametrize("dirty", [False, True])
    def test_cleaning_is_idempotent(self, dirty):
        text = DIRTY_FILE if dirty else synthetic_trips(seed=2, count=200, dirty_fraction=0.1).to_csv(index=False)
        first = ingest_trips(io.StringIO(text))
        tally = {rule: 0 for rule in first.rejections}
        again = clean_trips(first.trips, BoundingBox(), tally)
        assert tally == {rule: 0 for rule in first.rejections}
        pd.testing.assert_frame_equal(again.reset_index(drop=True), first.trips[TRIP_COLUMNS])

        second = ingest_trips(io.StringIO(first.trips.to_csv(index=False)))
        assert sum(second.rejections.values()) == 0
        assert second.trips["pickup_cell"].tolist() == first.trips["pickup_cell"].tolist()


class TestGridModel:
    def test_distributions(self, coarse_model):
        assert coarse_model.num_cells == 4
        np.testing.assert_allclose(coarse_model.destination.sum(axis=1), 1.0)
        assert coarse_model.initial.sum() == pytest.approx(1.0)
        assert np.all(coarse_model.demand >= 0)

    def test_no_trips(self):
        with pytest.raises(DataError):
            build_grid_model(synthetic_trips(count=10, grid=COARSE).iloc[:0], grid=COARSE)

    def test_empty_initial_window(self):
        trips = synthetic_trips(count=20, grid=COARSE)
        trips = trips[trips["pickup_time"].dt.hour >= 1]
        with pytest.raises(DataError):
            build_grid_model(trips, initial_epochs=1, grid=COARSE)

    def test_json_round_trip(self, coarse_model, tmp_path):
        coarse_model.to_json(tmp_path / "grid_model.json")
        back = GridModel.from_json(tmp_path / "grid_model.json")
        assert back.grid == coarse_model.grid
        np.testing.assert_array_equal(back.destination, coarse_model.destination)
        assert back.eta == coarse_model.eta

    def test_price_validation(self):
        validate_prices(2.33, np.array([1.0, 2.33]))
        with pytest.raises(ConfigurationError):
            validate_prices(2.33, np.array([1.0, 3.0]))
        with pytest.raises(ConfigurationError):
            validate_prices(2.33, np.array([-0.5]))


class TestReward:
    def test_unit_kernel(self, coarse_model):
        value = pricing_reward(0, 0, coarse_model.initial, None, coarse_model, lambda i, j, mu, m: 1.0)
        assert value == pytest.approx(2.33 ** 0.5265 - 1.0, abs=1e-10)

    def test_availability_caps_at_one(self, coarse_model):
        kernel = ProfitKernel(coarse_model, fleet_size=1.0)
        np.testing.assert_allclose(kernel.availability(np.zeros(4)), 1.0)
        assert np.all(kernel.availability(coarse_model.initial) <= 1.0)

    def test_context_weighted_fare(self, coarse_model):
        kernel = ProfitKernel(coarse_model, context_weighted=True)
        np.testing.assert_allclose(kernel.fare(2.0) - kernel.fare(1.0), kernel.rate_per_mile * coarse_model.mean_distance)

    def test_env_kernel_and_radius(self, coarse_model):
        env = build_pricing_env(coarse_model, horizon=3, radius=1)
        kernel = env.kernel(coarse_model.initial)
        assert kernel.shape == (4, 4, 4)
        np.testing.assert_allclose(kernel.sum(axis=-1), 1.0)
        table = env.reward_table(coarse_model.initial, 1.0)
        assert table[0, 3] < -900
        assert table[0, 1] > -900


class TestFleet:
    def test_ledger_totals(self):
        ledger = FleetLedger(num_taxis=2)
        ledger.record(Ride(0, 0, 1, 1, 2, 3.0))
        ledger.record(Ride(1, 1, 2, 2, 0, 1.0))
        assert ledger.served == 2
        assert ledger.total_profit == ledger.running_total == 4.0
        assert ledger.profit_per_ride == 2.0
        assert ledger.profit_per_taxi == 2.0

    def test_compare_ledgers(self):
        base, learned = FleetLedger(1), FleetLedger(1)
        for profit in (1.0, 1.0):
            base.record(Ride(0, 0, 0, 0, 0, profit))
        learned.record(Ride(0, 0, 0, 0, 0, 3.0))
        row = compare_ledgers(5.0, learned, base)
        assert row == {"eta": 5.0, "decay_rate": -0.5, "profit_increase_rate": 0.5, "fare_delta_per_ride": 2.0}

    def test_simulation_books_matched_rides(self, coarse_model, rng):
        kernel = ProfitKernel(coarse_model, fleet_size=1.0)
        stay = PolicyFlow(np.tile(np.eye(4), (4, 1, 1)))
        ledger = simulate_fleet(coarse_model, kernel, [stay, stay], np.array([0, 1] * 15), (1.0, 2.0), 3, rng)
        assert 0 < ledger.served <= 90
        assert all(r.origin == r.pickup for r in ledger.rides)
        assert ledger.total_profit == pytest.approx(ledger.running_total)


def test_reference_note():
    assert "reference values not checkable without dataset" in reference_note(False)
    assert "not checkable" not in reference_note(True)


def test_heatmaps(coarse_model, tmp_path):
    policies = {1.0: PolicyFlow(np.full((2, 4, 4), 0.25))}
    paths = write_heatmaps(coarse_model, tmp_path, policies, origin=2)
    names = {p.name for p in paths}
    assert "heatmap_demand.csv" in names
    assert "heatmap_policy_origin2_context1.0.csv" in names


@pytest.mark.slow
def test_pricing_experiment_report(coarse_model, tmp_path):
    config = PricingConfig(
        etas=(5.0, 10.0), horizon=3, demo_count=20, iterations=2, batch_size=4, hidden=4, fleet_size=40,
    )
    report = run_pricing_experiment(coarse_model, config)
    assert list(report.rows.columns) == REPORT_COLUMNS
    assert report.rows["eta"].tolist() == [5.0, 10.0]
    report.to_csv(tmp_path / "profit_report.csv")
    assert (tmp_path / "profit_report.csv").exists()


@pytest.mark.slow
def test_context_aware_learner_earns_at_least_context_blind(coarse_model):
    profits = {"pemmfirl": [], "mfairl": []}
    for seed in range(5):
        for algorithm in profits:
            config = PricingConfig(
                etas=(5.0,), horizon=3, demo_count=80, iterations=150, batch_size=16, lr=1e-2,
                hidden=8, fleet_size=40, algorithm=algorithm, seed=seed,
            )
            profits[algorithm].append(run_pricing_experiment(coarse_model, config).expected_profit["learned"])
    assert np.median(profits["pemmfirl"]) >= np.median(profits["mfairl"])
