"""
Spatial taxi-ride pricing game.

Trip records are cleaned and binned onto a lon/lat grid, turned into an
empirical GridModel (destination distributions, demand, initial taxi
distribution), and wrapped as a TabularEnv whose reward is the
price-multiplier formula

    r(i, j, mu[, m]) = (eta^0.5265 - eta_s[i]^0.5265) * f(i, j, mu[, m])

with a pluggable profit kernel f.
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional, Dict, Any, List, Sequence, Tuple, Callable, Mapping, Union

import numpy as np
import pandas as pd
import requests

from .core import MeanField, PolicyFlow, Simulator, TabularEnv, categorical_draw
from .exceptions import ConfigurationError, ContractViolationError, DataError
from .metrics import expected_return
from .mfairl import MfairlConfig, train_mfairl
from .pemmfirl import PemmfirlConfig, learned_equilibria, meta_train
from .solver import generate_demonstrations, solve_with_backoff

logger = logging.getLogger(__name__)

GRANULARITY = 0.01
EPOCH_MINUTES = 5
PRICING_HORIZON = 120
PRICING_CONTEXTS = (1.0, 2.0)
DEFAULT_ETA = 2.33
PRICE_EXPONENT = 0.5265
RADIUS_PENALTY = -1e3
BOUNDARY_EPS = 1e-9
SYNTHETIC_SEED = 20240601

REJECTION_RULES = ("unreadable", "timestamp", "duration", "bbox")
TRIP_COLUMNS = ["pickup_time", "dropoff_time", "pickup_lon", "pickup_lat", "dropoff_lon", "dropoff_lat", "distance"]
REPORT_COLUMNS = ["eta", "decay_rate", "profit_increase_rate", "fare_delta_per_ride"]

# yellow / green / legacy NYC TLC headers
COLUMN_ALIASES: Dict[str, Tuple[str, ...]] = {
    "pickup_time": ("tpep_pickup_datetime", "lpep_pickup_datetime", "pickup_datetime", "Trip_Pickup_DateTime"),
    "dropoff_time": ("tpep_dropoff_datetime", "lpep_dropoff_datetime", "dropoff_datetime", "Trip_Dropoff_DateTime"),
    "pickup_lon": ("pickup_longitude", "Pickup_longitude", "Start_Lon"),
    "pickup_lat": ("pickup_latitude", "Pickup_latitude", "Start_Lat"),
    "dropoff_lon": ("dropoff_longitude", "Dropoff_longitude", "End_Lon"),
    "dropoff_lat": ("dropoff_latitude", "Dropoff_latitude", "End_Lat"),
    "distance": ("trip_distance", "Trip_distance", "Trip_Distance"),
}

TABLE1_REFERENCE = [
    {"eta": 5.0, "decay_rate": -0.004, "profit_increase_rate": 0.028, "fare_delta_per_ride": 0.1308},
    {"eta": 10.0, "decay_rate": -0.005, "profit_increase_rate": 0.023, "fare_delta_per_ride": 0.1074},
    {"eta": 15.0, "decay_rate": -0.006, "profit_increase_rate": 0.034, "fare_delta_per_ride": 0.1589},
    {"eta": 20.0, "decay_rate": -0.007, "profit_increase_rate": 0.031, "fare_delta_per_ride": 0.1448},
]


@dataclass(frozen=True)
class BoundingBox:
    lon_min: float = -73.9
    lon_max: float = -73.8
    lat_min: float = 40.7
    lat_max: float = 40.8

    def contains(self, lon, lat) -> np.ndarray:
        lon, lat = np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
        return (lon >= self.lon_min) & (lon <= self.lon_max) & (lat >= self.lat_min) & (lat <= self.lat_max)


@dataclass(frozen=True)
class Grid:
    """Row-major cells over a bounding box; row 0 is the southern edge, column 0 the western edge"""
    bbox: BoundingBox = field(default_factory=BoundingBox)
    granularity: float = GRANULARITY

    @property
    def cols(self) -> int:
        return int(round((self.bbox.lon_max - self.bbox.lon_min) / self.granularity))

    @property
    def rows(self) -> int:
        return int(round((self.bbox.lat_max - self.bbox.lat_min) / self.granularity))

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols

    def coordinates(self, cells) -> Tuple[np.ndarray, np.ndarray]:
        """(row, col) of each cell index."""
        cells = np.asarray(cells, dtype=np.int64)
        return cells // self.cols, cells % self.cols

    def distances(self) -> np.ndarray:
        """Manhattan grid distance between every pair of cells, shape (C, C)."""
        r, c = self.coordinates(np.arange(self.num_cells))
        return np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])


def bin_cells(lons, lats, grid: Grid) -> np.ndarray:
    """
    Vectorized bin_to_cell.

    Lower edges are inclusive and upper edges exclusive, except the box maximum
    which closes the last row / column.

    Raises:
        ContractViolationError: If any point lies outside the box
    """
    lons, lats = np.asarray(lons, dtype=float), np.asarray(lats, dtype=float)
    if not np.all(grid.bbox.contains(lons, lats)):
        raise ContractViolationError("coordinates outside the grid's bounding box")
    col = np.floor((lons - grid.bbox.lon_min) / grid.granularity + BOUNDARY_EPS).astype(np.int64)
    row = np.floor((lats - grid.bbox.lat_min) / grid.granularity + BOUNDARY_EPS).astype(np.int64)
    col = np.clip(col, 0, grid.cols - 1)
    row = np.clip(row, 0, grid.rows - 1)
    return row * grid.cols + col


def bin_to_cell(lon: float, lat: float, grid: Optional[Grid] = None) -> int:
    """
    Cell index of a coordinate.

    Example:
        bin_to_cell(-73.845, 40.753)   # 55: column 5, row 5
    """
    return int(bin_cells([lon], [lat], grid or Grid())[0])


def cell_center(cell: int, grid: Optional[Grid] = None) -> Tuple[float, float]:
    grid = grid or Grid()
    if not 0 <= cell < grid.num_cells:
        raise ContractViolationError(f"cell {cell} outside 0..{grid.num_cells - 1}")
    row, col = grid.coordinates(cell)
    return (
        grid.bbox.lon_min + (int(col) + 0.5) * grid.granularity,
        grid.bbox.lat_min + (int(row) + 0.5) * grid.granularity,
    )


@dataclass(frozen=True)
class TripRecord:
    pickup_time: pd.Timestamp
    dropoff_time: pd.Timestamp
    pickup_lon: float
    pickup_lat: float
    dropoff_lon: float
    dropoff_lat: float
    distance: float

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> "TripRecord":
        return cls(**{name: row[name] for name in TRIP_COLUMNS})


@dataclass
class IngestResult:
    """Clean trips (canonical columns plus pickup_cell / dropoff_cell) and the rejection tally"""
    trips: pd.DataFrame
    rejections: Dict[str, int]
    total: int

    def records(self) -> List[TripRecord]:
        return [TripRecord.from_row(row) for row in self.trips.to_dict("records")]


def _canonical_columns(frame: pd.DataFrame, column_map: Optional[Mapping[str, str]]) -> pd.DataFrame:
    rename = {}
    present = set(frame.columns)
    for name in TRIP_COLUMNS:
        if column_map and name in column_map:
            rename[column_map[name]] = name
            continue
        if name in present:
            continue
        for alias in COLUMN_ALIASES[name]:
            if alias in present:
                rename[alias] = name
                break
    frame = frame.rename(columns=rename)
    missing = [c for c in TRIP_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"trip file lacks columns {missing}", details={"missing": missing})
    return frame[TRIP_COLUMNS]


def clean_trips(frame: pd.DataFrame, bbox: BoundingBox, tally: Dict[str, int]) -> pd.DataFrame:
    """
    Apply the cleaning rules in order and add their rejection counts to `tally`.

    1. timestamp: drop-off before pick-up
    2. duration: trip shorter than one minute
    3. bbox: pick-up or drop-off outside the box
    Rows whose fields do not parse are counted as "unreadable".
    """
    frame = pd.DataFrame({
        "pickup_time": pd.to_datetime(frame["pickup_time"], errors="coerce"),
        "dropoff_time": pd.to_datetime(frame["dropoff_time"], errors="coerce"),
        **{c: pd.to_numeric(frame[c], errors="coerce") for c in TRIP_COLUMNS[2:]},
    })
    readable = frame.notna().all(axis=1)
    tally["unreadable"] += int((~readable).sum())
    frame = frame[readable]

    ordered = frame["dropoff_time"] >= frame["pickup_time"]
    tally["timestamp"] += int((~ordered).sum())
    frame = frame[ordered]

    long_enough = (frame["dropoff_time"] - frame["pickup_time"]) >= pd.Timedelta(minutes=1)
    tally["duration"] += int((~long_enough).sum())
    frame = frame[long_enough]

    inside = bbox.contains(frame["pickup_lon"], frame["pickup_lat"]) & bbox.contains(frame["dropoff_lon"], frame["dropoff_lat"])
    tally["bbox"] += int((~inside).sum())
    return frame[inside]


def _open_source(source) -> Tuple[Any, Optional[requests.Response]]:
    text = str(source)
    if text.startswith(("http://", "https://")):
        response = requests.get(text, stream=True, timeout=30)
        try:
            response.raise_for_status()
        except requests.HTTPError as e:
            raise DataError(f"could not fetch trip data from {text}: {e}")
        response.raw.decode_content = True
        return response.raw, response
    if isinstance(source, (str, Path)):
        return str(source), None
    return source, None


def ingest_trips(
    source,
    bbox: Optional[BoundingBox] = None,
    granularity: float = GRANULARITY,
    column_map: Optional[Mapping[str, str]] = None,
    sep: str = ",",
    chunksize: int = 100_000,
) -> IngestResult:
    """
    Single-pass, chunked ingestion of delimiter-separated trip records.

    Args:
        source: Path, http(s) URL or text buffer
        bbox: Bounding box of the study area
        granularity: Cell size in degrees for the pickup_cell / dropoff_cell columns
        column_map: Optional canonical name -> file column overrides
        sep: Field delimiter
        chunksize: Rows per chunk

    Returns:
        IngestResult with per-rule rejection counts; malformed lines are
        counted as unreadable and skipped
    """
    bbox = bbox or BoundingBox()
    grid = Grid(bbox, granularity)
    tally = {rule: 0 for rule in REJECTION_RULES}

    malformed = [0]

    def bad_line(_fields):
        tally["unreadable"] += 1
        malformed[0] += 1
        return None

    handle, response = _open_source(source)
    parts, total = [], 0
    try:
        reader = pd.read_csv(handle, sep=sep, chunksize=chunksize, dtype=str, engine="python", on_bad_lines=bad_line)
        for chunk in reader:
            total += len(chunk)
            parts.append(clean_trips(_canonical_columns(chunk, column_map), bbox, tally))
    finally:
        if response is not None:
            response.close()
    total += malformed[0]  # malformed lines never reach a chunk
    trips = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=TRIP_COLUMNS)
    if len(trips):
        trips["pickup_cell"] = bin_cells(trips["pickup_lon"], trips["pickup_lat"], grid)
        trips["dropoff_cell"] = bin_cells(trips["dropoff_lon"], trips["dropoff_lat"], grid)
    else:
        trips["pickup_cell"] = pd.Series(dtype=np.int64)
        trips["dropoff_cell"] = pd.Series(dtype=np.int64)
    logger.info(
        "ingested trips total=%d kept=%d %s", total, len(trips),
        " ".join(f"rejected.{k}={v}" for k, v in tally.items()),
    )
    return IngestResult(trips, tally, total)


def validate_prices(eta: float, price_multipliers: np.ndarray) -> None:
    """
    Raises:
        ConfigurationError: If any multiplier is negative or exceeds eta
    """
    eta_s = np.asarray(price_multipliers, dtype=float)
    if np.any(eta_s < 0):
        raise ConfigurationError("price multipliers must be non-negative")
    if np.any(eta_s > eta):
        bad = np.flatnonzero(eta_s > eta).tolist()
        raise ConfigurationError(f"eta={eta} is below the price multiplier of cells {bad}", details={"cells": bad})


@dataclass
class GridModel:
    """
    Empirical pricing model on a grid.

    Attributes:
        grid: Cell layout
        destination: (C, C) destination distribution per pickup cell
        demand: (C,) mean pickups per epoch
        initial: (C,) initial empty-taxi distribution
        price_multipliers: (C,) eta_s per cell
        eta: Willingness-to-pay cap
        mean_distance: (C,) mean trip distance (miles) per pickup cell
        flagged_origins: Cells with no trips (uniform destination fallback)
        epoch_minutes: Length of one step
    """
    grid: Grid
    destination: np.ndarray
    demand: np.ndarray
    initial: np.ndarray
    price_multipliers: np.ndarray
    eta: float = DEFAULT_ETA
    mean_distance: Optional[np.ndarray] = None
    flagged_origins: List[int] = field(default_factory=list)
    epoch_minutes: int = EPOCH_MINUTES

    def __post_init__(self):
        C = self.grid.num_cells
        self.destination = np.asarray(self.destination, dtype=float)
        self.demand = np.asarray(self.demand, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        self.price_multipliers = np.asarray(self.price_multipliers, dtype=float)
        self.mean_distance = np.zeros(C) if self.mean_distance is None else np.asarray(self.mean_distance, dtype=float)
        if self.destination.shape != (C, C) or self.initial.shape != (C,) or self.demand.shape != (C,):
            raise ContractViolationError(f"grid model arrays must match {C} cells")
        if not np.allclose(self.destination.sum(axis=1), 1.0) or not np.isclose(self.initial.sum(), 1.0):
            raise ContractViolationError("destination and initial distributions must be on the simplex")
        validate_prices(self.eta, self.price_multipliers)

    @property
    def num_cells(self) -> int:
        return self.grid.num_cells

    def with_eta(self, eta: float) -> "GridModel":
        return replace(self, eta=float(eta))

    def price_factor(self) -> np.ndarray:
        """eta^0.5265 - eta_s^0.5265 per origin cell."""
        return self.eta ** PRICE_EXPONENT - self.price_multipliers ** PRICE_EXPONENT

    def to_json(self, path=None) -> str:
        payload = {
            "bbox": asdict(self.grid.bbox), "granularity": self.grid.granularity,
            "destination": self.destination.tolist(), "demand": self.demand.tolist(),
            "initial": self.initial.tolist(), "price_multipliers": self.price_multipliers.tolist(),
            "eta": self.eta, "mean_distance": self.mean_distance.tolist(),
            "flagged_origins": self.flagged_origins, "epoch_minutes": self.epoch_minutes,
        }
        text = json.dumps(payload, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "GridModel":
        text = Path(source).read_text() if isinstance(source, Path) or not str(source).lstrip().startswith("{") else source
        d = json.loads(text)
        return cls(
            Grid(BoundingBox(**d["bbox"]), d["granularity"]), d["destination"], d["demand"], d["initial"],
            d["price_multipliers"], d["eta"], d["mean_distance"], d["flagged_origins"], d["epoch_minutes"],
        )


def build_grid_model(
    trips: Union[IngestResult, pd.DataFrame],
    initial_epochs: int = 3,
    grid: Optional[Grid] = None,
    eta: float = DEFAULT_ETA,
    price_multipliers: Optional[Sequence[float]] = None,
    epoch_minutes: int = EPOCH_MINUTES,
) -> GridModel:
    """
    Empirical model from cleaned trips.

    Args:
        trips: Output of ingest_trips (or its trips frame)
        initial_epochs: K; pickups in the first K epochs of each day give the
            initial taxi distribution
        grid: Cell layout (defaults to the 10x10 study grid)
        eta: Price cap
        price_multipliers: eta_s per cell (defaults to 1 everywhere)
        epoch_minutes: Epoch length

    Raises:
        DataError: If there are no trips or the initial window is empty
    """
    frame = trips.trips if isinstance(trips, IngestResult) else trips
    grid = grid or Grid()
    C = grid.num_cells
    if len(frame) == 0:
        raise DataError("cannot build a grid model from zero trips")
    if "pickup_cell" not in frame:
        frame = frame.assign(
            pickup_cell=bin_cells(frame["pickup_lon"], frame["pickup_lat"], grid),
            dropoff_cell=bin_cells(frame["dropoff_lon"], frame["dropoff_lat"], grid),
        )
    origin = frame["pickup_cell"].to_numpy(dtype=np.int64)
    dest = frame["dropoff_cell"].to_numpy(dtype=np.int64)

    counts = np.zeros((C, C))
    np.add.at(counts, (origin, dest), 1.0)
    per_origin = counts.sum(axis=1)
    flagged = np.flatnonzero(per_origin == 0).tolist()
    destination = np.where(per_origin[:, None] > 0, counts / np.maximum(per_origin[:, None], 1.0), 1.0 / C)
    if flagged:
        logger.warning("grid model: %d origin cells without trips use a uniform destination", len(flagged))

    times = pd.to_datetime(frame["pickup_time"])
    span = (times.max() - times.min()).total_seconds() / 60.0
    num_epochs = max(1, int(math.ceil(span / epoch_minutes)))
    demand = np.bincount(origin, minlength=C) / num_epochs

    minute_of_day = times.dt.hour * 60 + times.dt.minute
    window = (minute_of_day // epoch_minutes).to_numpy() < initial_epochs
    if not window.any():
        raise DataError(
            f"no pickups in the first {initial_epochs} epochs; increase initial_epochs",
            details={"initial_epochs": initial_epochs},
        )
    initial = np.bincount(origin[window], minlength=C).astype(float)
    initial /= initial.sum()

    dist_sum = np.bincount(origin, weights=frame["distance"].to_numpy(dtype=float), minlength=C)
    overall = float(frame["distance"].mean())
    mean_distance = np.where(per_origin > 0, dist_sum / np.maximum(per_origin, 1.0), overall)

    multipliers = np.ones(C) if price_multipliers is None else np.asarray(price_multipliers, dtype=float)
    model = GridModel(grid, destination, demand, initial, multipliers, eta, mean_distance, flagged, epoch_minutes)
    logger.info("built grid model cells=%d trips=%d epochs=%d flagged=%d", C, len(frame), num_epochs, len(flagged))
    return model


@dataclass(frozen=True)
class ProfitKernel:
    """
    f(i, j, mu[, m]) = (base_fare + w(m) * rate_per_mile * d_j) * avail_j(mu) - move_cost * dist(i, j)

    avail_j(mu) = min(1, demand_j / (mu(j) * fleet_size)) is also the match
    probability at j; w(m) = m when context_weighted, else 1.
    """
    model: GridModel
    base_fare: float = 2.5
    rate_per_mile: float = 2.5
    move_cost: float = 0.3
    fleet_size: float = 500.0
    context_weighted: bool = False

    def availability(self, mu: np.ndarray) -> np.ndarray:
        supply = np.asarray(mu, dtype=float) * self.fleet_size
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(supply > 0, self.model.demand / supply, 1.0)
        return np.minimum(1.0, ratio)

    def fare(self, m: Optional[float]) -> np.ndarray:
        weight = float(m) if (self.context_weighted and m is not None) else 1.0
        return self.base_fare + weight * self.rate_per_mile * self.model.mean_distance

    def table(self, mu: np.ndarray, m: Optional[float] = None) -> np.ndarray:
        """(C, C) kernel values for every origin i and pickup cell j."""
        gain = self.fare(m) * self.availability(mu)
        return gain[None, :] - self.move_cost * self.model.grid.distances()

    def __call__(self, i: int, j: int, mu, m: Optional[float] = None) -> float:
        return float(self.table(getattr(mu, "probs", mu), m)[i, j])


def pricing_reward(
    i: int,
    j: int,
    mu,
    m: Optional[float],
    model: GridModel,
    profit_kernel: Optional[Callable[..., float]] = None,
) -> float:
    """
    (eta^0.5265 - eta_s[i]^0.5265) * f(i, j, mu[, m]).

    Example:
        pricing_reward(0, 0, mu, None, model, lambda i, j, mu, m: 1.0)   # 2.33^0.5265 - 1
    """
    kernel = profit_kernel or ProfitKernel(model)
    return float(model.price_factor()[i] * kernel(i, j, mu, m))


def build_pricing_env(
    model: GridModel,
    kernel: Optional[ProfitKernel] = None,
    horizon: int = PRICING_HORIZON,
    contexts: Sequence[float] = PRICING_CONTEXTS,
    radius: Optional[int] = None,
) -> TabularEnv:
    """
    TabularEnv over empty-taxi positions; the action is the pickup cell.

    A matched taxi relocates to a destination drawn from the pickup cell's
    destination distribution; an unmatched one stays at the pickup cell.
    Actions beyond `radius` (grid distance) carry a -1e3 reward penalty.
    """
    kernel = kernel or ProfitKernel(model)
    C = model.num_cells
    factor = model.price_factor()
    penalty = np.zeros((C, C)) if radius is None else np.where(model.grid.distances() > radius, RADIUS_PENALTY, 0.0)
    eye = np.eye(C)

    def kernel_fn(mu: np.ndarray) -> np.ndarray:
        match = kernel.availability(mu)
        nxt = match[:, None] * model.destination + (1.0 - match)[:, None] * eye
        return np.broadcast_to(nxt, (C, C, C)).copy()

    def reward_table_fn(mu: np.ndarray, m: float) -> np.ndarray:
        return factor[:, None] * kernel.table(mu, m) + penalty

    return TabularEnv(
        name="taxi", num_states=C, num_actions=C, contexts=tuple(contexts), horizon=horizon,
        initial_mean_field=MeanField(model.initial),
        reward=lambda s, a, mu, m: float(reward_table_fn(mu.probs, m)[s, a]),
        transition=lambda s, a, mu: kernel_fn(mu.probs)[s, a].copy(),
        kernel_fn=kernel_fn, reward_table_fn=reward_table_fn,
        constants={
            "eta": model.eta, "cells": C, "radius": radius, "base_fare": kernel.base_fare,
            "rate_per_mile": kernel.rate_per_mile, "move_cost": kernel.move_cost,
            "fleet_size": kernel.fleet_size, "context_weighted": kernel.context_weighted,
        },
    )


@dataclass(frozen=True)
class Ride:
    t: int
    taxi: int
    origin: int
    pickup: int
    destination: int
    profit: float


class FleetLedger:
    """Matched rides of a fleet simulation with a running profit total"""

    def __init__(self, num_taxis: int):
        self.num_taxis = num_taxis
        self.rides: List[Ride] = []
        self.running_total = 0.0

    def record(self, ride: Ride) -> None:
        self.rides.append(ride)
        self.running_total += ride.profit

    @property
    def served(self) -> int:
        return len(self.rides)

    @property
    def total_profit(self) -> float:
        return float(sum(r.profit for r in self.rides))

    @property
    def profit_per_ride(self) -> float:
        return self.total_profit / self.served if self.rides else 0.0

    @property
    def profit_per_taxi(self) -> float:
        return self.total_profit / self.num_taxis


def simulate_fleet(
    model: GridModel,
    kernel: ProfitKernel,
    policies: Sequence[PolicyFlow],
    taxi_contexts: np.ndarray,
    context_values: Sequence[float],
    horizon: int,
    rng: np.random.Generator,
) -> FleetLedger:
    """
    Run a finite fleet through the pricing dynamics and book every matched ride.

    Args:
        model: Grid model (destinations, initial distribution, prices)
        kernel: Profit kernel giving availability and fares
        policies: Policy flow per context index
        taxi_contexts: (n,) context index of each taxi
        context_values: Context value per index (fare weights)
        horizon: Steps to simulate
        rng: Random source
    """
    taxi_contexts = np.asarray(taxi_contexts, dtype=np.int64)
    n = taxi_contexts.shape[0]
    ledger = FleetLedger(n)
    factor = model.price_factor()
    distances = model.grid.distances()
    positions = categorical_draw(np.broadcast_to(model.initial, (n, model.num_cells)), rng)
    for t in range(horizon):
        mu = np.bincount(positions, minlength=model.num_cells) / n
        avail = kernel.availability(mu)
        pickups = np.empty(n, dtype=np.int64)
        for k in np.unique(taxi_contexts):
            rows = np.flatnonzero(taxi_contexts == k)
            pickups[rows] = categorical_draw(policies[k].tables[t][positions[rows]], rng)
        matched = rng.random(n) < avail[pickups]
        dests = pickups.copy()
        rows = np.flatnonzero(matched)
        if rows.size:
            dests[rows] = categorical_draw(model.destination[pickups[rows]], rng)
        for r in rows:
            fare = kernel.fare(context_values[taxi_contexts[r]])[pickups[r]]
            profit = factor[positions[r]] * fare - kernel.move_cost * distances[positions[r], pickups[r]]
            ledger.record(Ride(t, int(r), int(positions[r]), int(pickups[r]), int(dests[r]), float(profit)))
        positions = dests
    return ledger


def compare_ledgers(eta: float, learned: FleetLedger, baseline: FleetLedger) -> Dict[str, float]:
    """One report row: served-passenger decay, profit increase rate and fare delta per ride."""
    decay = (learned.served - baseline.served) / baseline.served if baseline.served else 0.0
    base = baseline.profit_per_taxi
    increase = (learned.profit_per_taxi - base) / abs(base) if base else 0.0
    return {
        "eta": float(eta),
        "decay_rate": float(decay),
        "profit_increase_rate": float(increase),
        "fare_delta_per_ride": float(learned.profit_per_ride - baseline.profit_per_ride),
    }


def reference_note(real_data: bool) -> str:
    lines = []
    if not real_data:
        lines.append("reference values not checkable without dataset")
    lines.append("reference (eta, decay_rate, profit_increase_rate, fare_delta_per_ride):")
    for row in TABLE1_REFERENCE:
        lines.append(
            f"  {row['eta']:g}, {row['decay_rate']:+.1%}, {row['profit_increase_rate']:+.1%}, +${row['fare_delta_per_ride']:.4f}"
        )
    return "\n".join(lines)


def heatmap_frame(values: np.ndarray, grid: Grid) -> pd.DataFrame:
    """Per-cell values as `cell, row, col, value` rows."""
    cells = np.arange(grid.num_cells)
    rows, cols = grid.coordinates(cells)
    return pd.DataFrame({"cell": cells, "row": rows, "col": cols, "value": np.asarray(values, dtype=float)})


def write_heatmaps(model: GridModel, out_dir, policies: Optional[Mapping[Any, PolicyFlow]] = None, origin: Optional[int] = None) -> List[Path]:
    """Initial taxi distribution, demand and (optionally) the step-0 policy at a starred origin per context."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, values in (("initial_taxis", model.initial), ("demand", model.demand), ("price_multipliers", model.price_multipliers)):
        path = out_dir / f"heatmap_{name}.csv"
        heatmap_frame(values, model.grid).to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    if policies is not None:
        star = int(np.argmax(model.initial)) if origin is None else origin
        for m, pf in policies.items():
            path = out_dir / f"heatmap_policy_origin{star}_context{m}.csv"
            heatmap_frame(pf.tables[0][star], model.grid).to_csv(path, index=False, float_format="%.17g")
            written.append(path)
    return written


def synthetic_trips(
    seed: int = SYNTHETIC_SEED,
    count: int = 5000,
    grid: Optional[Grid] = None,
    days: int = 2,
    dirty_fraction: float = 0.0,
) -> pd.DataFrame:
    """
    Synthetic trip file in the canonical column schema.

    Pickups concentrate around two hotspots; most trips end within one ring
    of their origin. With dirty_fraction > 0 that share of rows is corrupted
    evenly across the three cleaning rules.
    """
    grid = grid or Grid()
    rng = np.random.default_rng(seed)
    C = grid.num_cells
    hot = np.array([C // 4, (3 * C) // 4])
    weights = np.ones(C)
    weights[hot] += C / 4.0
    origin = rng.choice(C, size=count, p=weights / weights.sum())
    r, c = grid.coordinates(origin)
    dr = rng.choice([-1, 0, 0, 1], size=count)
    dc = rng.choice([-1, 0, 0, 1], size=count)
    dest = np.clip(r + dr, 0, grid.rows - 1) * grid.cols + np.clip(c + dc, 0, grid.cols - 1)

    def jitter(cells):
        rr, cc = grid.coordinates(cells)
        lon = grid.bbox.lon_min + (cc + rng.uniform(0.05, 0.95, size=len(cells))) * grid.granularity
        lat = grid.bbox.lat_min + (rr + rng.uniform(0.05, 0.95, size=len(cells))) * grid.granularity
        return lon, lat

    p_lon, p_lat = jitter(origin)
    d_lon, d_lat = jitter(dest)
    start = pd.Timestamp("2016-06-01")
    offsets = rng.uniform(0, days * 24 * 60, size=count)
    pickup = start + pd.to_timedelta(offsets, unit="m")
    durations = rng.uniform(3, 30, size=count)
    dropoff = pickup + pd.to_timedelta(durations, unit="m")
    frame = pd.DataFrame({
        "pickup_time": pickup, "dropoff_time": dropoff,
        "pickup_lon": p_lon, "pickup_lat": p_lat, "dropoff_lon": d_lon, "dropoff_lat": d_lat,
        "distance": durations * 0.1 + rng.uniform(0, 0.5, size=count),
    })
    n_dirty = int(round(dirty_fraction * count))
    if n_dirty:
        rows = rng.choice(count, size=n_dirty, replace=False)
        for k, row in enumerate(rows):
            if k % 3 == 0:
                frame.loc[row, "dropoff_time"] = frame.loc[row, "pickup_time"] - pd.Timedelta(minutes=5)
            elif k % 3 == 1:
                frame.loc[row, "dropoff_time"] = frame.loc[row, "pickup_time"] + pd.Timedelta(seconds=30)
            else:
                frame.loc[row, "pickup_lon"] = -770.4
    return frame


@dataclass
class PricingConfig:
    etas: Tuple[float, ...] = (5.0, 10.0, 15.0, 20.0)
    horizon: int = PRICING_HORIZON
    demo_count: int = 200
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    hidden: int = 64
    fleet_size: int = 500
    radius: Optional[int] = None
    base_fare: float = 2.5
    rate_per_mile: float = 2.5
    move_cost: float = 0.3
    algorithm: str = "pemmfirl"
    tol: float = 1e-8
    max_iter: int = 2000
    seed: int = 0


@dataclass
class ProfitReport:
    rows: pd.DataFrame
    baseline: Dict[float, FleetLedger]
    learned: Dict[float, FleetLedger]
    expected_profit: Dict[str, float] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.rows[REPORT_COLUMNS].to_csv(path, index=False, float_format="%.17g")


def run_pricing_experiment(
    model: GridModel,
    config: Optional[PricingConfig] = None,
    trainer: Optional[Callable[..., Any]] = None,
) -> ProfitReport:
    """
    Baseline equilibrium vs policies induced by the learned reward.

    1. Baseline: equilibrium of the origin-only (context-free) profit.
    2. Experts: per-context equilibria of the context-weighted profit, then
       context-labelled demonstrations.
    3. Learner (PEMMFIRL or MF-AIRL) trained on the unlabelled demos.
    4. Equilibria under the learned reward, then fleet simulations of both
       policy sets under the context-weighted profit, for every eta.

    Args:
        model: GridModel (real or synthetic)
        config: Experiment settings
        trainer: Optional (simulator, demos, env) -> learner state; defaults
            to meta_train / train_mfairl per config.algorithm
    """
    config = config or PricingConfig()
    if config.algorithm not in ("pemmfirl", "mfairl"):
        raise ConfigurationError(f"unknown algorithm '{config.algorithm}'")
    rng = np.random.default_rng(config.seed)
    kernel_kw = {
        "base_fare": config.base_fare, "rate_per_mile": config.rate_per_mile,
        "move_cost": config.move_cost, "fleet_size": float(config.fleet_size),
    }
    truth_kernel = ProfitKernel(model, context_weighted=True, **kernel_kw)
    env = build_pricing_env(model, truth_kernel, config.horizon, radius=config.radius)
    base_env = build_pricing_env(model, ProfitKernel(model, **kernel_kw), config.horizon, radius=config.radius)
    solve_kw = {"tol": config.tol, "max_iter": config.max_iter}

    baseline_eq = solve_with_backoff(base_env, env.contexts[0], **solve_kw)
    experts = {m: solve_with_backoff(env, m, **solve_kw) for m in env.contexts}
    prior = np.full(env.num_contexts, 1.0 / env.num_contexts)
    demos = generate_demonstrations(env, experts, prior, config.demo_count, config.horizon, rng)

    simulator = Simulator(env)
    if trainer is not None:
        state = trainer(simulator, demos, env)
    elif config.algorithm == "pemmfirl":
        state = meta_train(simulator, demos, PemmfirlConfig(
            iterations=config.iterations, batch_size=config.batch_size, num_contexts=env.num_contexts,
            lr=config.lr, psi_lr=config.lr, sampler_lr=config.lr, hidden=config.hidden,
        ), seed=config.seed)
    else:
        state = train_mfairl(simulator, demos, MfairlConfig(
            iterations=config.iterations, batch_size=config.batch_size, lr=config.lr,
            sampler_lr=config.lr, hidden=config.hidden,
        ), seed=config.seed)
    learned_map, _ = learned_equilibria(state, env, demos, **solve_kw)
    learned = [learned_map[m] for m in env.contexts]

    taxi_contexts = categorical_draw(np.broadcast_to(prior, (config.fleet_size, env.num_contexts)), rng)
    ledger_seed = int(rng.integers(2 ** 31))
    rows, base_ledgers, learned_ledgers = [], {}, {}
    for eta in config.etas:
        priced = model.with_eta(eta)
        eta_kernel = replace(truth_kernel, model=priced)
        base_ledgers[eta] = simulate_fleet(
            priced, eta_kernel, [baseline_eq.policy_flow] * env.num_contexts, taxi_contexts,
            env.contexts, config.horizon, np.random.default_rng(ledger_seed),
        )
        learned_ledgers[eta] = simulate_fleet(
            priced, eta_kernel, [eq.policy_flow for eq in learned], taxi_contexts,
            env.contexts, config.horizon, np.random.default_rng(ledger_seed),
        )
        rows.append(compare_ledgers(eta, learned_ledgers[eta], base_ledgers[eta]))
    expected = {
        "baseline": float(np.mean([expected_return(env, baseline_eq.mean_field_flow, baseline_eq.policy_flow, m) for m in env.contexts])),
        "learned": float(np.mean([expected_return(env, eq.mean_field_flow, eq.policy_flow, m) for eq, m in zip(learned, env.contexts)])),
    }
    logger.info("pricing experiment algorithm=%s %s", config.algorithm, " ".join(f"{k}={v:.6g}" for k, v in expected.items()))
    return ProfitReport(pd.DataFrame(rows, columns=REPORT_COLUMNS), base_ledgers, learned_ledgers, expected)
