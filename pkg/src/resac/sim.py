"""Event-driven bidirectional bus corridor with holding control.

Buses leave both terminals on a fixed timetable, serve Poisson origin-destination
demand and traverse segments at Gaussian speeds. After boarding and alighting
finish at a stop, the simulator pauses and asks the agent for a holding time.

Stops are indexed physically ``0 .. num_stops-1``. Direction 0 runs
``0 -> num_stops-1``; direction 1 runs back. A trip's *position* ``p`` counts
stops from its origin terminal, and segment ``k`` joins physical stops ``k`` and
``k + 1`` in either direction.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any

import numpy as np

V_MIN = 0.5
SPEED_REDRAWS = 16


class EventKind(IntEnum):
    # value doubles as the same-time tiebreak priority
    ARRIVAL = 0
    DWELL_COMPLETE = 1
    DISPATCH = 2
    SERVICE_END = 3


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid corridor config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class CorridorConfig:
    od_rates: Any  # [hour][origin][destination], passengers per second
    speed_mean: Any  # [hour][segment], m/s
    num_stops: int = 22
    service_start: float = 6 * 3600.0
    service_end: float = 19 * 3600.0
    dispatch_interval: float = 360.0
    directional_offset: float = 180.0
    scheduled_headway: float | None = None
    h_max: float = 180.0
    stop_spacing: Any = 500.0  # metres, scalar or one entry per segment
    speed_std: float = 1.5
    board_time: float = 2.0
    alight_time: float = 1.0
    reward_weights: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    capacity: int | None = None
    max_fleet: int = 64
    name: str = "custom"

    def __post_init__(self):
        self.od_rates = np.asarray(self.od_rates, dtype=np.float64)
        self.speed_mean = np.asarray(self.speed_mean, dtype=np.float64)
        self.reward_weights = tuple(float(w) for w in self.reward_weights)
        if self.scheduled_headway is None:
            self.scheduled_headway = float(self.dispatch_interval)
        self.validate()

    @property
    def tau(self) -> float:
        return float(self.scheduled_headway)

    @property
    def num_hours(self) -> int:
        return max(1, math.ceil((self.service_end - self.service_start) / 3600.0 - 1e-9))

    @property
    def segment_lengths(self) -> np.ndarray:
        lengths = np.broadcast_to(np.asarray(self.stop_spacing, dtype=np.float64), (self.num_stops - 1,))
        return np.array(lengths)

    @property
    def cardinalities(self) -> tuple[int, int, int, int]:
        """Category counts for (bus_id, station_id, direction, time_period)."""
        return (self.max_fleet, self.num_stops, 2, self.num_hours)

    def validate(self) -> None:
        problems = []
        n = self.num_stops
        if n < 3:
            problems.append(f"num_stops: need >= 3, got {n}")
        if self.service_end <= self.service_start:
            problems.append("service_end: must be after service_start")
        if self.dispatch_interval <= 0:
            problems.append("dispatch_interval: must be > 0")
        if not (0 <= self.directional_offset < self.dispatch_interval):
            problems.append("directional_offset: must lie in [0, dispatch_interval)")
        if self.scheduled_headway <= 0:
            problems.append("scheduled_headway: must be > 0")
        if self.h_max <= 0:
            problems.append("h_max: must be > 0")
        if self.speed_std < 0:
            problems.append("speed_std: must be >= 0")
        if self.board_time < 0 or self.alight_time < 0:
            problems.append("board_time/alight_time: must be >= 0")
        if self.capacity is not None and self.capacity < 1:
            problems.append("capacity: must be >= 1 or null")
        if self.max_fleet < 1:
            problems.append("max_fleet: must be >= 1")
        if n >= 3:
            H = self.num_hours
            if self.od_rates.shape != (H, n, n):
                problems.append(f"od_rates: expected shape ({H}, {n}, {n}), got {self.od_rates.shape}")
            else:
                if np.any(self.od_rates < 0) or not np.all(np.isfinite(self.od_rates)):
                    problems.append("od_rates: entries must be finite and >= 0")
                if np.any(np.diagonal(self.od_rates, axis1=1, axis2=2) != 0):
                    problems.append("od_rates: diagonal entries (origin == destination) must be 0")
            if self.speed_mean.shape != (H, n - 1):
                problems.append(f"speed_mean: expected shape ({H}, {n - 1}), got {self.speed_mean.shape}")
            elif np.any(self.speed_mean <= 0):
                problems.append("speed_mean: entries must be > 0")
            try:
                if np.any(self.segment_lengths <= 0):
                    problems.append("stop_spacing: entries must be > 0")
            except ValueError:
                problems.append(f"stop_spacing: need a scalar or {n - 1} entries")
        if problems:
            raise ConfigError(problems)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["od_rates"] = self.od_rates.tolist()
        doc["speed_mean"] = self.speed_mean.tolist()
        doc["stop_spacing"] = np.asarray(self.stop_spacing).tolist()
        doc["reward_weights"] = list(self.reward_weights)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CorridorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in sorted(unknown)])
        missing = {"od_rates", "speed_mean"} - set(doc)
        if missing:
            raise ConfigError([f"{k}: required" for k in sorted(missing)])
        return cls(**doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CorridorConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def synthetic_corridor(
    num_stops: int,
    service_start: float,
    service_end: float,
    boardings_per_hour: float,
    base_speed: float,
    peak_hours: tuple[int, ...] = (),
    peak_factor: float = 1.6,
    peak_slowdown: float = 0.75,
    name: str = "synthetic",
    **overrides,
) -> CorridorConfig:
    """Synthetic scenario: each origin spreads ``boardings_per_hour`` per direction evenly over its downstream stops.

    Clock hours listed in ``peak_hours`` (e.g. 7 for 07:00-08:00) scale demand by
    ``peak_factor`` and speeds by ``peak_slowdown``.
    """
    H = max(1, math.ceil((service_end - service_start) / 3600.0 - 1e-9))
    n = num_stops
    od = np.zeros((H, n, n))
    speed = np.full((H, n - 1), float(base_speed))
    for h in range(H):
        clock_hour = int(service_start // 3600) + h
        peak = clock_hour in peak_hours
        per_origin = boardings_per_hour / 3600.0 * (peak_factor if peak else 1.0)
        for i in range(n):
            if i < n - 1:
                od[h, i, i + 1 :] = per_origin / (n - 1 - i)
            if i > 0:
                od[h, i, :i] = per_origin / i
        if peak:
            speed[h] *= peak_slowdown
    return CorridorConfig(
        od_rates=od,
        speed_mean=speed,
        num_stops=n,
        service_start=service_start,
        service_end=service_end,
        name=name,
        **overrides,
    )


def default_corridor(**overrides) -> CorridorConfig:
    """22-stop, 06:00-19:00 synthetic corridor (demand and speeds are made up)."""
    kw = dict(stop_spacing=500.0, h_max=180.0, max_fleet=64)
    kw.update(overrides)
    return synthetic_corridor(
        22, 6 * 3600.0, 19 * 3600.0, boardings_per_hour=40.0, base_speed=7.0,
        peak_hours=(7, 8, 17, 18), name="default-synthetic", **kw,
    )


def smoke_corridor(**overrides) -> CorridorConfig:
    """6-stop, two-hour synthetic corridor used for quick training runs.

    Frequent service and heavy demand make bunching, and so holding, matter
    within a short episode.
    """
    kw = dict(
        stop_spacing=800.0, h_max=120.0, max_fleet=40, dispatch_interval=150.0,
        directional_offset=75.0, speed_std=1.0,
    )
    kw.update(overrides)
    return synthetic_corridor(
        6, 7 * 3600.0, 9 * 3600.0, boardings_per_hour=240.0, base_speed=6.0,
        peak_hours=(8,), name="smoke-synthetic", **kw,
    )


SCENARIOS = {"default": default_corridor, "smoke": smoke_corridor}


def load_corridor(spec: str | Path | None) -> CorridorConfig:
    """Load a corridor from a JSON path or a built-in scenario name."""
    if spec is None:
        return default_corridor()
    if str(spec) in SCENARIOS:
        return SCENARIOS[str(spec)]()
    return CorridorConfig.load(spec)


# --- stochastic primitives and reward ------------------------------------------------------


def sample_passenger_arrivals(rate: float, duration: float, rng: np.random.Generator) -> int:
    if rate < 0 or duration < 0:
        raise ValueError("rate and duration must be non-negative")
    mean = rate * duration
    return 0 if mean == 0 else int(rng.poisson(mean))


def sample_segment_speed(mean: float, std: float, rng: np.random.Generator, v_min: float = V_MIN) -> float:
    """Gaussian speed truncated below at ``v_min``: redraw a few times, then clamp."""
    if mean <= 0:
        raise ValueError("mean speed must be positive")
    if std == 0:
        return float(mean)
    for _ in range(SPEED_REDRAWS):
        v = float(rng.normal(mean, std))
        if v >= v_min:
            return v
    return float(v_min)


def compute_reward(h_f: float, h_b: float, tau: float, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """Quadratic ridge: zero at h_f = h_b = tau, penalizing imbalance and mean deviation."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    even, dev = weights
    return -even * ((h_f - h_b) / tau) ** 2 - dev * (((h_f + h_b) / 2.0 - tau) / tau) ** 2


# --- simulator state ------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    bus_id: int
    station_id: int
    direction: int
    time_period: int
    h_f: float
    h_b: float
    v: float

    @property
    def categorical(self) -> tuple[int, int, int, int]:
        return (self.bus_id, self.station_id, self.direction, self.time_period)


@dataclass
class DecisionRequest:
    observation: Observation | None
    reward_since_last: float | None
    episode_done: bool
    final_rewards: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    bus_id: int
    stop_id: int
    direction: int


@dataclass
class _Trip:
    seq: int  # index within its direction
    order: int  # global dispatch order, the same-time tiebreak
    direction: int
    dispatch_time: float
    bus_id: int
    n: int
    arrival: list = field(default_factory=list)
    departure: list = field(default_factory=list)
    position: int = 0
    at_stop: bool = True
    ready_time: float = 0.0  # end of dwell
    wanted_departure: float | None = None
    waiting_on_leader: bool = False
    last_speed: float | None = None
    onboard: np.ndarray | None = None  # (origin, destination) counts

    def __post_init__(self):
        self.arrival = [None] * self.n
        self.departure = [None] * self.n


@dataclass
class _Decision:
    time: float
    bus_id: int
    stop_id: int
    direction: int
    time_period: int
    h_f: float
    h_b: float
    v: float
    action: float = math.nan
    reward: float = math.nan


TRAJECTORY_COLUMNS = ["time", "bus_id", "stop_id", "direction", "h_f", "h_b", "v", "action", "reward"]


class CorridorSim:
    """Synchronous reset/step simulator; one decision is outstanding at a time."""

    def __init__(self, config: CorridorConfig):
        config.validate()
        self.config = config
        self._lengths = config.segment_lengths
        self._pending: _Trip | None = None
        self._done = True

    # -- public API -------------------------------------------------------------------------

    def reset(self, seed: int | None = None) -> DecisionRequest:
        cfg = self.config
        n = cfg.num_stops
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.clock = cfg.service_start
        self._events: list = []
        self._counter = 0
        self.trips: list[list[_Trip]] = [[], []]
        self._order = 0
        self.bus_location: list[int | None] = []  # terminal stop when idle, None while in service
        self.bus_trip: list[_Trip | None] = []
        self.waiting = np.zeros((n, n), dtype=np.int64)
        self.generated = np.zeros((n, n), dtype=np.int64)
        self.alighted = np.zeros((n, n), dtype=np.int64)
        self._last_gen = np.full((n, 2), cfg.service_start)
        self.decisions: list[_Decision] = []
        self._open_decision: dict[int, int] = {}  # bus -> index of decision awaiting its reward
        self._unsent_reward: dict[int, float] = {}  # bus -> reward computed but not yet delivered
        self.clamped_actions = 0
        self.trace: list[tuple] = []
        self.time_violations = 0
        self.overtaking_violations = 0
        self._last_pop = -math.inf
        self._pending = None
        self._done = False
        for d in (0, 1):
            t = cfg.service_start + (cfg.directional_offset if d == 1 else 0.0)
            while t < cfg.service_end:
                self._push(t, EventKind.DISPATCH, (d,), order=self._order)
                self._order += 1
                t += cfg.dispatch_interval
        self._push(cfg.service_end, EventKind.SERVICE_END, (), order=self._order)
        self._order = 0
        return self._advance()

    def step(self, action: float) -> DecisionRequest:
        if self._done or self._pending is None:
            raise RuntimeError("step() called with no pending decision; call reset()")
        hold = float(action)
        if not (0.0 <= hold <= self.config.h_max) or not math.isfinite(hold):
            self.clamped_actions += 1
            hold = min(max(hold, 0.0), self.config.h_max) if math.isfinite(hold) else 0.0
        trip = self._pending
        self._pending = None
        self.decisions[self._open_decision[trip.bus_id]].action = hold
        trip.wanted_departure = self.clock + hold
        self._try_depart(trip)
        return self._advance()

    @property
    def done(self) -> bool:
        return self._done

    @property
    def fleet_size(self) -> int:
        return len(self.bus_trip)

    def dispatch_count(self, direction: int) -> int:
        return len(self.trips[direction])

    def onboard_by_od(self) -> np.ndarray:
        n = self.config.num_stops
        total = np.zeros((n, n), dtype=np.int64)
        for trips in self.trips:
            for t in trips:
                if t.onboard is not None:
                    total += t.onboard
        return total

    def ledger_balanced(self) -> bool:
        return bool(np.array_equal(self.generated, self.waiting + self.onboard_by_od() + self.alighted))

    def total_reward(self) -> float:
        return float(sum(d.reward for d in self.decisions if not math.isnan(d.reward)))

    def trajectory_rows(self) -> list[dict]:
        return [
            {c: getattr(d, c) for c in TRAJECTORY_COLUMNS}
            for d in self.decisions
        ]

    def write_trajectory(self, path: str | Path) -> None:
        write_trajectory_csv(path, self.trajectory_rows())

    def headways(self, trip: _Trip, p: int, clock: float) -> tuple[float, float]:
        return self._forward_headway(trip, p, clock), self._backward_headway(trip, p, clock)

    def compute_headways(self, bus_id: int, clock: float | None = None) -> tuple[float, float]:
        trip = self.bus_trip[bus_id]
        if trip is None:
            raise ValueError(f"bus {bus_id} is not in service")
        return self.headways(trip, trip.position, self.clock if clock is None else clock)

    # -- event machinery ---------------------------------------------------------------------

    def _push(self, time: float, kind: EventKind, payload: tuple, order: int, bus: int = -1) -> None:
        heapq.heappush(self._events, (time, int(kind), order, bus, self._counter, payload))
        self._counter += 1

    def _advance(self) -> DecisionRequest:
        while self._events:
            time, kind, order, bus, _, payload = heapq.heappop(self._events)
            if time < self._last_pop:
                self.time_violations += 1
            self._last_pop = time
            self.clock = time
            kind = EventKind(kind)
            if kind is EventKind.DISPATCH:
                self._on_dispatch(payload[0], order)
            elif kind is EventKind.ARRIVAL:
                self._on_arrival(payload[0])
            elif kind is EventKind.DWELL_COMPLETE:
                req = self._on_dwell_complete(payload[0])
                if req is not None:
                    return req
            # SERVICE_END only closes the timetable; trips in progress run to completion
        self._done = True
        final = dict(self._unsent_reward)
        self._unsent_reward.clear()
        return DecisionRequest(None, None, True, final)

    def _record(self, kind: EventKind, trip: _Trip, stop: int) -> None:
        self.trace.append((self.clock, kind.name, trip.bus_id, trip.direction, trip.seq, stop))

    def _phys(self, direction: int, p: int) -> int:
        return p if direction == 0 else self.config.num_stops - 1 - p

    def _segment(self, direction: int, p: int) -> int:
        """Physical segment traversed when leaving position ``p``."""
        return p if direction == 0 else self.config.num_stops - 2 - p

    def _hour(self, t: float) -> int:
        h = int((t - self.config.service_start) // 3600.0)
        return min(max(h, 0), self.config.num_hours - 1)

    def _on_dispatch(self, direction: int, order: int) -> None:
        cfg = self.config
        terminal = self._phys(direction, 0)
        idle = [b for b, loc in enumerate(self.bus_location) if loc == terminal]
        if idle:
            bus = min(idle)
        else:
            bus = len(self.bus_trip)
            if bus >= cfg.max_fleet:
                raise RuntimeError(f"fleet would exceed max_fleet={cfg.max_fleet}")
            self.bus_location.append(None)
            self.bus_trip.append(None)
        trip = _Trip(
            seq=len(self.trips[direction]), order=order, direction=direction,
            dispatch_time=self.clock, bus_id=bus, n=cfg.num_stops,
        )
        trip.onboard = np.zeros((cfg.num_stops, cfg.num_stops), dtype=np.int64)
        self.trips[direction].append(trip)
        self.bus_location[bus] = None
        self.bus_trip[bus] = trip
        self._record(EventKind.DISPATCH, trip, terminal)
        self._push(self.clock, EventKind.ARRIVAL, (trip,), order=trip.order, bus=bus)

    def _generate(self, stop: int, direction: int, until: float) -> None:
        cfg = self.config
        start = self._last_gen[stop, direction]
        if until <= start:
            return
        self._last_gen[stop, direction] = until
        n = cfg.num_stops
        dests = np.arange(stop + 1, n) if direction == 0 else np.arange(0, stop)
        if dests.size == 0:
            return
        lo = max(start, cfg.service_start)
        hi = min(until, cfg.service_end)
        mean = np.zeros(dests.size)
        for h in range(self._hour(lo), self._hour(max(lo, hi - 1e-9)) + 1) if hi > lo else ():
            h0 = cfg.service_start + 3600.0 * h
            overlap = min(hi, h0 + 3600.0) - max(lo, h0)
            if overlap > 0:
                mean += cfg.od_rates[h, stop, dests] * overlap
        if not np.any(mean > 0):
            return
        counts = self.rng.poisson(mean)
        self.waiting[stop, dests] += counts
        self.generated[stop, dests] += counts

    def _on_arrival(self, trip: _Trip) -> None:
        cfg = self.config
        p = trip.position
        stop = self._phys(trip.direction, p)
        trip.arrival[p] = self.clock
        trip.at_stop = True
        if trip.seq > 0 and self.trips[trip.direction][trip.seq - 1].arrival[p] is None:
            self.overtaking_violations += 1
        self._record(EventKind.ARRIVAL, trip, stop)
        alighters = int(trip.onboard[:, stop].sum())
        self.alighted[:, stop] += trip.onboard[:, stop]
        trip.onboard[:, stop] = 0
        if p == cfg.num_stops - 1:
            # trip complete; the terminal arrival stands in for a departure so followers see a headway
            trip.departure[p] = self.clock
            self._close_decision(trip, p)
            trip.at_stop = False
            self.bus_trip[trip.bus_id] = None
            self.bus_location[trip.bus_id] = stop
            return
        self._generate(stop, trip.direction, self.clock)
        dests = np.arange(stop + 1, cfg.num_stops) if trip.direction == 0 else np.arange(0, stop)
        want = self.waiting[stop, dests]
        if cfg.capacity is not None:
            room = max(cfg.capacity - int(trip.onboard.sum()), 0)
            board = np.zeros_like(want)
            for k in range(want.size):  # nearest destinations board first
                take = min(int(want[k]), room)
                board[k] = take
                room -= take
        else:
            board = want.copy()
        self.waiting[stop, dests] -= board
        trip.onboard[stop, dests] += board
        dwell = max(cfg.board_time * int(board.sum()), cfg.alight_time * alighters)
        trip.ready_time = self.clock + dwell
        self._push(trip.ready_time, EventKind.DWELL_COMPLETE, (trip,), order=trip.order, bus=trip.bus_id)

    def _on_dwell_complete(self, trip: _Trip) -> DecisionRequest | None:
        cfg = self.config
        p = trip.position
        stop = self._phys(trip.direction, p)
        self._record(EventKind.DWELL_COMPLETE, trip, stop)
        h_f, h_b = self.headways(trip, p, self.clock)
        if trip.last_speed is None:
            v = float(cfg.speed_mean[self._hour(self.clock), self._segment(trip.direction, p)])
        else:
            v = trip.last_speed
        reward = self._close_decision(trip, p, (h_f, h_b))
        obs = Observation(trip.bus_id, stop, trip.direction, self._hour(self.clock), h_f, h_b, v)
        self.decisions.append(_Decision(self.clock, trip.bus_id, stop, trip.direction, obs.time_period, h_f, h_b, v))
        self._open_decision[trip.bus_id] = len(self.decisions) - 1
        self._pending = trip
        return DecisionRequest(obs, reward, False)

    def _close_decision(self, trip: _Trip, p: int, headways: tuple[float, float] | None = None) -> float | None:
        """Score the bus's previous decision from the headways seen now.

        At a decision point the reward is returned for immediate delivery; at a trip
        end it is held until the bus's next request (or the episode end).
        """
        bus = trip.bus_id
        idx = self._open_decision.pop(bus, None)
        prior = self._unsent_reward.pop(bus, None)
        if idx is None:
            return prior
        h_f, h_b = headways if headways is not None else self.headways(trip, p, self.clock)
        r = compute_reward(h_f, h_b, self.config.tau, self.config.reward_weights)
        self.decisions[idx].reward = r
        if headways is None:
            self._unsent_reward[bus] = r
            return None
        return r

    def _try_depart(self, trip: _Trip) -> None:
        p = trip.position
        leader = self.trips[trip.direction][trip.seq - 1] if trip.seq > 0 else None
        if leader is not None and leader.departure[p] is None:
            trip.waiting_on_leader = True  # released when the leader leaves this stop
            return
        t = trip.wanted_departure
        if leader is not None:
            t = max(t, leader.departure[p])
        self._depart(trip, t)

    def _depart(self, trip: _Trip, t_dep: float) -> None:
        cfg = self.config
        p = trip.position
        trip.departure[p] = t_dep
        trip.waiting_on_leader = False
        leader = self.trips[trip.direction][trip.seq - 1] if trip.seq > 0 else None
        if leader is not None and leader.departure[p] is not None and t_dep < leader.departure[p]:
            self.overtaking_violations += 1
        seg = self._segment(trip.direction, p)
        speed = sample_segment_speed(cfg.speed_mean[self._hour(t_dep), seg], cfg.speed_std, self.rng)
        arrive = t_dep + self._lengths[seg] / speed
        if leader is not None:
            # no passing on the road: queue behind the leader's (possibly still scheduled) arrival
            lead_arrive = leader.arrival[p + 1]
            if lead_arrive is None and leader.position == p + 1:
                lead_arrive = leader._seg_end
            if lead_arrive is not None:
                arrive = max(arrive, lead_arrive)
        trip.last_speed = speed
        trip.at_stop = False
        trip.position = p + 1
        trip._seg_start = t_dep
        trip._seg_end = arrive
        self._push(arrive, EventKind.ARRIVAL, (trip,), order=trip.order, bus=trip.bus_id)
        follower = self._follower(trip)
        if follower is not None and follower.waiting_on_leader and follower.position == p:
            self._depart(follower, max(follower.wanted_departure, t_dep))

    def _follower(self, trip: _Trip) -> _Trip | None:
        trips = self.trips[trip.direction]
        return trips[trip.seq + 1] if trip.seq + 1 < len(trips) else None

    # -- headways ----------------------------------------------------------------------------

    def _forward_headway(self, trip: _Trip, p: int, clock: float) -> float:
        leader = self.trips[trip.direction][trip.seq - 1] if trip.seq > 0 else None
        if leader is None or leader.departure[p] is None:
            return self.config.tau
        return max(0.0, clock - leader.departure[p])

    def _backward_headway(self, trip: _Trip, p: int, clock: float) -> float:
        cfg = self.config
        f = self._follower(trip)
        if f is None:
            return cfg.tau
        hour = self._hour(clock)
        d = trip.direction
        if f.at_stop or f.position == 0:
            q = f.position
            if q >= p:
                return 0.0
            if f.departure[q] is not None:
                wait = f.departure[q] - clock
            elif f.waiting_on_leader:
                wait = max(f.wanted_departure, trip.departure[q] or clock) - clock
            else:
                wait = f.ready_time - clock
            eta = max(wait, 0.0)
            start = q
        else:
            # travelling from position q-1 to q; progress measured on its actual schedule
            q = f.position
            seg = self._segment(d, q - 1)
            span = f._seg_end - f._seg_start
            frac = 1.0 if span <= 0 else min(max((clock - f._seg_start) / span, 0.0), 1.0)
            # a follower still holding has a departure scheduled in the future
            eta = max(f._seg_start - clock, 0.0) + (1.0 - frac) * self._lengths[seg] / cfg.speed_mean[hour, seg]
            start = q
            if q >= p:
                return eta
        for k in range(start, p):
            seg = self._segment(d, k)
            eta += self._lengths[seg] / cfg.speed_mean[hour, seg]
        return float(eta)


def write_trajectory_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            w.writerow([fmt(r[c]) for c in TRAJECTORY_COLUMNS])


def read_trajectory_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "time": float(r["time"]), "bus_id": int(r["bus_id"]), "stop_id": int(r["stop_id"]),
            "direction": int(r["direction"]), "h_f": float(r["h_f"]), "h_b": float(r["h_b"]),
            "v": float(r["v"]), "action": float(r["action"]), "reward": float(r["reward"]),
        })
    return out


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x) + 0.0, ".17g")  # + 0.0 folds -0.0 into 0.0


def run_policy(sim: CorridorSim, policy, seed: int | None = None) -> float:
    """Roll out ``policy(observation) -> hold seconds`` for one episode; returns total reward."""
    req = sim.reset(seed)
    while not req.episode_done:
        req = sim.step(policy(req.observation))
    return sim.total_reward()
