"""Monte Carlo resilience simulation and impact metrics.

Each event starts from the healthy network.  At every step the failed set is
applied, load shedding is optimised and the shed power per carrier recorded.
Events are drawn by index from the master seed, so results do not depend on
how the work is split over processes.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from mesres.bounds import OperationalBounds
from mesres.errors import ConfigError, ContractViolation, MesError, SimulationError
from mesres.events import Event, EventParams, generate_event
from mesres.model.degrade import degrade
from mesres.model.network import Carrier, MultiEnergyNetwork, component_group
from mesres.shedding import LoadShedder

log = logging.getLogger(__name__)

CARRIERS = (Carrier.ELECTRICITY, Carrier.GAS, Carrier.HEAT)
GROUPS = ("el", "gas", "heat", "cp")
FLOAT_FORMAT = "%.12g"
#: shed power below this (MW) is solver noise and recorded as zero
LS_TOL = 1e-6


@dataclass
class RunRecord:
    """Per-step load shedding of one event."""

    event_id: int
    #: shed power (MW) per step and carrier, columns in ``CARRIERS`` order
    ls: np.ndarray
    #: part of ``ls`` due to demands cut off from their slack
    dropped: np.ndarray
    feasible: np.ndarray
    #: component id -> steps at which it was broken
    broken: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.ls.shape[0]

    @property
    def total(self) -> float:
        return float(self.ls.sum())

    def carrier_sum(self, carrier) -> float:
        return float(self.ls[:, CARRIERS.index(Carrier.parse(carrier))].sum())


def simulate_event(shedder: LoadShedder | MultiEnergyNetwork, event: Event, event_id: int = 0) -> RunRecord:
    """Optimal load shedding at every step of ``event``."""
    if isinstance(shedder, MultiEnergyNetwork):
        shedder = LoadShedder(shedder, on_stall="fallback")
    net = shedder.net
    if tuple(event.component_ids) != net.component_ids:
        raise ContractViolation("event components do not match the network")
    n = event.n_steps
    ls = np.zeros((n, 3))
    dropped = np.zeros((n, 3))
    feasible = np.ones(n, dtype=bool)
    for i, failed in enumerate(event.failed_sets()):
        try:
            dnet = degrade(net, failed)
            sol = shedder.solve(dnet)
        except MesError as exc:
            raise SimulationError(f"event {event_id} step {i}: {exc}", event_id, i) from exc
        lost = dnet.dropped_power()
        for k, c in enumerate(CARRIERS):
            ls[i, k] = sol.ls_by_carrier[c]
            dropped[i, k] = lost[c]
        feasible[i] = sol.feasible
    ls[ls < LS_TOL] = 0.0
    broken = {cid: tuple(int(s) for s in steps) for cid, steps in event.broken_steps().items()}
    return RunRecord(event_id, ls, dropped, feasible, broken)


# --------------------------------------------------------------------------- metrics


def resilience_overall(records, carrier) -> float:
    """Mean over events of the shed power summed over the steps."""
    if not records:
        raise ContractViolation("at least one event record is required")
    return float(np.mean([r.carrier_sum(carrier) for r in records]))


def sci_value(sci_in: float, sci_nin: float) -> float:
    """Signed ratio of the in/not-in means.

    ``+inf`` marks impact observed only while the component was broken,
    ``-inf`` none at all while it was broken; both zero gives 1.
    """
    if sci_in > sci_nin:
        return math.inf if sci_nin == 0 else sci_in / sci_nin
    if sci_nin == 0:
        return 1.0
    return -math.inf if sci_in == 0 else -sci_nin / sci_in


def centered(value: float) -> float:
    """Map the ``|SCI| >= 1`` codomain onto the real line with 'no effect' at 0."""
    if math.isnan(value) or math.isinf(value):
        return value
    return math.copysign(abs(value) - 1.0, value)


def _sci_parts(records, cid, k):
    n_all = len(records)
    total = sum(float(r.ls[:, k].sum()) for r in records)
    in_sum, n_in = 0.0, 0
    for r in records:
        steps = r.broken.get(cid)
        if steps:
            in_sum += float(r.ls[list(steps), k].sum())
            n_in += 1
    return in_sum, n_in, total, n_all


def single_component_impact(records, cid: str, carrier) -> float:
    """Impact of component ``cid`` on ``carrier``; NaN when it never broke."""
    if not records:
        raise ContractViolation("at least one event record is required")
    k = CARRIERS.index(Carrier.parse(carrier))
    in_sum, n_in, total, n_all = _sci_parts(records, cid, k)
    if n_in == 0:
        return math.nan
    return sci_value(in_sum / n_in, (total - in_sum) / n_all)


def sci_table(records, component_ids) -> pd.DataFrame:
    """SCI of every component on every carrier (long format)."""
    n_all = len(records)
    rows = []
    if n_all == 0:
        return pd.DataFrame(columns=["component", "group", "carrier", "events", "sci_in", "sci_nin", "sci", "sci_centered"])
    totals = np.sum([r.ls.sum(axis=0) for r in records], axis=0)
    in_sum = {cid: np.zeros(3) for cid in component_ids}
    n_in = dict.fromkeys(component_ids, 0)
    for r in records:
        for cid, steps in r.broken.items():
            if steps and cid in in_sum:
                in_sum[cid] += r.ls[list(steps)].sum(axis=0)
                n_in[cid] += 1
    for cid in component_ids:
        for k, c in enumerate(CARRIERS):
            if n_in[cid] == 0:
                s_in = s_nin = val = math.nan
            else:
                s_in = in_sum[cid][k] / n_in[cid]
                s_nin = (totals[k] - in_sum[cid][k]) / n_all
                val = sci_value(s_in, s_nin)
            rows.append((cid, component_group(cid), c.short, n_in[cid], s_in, s_nin, val, centered(val)))
    return pd.DataFrame(rows, columns=["component", "group", "carrier", "events", "sci_in", "sci_nin", "sci", "sci_centered"])


def carrier_grid_impact(table: pd.DataFrame, g1: str, g2) -> dict:
    """Sum of the SCI on carrier ``g2`` over the components of group ``g1``.

    Infinite markers are counted separately and left out of the sums;
    unobserved components contribute nothing.
    """
    c2 = Carrier.parse(g2).short
    sub = table[(table["group"] == g1) & (table["carrier"] == c2)]
    obs = sub[sub["events"] > 0]
    finite = obs[np.isfinite(obs["sci"])]
    n_unobserved = int(len(sub) - len(obs))
    if n_unobserved:
        log.debug("%d components of %s never broke", n_unobserved, g1)
    return {
        "source": g1,
        "target": c2,
        "sci": float(finite["sci"].sum()),
        "sci_centered": float(finite["sci_centered"].sum()),
        "components": int(len(sub)),
        "observed": int(len(obs)),
        "pos_inf": int(np.isposinf(obs["sci"]).sum()),
        "neg_inf": int(np.isneginf(obs["sci"]).sum()),
    }


def carrier_impact_matrix(table: pd.DataFrame) -> pd.DataFrame:
    rows = [carrier_grid_impact(table, g1, c) for g1 in GROUPS for c in CARRIERS]
    return pd.DataFrame(rows)


def bootstrap_ci(values, confidence=0.95, n_resamples=2000, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ContractViolation("no values to bootstrap")
    if np.all(values == values[0]):
        return float(values[0]), float(values[0])
    from scipy.stats import bootstrap

    res = bootstrap(
        (values,),
        np.mean,
        confidence_level=confidence,
        n_resamples=n_resamples,
        method="percentile",
        random_state=np.random.default_rng(seed),
        vectorized=True,
    )
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


# --------------------------------------------------------------------------- stopping


@dataclass
class StoppingConfig:
    process_noise: float = 1e-4
    calibration_events: int = 200
    rel_threshold: float = 0.01
    window: int = 100
    min_events: int = 1000
    max_events: int = 20000

    def __post_init__(self):
        problems = []
        if not self.process_noise > 0:
            problems.append("stopping.process_noise: must be positive")
        if self.calibration_events < 2:
            problems.append("stopping.calibration_events: must be at least 2")
        if not self.rel_threshold > 0:
            problems.append("stopping.rel_threshold: must be positive")
        if self.window < 1:
            problems.append("stopping.window: must be positive")
        if self.min_events < 1:
            problems.append("stopping.min_events: must be positive")
        if self.max_events < self.min_events:
            problems.append("stopping.max_events: must not be below min_events")
        if problems:
            raise ConfigError(problems)


class KalmanStopping:
    """Scalar Kalman filter on the running mean of the per-event metric.

    The observation noise is the variance of the running-mean increments
    over the first ``calibration_events`` events and the process noise is
    ``process_noise`` times that.  The run is stable at an event when the
    filter's correction is within ``rel_threshold`` of the estimate; it stops
    after ``window`` consecutive stable events once ``min_events`` are done.
    """

    def __init__(self, cfg: StoppingConfig | None = None):
        self.cfg = cfg or StoppingConfig()
        self.count = 0
        self._sum = 0.0
        self._calib: list = []
        self.estimate = None
        self.P = None
        self.R = None
        self.stable_run = 0
        self.trace: list = []

    @property
    def running_mean(self) -> float:
        return self._sum / self.count if self.count else 0.0

    def update(self, value: float) -> bool:
        """Feed the next event's metric; returns True when the run should stop."""
        cfg = self.cfg
        self.count += 1
        self._sum += float(value)
        z = self.running_mean
        innov = math.nan
        if self.R is None:
            self._calib.append(z)
            if len(self._calib) >= cfg.calibration_events:
                inc = np.diff(self._calib)
                self.R = max(float(np.var(inc)), 1e-24 * (1.0 + z * z))
                self.estimate = z
                self.P = self.R
        else:
            p_prior = self.P + cfg.process_noise * self.R
            gain = p_prior / (p_prior + self.R)
            innov = gain * (z - self.estimate)
            self.estimate += innov
            self.P = (1.0 - gain) * p_prior
            if abs(innov) <= cfg.rel_threshold * abs(self.estimate):
                self.stable_run += 1
            else:
                self.stable_run = 0
        stop = (self.count >= cfg.min_events and self.stable_run >= cfg.window) or self.count >= cfg.max_events
        self.trace.append((self.count, float(value), z, self.estimate if self.estimate is not None else math.nan, innov, self.stable_run))
        return stop

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=["event", "value", "running_mean", "estimate", "innovation", "stable_run"])


def kalman_stopping(stream, cfg: StoppingConfig | None = None) -> int:
    """Number of events after which the stopping rule fires on ``stream`` (or its length)."""
    ks = KalmanStopping(cfg)
    for v in stream:
        if ks.update(v):
            return ks.count
    return ks.count


# --------------------------------------------------------------------------- driver


@dataclass
class ImpactReport:
    resilience: dict  # carrier short name -> R
    sci: pd.DataFrame
    carrier_matrix: pd.DataFrame
    n_events: int
    stopping: pd.DataFrame
    records: list = field(default_factory=list, repr=False)

    def per_event_totals(self, carrier=None) -> np.ndarray:
        if carrier is None:
            return np.array([r.total for r in self.records])
        return np.array([r.carrier_sum(carrier) for r in self.records])


_WORKER: dict = {}


def _init_worker(net, params, bounds):
    _WORKER["shedder"] = LoadShedder(net, bounds, on_stall="fallback")
    _WORKER["params"] = params


def _run_batch(seed, start, stop):
    shedder, params = _WORKER["shedder"], _WORKER["params"]
    out = []
    for idx in range(start, stop):
        ev = generate_event(shedder.net, params, (seed, idx))
        out.append(simulate_event(shedder, ev, idx))
    return out


def run_monte_carlo(
    net: MultiEnergyNetwork,
    params: EventParams,
    *,
    seed: int = 0,
    stopping: StoppingConfig | None = None,
    workers: int = 1,
    bounds: OperationalBounds | None = None,
    shedder: LoadShedder | None = None,
    batch: int = 25,
    progress=None,
) -> ImpactReport:
    """Simulate events until the stopping rule fires and compute the impact metrics.

    Event ``k`` is drawn from the seed ``(seed, k)``.  The stopping rule sees
    the events in index order, and events beyond the stopping point are
    discarded, so the report does not depend on ``workers`` or ``batch``.
    """
    stopper = KalmanStopping(stopping)
    cfg = stopper.cfg
    records: list = []
    if shedder is None or workers > 1:
        shedder = shedder or LoadShedder(net, bounds, on_stall="fallback")

    def consume(batch_records):
        for rec in batch_records:
            records.append(rec)
            if stopper.update(rec.total):
                return True
        return False

    done = False
    next_idx = 0
    if workers <= 1:
        while not done:
            hi = min(next_idx + batch, cfg.max_events)
            out = []
            for idx in range(next_idx, hi):
                ev = generate_event(net, params, (seed, idx))
                out.append(simulate_event(shedder, ev, idx))
            next_idx = hi
            done = consume(out)
            if progress is not None:
                progress(len(records))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(net, params, bounds)) as pool:
            pending = []
            while not done:
                while len(pending) < 2 * workers and next_idx < cfg.max_events:
                    hi = min(next_idx + batch, cfg.max_events)
                    pending.append(pool.submit(_run_batch, seed, next_idx, hi))
                    next_idx = hi
                done = consume(pending.pop(0).result())
                if progress is not None:
                    progress(len(records))
            for f in pending:
                f.cancel()
    return build_report(net, records, stopper)


def build_report(net: MultiEnergyNetwork, records, stopper: KalmanStopping | None = None) -> ImpactReport:
    table = sci_table(records, net.component_ids)
    res = {c.short: (resilience_overall(records, c) if records else 0.0) for c in CARRIERS}
    trace = stopper.trace_frame() if stopper is not None else pd.DataFrame()
    return ImpactReport(res, table, carrier_impact_matrix(table), len(records), trace, records)


# --------------------------------------------------------------------------- output


def records_frame(records) -> pd.DataFrame:
    rows = []
    for r in records:
        for i in range(r.n_steps):
            for k, c in enumerate(CARRIERS):
                rows.append((r.event_id, i, c.short, r.ls[i, k], r.dropped[i, k], bool(r.feasible[i])))
    return pd.DataFrame(rows, columns=["event", "step", "carrier", "ls_mw", "dropped_mw", "feasible"])


def _to_csv(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_report(report: ImpactReport, out_dir, manifest: dict | None = None):
    """Write the report tables (and ``manifest.json`` if given) into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    _to_csv(records_frame(report.records), os.path.join(out_dir, "events.csv"))
    rows = []
    for c, v in report.resilience.items():
        lo, hi = bootstrap_ci(report.per_event_totals(c)) if report.records else (0.0, 0.0)
        rows.append((c, v, lo, hi))
    res = pd.DataFrame(rows, columns=["carrier", "r_ls", "ci_low", "ci_high"])
    _to_csv(res, os.path.join(out_dir, "resilience.csv"))
    _to_csv(report.sci, os.path.join(out_dir, "sci.csv"))
    _to_csv(report.carrier_matrix, os.path.join(out_dir, "carrier_impact.csv"))
    _to_csv(report.stopping, os.path.join(out_dir, "stopping.csv"))
    if manifest is not None:
        m = dict(manifest)
        m["events"] = report.n_events
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True, default=json_default)
            fh.write("\n")


def json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serialisable: {type(o)}")
