"""Q-estimate quality versus state rareness.

Pipeline: score each decision of held-out rollouts with every critic head,
compute the discounted Monte-Carlo return along the same bus's decision chain,
z-score align each head to those returns, and bin the errors by the Mahalanobis
rareness of the (h_f, h_b) pair within its stop-and-direction group.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .sim import CorridorConfig, CorridorSim, fmt, read_trajectory_csv
from .trainer import Agent, encode_observation, episode_seed, substream

MIN_GROUP_SIZE = 8
BIN_COLUMNS = ["bin_lo", "bin_hi", "count", "mean_mae", "oracle_mae"]


@dataclass
class GroupStats:
    mean: np.ndarray
    cov: np.ndarray  # ridge already on the diagonal
    count: int
    ridge: float

    @property
    def usable(self) -> bool:
        return self.count >= MIN_GROUP_SIZE


@dataclass
class RarenessModel:
    groups: dict[tuple[int, int], GroupStats] = field(default_factory=dict)

    def usable(self, key) -> bool:
        g = self.groups.get(tuple(key))
        return g is not None and g.usable

    def score(self, key, x) -> float:
        return mahalanobis(self, key, x)

    def to_json(self) -> dict:
        return {
            f"{k[0]}:{k[1]}": {"mean": g.mean.tolist(), "cov": g.cov.tolist(), "count": g.count, "ridge": g.ridge}
            for k, g in sorted(self.groups.items())
        }


def _rows(source) -> list[dict]:
    if isinstance(source, (str, Path)):
        return read_trajectory_csv(source)
    return list(source)


def fit_rareness(source: Iterable[dict] | str | Path) -> RarenessModel:
    """Per (stop_id, direction) Gaussian over (h_f, h_b) with a scale-relative ridge."""
    rows = _rows(source)
    if not rows:
        raise ValueError("cannot fit rareness on an empty trajectory stream")
    buckets: dict[tuple[int, int], list] = {}
    for r in rows:
        buckets.setdefault((int(r["stop_id"]), int(r["direction"])), []).append((r["h_f"], r["h_b"]))
    model = RarenessModel()
    for key, pts in buckets.items():
        x = np.asarray(pts, dtype=np.float64)
        n = len(x)
        mu = x.mean(axis=0)
        cov = np.cov(x, rowvar=False, ddof=1) if n > 1 else np.zeros((2, 2))
        ridge = 1e-6 * float(np.trace(cov)) / 2.0 + 1e-12
        model.groups[key] = GroupStats(mu, cov + ridge * np.eye(2), n, ridge)
    return model


def mahalanobis(model: RarenessModel, key, x) -> float:
    key = tuple(int(k) for k in key)
    g = model.groups.get(key)
    if g is None or not g.usable:
        raise KeyError(f"group {key} is missing or has fewer than {MIN_GROUP_SIZE} samples")
    d0, d1 = float(x[0]) - g.mean[0], float(x[1]) - g.mean[1]
    (a, b), (_, c) = g.cov
    det = a * c - b * b
    q = (c * d0 * d0 - 2.0 * b * d0 * d1 + a * d1 * d1) / det
    return math.sqrt(max(q, 0.0))


def monte_carlo_q(rewards, gamma: float) -> float:
    """Discounted sum of a reward tail starting at the decision of interest."""
    total = 0.0
    for r in reversed(list(rewards)):
        total = float(r) + gamma * total
    return total


def monte_carlo_returns(rewards, gamma: float) -> np.ndarray:
    """Return-to-go at every index of one chain."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def chain_returns(rows: list[dict], gamma: float) -> np.ndarray:
    """Q_MC for every decision row, following each bus's own sequence of decisions."""
    out = np.empty(len(rows))
    by_bus: dict[int, list[int]] = {}
    for i, r in enumerate(rows):
        by_bus.setdefault(int(r["bus_id"]), []).append(i)
    for idx in by_bus.values():
        out[idx] = monte_carlo_returns([rows[i]["reward"] for i in idx], gamma)
    return out


def zscore_align(pred, ref) -> tuple[np.ndarray, bool]:
    """Affine map of ``pred`` onto the mean and std of ``ref``.

    Returns ``(aligned, degenerate)``; a constant prediction series maps to the
    constant ``mean(ref)`` with ``degenerate=True``.
    """
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    sd = p.std()
    if sd == 0 or not np.isfinite(sd):
        return np.full_like(p, r.mean()), True
    return (p - p.mean()) / sd * r.std() + r.mean(), False


def align_heads(heads: np.ndarray, ref: np.ndarray, per_head: bool = True) -> np.ndarray:
    """Align a (K, N) prediction array. ``per_head=False`` applies one shared map fitted to the head mean."""
    heads = np.asarray(heads, dtype=np.float64)
    if per_head:
        return np.stack([zscore_align(h, ref)[0] for h in heads])
    mean = heads.mean(axis=0)
    sd = mean.std()
    if sd == 0:
        return np.full_like(heads, np.mean(ref))
    return (heads - mean.mean()) / sd * np.std(ref) + np.mean(ref)


def decile_edges(values) -> np.ndarray:
    return np.unique(np.quantile(np.asarray(values, dtype=np.float64), np.linspace(0.0, 1.0, 11)))


@dataclass
class BinRow:
    bin_lo: float
    bin_hi: float
    count: int
    mean_mae: float
    oracle_mae: float


def oracle_mae_by_bin(preds, q_mc, rareness, edges=None) -> list[BinRow]:
    """Bin absolute errors by rareness; only non-empty bins are reported.

    ``preds`` is (K, N) aligned head predictions. Bins are half-open except the
    last, which includes its upper edge.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    q_mc = np.asarray(q_mc, dtype=np.float64)
    rareness = np.asarray(rareness, dtype=np.float64)
    if preds.shape[1] != q_mc.size or q_mc.size != rareness.size:
        raise ValueError("predictions, returns and rareness must have matching lengths")
    if edges is None:
        edges = decile_edges(rareness)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing with at least two entries")
    mean_err = np.abs(preds.mean(axis=0) - q_mc)
    oracle_err = np.min(np.abs(preds - q_mc), axis=0)
    rows = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        mask = (rareness >= lo) & ((rareness <= hi) if last else (rareness < hi))
        n = int(mask.sum())
        if n:
            rows.append(BinRow(float(lo), float(hi), n, float(mean_err[mask].mean()), float(oracle_err[mask].mean())))
    return rows


def write_bins(out_dir: str | Path, rows: list[BinRow], stem: str = "rareness_bins") -> tuple[Path, Path]:
    """Binned CSV plus a whitespace-separated data file (bin centre first) for gnuplot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, dat_path = out / f"{stem}.csv", out / f"{stem}.dat"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BIN_COLUMNS)
        for r in rows:
            w.writerow([fmt(r.bin_lo), fmt(r.bin_hi), r.count, fmt(r.mean_mae), fmt(r.oracle_mae)])
    with open(dat_path, "w") as fh:
        fh.write("# bin_mid bin_lo bin_hi count mean_mae oracle_mae\n")
        for r in rows:
            mid = 0.5 * (r.bin_lo + r.bin_hi)
            fh.write(" ".join([fmt(mid), fmt(r.bin_lo), fmt(r.bin_hi), str(r.count), fmt(r.mean_mae), fmt(r.oracle_mae)]) + "\n")
    return csv_path, dat_path


# --- checkpoint-driven scoring --------------------------------------------------------------


@dataclass
class EvalDataset:
    rows: list[dict]  # trajectory rows plus rollout index
    heads: np.ndarray  # (K, N) raw head predictions
    q_mc: np.ndarray

    @property
    def K(self) -> int:
        return self.heads.shape[0]


def score_rollouts(
    agent: Agent, corridor: CorridorConfig, seed: int, rollouts: int, gamma: float, stochastic: bool = False, tag: str = "eval"
) -> EvalDataset:
    """Roll out the policy and score every decision with all online critic heads."""
    rows, conts, cats, acts = [], [], [], []
    q_mc = []
    rng = substream(seed, f"{tag}-policy") if stochastic else None
    offset = 1_000_000 if tag == "eval" else 2_000_000
    for i in range(rollouts):
        sim = CorridorSim(corridor)
        req = sim.reset(episode_seed(seed, offset + i))
        norm = []
        while not req.episode_done:
            a, hold = agent.act(req.observation, corridor.tau, corridor.h_max, rng)
            c, k = encode_observation(req.observation, corridor.tau)
            conts.append(c)
            cats.append(k)
            norm.append(a)
            req = sim.step(hold)
        ep_rows = sim.trajectory_rows()
        q_mc.append(chain_returns(ep_rows, gamma))
        for r, a in zip(ep_rows, norm):
            rows.append({**r, "rollout": i})
            acts.append(a)
    if not rows:
        return EvalDataset([], np.zeros((agent.K, 0)), np.zeros(0))
    heads, _ = agent.heads(agent.critics, np.array(conts), np.array(cats), np.array(acts)[:, None])
    return EvalDataset(rows, heads, np.concatenate(q_mc))


RECORD_BASE = ["index", "rollout", "time", "bus_id", "stop_id", "direction", "h_f", "h_b", "v", "action", "reward", "q_mc", "rareness"]


def build_records(data: EvalDataset, model: RarenessModel, per_head: bool = True) -> tuple[list[dict], np.ndarray]:
    """Aligned per-head predictions and rareness for every decision in a usable group."""
    aligned = align_heads(data.heads, data.q_mc, per_head=per_head)
    records = []
    keep = []
    for i, r in enumerate(data.rows):
        key = (r["stop_id"], r["direction"])
        if not model.usable(key):
            continue
        rec = {
            "index": i, "rollout": r["rollout"], "time": r["time"], "bus_id": r["bus_id"],
            "stop_id": r["stop_id"], "direction": r["direction"], "h_f": r["h_f"], "h_b": r["h_b"],
            "v": r["v"], "action": r["action"], "reward": r["reward"], "q_mc": float(data.q_mc[i]),
            "rareness": mahalanobis(model, key, (r["h_f"], r["h_b"])),
        }
        for k in range(aligned.shape[0]):
            rec[f"q_{k}"] = float(aligned[k, i])
        records.append(rec)
        keep.append(i)
    return records, aligned[:, keep]


def write_records(path: str | Path, records: list[dict], K: int) -> None:
    cols = RECORD_BASE + [f"q_{k}" for k in range(K)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow([fmt(r[c]) for c in cols])


def read_records(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (aligned heads (K, N), q_mc, rareness) from a records CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        heads_cols = [c for c in (reader.fieldnames or []) if c.startswith("q_") and c != "q_mc"]
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} holds no records")
    if not heads_cols:
        raise ValueError(f"{path} has no q_<k> prediction columns")
    heads = np.array([[float(r[c]) for r in rows] for c in sorted(heads_cols, key=lambda c: int(c[2:]))])
    return heads, np.array([float(r["q_mc"]) for r in rows]), np.array([float(r["rareness"]) for r in rows])


def write_predictions(path: str | Path, data: EvalDataset) -> None:
    cols = ["index", "rollout", "bus_id", "stop_id", "direction"] + [f"raw_q_{k}" for k in range(data.K)] + ["q_mc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i, r in enumerate(data.rows):
            w.writerow([i, r["rollout"], r["bus_id"], r["stop_id"], r["direction"]]
                       + [fmt(data.heads[k, i]) for k in range(data.K)] + [fmt(data.q_mc[i])])


def summary(records_heads: np.ndarray, q_mc: np.ndarray) -> dict:
    return {
        "records": int(q_mc.size),
        "mean_mae": float(np.mean(np.abs(records_heads.mean(axis=0) - q_mc))) if q_mc.size else math.nan,
        "oracle_mae": float(np.mean(np.min(np.abs(records_heads - q_mc), axis=0))) if q_mc.size else math.nan,
        # average of the individual heads' errors; the oracle can never exceed this one
        "head_avg_mae": float(np.mean(np.abs(records_heads - q_mc))) if q_mc.size else math.nan,
    }


def dump_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
