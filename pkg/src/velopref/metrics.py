"""Evaluation metrics: KL, square-root Jensen-Shannon, CPC (Sorensen-Dice), SVF distributions."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .trajectories import Trajectory
from .world import World

SMOOTHING_EPS = 1e-12


class MetricError(ValueError):
    pass


def _as_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise MetricError("not a probability distribution")
    return p


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    p = p + eps
    return p / p.sum()


def kl(p, q, smoothing: float | None = None) -> float:
    """sum p_i ln(p_i / q_i), with 0 ln 0 = 0. Natural log (nats)."""
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise MetricError("distributions must share a support")
    if smoothing:
        p, q = _smooth(p, smoothing), _smooth(q, smoothing)
    pos = p > 0
    if np.any(q[pos] == 0):
        raise MetricError("q is zero where p is positive; enable smoothing")
    return float(max(0.0, np.sum(p[pos] * np.log(p[pos] / q[pos]))))


def jsd(p, q) -> float:
    """Square-root Jensen-Shannon distance, in [0, sqrt(ln 2)]."""
    p, q = _as_distribution(p), _as_distribution(q)
    m = 0.5 * (p + q)
    return float(np.sqrt(max(0.0, 0.5 * (kl(p, m) + kl(q, m)))))


def cell_set(traj) -> frozenset:
    return frozenset(traj.states if isinstance(traj, Trajectory) else traj)


def cpc(t1, t2) -> float:
    """Sorensen-Dice coefficient over the sets of distinct visited cells."""
    a, b = cell_set(t1), cell_set(t2)
    if not a or not b:
        raise MetricError("CPC needs non-empty trajectories")
    return 2.0 * len(a & b) / (len(a) + len(b))


def svf_distribution(trajs, world: World) -> np.ndarray:
    """Visit frequency of every state over all trajectories (every visited state counts), normalized."""
    trajs = list(trajs)
    if not trajs:
        raise MetricError("need at least one trajectory")
    counts = np.zeros(world.n_states)
    for t in trajs:
        np.add.at(counts, t.states, 1.0)
    return counts / counts.sum()


def reward_stats(rewards) -> tuple[float, float]:
    """Population mean and variance of min-max normalized rewards; constant rewards give (0, 0)."""
    r = np.asarray(rewards, dtype=np.float64)
    span = r.max() - r.min()
    if span == 0:
        return 0.0, 0.0
    z = (r - r.min()) / span
    return float(z.mean()), float(z.var())


def normalized_rewards(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    span = r.max() - r.min()
    return np.zeros_like(r) if span == 0 else (r - r.min()) / span


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "q1": float(q1), "median": float(med), "q3": float(q3)}


def cpc_by_decision_frequency(pairs) -> list[dict]:
    """Unit-width bins over the real trajectory's distinct-cell count.

    ``pairs`` holds (real, synthetic, shortest) triples; each row reports the
    CPC summary of real-vs-synthetic and real-vs-shortest in that bin.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("need at least one trajectory triple")
    bins = defaultdict(lambda: ([], []))
    for real, syn, sp in pairs:
        k = real.segment_count if isinstance(real, Trajectory) else len(set(real))
        bins[k][0].append(cpc(real, syn))
        bins[k][1].append(cpc(real, sp))
    rows = []
    for k in sorted(bins):
        syn, sp = bins[k]
        rows.append({"decision_frequency": k, "trips": len(syn),
                     "synthetic": _summary(syn), "shortest": _summary(sp)})
    return rows


@dataclass
class EvalReport:
    jsd: float
    jsd_shortest: float
    mean_cpc_synthetic: float
    mean_cpc_shortest: float
    reward_mean: float
    reward_variance: float
    n_pairs: int
    excluded_nonterminated: int = 0
    cpc_by_decision_bin: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(triples, world: World, rewards, include_nonterminated: bool = False) -> tuple[EvalReport, list[dict]]:
    """Report over (real, synthetic, shortest) triples plus per-pair CPC rows."""
    triples = list(triples)
    kept = [t for t in triples if include_nonterminated or t[1].terminated]
    if not kept:
        raise MetricError("no terminated synthetic trajectories to evaluate")
    real = svf_distribution([t[0] for t in kept], world)
    syn = svf_distribution([t[1] for t in kept], world)
    sp = svf_distribution([t[2] for t in kept], world)
    rows = [{"pair": i, "order_id": r.order_id, "decision_frequency": r.segment_count,
             "cpc_synthetic": cpc(r, s), "cpc_shortest": cpc(r, d)}
            for i, (r, s, d) in enumerate(kept)]
    mean, var = reward_stats(rewards)
    report = EvalReport(
        jsd=jsd(real, syn),
        jsd_shortest=jsd(real, sp),
        mean_cpc_synthetic=float(np.mean([r["cpc_synthetic"] for r in rows])),
        mean_cpc_shortest=float(np.mean([r["cpc_shortest"] for r in rows])),
        reward_mean=mean,
        reward_variance=var,
        n_pairs=len(kept),
        excluded_nonterminated=len(triples) - len(kept),
        cpc_by_decision_bin=cpc_by_decision_frequency(kept),
    )
    return report, rows
