"""Model discrepancy, solved-set metrics, and one-pass parallel head search."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ContractError, UndefinedMetricError
from .objectives import check_normalized, clustering_loss, teacher_distribution

KL_CLAMP = 1e-12


def kl_per_sample(p_base, p_head) -> np.ndarray:
    """``KL(p_base || p_head)`` along the last axis, in nats."""
    p = np.asarray(p_base, dtype=np.float64)
    q = np.asarray(p_head, dtype=np.float64)
    check_normalized(p, what="base distribution")
    check_normalized(q, what="head distribution")
    if p.shape != q.shape:
        raise ContractError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    safe_p = np.maximum(p, KL_CLAMP)
    return np.sum(p * (np.log(safe_p) - np.log(np.maximum(q, KL_CLAMP))), axis=-1)


def kl_discrepancy(p_base, p_head) -> float:
    """Mean ``KL(p_base || p_head)`` over all leading axes (one value per sample)."""
    return float(np.mean(kl_per_sample(p_base, p_head)))


@dataclass
class DiscrepancyReport:
    head_id: str
    D: float
    d_min: float
    d_median: float
    d_max: float
    epoch: int = -1

    @classmethod
    def from_samples(cls, head_id, samples, epoch: int = -1) -> "DiscrepancyReport":
        s = np.asarray(samples, dtype=np.float64)
        return cls(head_id, float(s.mean()), float(s.min()), float(np.median(s)), float(s.max()), epoch)

    def as_row(self) -> dict:
        return {"head_id": self.head_id, "D": self.D, "d_min": self.d_min,
                "d_median": self.d_median, "d_max": self.d_max, "epoch": self.epoch}


@dataclass
class SolvedSets:
    """Sample ids solved by the baseline base (B1), the HSSL base (B2) and the head (H)."""

    U: frozenset
    B1: frozenset = frozenset()
    B2: frozenset = frozenset()
    H: frozenset = frozenset()
    solver: str = "knn"

    def __post_init__(self):
        for name in ("U", "B1", "B2", "H"):
            setattr(self, name, frozenset(getattr(self, name)))
        for name in ("B1", "B2", "H"):
            extra = getattr(self, name) - self.U
            if extra:
                raise ContractError(f"{name} contains ids outside U: {sorted(extra)[:5]}")

    @property
    def unsolved_by_baseline(self) -> frozenset:
        return self.U - self.B1


def count_newly_solved(sets: SolvedSets) -> int:
    """``|H & (U - B1)|``: samples the head solves that the baseline missed."""
    return len(sets.H & sets.unsolved_by_baseline)


def siou(sets: SolvedSets) -> float:
    """Share of the HSSL base's newly solved samples that the head also solves."""
    fresh = sets.unsolved_by_baseline
    denom = sets.B2 & fresh
    if not denom:
        raise UndefinedMetricError("sIoU undefined: the HSSL base solves nothing the baseline missed")
    return len(denom & sets.H & fresh) / len(denom)


def search_loss(per_head: list, loss_fn=clustering_loss) -> ag.Tensor:
    """Mean over candidate heads of ``L(z1h_i, z2b_i) + L(z1h_i, z2h_i)``.

    ``per_head`` holds ``(z1h, z2b, z2h)`` per head; each head owns its
    projection pair, so ``z2b`` is the base output through head i's base
    projection. Terms share no graph nodes besides the base model.
    """
    if len(per_head) < 2:
        raise ConfigError("search needs at least two candidate heads; a single head is plain training",
                          keys=["heads"])
    total = None
    for z1h, z2b, z2h in per_head:
        term = loss_fn(z1h, z2b) + loss_fn(z1h, z2h)
        total = term if total is None else total + term
    return total / float(len(per_head))


def _id_key(head_id):
    s = str(head_id)
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


@dataclass
class SearchResult:
    reports: list
    selected: str
    wall_time: float = 0.0
    data_fraction: float = 1.0
    history: list = field(default_factory=list)
    base: object = None  # teacher base after the search pass

    def as_dict(self) -> dict:
        return {"selected": self.selected, "wall_time": self.wall_time,
                "data_fraction": self.data_fraction,
                "reports": [r.as_row() for r in self.reports]}


def select_head(reports: list) -> SearchResult:
    """Argmax of mean D; exact ties go to the lowest id (numeric ids compare numerically)."""
    if not reports:
        raise ContractError("select_head needs at least one report")
    best = min(reports, key=lambda r: (-r.D, _id_key(r.head_id)))
    return SearchResult(list(reports), best.head_id)


# -- measurement on a trained state -------------------------------------------

def evaluate_discrepancy(state, images: np.ndarray, batch_size: int = 200, epoch: int = -1) -> list:
    """Per-stream ``KL(z1b || z1h)`` of teacher outputs on un-augmented images.

    Teacher distributions are centered and sharpened exactly as they are when
    used as training targets.
    """
    cfg = state.config
    obj = cfg.objective
    net = state.teacher
    if obj.kind != "clustering":
        raise ConfigError("discrepancy is defined for the clustering objective only", keys=["kind"])
    if not net.has_heads:
        return []
    per_stream = {s.name: [] for s in net.streams}
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            _, zb, _, zh = net.features(images[i:i + batch_size])
            for s, (b, h) in zip(net.streams, net.project(zb, zh)):
                pb = teacher_distribution(b, state.centers[f"{s.name}/b"], obj.teacher_temp).data
                ph = teacher_distribution(h, state.centers[f"{s.name}/h"], obj.teacher_temp).data
                per_stream[s.name].append(kl_per_sample(pb, ph))
    epoch = state.epoch if epoch < 0 else epoch
    return [DiscrepancyReport.from_samples(name, np.concatenate(v), epoch) for name, v in per_stream.items()]


def run_search(config, dataset, eval_images: np.ndarray, data_fraction: float = 0.1,
               epochs: int | None = None, on_step=None) -> SearchResult:
    """Train all candidates in parallel on one shared base, then pick the largest D."""
    from .engine import fit, new_state

    if len(config.heads) < 2:
        raise ConfigError("search needs at least two candidate heads", keys=["heads"])
    specs = [h.blocks for h in config.heads]
    if len(set(h.id for h in config.heads)) != len(config.heads):
        raise ConfigError("candidate head ids must be distinct", keys=["heads"])
    if any(specs[i] == specs[j] for i in range(len(specs)) for j in range(i)):
        raise ConfigError("candidate head specs must be distinct", keys=["heads"])
    config = replace(config, multi_head="parallel", supervision="heterogeneous")
    subset = dataset.fraction(data_fraction, seed=config.seed)
    t0 = time.perf_counter()
    state = new_state(config, subset)
    history = fit(state, subset, epochs, on_step)
    wall = time.perf_counter() - t0
    result = select_head(evaluate_discrepancy(state, eval_images))
    result.base = state.teacher.base
    result.wall_time = wall
    result.data_fraction = data_fraction
    result.history = history
    return result
