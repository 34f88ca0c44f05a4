"""
Synthetic installation corpora with planted group structure.

App degrees follow a truncated power law; device activity is log-normal.
Every vertex carries a mixed group membership and a pair's sampling weight is

    device_propensity * app_propensity * affinity ** cos(membership_d, membership_m)

so ``affinity=1`` reduces to a pure popularity model. Each app receives
exactly its drawn degree; its devices are drawn without replacement in
proportion to ``device_propensity * group_affinity``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import InstallEvent

GROUNDTRUTH_VERSION = "1"
_CHUNK = 1 << 21
PAIR_PROB_LIMIT = 1_000_000


class GeneratorConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    n_devices: int = 5000
    n_apps: int = 500
    target_edges: int = 20_000
    app_exponent: float = 2.3
    n_groups: int = 20
    affinity: float = 8.0
    mixing: float = 0.3
    time_window: tuple[int, int] = (0, 6 * 86_400)
    seed: int = 0
    device_sigma: float = 1.0

    def __post_init__(self):
        self.time_window = tuple(int(t) for t in self.time_window)

    def validate(self) -> None:
        errs = []
        for name in ("n_devices", "n_apps", "n_groups", "target_edges"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.target_edges > self.n_devices * self.n_apps:
            errs.append("target_edges exceeds n_devices * n_apps")
        if self.target_edges < self.n_apps:
            errs.append(f"target_edges must be >= n_apps ({self.n_apps}) since every app has degree >= 1")
        if not self.app_exponent > 1:
            errs.append("app_exponent must be > 1")
        if not self.affinity >= 1:
            errs.append("affinity must be >= 1")
        if not 0 < self.mixing <= 1:
            errs.append("mixing must lie in (0, 1]")
        if self.time_window[0] > self.time_window[1] or self.time_window[0] < 0:
            errs.append("time_window must be a non-negative [start, end] pair")
        if not 0 <= self.seed < 2**64:
            errs.append("seed must be a 64-bit unsigned integer")
        if self.device_sigma < 0:
            errs.append("device_sigma must be >= 0")
        if errs:
            raise GeneratorConfigError("; ".join(errs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["time_window"] = list(self.time_window)
        return d


@dataclass
class GroundTruth:
    config: GeneratorConfig
    device_groups: np.ndarray
    app_groups: np.ndarray
    device_membership: np.ndarray
    app_membership: np.ndarray
    device_propensity: np.ndarray
    app_propensity: np.ndarray
    app_degree_target: np.ndarray
    edge_devices: np.ndarray
    edge_apps: np.ndarray
    events: list[InstallEvent] = field(repr=False, default_factory=list)
    pair_probs: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_edges(self) -> int:
        return int(self.edge_devices.shape[0])

    def pair_weight(self, d: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Unnormalized planted weight of index pairs."""
        cos = np.einsum("ij,ij->i", self.device_membership[d], self.app_membership[m])
        return self.device_propensity[d] * self.app_propensity[m] * self.config.affinity**cos

    def weight_block(self, d_lo: int, d_hi: int) -> np.ndarray:
        cos = self.device_membership[d_lo:d_hi] @ self.app_membership.T
        return (
            self.device_propensity[d_lo:d_hi, None]
            * self.app_propensity[None, :]
            * self.config.affinity**cos
        )

    def same_group(self, d: np.ndarray, m: np.ndarray) -> np.ndarray:
        return self.device_groups[d] == self.app_groups[m]

    def to_json(self) -> dict:
        return {
            "format_version": GROUNDTRUTH_VERSION,
            "config": self.config.to_dict(),
            "device_tokens": [device_token(i) for i in range(self.config.n_devices)],
            "app_tokens": [app_token(j) for j in range(self.config.n_apps)],
            "device_groups": self.device_groups.tolist(),
            "app_groups": self.app_groups.tolist(),
            "device_membership": np.round(self.device_membership, 8).tolist(),
            "app_membership": np.round(self.app_membership, 8).tolist(),
            "device_propensity": self.device_propensity.tolist(),
            "app_propensity": self.app_propensity.tolist(),
            "app_degree_target": self.app_degree_target.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def device_token(i: int) -> str:
    return f"d{i}"


def app_token(j: int) -> str:
    return f"m{j}"


def powerlaw_degree_sequence(
    n: int, exponent: float, total: int, cap: int, rng: np.random.Generator
) -> np.ndarray:
    """Integer degrees in ``[1, cap]`` from a power law, summing to ``total``.

    A continuous Pareto sample is rescaled (which keeps the exponent) so the
    rounded, capped values hit ``total``; leftover units go to random entries.
    """
    if total < n:
        raise GeneratorConfigError(f"total degree {total} below one edge per vertex ({n}); raise target_edges")
    if total > n * cap:
        raise GeneratorConfigError(f"total degree {total} exceeds capacity {n * cap}; lower target_edges")
    raw = (1.0 - rng.random(n)) ** (-1.0 / (exponent - 1.0))

    def realize(c):
        return np.clip(np.rint(c * raw), 1, cap).astype(np.int64)

    lo, hi = 0.0, 1.0
    while realize(hi).sum() < total:
        hi *= 2.0
        if hi > 1e12:
            raise GeneratorConfigError(
                f"cannot reach {total} edges with per-app cap {cap}; lower target_edges or app_exponent"
            )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if realize(mid).sum() < total:
            lo = mid
        else:
            hi = mid
    deg = realize(hi)
    excess = int(deg.sum() - total)
    # trim the overshoot from the entries that rounded up most
    while excess > 0:
        room = np.flatnonzero(deg > 1)
        take = rng.choice(room, size=min(excess, room.shape[0]), replace=False)
        deg[take] -= 1
        excess = int(deg.sum() - total)
    return deg


def _memberships(n: int, cfg: GeneratorConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    groups = rng.integers(0, cfg.n_groups, size=n)
    theta = (1.0 - cfg.mixing) * np.eye(cfg.n_groups)[groups]
    theta += cfg.mixing * rng.dirichlet(np.ones(cfg.n_groups), size=n)
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    return groups, theta


def _weighted_topk(log_keys: np.ndarray, k: int) -> np.ndarray:
    if k >= log_keys.shape[0]:
        return np.arange(log_keys.shape[0])
    return np.argpartition(-log_keys, k - 1)[:k]


def generate(config: GeneratorConfig) -> tuple[list[InstallEvent], GroundTruth]:
    """Draw an event corpus from the planted model; deterministic in the seed."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    app_deg = powerlaw_degree_sequence(cfg.n_apps, cfg.app_exponent, cfg.target_edges, cfg.n_devices, rng)
    dev_groups, dev_theta = _memberships(cfg.n_devices, cfg, rng)
    app_groups, app_theta = _memberships(cfg.n_apps, cfg, rng)
    dev_prop = rng.lognormal(0.0, cfg.device_sigma, size=cfg.n_devices)

    edge_dev = np.empty(cfg.target_edges, dtype=np.int64)
    edge_app = np.empty(cfg.target_edges, dtype=np.int64)
    app_norm = np.empty(cfg.n_apps)
    pos = 0
    step = max(1, _CHUNK // cfg.n_devices)
    for lo in range(0, cfg.n_apps, step):
        hi = min(cfg.n_apps, lo + step)
        w = dev_prop[None, :] * cfg.affinity ** (app_theta[lo:hi] @ dev_theta.T)
        app_norm[lo:hi] = w.sum(axis=1)
        log_keys = np.log(rng.random(w.shape)) / w
        for r in range(hi - lo):
            k = int(app_deg[lo + r])
            chosen = np.sort(_weighted_topk(log_keys[r], k))
            edge_dev[pos : pos + k] = chosen
            edge_app[pos : pos + k] = lo + r
            pos += k
    app_prop = app_deg / app_norm

    t_a, t_b = cfg.time_window
    ts = rng.integers(t_a, t_b + 1, size=cfg.target_edges)
    order = np.lexsort((edge_app, edge_dev, ts))
    edge_dev, edge_app, ts = edge_dev[order], edge_app[order], ts[order]
    events = [
        InstallEvent(device_token(d), app_token(m), t)
        for d, m, t in zip(edge_dev.tolist(), edge_app.tolist(), ts.tolist())
    ]
    truth = GroundTruth(
        config=cfg,
        device_groups=dev_groups,
        app_groups=app_groups,
        device_membership=dev_theta,
        app_membership=app_theta,
        device_propensity=dev_prop,
        app_propensity=app_prop,
        app_degree_target=app_deg,
        edge_devices=edge_dev,
        edge_apps=edge_app,
        events=events,
    )
    if cfg.n_devices * cfg.n_apps <= PAIR_PROB_LIMIT:
        block = truth.weight_block(0, cfg.n_devices)
        truth.pair_probs = block / block.sum()
    return events, truth


def holdout_future_edges(
    truth: GroundTruth, fraction: float, seed: int, horizon: int | None = None
) -> tuple[list[InstallEvent], list[InstallEvent]]:
    """Draw ``round(fraction * n_edges)`` new pairs from the planted model.

    New pairs are sampled without replacement among pairs absent from the
    corpus and stamped uniformly in ``(t_end, t_end + horizon]``. Returns
    ``(visible_events, future_events)``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    cfg = truth.config
    count = int(round(fraction * truth.n_edges))
    n_candidates = cfg.n_devices * cfg.n_apps - truth.n_edges
    if count > n_candidates:
        raise GenerationError(f"requested {count} future edges but only {n_candidates} unseen pairs exist")
    if count == 0:
        return list(truth.events), []
    rng = np.random.default_rng(seed)
    existing = np.sort(truth.edge_devices * cfg.n_apps + truth.edge_apps)

    best_keys = np.empty(0)
    best_ids = np.empty(0, dtype=np.int64)
    step = max(1, _CHUNK // cfg.n_apps)
    for lo in range(0, cfg.n_devices, step):
        hi = min(cfg.n_devices, lo + step)
        w = truth.weight_block(lo, hi).ravel()
        ids = np.arange(lo * cfg.n_apps, hi * cfg.n_apps, dtype=np.int64)
        log_keys = np.log(rng.random(w.shape[0])) / w
        taken = existing[(existing >= ids[0]) & (existing <= ids[-1])]
        log_keys[taken - ids[0]] = -np.inf
        keys = np.concatenate([best_keys, log_keys])
        all_ids = np.concatenate([best_ids, ids])
        keep = _weighted_topk(keys, count)
        best_keys, best_ids = keys[keep], all_ids[keep]
    best_ids = np.sort(best_ids)
    dev, app = best_ids // cfg.n_apps, best_ids % cfg.n_apps

    t_end = cfg.time_window[1]
    if horizon is None:
        horizon = max(1, int(round((t_end - cfg.time_window[0]) * fraction)))
    ts = rng.integers(t_end + 1, t_end + horizon + 1, size=count)
    order = np.lexsort((app, dev, ts))
    future = [
        InstallEvent(device_token(d), app_token(m), t)
        for d, m, t in zip(dev[order].tolist(), app[order].tolist(), ts[order].tolist())
    ]
    return list(truth.events), future
