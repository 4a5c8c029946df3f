"""Seeded synthetic market pairs with shared items and correlated preferences.

Item latent vectors are drawn once and shared. Each market has a preference
direction; the target direction is ``rho * g_s + sqrt(1 - rho^2) * g_perp``
so the two directions have cosine ``rho`` exactly. Users scatter around their
market direction and pick items without replacement from a softmax over
noisy affinities (temperature 1).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import (InteractionRecord, MarketDataset, build_market, kcore_filter,
                   make_users_disjoint)


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 500
    n_users_source: int = 2000
    n_users_target: int = 200
    latent_dim: int = 8
    correlation: float = 0.9
    interactions_per_user: tuple[int, int] = (5, 15)
    noise_std: float = 0.5
    preference_strength: float = 6.0
    user_spread: float = 3.0
    seed: int = 0
    source_code: str = "src"
    target_code: str = "tgt"

    def validate(self) -> None:
        lo, hi = self.interactions_per_user
        if self.n_items < 120:
            raise ValueError("n_items must be >= 120 to support 99 evaluation negatives")
        if lo < 5 or hi < lo:
            raise ValueError("interactions_per_user must satisfy 5 <= min <= max")
        if hi > self.n_items:
            raise ValueError("interactions_per_user exceeds n_items")
        if not -1.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [-1, 1]")
        if min(self.n_users_source, self.n_users_target, self.latent_dim) < 1:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interactions_per_user"] = list(self.interactions_per_user)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "interactions_per_user" in d:
            d["interactions_per_user"] = tuple(d["interactions_per_user"])
        return cls(**d)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def market_directions(rng: np.random.Generator, dim: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    g_s = _unit(rng.normal(size=dim))
    other = rng.normal(size=dim)
    g_perp = _unit(other - (other @ g_s) * g_s)
    g_t = rho * g_s + math.sqrt(max(0.0, 1.0 - rho * rho)) * g_perp
    return g_s, g_t


def item_id(i: int) -> str:
    return f"i{int(i):05d}"


def _sample_market(rng, cfg: SynthConfig, item_vecs, direction, n_users, prefix) -> list[InteractionRecord]:
    lo, hi = cfg.interactions_per_user
    dim = cfg.latent_dim
    records = []
    width = len(str(n_users))
    for u in range(n_users):
        pref = cfg.preference_strength * direction + cfg.user_spread * rng.normal(size=dim)
        logits = item_vecs @ pref + cfg.noise_std * rng.normal(size=cfg.n_items)
        n = int(rng.integers(lo, hi + 1))
        # Gumbel top-n == sequential softmax sampling without replacement
        chosen = np.argsort(-(logits + rng.gumbel(size=cfg.n_items)), kind="stable")[:n]
        times = np.cumsum(rng.integers(1, 1000, size=n))
        uid = f"{prefix}{u:0{width}d}"
        records.extend(InteractionRecord(uid, item_id(i), 5.0, int(t)) for i, t in zip(chosen, times))
    return records


def generate_records(cfg: SynthConfig) -> tuple[list[InteractionRecord], list[InteractionRecord]]:
    """Raw (unfiltered) source and target interaction records."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    item_vecs = rng.normal(size=(cfg.n_items, cfg.latent_dim))
    # unit norm, so no item is popular in every market just by being long
    item_vecs /= np.linalg.norm(item_vecs, axis=1, keepdims=True)
    g_s, g_t = market_directions(rng, cfg.latent_dim, cfg.correlation)
    source = _sample_market(rng, cfg, item_vecs, g_s, cfg.n_users_source, f"{cfg.source_code}_u")
    target = _sample_market(rng, cfg, item_vecs, g_t, cfg.n_users_target, f"{cfg.target_code}_u")
    return source, target


def generate_pair(cfg: SynthConfig, min_count: int = 5) -> tuple[MarketDataset, MarketDataset]:
    """Filtered, item-aligned, user-disjoint (source, target) markets."""
    src_rec, tgt_rec = generate_records(cfg)
    src_rec = kcore_filter(src_rec, min_count)
    tgt_rec = kcore_filter(tgt_rec, min_count)
    if not src_rec or not tgt_rec:
        raise ValueError("k-core filtering emptied a synthetic market; enlarge the config")
    # the global catalog is every generated item, including ones no market kept
    vocab = {item_id(i): i for i in range(cfg.n_items)}
    src = build_market(src_rec, cfg.source_code, item_index=vocab)
    tgt = build_market(tgt_rec, cfg.target_code, item_index=vocab)
    src, tgt = make_users_disjoint([src, tgt])
    return src, tgt
