"""Planted network: hidden 3D positions define every RTT in the simulation.

Workers sit in a cube whose diagonal is the largest RTT, at least ``rtt_min``
apart.  Each user is planted a few ms from a randomly chosen worker, so a
latency-feasible host always exists.  Geography is the latent x/y plane
scaled to km around a centre.  Workers only ever see their Vivaldi estimate.
"""

from __future__ import annotations

import math
import random

import numpy as np

from oak.coords import GeoPoint, RttSample, VivaldiCoordinate, dist_euc, vivaldi_update

KM_PER_DEG = 111.195


class PlantedLatency:
    def __init__(
        self,
        worker_ids: list[str],
        user_ids: list[str],
        *,
        seed: int = 0,
        rtt_min_ms: float = 10.0,
        rtt_max_ms: float = 250.0,
        jitter: float = 0.0,
        km_per_ms: float = 5.0,
        geo_jitter_km: float = 5.0,
        centre: GeoPoint = GeoPoint(48.14, 11.58),
        user_offset_ms: tuple[float, float] = (2.0, 8.0),
    ):
        if not 0 < rtt_min_ms < rtt_max_ms:
            raise ValueError("need 0 < rtt_min_ms < rtt_max_ms")
        self.rng = np.random.default_rng(seed)
        self.noise = random.Random(seed ^ 0x5EED)
        self.jitter = jitter
        side = rtt_max_ms / math.sqrt(3.0)
        self.pos: dict[str, np.ndarray] = {}
        accepted = np.empty((0, 3))
        for wid in worker_ids:
            for _ in range(10_000):
                p = self.rng.uniform(0.0, side, 3)
                if not len(accepted) or np.min(np.linalg.norm(accepted - p, axis=1)) >= rtt_min_ms:
                    break
            else:
                raise ValueError(f"cannot fit {len(worker_ids)} workers {rtt_min_ms} ms apart")
            accepted = np.vstack([accepted, p])
            self.pos[wid] = p
        self.user_anchor: dict[str, str] = {}
        for uid in user_ids:
            anchor = worker_ids[int(self.rng.integers(len(worker_ids)))]
            d = self.rng.normal(size=3)
            r = self.rng.uniform(*user_offset_ms)
            self.pos[uid] = self.pos[anchor] + r * d / np.linalg.norm(d)
            self.user_anchor[uid] = anchor
        self.geo: dict[str, GeoPoint] = {}
        for name, p in self.pos.items():
            dx, dy = (p[:2] - side / 2) * km_per_ms + self.rng.normal(0.0, geo_jitter_km, 2)
            lat = centre.latitude_deg + dy / KM_PER_DEG
            lon = centre.longitude_deg + dx / (KM_PER_DEG * math.cos(math.radians(centre.latitude_deg)))
            self.geo[name] = GeoPoint(lat, lon)
        self.workers = list(worker_ids)

    def rtt(self, a: str, b: str) -> float:
        """True RTT in ms."""
        return float(np.linalg.norm(self.pos[a] - self.pos[b]))

    def ping(self, a: str, b: str) -> float:
        """One measured RTT, with multiplicative jitter when configured."""
        true = self.rtt(a, b)
        if self.jitter <= 0:
            return true
        return max(1e-3, true * (1.0 + self.noise.uniform(-self.jitter, self.jitter)))

    def embed(self, rounds: int = 200, seed: int = 0) -> dict[str, VivaldiCoordinate]:
        """Vivaldi coordinates after ``rounds`` rounds of one random-peer update per worker."""
        rnd = random.Random(seed)
        coords = {w: VivaldiCoordinate() for w in self.workers}
        if len(self.workers) < 2:
            return coords
        for _ in range(rounds):
            for w in self.workers:
                peer = rnd.choice(self.workers)
                if peer == w:
                    continue
                sample = RttSample(coords[peer], self.ping(w, peer), peer_id=peer)
                coords[w] = vivaldi_update(coords[w], sample, self_id=w)
        return coords

    def prediction_error(self, coords: dict[str, VivaldiCoordinate], pairs: int = 2000, seed: int = 0) -> float:
        """Median relative error of predicted against true worker RTTs."""
        rnd = random.Random(seed)
        ids = list(coords)
        errs = []
        for _ in range(pairs):
            a, b = rnd.sample(ids, 2)
            true = self.rtt(a, b)
            errs.append(abs(dist_euc(coords[a], coords[b]) - true) / true)
        return float(np.median(errs))
