"""Deterministic discrete-event simulation of gossip meshes under attack.

Traces are recorded from the victims' perspective: every record belongs to
the victim's view of one remote peer, so a row keyed by peer P aggregates
"P sent me this", "P delivered that", "I forwarded to P". A victim's own
publishes therefore show up as SendRPC toward each mesh neighbor rather
than as PublishMessage rows (that code stays reserved for trace
compatibility). The honest flag on a record is ground truth about the
remote peer, not about how it behaved in that instant, which is what makes
the covert scenario interesting.

Determinism: one RNG stream per peer keyed by (seed, peer), a binary heap
ordered by (time, actor, sequence number), and per-edge latencies derived
by hashing (seed, src, dst). Same config, same output, bit for bit.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .events import (
    DiscoveryLogRecord,
    GossipEventType as E,
    GossipTraceRecord,
    LABEL_ABNORMAL,
    LABEL_NORMAL,
    discovery_csv_text,
    trace_csv_text,
)
from .kademlia import PeerEntry, RoutingTable, craft_node_id, random_node_id

MANIFEST_VERSION = 1

# Gossip mesh maintenance.
MESH_HIGH_SLACK = 4  # prune back once a mesh exceeds degree + slack
LATENCY_BASE_MS = 5
LATENCY_SPREAD_MS = 41  # per-edge latency in [base, base + spread)
FLOOD_RECONNECT_EVERY = 10  # every Nth flood tick re-sends AddPeer/Graft

# Discovery scenario.
ATTACK_BUCKETS = (252, 253, 254, 255, 256)
HONEST_PORTS = (30303, 30304, 9000, 13000)
ATTACK_PORT = 30303
WARMUP_INSERTS = 512  # unlogged honest churn before collection starts

Scenario = Literal[
    "baseline",
    "eclipse-single-victim",
    "covert-flash",
    "eclipse-network",
    "discovery-poisoning",
]


class SimConfig(BaseModel):
    """Everything a run needs; anything not set here is a module constant."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scenario: Scenario = "baseline"
    seed: int = 0
    n_honest: int = Field(default=40, ge=1)
    n_attackers: int = Field(default=0, ge=0)
    n_victims: int = Field(default=1, ge=1)
    duration_ms: int = Field(default=60_000, ge=1_000)
    heartbeat_ms: int = Field(default=700, ge=1)
    publish_rate_per_peer_per_s: float = Field(default=2.0, gt=0.0)
    mesh_degree: int = Field(default=8, ge=2)
    attack_start_ms: int = Field(default=15_000, ge=0)
    covert_switch_ms: Optional[int] = Field(default=None, ge=0)
    flood_multiplier: float = Field(default=10.0, gt=0.0)

    # Discovery-scenario knobs.
    bucket_capacity: int = Field(default=16, ge=1)
    ip_limit_enabled: bool = False
    max_per_ip_per_bucket: int = Field(default=1, ge=1)
    honest_churn_hz: float = Field(default=6.0, gt=0.0)
    attack_churn_hz: float = Field(default=20.0, gt=0.0)
    fresh_ip_fraction: float = Field(default=0.02, ge=0.0, le=1.0)
    honest_ip_pool: int = Field(default=256, ge=1)

    @model_validator(mode="after")
    def _coherent(self) -> "SimConfig":
        if self.n_victims > self.n_honest:
            raise ValueError("n_victims cannot exceed n_honest")
        attacks = {"eclipse-single-victim", "covert-flash", "eclipse-network", "discovery-poisoning"}
        if self.scenario in attacks and self.n_attackers < 1:
            raise ValueError(f"{self.scenario} needs at least one attacker")
        if self.scenario == "covert-flash":
            if self.covert_switch_ms is None:
                raise ValueError("covert-flash needs covert_switch_ms")
            if not 0 < self.covert_switch_ms < self.duration_ms:
                raise ValueError("covert_switch_ms must fall inside the run")
        if self.scenario in ("eclipse-single-victim", "eclipse-network", "discovery-poisoning"):
            if self.attack_start_ms >= self.duration_ms:
                raise ValueError("attack_start_ms must fall inside the run")
        return self


@dataclass
class SimOutput:
    traces: list[GossipTraceRecord]
    discovery: list[DiscoveryLogRecord]
    manifest: dict


def _derive_seed(seed: int, tag: str) -> int:
    h = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _edge_latency_ms(seed: int, src: int, dst: int) -> int:
    h = hashlib.blake2b(f"{seed}:{src}->{dst}".encode(), digest_size=4)
    return LATENCY_BASE_MS + int.from_bytes(h.digest(), "big") % LATENCY_SPREAD_MS


class _GossipSim:
    """Mesh gossip with optional eclipse or covert-flash attackers."""

    def __init__(self, config: SimConfig):
        self.cfg = config
        self.H = config.n_honest
        self.A = config.n_attackers
        self.victims = set(range(config.n_victims))
        self.honest = set(range(self.H))
        self.attackers = set(range(self.H, self.H + self.A))
        self.covert = config.scenario == "covert-flash"
        self.eclipse = config.scenario in ("eclipse-single-victim", "eclipse-network")
        self.switched = False

        self.n_total = self.H + self.A
        self.rngs = {p: np.random.default_rng([config.seed, 2, p]) for p in range(self.n_total)}
        self.conns: dict[int, set[int]] = {}
        self.mesh: dict[int, set[int]] = {}
        self.seen: dict[int, set] = {}
        self.records: list[GossipTraceRecord] = []
        self.heap: list = []
        self._seq = 0
        self._latency: dict[tuple[int, int], int] = {}
        self.stats = {"published": 0, "delivered": 0, "duplicate": 0, "flood_rpcs": 0}

        # Covert attackers sit in the mesh from the start; eclipse attackers
        # only ever dial their victims, later.
        self.participants = sorted(self.honest | (self.attackers if self.covert else set()))

    # -- plumbing ---------------------------------------------------------

    def _push(self, t: float, actor: int, tag: str, data: tuple = ()) -> None:
        if t > self.cfg.duration_ms:
            return
        self._seq += 1
        heapq.heappush(self.heap, (t, actor, self._seq, tag, data))

    def _lat(self, src: int, dst: int) -> int:
        key = (src, dst)
        lat = self._latency.get(key)
        if lat is None:
            lat = self._latency[key] = _edge_latency_ms(self.cfg.seed, src, dst)
        return lat

    def _emit(self, t: float, observer: int, remote: int, event: E) -> None:
        # One row per (victim, remote) edge. Folding all victims' views of a
        # remote into a single row would make row magnitudes scale with the
        # victim count and drown per-edge attack signatures; with a single
        # victim the row id reduces to the remote peer index.
        if observer in self.victims:
            self.records.append(
                GossipTraceRecord(
                    int(round(t)),
                    observer * self.n_total + remote,
                    event,
                    remote in self.honest,
                )
            )

    def _is_sink(self, p: int) -> bool:
        """True when p swallows everything instead of gossiping honestly."""
        if p not in self.attackers:
            return False
        return self.eclipse or (self.covert and self.switched)

    # -- setup ------------------------------------------------------------

    def _build_topology(self) -> None:
        n = len(self.participants)
        want = min(2 * self.cfg.mesh_degree, n - 1)
        self.conns = {p: set() for p in self.participants}
        self.mesh = {p: set() for p in self.participants}
        # Ring over participants guarantees the graph stays connected even
        # under unlucky random picks at tiny sizes.
        for i, p in enumerate(self.participants):
            q = self.participants[(i + 1) % n]
            if p != q:
                self.conns[p].add(q)
                self.conns[q].add(p)
        for p in self.participants:
            rng = self.rngs[p]
            candidates = [q for q in self.participants if q != p]
            if not candidates or want == 0:
                continue
            picks = rng.choice(len(candidates), size=want, replace=False)
            for k in picks:
                q = candidates[int(k)]
                self.conns[p].add(q)
                self.conns[q].add(p)
        for p in self.participants:
            rng = self.rngs[p]
            pool = sorted(self.conns[p] - self.mesh[p])
            need = min(self.cfg.mesh_degree, len(pool))
            if need == 0:
                continue
            picks = rng.choice(len(pool), size=need, replace=False)
            for k in picks:
                q = pool[int(k)]
                self.mesh[p].add(q)
                self.mesh[q].add(p)
        # Victims log their initial mesh as a join burst at t=0.
        for v in sorted(self.victims):
            for q in sorted(self.mesh[v]):
                self._emit(0, v, q, E.ADD_PEER)
                self._emit(0, v, q, E.JOIN)
                self._emit(0, v, q, E.GRAFT)

    def _schedule_initial(self) -> None:
        cfg = self.cfg
        for p in self.participants:
            rng = self.rngs[p]
            self._push(rng.exponential(1000.0 / cfg.publish_rate_per_peer_per_s), p, "pub")
            self._push(rng.uniform(0, self.cfg.heartbeat_ms), p, "hb")
        if self.covert:
            self._push(cfg.covert_switch_ms, -1, "switch")
        if self.eclipse:
            for a in sorted(self.attackers):
                self._push(cfg.attack_start_ms, a, "join")

    def _flood_targets(self, attacker: int) -> list[int]:
        if self.cfg.scenario == "eclipse-single-victim":
            return [0]
        # eclipse-network: attackers spread round-robin over the victims
        return [(attacker - self.H) % self.cfg.n_victims]

    # -- behaviors --------------------------------------------------------

    def _forward(self, p: int, t: float, msg, exclude: Optional[int]) -> None:
        if self._is_sink(p):
            return
        for q in sorted(self.mesh[p]):
            if q == exclude:
                continue
            self._emit(t, p, q, E.SEND_RPC)
            self._push(t + self._lat(p, q), q, "arr", (p, msg))

    def _on_publish(self, p: int, t: float) -> None:
        if p in self.attackers and self.covert and self.switched:
            return  # flash over: covert peers fall silent as publishers
        msg = (p, self.stats["published"])
        self.stats["published"] += 1
        self.seen[p].add(msg)
        self._forward(p, t, msg, exclude=None)
        self._push(t + self.rngs[p].exponential(1000.0 / self.cfg.publish_rate_per_peer_per_s), p, "pub")

    def _on_arrive(self, q: int, t: float, src: int, msg) -> None:
        self._emit(t, q, src, E.RECV_RPC)
        if self._is_sink(q):
            return
        if msg in self.seen[q]:
            self.stats["duplicate"] += 1
            self._emit(t, q, src, E.DUPLICATE_MESSAGE)
            return
        self.seen[q].add(msg)
        self.stats["delivered"] += 1
        self._emit(t, q, src, E.DELIVER_MESSAGE)
        self._forward(q, t, msg, exclude=src)

    def _on_heartbeat(self, p: int, t: float) -> None:
        if self._is_sink(p):
            return  # and never reschedules
        rng = self.rngs[p]
        mesh = self.mesh[p]
        high = self.cfg.mesh_degree + MESH_HIGH_SLACK
        while len(mesh) > high:
            members = sorted(mesh)
            q = members[int(rng.integers(len(members)))]
            mesh.discard(q)
            self.mesh[q].discard(p)
            self._emit(t, p, q, E.PRUNE)
            self._emit(t, q, p, E.PRUNE)
        spare = sorted(self.conns[p] - mesh - {p})
        while len(mesh) < self.cfg.mesh_degree and spare:
            q = spare.pop(int(rng.integers(len(spare))))
            mesh.add(q)
            self.mesh[q].add(p)
            self._emit(t, p, q, E.GRAFT)
            self._emit(t, q, p, E.GRAFT)
        self._push(t + self.cfg.heartbeat_ms, p, "hb")

    def _try_graft(self, t: float, a: int, v: int) -> None:
        """Attacker grafts onto a victim; oversubscribed meshes refuse.

        The victim always logs the GRAFT attempt; when its mesh is already
        past the high watermark it answers with an immediate PRUNE and keeps
        its membership, which is what stops a flood of grafts from evicting
        every honest neighbor.
        """
        self._emit(t, v, a, E.GRAFT)
        if len(self.mesh[v]) < self.cfg.mesh_degree + MESH_HIGH_SLACK:
            self.mesh[a].add(v)
            self.mesh[v].add(a)
        else:
            self._emit(t, v, a, E.PRUNE)

    def _on_join(self, a: int, t: float) -> None:
        """An eclipse attacker dials its victims and starts the flood."""
        self.conns.setdefault(a, set())
        self.mesh.setdefault(a, set())
        for v in self._flood_targets(a):
            self.conns[a].add(v)
            self.conns[v].add(a)
            self._emit(t, v, a, E.ADD_PEER)
            self._emit(t, v, a, E.JOIN)
            self._try_graft(t, a, v)
        self._push(t, a, "flood", (0,))

    def _on_flood(self, a: int, t: float, tick: int) -> None:
        for v in self._flood_targets(a):
            self._emit(t, v, a, E.RECV_RPC)
            self.stats["flood_rpcs"] += 1
            if tick % FLOOD_RECONNECT_EVERY == 0 and tick > 0 and v not in self.mesh[a]:
                # periodic re-dial: the victim sees AddPeer plus a fresh graft
                self._emit(t, v, a, E.ADD_PEER)
                self._try_graft(t, a, v)
        rate = self.cfg.publish_rate_per_peer_per_s * self.cfg.flood_multiplier
        self._push(t + self.rngs[a].exponential(1000.0 / rate), a, "flood", (tick + 1,))

    # -- main loop --------------------------------------------------------

    def run(self) -> list[GossipTraceRecord]:
        self.seen = {p: set() for p in range(self.H + self.A)}
        self._build_topology()
        self._schedule_initial()
        handlers = {
            "pub": lambda actor, t, data: self._on_publish(actor, t),
            "arr": lambda actor, t, data: self._on_arrive(actor, t, data[0], data[1]),
            "hb": lambda actor, t, data: self._on_heartbeat(actor, t),
            "join": lambda actor, t, data: self._on_join(actor, t),
            "flood": lambda actor, t, data: self._on_flood(actor, t, data[0]),
        }
        while self.heap:
            t, actor, _, tag, data = heapq.heappop(self.heap)
            if tag == "switch":
                self.switched = True
                continue
            handlers[tag](actor, t, data)
        self.records.sort(key=lambda r: (r.timestamp_ms, r.peer))
        return self.records


def _run_discovery(config: SimConfig) -> tuple[list[DiscoveryLogRecord], dict]:
    """Poisson churn against one victim's routing table.

    Honest churn draws node ids uniformly (so they pile into the topmost
    buckets) and mostly recycles a fixed pool of IPs. The attacker crafts
    ids for specific nearby buckets and burns a brand-new virtual IP on
    every insert.
    """
    rng_honest = random.Random(_derive_seed(config.seed, "disc-honest"))
    rng_attack = random.Random(_derive_seed(config.seed, "disc-attack"))
    victim_id = random.Random(_derive_seed(config.seed, "victim-id")).getrandbits(256)
    table = RoutingTable(
        victim_id,
        bucket_capacity=config.bucket_capacity,
        ip_limit_enabled=config.ip_limit_enabled,
        max_per_ip_per_bucket=config.max_per_ip_per_bucket,
    )
    pool = [f"10.0.{i // 250}.{1 + i % 250}" for i in range(config.honest_ip_pool)]

    # Unlogged warm-up: a long-running node's table is already full when log
    # collection starts, so the logged stream has steady-state churn texture
    # instead of a cold-boot fill transient.
    for i in range(WARMUP_INSERTS):
        node_id = random_node_id(rng_honest)
        if node_id == victim_id:
            continue
        ip = pool[rng_honest.randrange(len(pool))]
        port = rng_honest.choice(HONEST_PORTS)
        table.insert(PeerEntry(node_id, ip, port), now_ms=i - WARMUP_INSERTS, label=LABEL_NORMAL)

    def times(rng: random.Random, rate_hz: float, start_ms: float) -> list[float]:
        out = []
        t = start_ms
        while True:
            t += rng.expovariate(rate_hz) * 1000.0
            if t >= config.duration_ms:
                return out
            out.append(t)

    honest_times = times(rng_honest, config.honest_churn_hz, 0.0)
    attack_times = times(rng_attack, config.attack_churn_hz, float(config.attack_start_ms))
    merged = [(t, 0) for t in honest_times] + [(t, 1) for t in attack_times]
    merged.sort()

    records: list[DiscoveryLogRecord] = []
    stats = {"honest_inserts": 0, "attack_inserts": 0, "rejected": 0}
    fresh_count = 0
    attack_count = 0
    attacker_ids: set[int] = set()
    for t, kind in merged:
        if kind == 0:
            node_id = random_node_id(rng_honest)
            if node_id == victim_id:
                continue
            if rng_honest.random() < config.fresh_ip_fraction:
                ip = f"172.16.{fresh_count // 250}.{1 + fresh_count % 250}"
                fresh_count += 1
            else:
                ip = pool[rng_honest.randrange(len(pool))]
            port = rng_honest.choice(HONEST_PORTS)
            entry = PeerEntry(node_id, ip, port)
            label = LABEL_NORMAL
        else:
            bucket = rng_attack.choice(ATTACK_BUCKETS)
            node_id = craft_node_id(victim_id, bucket, rng_attack)
            ip = f"16.0.{attack_count // 250}.{1 + attack_count % 250}"
            attack_count += 1
            entry = PeerEntry(node_id, ip, ATTACK_PORT)
            attacker_ids.add(node_id)
            label = LABEL_ABNORMAL
        result = table.insert(entry, now_ms=int(round(t)), label=label)
        if result.record is None:
            stats["rejected"] += 1
            continue
        records.append(result.record)
        stats["honest_inserts" if kind == 0 else "attack_inserts"] += 1
    stats["final_occupation_ratio"] = table.occupation_ratio(attacker_ids)
    stats["table_size"] = len(table)
    return records, stats


def run_simulation(config: SimConfig) -> SimOutput:
    """Run one scenario end to end and hand back records plus a manifest.

    The manifest carries the config, counters, and content digests of both
    record streams; it never includes wall-clock time, so identical configs
    produce identical manifests.
    """
    if config.scenario == "discovery-poisoning":
        discovery, stats = _run_discovery(config)
        traces: list[GossipTraceRecord] = []
    else:
        sim = _GossipSim(config)
        traces = sim.run()
        discovery = []
        stats = sim.stats
    manifest = {
        "version": MANIFEST_VERSION,
        "scenario": config.scenario,
        "config": json.loads(config.model_dump_json()),
        "counts": {"traces": len(traces), "discovery": len(discovery), **stats},
        "digests": {
            "traces_csv_sha256": hashlib.sha256(trace_csv_text(traces).encode()).hexdigest(),
            "discovery_csv_sha256": hashlib.sha256(
                discovery_csv_text(discovery).encode()
            ).hexdigest(),
        },
    }
    return SimOutput(traces=traces, discovery=discovery, manifest=manifest)


def scenario_presets() -> list[tuple[str, SimConfig]]:
    """Named attack configurations: the three full scenarios and desk-scale
    halved variants that keep every other knob fixed."""
    full = [
        (
            "eclipse-single",
            SimConfig(
                scenario="eclipse-single-victim",
                seed=50,
                n_honest=40,
                n_attackers=100,
                n_victims=1,
                duration_ms=75_000,
                publish_rate_per_peer_per_s=1.0,
                mesh_degree=8,
                attack_start_ms=15_000,
                flood_multiplier=10.0,
            ),
        ),
        (
            "covert",
            SimConfig(
                scenario="covert-flash",
                seed=50,
                n_honest=100,
                n_attackers=100,
                n_victims=20,
                duration_ms=30_000,
                publish_rate_per_peer_per_s=0.35,
                mesh_degree=8,
                covert_switch_ms=6_000,
            ),
        ),
        (
            "eclipse-net",
            SimConfig(
                scenario="eclipse-network",
                seed=50,
                n_honest=50,
                n_attackers=200,
                n_victims=50,
                duration_ms=45_000,
                publish_rate_per_peer_per_s=0.6,
                mesh_degree=6,
                attack_start_ms=11_250,
                flood_multiplier=10.0,
            ),
        ),
    ]
    halved = []
    for name, cfg in full:
        halved.append(
            (
                f"{name}-half",
                cfg.model_copy(
                    update={
                        "n_attackers": cfg.n_attackers // 2,
                        "n_victims": max(1, cfg.n_victims // 2),
                    }
                ),
            )
        )
    return full + halved
