"""Deterministic discrete-event network, fault injection and run loop.

One run is a strictly sequential event loop over a (time, insertion
counter) heap, so identical (config, seed, workload, faults) inputs give
byte-identical traces. Channels stay pairwise authenticated under every
network model and fault strategy: a message whose claimed sender differs
from the emitting node is dropped and the attempt recorded.
"""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .core import (
    ClusterMap,
    FailureModel,
    SystemConfig,
    form_clusters,
    noop_request,
)
from .byz_engine import ByzReplica
from .crash_engine import CrashReplica
from .engine_base import Effects, client_address
from .ledger import LedgerView, merge_views
from .messages import Commit, Message, Propose, Reply, Request
from .workload import AccountStore, genesis_store, serial_oracle


# --- network ------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    groups: tuple[frozenset, ...]

    def blocks(self, src: int, dst: int, now: int) -> bool:
        if not (self.start <= now < self.end):
            return False
        side_src = next((i for i, g in enumerate(self.groups) if src in g), -1)
        side_dst = next((i for i, g in enumerate(self.groups) if dst in g), -1)
        return side_src != side_dst


@dataclass(frozen=True)
class NetworkModel:
    intra_low: int = 500_000       # 0.5 ms
    intra_high: int = 1_500_000
    inter_low: int = 5_000_000     # 5 ms
    inter_high: int = 15_000_000
    distribution: str = "uniform"  # or "lognormal"
    drop_rate: float = 0.0
    duplicate_rate: float = 0.0
    partitions: tuple[Partition, ...] = ()

    def delay(self, rng: random.Random, same_cluster: bool) -> int:
        low, high = ((self.intra_low, self.intra_high) if same_cluster
                     else (self.inter_low, self.inter_high))
        if self.distribution == "lognormal":
            mid = (low + high) / 2
            return max(low, min(high * 4, int(rng.lognormvariate(0, 0.5) * mid)))
        return rng.randint(low, high)


# --- fault strategies ----------------------------------------------------------

class Strategy:
    """Byzantine strategies wrap an honest engine as message transformers,
    so faulty nodes stay protocol-aware."""

    name = "strategy"

    def on_activate(self, node: "SimNode") -> None:
        pass

    def transform(self, node: "SimNode", sends: list, now: int) -> list:
        return sends


class CrashStop(Strategy):
    name = "crash-stop"

    def on_activate(self, node: "SimNode") -> None:
        node.engine.crashed = True


class CrashRestart(Strategy):
    name = "crash-restart"

    def __init__(self, downtime: int):
        self.downtime = downtime

    def on_activate(self, node: "SimNode") -> None:
        node.engine.crashed = True
        node.sim.schedule_revive(node.node_id, self.downtime)


class Silence(Strategy):
    name = "silence"

    def transform(self, node, sends, now):
        return []


class DelayAll(Strategy):
    name = "delay-all"

    def __init__(self, extra: int):
        self.extra = extra

    def transform(self, node, sends, now):
        return [(dst, msg, self.extra) for dst, msg in sends]


class Equivocate(Strategy):
    """A Byzantine primary proposes two different requests at one slot,
    sending each version to half of the destinations."""

    name = "equivocate"

    def transform(self, node, sends, now):
        out = []
        flip = False
        for dst, msg in sends:
            if isinstance(msg, Propose):
                flip = not flip
                if flip:
                    forged = noop_request(node.engine.cluster, msg.seq, round_=0xBAD)
                    msg = replace(msg, request=forged, digest=forged.digest())
            out.append((dst, msg))
        return out


class StaleSeq(Strategy):
    """A Byzantine primary proposes with an already-used sequence number."""

    name = "stale-seq"

    def transform(self, node, sends, now):
        out = []
        for dst, msg in sends:
            if isinstance(msg, Propose):
                msg = replace(msg, seq=max(1, node.engine.committed_count))
            out.append((dst, msg))
        return out


class CrashOnSend(Strategy):
    """Crash while emitting the n-th message of a kind, letting only the
    first max_out copies of that batch escape. Drives scripted recovery
    scenarios to exact protocol states."""

    name = "crash-on-send"

    def __init__(self, kind: type, max_out: int, after: int = 0):
        self.kind = kind
        self.max_out = max_out
        self.after = after
        self.seen = 0

    def transform(self, node, sends, now):
        out = []
        for dst, msg in sends:
            if node.engine.crashed:
                break
            if isinstance(msg, self.kind):
                if self.seen < self.after:
                    self.seen += 1
                    out.append((dst, msg))
                    continue
                batch = [(d, m) for d, m in sends if isinstance(m, self.kind)]
                out.extend(batch[: self.max_out])
                node.engine.crashed = True
                break
            out.append((dst, msg))
        return out


@dataclass
class FaultSpec:
    node: int
    strategy: Strategy
    at_time: Optional[int] = None
    at_event: Optional[int] = None  # trace position for inject()


@dataclass
class FaultPlan:
    faults: tuple[FaultSpec, ...] = ()
    allow_bound_violation: bool = False

    def validate(self, cmap: ClusterMap) -> None:
        if self.allow_bound_violation:
            return
        per_cluster: dict[int, set[int]] = {}
        for spec in self.faults:
            cid = cmap.cluster_of(spec.node)
            per_cluster.setdefault(cid, set()).add(spec.node)
        for cid, nodes in per_cluster.items():
            if len(nodes) > cmap.faults(cid):
                raise ValueError(
                    f"fault plan exceeds f={cmap.faults(cid)} in cluster {cid}; "
                    "mark the run as a bound-violation experiment to allow this"
                )


# --- clients -------------------------------------------------------------------

class SimClient:
    """Closed loop: submit, await matching replies, submit the next."""

    MAX_RETRIES = 10

    def __init__(self, client_id: int, requests: list, sim: "Simulation"):
        self.client_id = client_id
        self.requests = requests
        self.sim = sim
        self.index = -1
        self.retries = 0
        self.replies: dict[tuple[bytes, str], set[int]] = {}
        self.done = False
        self.dropped = 0
        self.current_digest: bytes | None = None

    def next_request(self) -> None:
        self.index += 1
        self.retries = 0
        self.replies = {}
        if self.index >= len(self.requests):
            self.done = True
            self.current_digest = None
            return
        request = self.requests[self.index]
        self.current_digest = request.digest()
        self.sim.record("submit", self.client_id, self.current_digest)
        self.submit(request)

    def submit(self, request, broadcast: bool = False) -> None:
        involved = request.involved_shards(self.sim.cmap.num_clusters)
        target_cluster = involved[0]
        msg = Request(sender=client_address(self.client_id), request=request)
        if broadcast:
            targets = self.sim.cmap.members(target_cluster)
        else:
            targets = (self.sim.primary_hint(target_cluster),)
        for node in targets:
            self.sim.send_from_client(self.client_id, node, msg)
        self.sim.set_client_timer(self.client_id, self.sim.client_timeout)

    def reply_quorum(self, request) -> int:
        if self.sim.config.failure_model is FailureModel.CRASH:
            return 1
        cluster = request.involved_shards(self.sim.cmap.num_clusters)[0]
        return self.sim.cmap.faults(cluster) + 1

    def on_reply(self, msg: Reply) -> None:
        if self.done or self.current_digest is None or msg.digest != self.current_digest:
            return
        key = (msg.digest, msg.result)
        self.replies.setdefault(key, set()).add(msg.sender)
        request = self.requests[self.index]
        if len(self.replies[key]) >= self.reply_quorum(request):
            self.sim.record("reply-accept", self.client_id, msg.digest, msg.result)
            self.next_request()

    def on_timeout(self) -> None:
        if self.done or self.current_digest is None:
            return
        if self.retries >= self.MAX_RETRIES:
            self.dropped += 1
            self.next_request()
            return
        self.retries += 1
        self.submit(self.requests[self.index], broadcast=True)


# --- simulation ------------------------------------------------------------------

class SimNode:
    def __init__(self, node_id: int, engine, sim: "Simulation"):
        self.node_id = node_id
        self.engine = engine
        self.sim = sim
        self.strategy: Strategy | None = None


DELIVER, TIMER, CLIENT_TIMER, FAULT, REVIVE = range(5)


@dataclass
class RunTrace:
    config: SystemConfig
    cmap: ClusterMap
    seed: int
    events: list = field(default_factory=list)
    submit_times: dict = field(default_factory=dict)
    commit_times: dict = field(default_factory=dict)
    commit_labels: dict = field(default_factory=dict)
    message_counts: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    spoof_attempts: int = 0
    duration: int = 0
    delivered: int = 0
    dropped_requests: int = 0
    max_time_exceeded: bool = False
    views: list = field(default_factory=list)
    node_views: dict = field(default_factory=dict)
    node_stores: dict = field(default_factory=dict)
    node_crashed: dict = field(default_factory=dict)
    genesis: AccountStore | None = None
    replies: dict = field(default_factory=dict)

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for ev in self.events:
            h.update(repr(ev).encode())
        return h.hexdigest()

    def committed_count(self) -> int:
        return len(self.commit_times)

    def merge(self):
        return merge_views(self.views)

    def check_safety(self) -> list:
        """Agreement, pairwise cross-shard consistency, merge, execution."""
        out = list(self.violations)
        # per-cluster prefix agreement across member chains
        per_cluster: dict[int, list] = {}
        for node, view in self.node_views.items():
            per_cluster.setdefault(view.cluster, []).append(view)
        for cluster, views in per_cluster.items():
            digests = [[b.block_digest() for b in v.blocks] for v in views]
            longest = max(digests, key=len)
            for chain in digests:
                if chain != longest[: len(chain)]:
                    out.append(f"agreement: divergent chains in cluster {cluster}")
                    break
        try:
            dag = self.merge()
        except Exception as exc:  # DivergentBlock, cycles, gaps
            out.append(f"merge: {exc}")
            return out
        labels = [b.label for b in dag.blocks.values() if not b.label.is_intra]
        for i, la in enumerate(labels):
            ca = set(la.clusters())
            for lb in labels[i + 1:]:
                shared = ca & set(lb.clusters())
                if len(shared) < 2:
                    continue
                signs = {(la.seq_for(c) < lb.seq_for(c)) for c in shared}
                if len(signs) > 1:
                    out.append(f"consistency: {la.label()} vs {lb.label()} disagree")
        if self.genesis is not None:
            oracle = serial_oracle(self.genesis, dag)
            if oracle.total() != self.genesis.total():
                out.append("conservation: total supply changed")
            for node, store in self.node_stores.items():
                view = self.node_views[node]
                prefix = serial_oracle(self.genesis.restrict(view.cluster),
                                       merge_views([view]))
                if store.balances != prefix.balances:
                    out.append(f"execution: node {node} store != oracle prefix")
        return out


class Simulation:
    def __init__(self, config: SystemConfig, workload: list,
                 network: NetworkModel | None = None,
                 faults: FaultPlan | None = None,
                 seed: int = 0,
                 max_time: int = 120_000_000_000,
                 record_events: bool = True,
                 genesis: AccountStore | None = None,
                 accounts_per_shard: int = 100):
        self.config = config
        self.network = network or NetworkModel()
        self.faults = faults or FaultPlan()
        self.seed = seed
        self.max_time = max_time
        self.record_events = record_events
        self.cmap = form_clusters(config)
        self.faults.validate(self.cmap)
        self.rng = random.Random(f"net:{seed}")
        self.now = 0
        self.counter = 0
        self.heap: list = []
        self.timer_gen: dict = {}
        self.client_timer_gen: dict = {}
        self.client_timeout = 3 * config.timer_cross

        self.genesis = genesis or genesis_store(self.cmap.num_clusters, accounts_per_shard)
        engine_cls = CrashReplica if config.failure_model is FailureModel.CRASH else ByzReplica
        self.nodes: dict[int, SimNode] = {}
        for node_id in self.cmap.all_nodes():
            shard = self.cmap.shard_of_cluster(self.cmap.cluster_of(node_id))
            store = self.genesis.restrict(shard)
            engine = engine_cls(node_id, config, self.cmap, store, seed=seed)
            self.nodes[node_id] = SimNode(node_id, engine, self)

        by_client: dict[int, list] = {}
        for request in workload:
            by_client.setdefault(request.client, []).append(request)
        self.clients = {cid: SimClient(cid, reqs, self)
                        for cid, reqs in sorted(by_client.items())}

        self.trace = RunTrace(config=config, cmap=self.cmap, seed=seed,
                              genesis=self.genesis)
        self.commit_seen: dict[tuple[int, int], bytes] = {}
        self.event_index = 0
        self.pending_event_faults = sorted(
            (f for f in self.faults.faults if f.at_event is not None),
            key=lambda f: f.at_event)

    # --- scheduling -------------------------------------------------------------

    def push(self, time: int, kind: int, payload) -> None:
        self.counter += 1
        heapq.heappush(self.heap, (time, self.counter, kind, payload))

    def record(self, *fields) -> None:
        if self.record_events:
            self.trace.events.append((self.now, *fields))

    def primary_hint(self, cluster: int) -> int:
        return self.cmap.initial_primary(cluster)

    def send_from_client(self, client_id: int, dst: int, msg: Request) -> None:
        delay = self.network.delay(self.rng, same_cluster=False)
        self.push(self.now + delay, DELIVER, (client_address(client_id), dst, msg))

    def set_client_timer(self, client_id: int, delay: int) -> None:
        gen = self.client_timer_gen.get(client_id, 0) + 1
        self.client_timer_gen[client_id] = gen
        self.push(self.now + delay, CLIENT_TIMER, (client_id, gen))

    def schedule_revive(self, node_id: int, downtime: int) -> None:
        self.push(self.now + downtime, REVIVE, node_id)

    def route(self, src: int, msg_dst: tuple) -> None:
        dst, msg = msg_dst
        if msg.sender != src:
            self.trace.spoof_attempts += 1
            self.record("spoof-dropped", src, msg.kind)
            return
        if dst < 0:  # a client
            delay = self.network.delay(self.rng, same_cluster=False)
            self.push(self.now + delay, DELIVER, (src, dst, msg))
            return
        for part in self.network.partitions:
            if part.blocks(src, dst, self.now):
                self.record("partitioned", src, dst, msg.kind)
                return
        if self.network.drop_rate and self.rng.random() < self.network.drop_rate:
            self.record("dropped", src, dst, msg.kind)
            return
        same = self.cmap.cluster_of(src) == self.cmap.cluster_of(dst)
        delay = self.network.delay(self.rng, same_cluster=same)
        self.push(self.now + delay, DELIVER, (src, dst, msg))
        if self.network.duplicate_rate and self.rng.random() < self.network.duplicate_rate:
            dup_delay = self.network.delay(self.rng, same_cluster=same)
            self.push(self.now + dup_delay, DELIVER, (src, dst, msg))

    def apply_effects(self, node: SimNode, eff: Effects) -> None:
        sends = eff.sends
        if node.strategy is not None:
            sends = node.strategy.transform(node, sends, self.now)
        for item in sends:
            if len(item) == 3:  # DelayAll attaches extra latency
                dst, msg, extra = item
                self.push(self.now + extra, DELIVER, (node.node_id, dst, msg))
            else:
                self.route(node.node_id, item)
        for key in eff.timer_cancels:
            self.timer_gen[(node.node_id, key)] = \
                self.timer_gen.get((node.node_id, key), 0) + 1
        for key, delay in eff.timer_sets:
            gen = self.timer_gen.get((node.node_id, key), 0) + 1
            self.timer_gen[(node.node_id, key)] = gen
            self.push(self.now + delay, TIMER, (node.node_id, key, gen))
        for d, label in eff.commits:
            self.note_commit(node, d, label)

    def note_commit(self, node: SimNode, d: bytes, label) -> None:
        cluster = node.engine.cluster
        seq = label.seq_for(cluster)
        prev = self.commit_seen.get((cluster, seq))
        if prev is None:
            self.commit_seen[(cluster, seq)] = d
        elif prev != d:
            self.trace.violations.append(
                f"agreement: cluster {cluster} seq {seq} has two digests")
        old_label = self.trace.commit_labels.get(d)
        if old_label is not None and old_label != label:
            self.trace.violations.append(
                f"agreement: digest {d.hex()[:12]} committed under two labels")
        self.trace.commit_labels.setdefault(d, label)
        self.trace.commit_times.setdefault(d, self.now)
        self.record("commit", node.node_id, label.entries, d[:8].hex())

    # --- main loop -----------------------------------------------------------------

    def run(self) -> RunTrace:
        for spec in self.faults.faults:
            if spec.at_time is not None:
                self.push(spec.at_time, FAULT, spec)
        for client in self.clients.values():
            client.next_request()

        while self.heap:
            if all(c.done for c in self.clients.values()):
                break
            time, _, kind, payload = heapq.heappop(self.heap)
            if time > self.max_time:
                self.trace.max_time_exceeded = True
                break
            self.now = time
            self.event_index += 1
            while (self.pending_event_faults
                   and self.pending_event_faults[0].at_event <= self.event_index):
                spec = self.pending_event_faults.pop(0)
                self.activate_fault(spec)
            if kind == DELIVER:
                self.handle_delivery(payload)
            elif kind == TIMER:
                node_id, key, gen = payload
                if self.timer_gen.get((node_id, key)) == gen:
                    node = self.nodes[node_id]
                    eff = node.engine.on_timer(key, self.now)
                    self.apply_effects(node, eff)
            elif kind == CLIENT_TIMER:
                client_id, gen = payload
                if self.client_timer_gen.get(client_id) == gen:
                    self.clients[client_id].on_timeout()
            elif kind == FAULT:
                self.activate_fault(payload)
            elif kind == REVIVE:
                self.nodes[payload].engine.crashed = False
                self.record("revive", payload)

        self.trace.duration = self.now
        self.trace.dropped_requests = sum(c.dropped for c in self.clients.values())
        self.finalize()
        return self.trace

    def activate_fault(self, spec: FaultSpec) -> None:
        node = self.nodes[spec.node]
        node.strategy = spec.strategy
        spec.strategy.on_activate(node)
        self.record("fault", spec.node, spec.strategy.name)

    def handle_delivery(self, payload) -> None:
        src, dst, msg = payload
        if dst < 0:
            client = self.clients.get(-dst - 1)
            if client is not None and isinstance(msg, Reply):
                self.record("deliver", msg.kind, src, dst, msg.digest[:8].hex())
                self.trace.replies.setdefault(msg.digest, msg.result)
                client.on_reply(msg)
            return
        node = self.nodes[dst]
        self.trace.delivered += 1
        self.trace.message_counts[msg.kind] = self.trace.message_counts.get(msg.kind, 0) + 1
        if self.record_events:
            d = getattr(msg, "digest", b"") or b""
            self.record("deliver", msg.kind, src, dst, d[:8].hex() if d else "")
        eff = node.engine.handle(msg, self.now)
        self.apply_effects(node, eff)

    def finalize(self) -> None:
        for node_id, node in self.nodes.items():
            self.trace.node_views[node_id] = node.engine.view
            self.trace.node_stores[node_id] = node.engine.store
            self.trace.node_crashed[node_id] = node.engine.crashed
        views = []
        for c in range(self.cmap.num_clusters):
            best = max((self.nodes[n].engine.view for n in self.cmap.members(c)),
                       key=lambda v: len(v.blocks))
            views.append(best)
        self.trace.views = views

def run(config: SystemConfig, workload: list, network: NetworkModel | None = None,
        faults: FaultPlan | None = None, seed: int = 0, **kwargs) -> RunTrace:
    """Build engines per form_clusters and process events to completion."""
    sim = Simulation(config, workload, network, faults, seed, **kwargs)
    trace = sim.run()
    for t, *rest in trace.events:
        if rest and rest[0] == "submit":
            trace.submit_times.setdefault(rest[2], t)
    return trace


def inject(config: SystemConfig, workload: list, position: int, fault: FaultSpec,
           network: NetworkModel | None = None, faults: FaultPlan | None = None,
           seed: int = 0, **kwargs) -> RunTrace:
    """Deterministically replay to an event position, then continue with
    the fault active."""
    spec = FaultSpec(node=fault.node, strategy=fault.strategy, at_event=position)
    base = list(faults.faults) if faults else []
    plan = FaultPlan(faults=tuple(base + [spec]),
                     allow_bound_violation=faults.allow_bound_violation if faults else False)
    return run(config, workload, network, plan, seed, **kwargs)
