"""State and local discipline shared by the crash and Byzantine replicas.

Both engines follow the same slot rules, which the safety arguments
implicitly rely on:

* one monotone per-node sequence counter; a slot holds at most one digest;
* a node never accepts or echoes a digest into a slot occupied by a
  different digest, and never moves a digest it accepted to another slot
  on its own -- only an authoritative commit certificate relocates or
  evicts entries;
* a node defers a request m while it holds an uncommitted accepted m'
  whose involved-cluster sets intersect beyond one cluster (the blocking
  rule that keeps cross-shard commit order consistent);
* commits apply to the ledger strictly in local sequence order.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .core import ClientRequest, ClusterMap, MultiSeq, SystemConfig
from .ledger import Block, CommitCertificate, LedgerView
from .messages import Message, Reply
from .workload import AccountStore, execute


def client_address(client: int) -> int:
    """Clients live in the negative id space of the simulated network."""
    return -(client + 1)


@dataclass
class Effects:
    """What one event handler wants the outside world to do."""

    sends: list[tuple[int, Message]] = field(default_factory=list)
    timer_sets: list[tuple[tuple, int]] = field(default_factory=list)
    timer_cancels: list[tuple] = field(default_factory=list)
    commits: list[tuple[bytes, MultiSeq]] = field(default_factory=list)

    def send(self, dst: int, msg: Message) -> None:
        self.sends.append((dst, msg))

    def multicast(self, dsts, msg: Message) -> None:
        for dst in dsts:
            self.sends.append((dst, msg))

    def set_timer(self, key: tuple, delay: int) -> None:
        self.timer_sets.append((key, delay))

    def cancel_timer(self, key: tuple) -> None:
        self.timer_cancels.append(key)

    def merge(self, other: "Effects") -> None:
        self.sends.extend(other.sends)
        self.timer_sets.extend(other.timer_sets)
        self.timer_cancels.extend(other.timer_cancels)
        self.commits.extend(other.commits)


@dataclass
class Slot:
    digest: bytes
    status: str  # "accepted" | "committed"


@dataclass
class RequestState:
    """Everything a node tracks about one in-flight or committed request."""

    digest: bytes
    request: Optional[ClientRequest]
    involved: tuple[int, ...]
    initiator_cluster: int
    initiator_node: int
    initiator_seq: int              # h_i as announced by the initiator
    initiator_view: int = 0         # v_i, Byzantine mode
    local_seq: Optional[int] = None  # h_j in this node's cluster
    committed: bool = False
    accept_tally: dict = field(default_factory=dict)   # match key -> set of senders
    super_tally: dict = field(default_factory=dict)
    super_clusters: set = field(default_factory=set)   # cross: clusters moved to the super path
    label: Optional[MultiSeq] = None
    # crash-mode bookkeeping
    nacks: set = field(default_factory=set)            # members refusing our slot
    pinned_slot: bool = False                          # recovery re-proposal: keep the slot
    # Byzantine bookkeeping
    commit_votes: dict = field(default_factory=dict)   # (label, views) -> cluster -> sender -> Commit
    commit_emitted: set = field(default_factory=set)
    logged_accepts: list = field(default_factory=list)
    logged_commits: list = field(default_factory=list)
    fetching: bool = False


class ReplicaBase:
    """Common machinery: slots, blocking, in-order commit, execution."""

    def __init__(self, node: int, config: SystemConfig, cmap: ClusterMap,
                 store: AccountStore, seed: int = 0):
        self.node = node
        self.config = config
        self.cmap = cmap
        self.cluster = cmap.cluster_of(node)
        self.members = cmap.members(self.cluster)
        self.view = LedgerView(cluster=self.cluster, cmap=cmap, model=config.failure_model)
        self.store = store
        self.rng = random.Random(f"engine:{seed}:{node}")

        self.next_seq = 1
        self.slots: dict[int, Slot] = {}
        self.by_digest: dict[bytes, RequestState] = {}
        self.blocked: list[Message] = []
        self.commit_buffer: dict[int, Block] = {}
        self.committed_count = 0
        self.results: dict[tuple[int, int], tuple[bytes, str]] = {}
        self.crashed = False
        self.disable_blocking = False  # negative-control hook for the explorer

    # --- helpers -------------------------------------------------------------

    def f_of(self, cluster: int) -> int:
        return self.cmap.faults(cluster)

    def quorum(self, cluster: int) -> int:
        raise NotImplementedError

    def others(self, members) -> list[int]:
        return [n for n in members if n != self.node]

    def all_involved_nodes(self, involved) -> list[int]:
        out = []
        for c in involved:
            out.extend(self.cmap.members(c))
        return [n for n in out if n != self.node]

    def involved_of(self, request: ClientRequest) -> tuple[int, ...]:
        return tuple(request.involved_shards(self.cmap.num_clusters))

    def has_blocking_conflict(self, involved) -> bool:
        """True when an uncommitted accepted request shares >1 cluster with
        the given involved set."""
        if self.disable_blocking or len(involved) < 2:
            return False
        inv = set(involved)
        for rs in self.by_digest.values():
            if rs.committed or rs.local_seq is None:
                continue
            if len(rs.involved) < 2:
                continue
            if len(inv & set(rs.involved)) > 1:
                return True
        return False

    def assign_slot(self, d: bytes) -> int:
        seq = self.next_seq
        self.next_seq += 1
        self.slots[seq] = Slot(digest=d, status="accepted")
        return seq

    def adopt_slot(self, seq: int, d: bytes) -> bool:
        """Adopt the initiator's slot assignment; refuse occupied slots."""
        slot = self.slots.get(seq)
        if slot is not None:
            return slot.digest == d
        self.slots[seq] = Slot(digest=d, status="accepted")
        if seq >= self.next_seq:
            self.next_seq = seq + 1
        return True

    def release_slot(self, seq: int, d: bytes) -> None:
        slot = self.slots.get(seq)
        if slot is not None and slot.digest == d and slot.status == "accepted":
            del self.slots[seq]

    # --- committing ----------------------------------------------------------

    def commit_block(self, block: Block, eff: Effects) -> None:
        """Place a certified block at its local slot; apply in order.

        The certificate is authoritative: a different uncommitted occupant
        is evicted (and re-proposed by its initiator if that is us).
        """
        d = block.request_digest
        seq = block.label.seq_for(self.cluster)
        slot = self.slots.get(seq)
        if slot is not None and slot.status == "committed":
            return  # idempotent
        if slot is not None and slot.digest != d:
            self.evict(seq, slot.digest, eff)
        rs = self.by_digest.get(d)
        if rs is None:
            rs = RequestState(
                digest=d, request=block.request,
                involved=block.label.clusters(),
                initiator_cluster=block.label.clusters()[0],
                initiator_node=-1,
                initiator_seq=block.label.entries[0][1],
            )
            self.by_digest[d] = rs
        if rs.request is None:
            rs.request = block.request
        if rs.local_seq is not None and rs.local_seq != seq:
            self.release_slot(rs.local_seq, d)
        self.slots[seq] = Slot(digest=d, status="committed")
        if seq >= self.next_seq:
            self.next_seq = seq + 1
        rs.local_seq = seq
        rs.committed = True
        rs.label = block.label
        self.commit_buffer[seq] = block
        eff.cancel_timer(("req", d))
        eff.commits.append((d, block.label))
        self.drain_commits(eff)
        self.fill_gaps(eff)

    def evict(self, seq: int, d: bytes, eff: Effects) -> None:
        """An authoritative commit displaced an uncommitted occupant."""
        del self.slots[seq]
        rs = self.by_digest.get(d)
        if rs is not None and not rs.committed:
            rs.local_seq = None
            self.on_evicted(rs, eff)

    def on_evicted(self, rs: RequestState, eff: Effects) -> None:
        """Engine hook: re-propose self-initiated evicted requests."""

    def drain_commits(self, eff: Effects) -> None:
        progressed = False
        while self.committed_count + 1 in self.commit_buffer:
            block = self.commit_buffer.pop(self.committed_count + 1)
            self.view.append_block(block)
            result = execute(self.store, block.request)
            req = block.request
            self.committed_count += 1
            if req.client >= 0:
                self.results[(req.client, req.timestamp)] = (block.request_digest, result)
                self.maybe_reply(block, result, eff)
            self.after_append(block, eff)
            progressed = True
        if progressed:
            self.release_blocked(eff)

    def maybe_reply(self, block: Block, result: str, eff: Effects) -> None:
        """Engine hook: who answers the client differs per failure model."""

    def after_append(self, block: Block, eff: Effects) -> None:
        """Engine hook: runs once per appended block (checkpoints)."""

    def fill_gaps(self, eff: Effects) -> None:
        """Engine hook: a primary fills a committed-over hole with a no-op.

        A hole appears when a provisional local assignment for a foreign
        request is displaced by its certificate landing on a different
        slot; blocks above the hole would otherwise buffer forever."""

    def release_blocked(self, eff: Effects) -> None:
        """Retry deferred messages whose blocking conflict cleared."""
        if not self.blocked:
            return
        pending = self.blocked
        self.blocked = []
        for msg in pending:
            self.dispatch(msg, eff)

    def dispatch(self, msg: Message, eff: Effects) -> None:
        raise NotImplementedError

    # --- entry points used by the simulator ----------------------------------

    def handle(self, msg: Message, now: int) -> Effects:
        eff = Effects()
        if not self.crashed:
            self.now = now
            self.dispatch(msg, eff)
        return eff

    def on_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        if not self.crashed:
            self.now = now
            self.timer_fired(key, eff)
        return eff

    def timer_fired(self, key: tuple, eff: Effects) -> None:
        raise NotImplementedError
