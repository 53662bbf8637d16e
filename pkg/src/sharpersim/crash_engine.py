"""Replica state machine for the crash failure model.

Intra-shard ordering is multi-Paxos with a stable primary; cross-shard
requests run the flattened protocol: the initiator primary proposes to
every node of every involved cluster, collects f+1 matching ACCEPTs per
cluster, and multicasts a single signed COMMIT carrying the multi-part
sequence number. Conflicting clusters are repaired through the
SUPER-PROPOSE / SUPER-ACCEPT path, and primary failure is handled with
Paxos-style leader election followed by per-slot recovery queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .core import ClusterMap, ConflictMode, MultiSeq, SystemConfig, noop_request, sign_sim
from .engine_base import Effects, ReplicaBase, RequestState, client_address
from .ledger import Block, CommitCertificate
from .messages import (
    Accept,
    AcceptQuery,
    Commit,
    Committed,
    Message,
    Prepare,
    Promise,
    Propose,
    Reply,
    Request,
    SuperAccept,
    SuperPropose,
    Unknown,
)
from .workload import AccountStore


@dataclass
class RecoverySlot:
    committed: Optional[Committed] = None
    accepts: list[Accept] = field(default_factory=list)
    unknowns: set[int] = field(default_factory=set)
    responders: set[int] = field(default_factory=set)
    decided: bool = False


class CrashReplica(ReplicaBase):
    def __init__(self, node: int, config: SystemConfig, cmap: ClusterMap,
                 store: AccountStore, seed: int = 0):
        super().__init__(node, config, cmap, store, seed)
        self.current_primary = {c: cmap.initial_primary(c) for c, _ in cmap.clusters}
        self.promised: tuple[int, int] = (0, -1)
        self.election_number: Optional[tuple[int, int]] = None
        self.election_promises: set[int] = set()
        self.election_high = 0
        self.recovering = False
        self.recovery_slots: dict[int, RecoverySlot] = {}
        self.pending_requests: list[Request] = []
        self.committed_foreign: dict[int, int] = {}
        self.now = 0

    # --- role helpers ----------------------------------------------------------

    @property
    def is_primary(self) -> bool:
        return self.current_primary[self.cluster] == self.node

    def quorum(self, cluster: int) -> int:
        return self.f_of(cluster) + 1

    def timer_for(self, involved) -> int:
        return self.config.timer_cross if len(involved) > 1 else self.config.timer_intra

    # --- dispatch ----------------------------------------------------------------

    def dispatch(self, msg: Message, eff: Effects) -> None:
        handler = getattr(self, "on_" + type(msg).__name__.lower(), None)
        if handler is not None:
            handler(msg, eff)

    def timer_fired(self, key: tuple, eff: Effects) -> None:
        kind = key[0]
        if kind == "req":
            self.request_timeout(key[1], eff)
        elif kind == "conflict":
            self.conflict_timeout(key[1], eff)
        elif kind == "elect":
            self.election_timeout(key[1], eff)
        elif kind == "recover":
            self.decide_recovery_slot(key[1], eff, force=True)
        elif kind == "elect-retry":
            if self.election_number is None and not self.is_primary:
                self.start_election(eff)
        elif kind == "relay":
            d = key[1]
            rs = self.by_digest.get(d)
            if rs is None or (not rs.committed and rs.local_seq is None):
                self.start_election(eff)

    # --- client requests ---------------------------------------------------------

    def on_request(self, msg: Request, eff: Effects) -> None:
        request = msg.request
        key = (request.client, request.timestamp)
        if key in self.results:
            d, result = self.results[key]
            eff.send(client_address(request.client), Reply(sender=self.node, result=result, digest=d))
            return
        d = request.digest()
        if not self.is_primary:
            # relay and watch: a primary that stays silent on a relayed
            # request is eventually suspected (§3.1 fallback path)
            eff.send(self.current_primary[self.cluster], msg)
            eff.set_timer(("relay", d), 2 * self.config.timer_intra)
            return
        if d in self.by_digest and self.by_digest[d].local_seq is not None:
            return  # already in flight here
        if self.recovering:
            self.pending_requests.append(msg)
            return
        involved = self.involved_of(request)
        if self.has_blocking_conflict(involved):
            self.blocked.append(msg)
            return
        self.initiate(request, eff)

    def initiate(self, request, eff: Effects) -> None:
        d = request.digest()
        involved = self.involved_of(request)
        h_i = self.assign_slot(d)
        rs = RequestState(
            digest=d, request=request, involved=involved,
            initiator_cluster=self.cluster, initiator_node=self.node,
            initiator_seq=h_i, local_seq=h_i,
        )
        self.by_digest[d] = rs
        rs.accept_tally[(self.cluster, h_i)] = {self.node}
        propose = Propose(
            sender=self.node, initiator_cluster=self.cluster,
            seq=h_i, digest=d, request=request,
        )
        if len(involved) == 1:
            eff.multicast(self.others(self.members), propose)
        elif self.config.conflict_mode is ConflictMode.SUPER_PROPOSE_FIRST:
            eff.multicast(self.others(self.members), propose)
            sp = SuperPropose(sender=self.node, initiator_cluster=self.cluster,
                              seq=h_i, digest=d, request=request)
            for c in involved:
                if c != self.cluster:
                    rs.super_clusters.add(c)
                    eff.send(self.current_primary[c], sp)
        else:
            eff.multicast(self.all_involved_nodes(involved), propose)
        eff.set_timer(("req", d), self.timer_for(involved))
        if len(involved) > 1:
            eff.set_timer(("conflict", d), self.config.timer_cross)

    # --- propose / accept ---------------------------------------------------------

    def on_propose(self, msg: Propose, eff: Effects) -> None:
        d = msg.digest
        self.current_primary[msg.initiator_cluster] = msg.sender
        rs = self.by_digest.get(d)
        if rs is not None and rs.committed:
            # recovery re-proposal of a block we already hold
            eff.send(msg.sender, self.make_accept(rs, rs.local_seq))
            return
        if msg.initiator_cluster != self.cluster:
            if msg.seq <= self.committed_foreign.get(msg.initiator_cluster, 0) and rs is None:
                return  # stale retransmission of an older initiator slot
        if rs is not None and rs.local_seq is not None:
            if rs.initiator_seq != msg.seq:
                rs.initiator_seq = msg.seq  # initiator re-proposed at a new slot
            eff.send(msg.sender, self.make_accept(rs, rs.local_seq))
            return
        involved = self.involved_of(msg.request)
        if self.has_blocking_conflict(involved):
            self.blocked.append(msg)
            return
        if msg.initiator_cluster == self.cluster:
            if not self.adopt_slot(msg.seq, d):
                # slot occupied by a different digest: refuse, so the
                # primary can re-run the request at a fresh slot
                eff.send(msg.sender, Accept(
                    sender=self.node, initiator_cluster=msg.initiator_cluster,
                    cluster=self.cluster, seq_initiator=msg.seq,
                    seq_local=0, digest=d))
                return
            h_j = msg.seq
        else:
            h_j = self.assign_slot(d)
        self.by_digest[d] = RequestState(
            digest=d, request=msg.request, involved=involved,
            initiator_cluster=msg.initiator_cluster, initiator_node=msg.sender,
            initiator_seq=msg.seq, local_seq=h_j,
        )
        eff.send(msg.sender, self.make_accept(self.by_digest[d], h_j))
        eff.set_timer(("req", d), self.timer_for(involved))

    def make_accept(self, rs: RequestState, h_j: int, request=None) -> Accept:
        return Accept(
            sender=self.node, initiator_cluster=rs.initiator_cluster,
            cluster=self.cluster, seq_initiator=rs.initiator_seq,
            seq_local=h_j, digest=rs.digest, request=request,
        )

    def on_accept(self, msg: Accept, eff: Effects) -> None:
        if msg.cluster == self.cluster and msg.seq_local in self.recovery_slots:
            rec = self.recovery_slots[msg.seq_local]
            if not rec.decided:
                self.recovery_accept(msg, eff)
                return
        rs = self.by_digest.get(msg.digest)
        if rs is None or rs.committed or rs.initiator_node != self.node:
            return
        if msg.sender not in self.cmap.members(msg.cluster):
            return
        if msg.cluster in rs.super_clusters:
            return  # Algorithm 2: plain accepts from a super cluster are ignored
        if msg.seq_initiator != rs.initiator_seq:
            return
        if msg.seq_local == 0 and msg.cluster == self.cluster:
            rs.nacks.add(msg.sender)
            if (not rs.pinned_slot
                    and len(self.members) - len(rs.nacks) < self.quorum(self.cluster)):
                self.re_initiate_own(rs, eff)
            return
        rs.accept_tally.setdefault((msg.cluster, msg.seq_local), set()).add(msg.sender)
        self.try_commit(rs, eff)
        self.check_full_response_conflict(rs, eff)

    def on_superaccept(self, msg: SuperAccept, eff: Effects) -> None:
        rs = self.by_digest.get(msg.digest)
        if rs is not None and rs.initiator_node == self.node and not rs.committed:
            if msg.sender in self.cmap.members(msg.cluster):
                rs.super_tally.setdefault((msg.cluster, msg.seq_local), set()).add(msg.sender)
                self.try_commit(rs, eff)
        if (msg.cluster == self.cluster
                and msg.sender == self.current_primary[self.cluster]
                and msg.sender != self.node):
            self.echo_super(msg, eff)

    def echo_super(self, msg: SuperAccept, eff: Effects) -> None:
        """Adopt the cluster primary's authoritative slot and echo it."""
        rs = self.by_digest.get(msg.digest)
        if rs is None:
            if msg.request is None:
                return
            rs = RequestState(
                digest=msg.digest, request=msg.request,
                involved=self.involved_of(msg.request),
                initiator_cluster=msg.initiator_cluster, initiator_node=-1,
                initiator_seq=msg.seq_initiator, local_seq=None,
            )
            self.by_digest[msg.digest] = rs
        if rs.committed:
            return
        if rs.local_seq is not None and rs.local_seq != msg.seq_local:
            return  # never move an accepted digest on our own
        if rs.local_seq is None:
            if self.has_blocking_conflict(rs.involved):
                self.blocked.append(msg)
                return
            if not self.adopt_slot(msg.seq_local, msg.digest):
                return
            rs.local_seq = msg.seq_local
        rs.initiator_seq = msg.seq_initiator
        echo = SuperAccept(
            sender=self.node, initiator_cluster=msg.initiator_cluster,
            cluster=self.cluster, seq_initiator=msg.seq_initiator,
            seq_local=msg.seq_local, digest=msg.digest,
        )
        eff.send(self.current_primary[msg.initiator_cluster], echo)
        eff.set_timer(("req", msg.digest), self.timer_for(rs.involved))

    def try_commit(self, rs: RequestState, eff: Effects) -> None:
        entries = []
        for c in rs.involved:
            tally = rs.super_tally if c in rs.super_clusters else rs.accept_tally
            need = self.quorum(c)
            found = None
            for (cluster, seq), senders in tally.items():
                if cluster == c and len(senders) >= need:
                    found = seq
                    break
            if found is None:
                return
            entries.append((c, found))
        label = MultiSeq(tuple(sorted(entries)))
        rs.label = label
        commit = Commit(
            sender=self.node, auth=sign_sim(self.node, rs.digest),
            label=label, digest=rs.digest, request=rs.request,
        )
        eff.multicast(self.all_involved_nodes(rs.involved), commit)
        eff.cancel_timer(("conflict", rs.digest))
        self.apply_commit(commit, eff)

    def apply_commit(self, commit: Commit, eff: Effects) -> None:
        label = commit.label
        for c, seq in label.entries:
            if c != self.cluster:
                self.committed_foreign[c] = max(self.committed_foreign.get(c, 0), seq)
        block = Block(
            label=label, request=commit.request,
            request_digest=commit.digest,
            certificate=CommitCertificate(votes=(commit,)),
        )
        self.commit_block(block, eff)

    def on_commit(self, msg: Commit, eff: Effects) -> None:
        if msg.auth is None or msg.auth.signer != msg.sender:
            return
        if self.cluster not in msg.label.clusters() or msg.request is None:
            return
        self.apply_commit(msg, eff)

    # --- conflicts (Algorithm 2) ---------------------------------------------------

    def check_full_response_conflict(self, rs: RequestState, eff: Effects) -> None:
        """Declare a cluster conflicting once every member answered without
        an f+1 matching quorum; the conflict timer is the fallback trigger."""
        if len(rs.involved) < 2 or rs.committed:
            return
        conflicting = []
        for c in rs.involved:
            if c in rs.super_clusters or c == self.cluster:
                continue
            senders = set()
            best = 0
            for (cluster, _), who in rs.accept_tally.items():
                if cluster == c:
                    senders |= who
                    best = max(best, len(who))
            if len(senders) == len(self.cmap.members(c)) and best < self.quorum(c):
                conflicting.append(c)
        if conflicting:
            self.resolve_conflict(rs, conflicting, eff)

    def conflict_timeout(self, d: bytes, eff: Effects) -> None:
        rs = self.by_digest.get(d)
        if rs is None or rs.committed or rs.initiator_node != self.node:
            return
        conflicting = []
        for c in rs.involved:
            if c == self.cluster:
                continue
            tally = rs.super_tally if c in rs.super_clusters else rs.accept_tally
            if not any(cluster == c and len(senders) >= self.quorum(c)
                       for (cluster, _), senders in tally.items()):
                conflicting.append(c)
        if conflicting:
            self.resolve_conflict(rs, conflicting, eff)
        eff.set_timer(("conflict", d), self.config.timer_cross)

    def re_initiate_own(self, rs: RequestState, eff: Effects) -> None:
        """Our own cluster cannot adopt the slot (it was consumed by a
        foreign assignment): move the request to a fresh slot. Foreign
        accept tallies keep their local sequence numbers."""
        if rs.local_seq is not None:
            self.release_slot(rs.local_seq, rs.digest)
        h_i = self.assign_slot(rs.digest)
        rs.local_seq = h_i
        rs.initiator_seq = h_i
        rs.nacks = set()
        rs.accept_tally = {k: v for k, v in rs.accept_tally.items()
                           if k[0] != self.cluster}
        rs.accept_tally[(self.cluster, h_i)] = {self.node}
        propose = Propose(sender=self.node, initiator_cluster=self.cluster,
                          seq=h_i, digest=rs.digest, request=rs.request)
        eff.multicast(self.all_involved_nodes(rs.involved), propose)
        eff.set_timer(("req", rs.digest), self.timer_for(rs.involved))

    def resolve_conflict(self, rs: RequestState, clusters, eff: Effects) -> None:
        sp = SuperPropose(
            sender=self.node, initiator_cluster=self.cluster,
            seq=rs.initiator_seq, digest=rs.digest, request=rs.request,
        )
        for c in clusters:
            rs.super_clusters.add(c)
            eff.send(self.current_primary[c], sp)

    def on_superpropose(self, msg: SuperPropose, eff: Effects) -> None:
        d = msg.digest
        self.current_primary[msg.initiator_cluster] = msg.sender
        rs = self.by_digest.get(d)
        if rs is not None and rs.committed:
            eff.send(msg.sender, SuperAccept(
                sender=self.node, initiator_cluster=msg.initiator_cluster,
                cluster=self.cluster, seq_initiator=msg.seq,
                seq_local=rs.local_seq, digest=d))
            return
        if not self.is_primary:
            eff.send(self.current_primary[self.cluster], msg)
            return
        if rs is None:
            involved = self.involved_of(msg.request)
            if self.has_blocking_conflict(involved):
                self.blocked.append(msg)
                return
            rs = RequestState(
                digest=d, request=msg.request, involved=involved,
                initiator_cluster=msg.initiator_cluster, initiator_node=msg.sender,
                initiator_seq=msg.seq, local_seq=self.assign_slot(d),
            )
            self.by_digest[d] = rs
        elif rs.local_seq is None:
            if self.has_blocking_conflict(rs.involved):
                self.blocked.append(msg)
                return
            rs.local_seq = self.assign_slot(d)
        rs.initiator_seq = msg.seq
        sa = SuperAccept(
            sender=self.node, initiator_cluster=msg.initiator_cluster,
            cluster=self.cluster, seq_initiator=msg.seq,
            seq_local=rs.local_seq, digest=d,
        )
        eff.multicast(self.others(self.members), replace(sa, request=msg.request))
        eff.send(msg.sender, sa)
        eff.set_timer(("req", d), self.timer_for(rs.involved))

    # --- eviction / reply hooks ------------------------------------------------------

    def on_evicted(self, rs: RequestState, eff: Effects) -> None:
        if (rs.initiator_node == self.node and self.is_primary
                and rs.request is not None and not rs.request.is_noop):
            # our own uncommitted request lost its slot to a certificate;
            # re-run it at a fresh slot
            del self.by_digest[rs.digest]
            if self.has_blocking_conflict(rs.involved):
                self.blocked.append(Request(sender=client_address(rs.request.client),
                                            request=rs.request))
            else:
                self.initiate(rs.request, eff)

    def maybe_reply(self, block: Block, result: str, eff: Effects) -> None:
        rs = self.by_digest.get(block.request_digest)
        if rs is not None and rs.initiator_node == self.node:
            eff.send(client_address(block.request.client),
                     Reply(sender=self.node, result=result, digest=block.request_digest))

    # --- timeouts and primary failure handling (§3.4) ----------------------------

    def request_timeout(self, d: bytes, eff: Effects) -> None:
        rs = self.by_digest.get(d)
        if rs is None or rs.committed:
            return
        if rs.initiator_cluster == self.cluster:
            if rs.initiator_node == self.node:
                # retransmit; conflicts have their own timer
                propose = Propose(sender=self.node, initiator_cluster=self.cluster,
                                  seq=rs.initiator_seq, digest=d, request=rs.request)
                eff.multicast(self.all_involved_nodes(rs.involved), propose)
                eff.set_timer(("req", d), self.timer_for(rs.involved))
                return
            self.start_election(eff)
        else:
            query = AcceptQuery(
                sender=self.node, cluster=self.cluster,
                seq_initiator=rs.initiator_seq,
                seq_local=rs.local_seq or 0, digest=d,
            )
            eff.multicast(self.others(self.cmap.members(rs.initiator_cluster)), query)
            eff.set_timer(("req", d), self.timer_for(rs.involved))

    def on_acceptquery(self, msg: AcceptQuery, eff: Effects) -> None:
        if msg.digest is not None:
            self.answer_digest_query(msg, eff)
        else:
            self.answer_slot_query(msg, eff)

    def answer_digest_query(self, msg: AcceptQuery, eff: Effects) -> None:
        d = msg.digest
        rs = self.by_digest.get(d)
        if rs is not None and rs.committed and rs.label is not None:
            block = self.commit_buffer.get(rs.local_seq)
            commit = self.stored_commit(rs)
            if commit is not None:
                eff.send(msg.sender, Committed(sender=self.node, seq=msg.seq_initiator,
                                               digest=d, commit=commit))
            return
        if rs is not None and rs.initiator_cluster == self.cluster and not self.is_primary:
            # a foreign cluster is stuck on our primary: watch it ourselves
            eff.set_timer(("relay", d), self.config.timer_intra)
        elif rs is not None and rs.local_seq is not None:
            eff.send(msg.sender, self.make_accept(rs, rs.local_seq, request=rs.request))

    def stored_commit(self, rs: RequestState) -> Optional[Commit]:
        if rs.label is None:
            return None
        seq = rs.label.seq_for(self.cluster)
        if seq <= len(self.view.blocks):
            return self.view.blocks[seq - 1].certificate.votes[0]
        block = self.commit_buffer.get(seq)
        if block is not None:
            return block.certificate.votes[0]
        return None

    def answer_slot_query(self, msg: AcceptQuery, eff: Effects) -> None:
        seq = msg.seq_initiator
        slot = self.slots.get(seq)
        if slot is None:
            eff.send(msg.sender, Unknown(sender=self.node, seq=seq))
            return
        rs = self.by_digest[slot.digest]
        if slot.status == "committed":
            commit = self.stored_commit(rs)
            if commit is not None:
                eff.send(msg.sender, Committed(sender=self.node, seq=seq,
                                               digest=slot.digest, commit=commit))
        else:
            eff.send(msg.sender, self.make_accept(rs, seq, request=rs.request))

    # --- leader election (Paxos prepare/promise) --------------------------------------

    def start_election(self, eff: Effects) -> None:
        if self.election_number is not None:
            return  # already campaigning
        round_ = self.promised[0] + 1
        number = (round_, self.node)
        self.election_number = number
        self.election_promises = {self.node}
        self.election_high = max(self.slots.keys(), default=0)
        self.promised = number
        eff.multicast(self.others(self.members), Prepare(sender=self.node, number=number))
        eff.set_timer(("elect", round_), self.config.timer_intra * 2)
        self.check_elected(eff)

    def on_prepare(self, msg: Prepare, eff: Effects) -> None:
        number = tuple(msg.number)
        if number <= self.promised:
            return
        self.promised = number
        self.election_number = None  # yield to the higher campaign
        self.current_primary[self.cluster] = msg.sender
        eff.send(msg.sender, Promise(sender=self.node, number=number,
                                     high_seq=max(self.slots.keys(), default=0)))

    def on_promise(self, msg: Promise, eff: Effects) -> None:
        if self.election_number is None or tuple(msg.number) != self.election_number:
            return
        self.election_promises.add(msg.sender)
        self.election_high = max(self.election_high, msg.high_seq)
        self.check_elected(eff)

    def check_elected(self, eff: Effects) -> None:
        if self.election_number is None:
            return
        if len(self.election_promises) < self.quorum(self.cluster):
            return
        round_ = self.election_number[0]
        self.election_number = None
        self.current_primary[self.cluster] = self.node
        eff.cancel_timer(("elect", round_))
        self.begin_recovery(eff)

    def election_timeout(self, round_: int, eff: Effects) -> None:
        if self.election_number is None or self.election_number[0] != round_:
            return
        # split election: retry with a larger number after a seeded backoff
        self.election_number = None
        backoff = self.rng.randrange(self.config.timer_intra)
        eff.set_timer(("elect-retry", round_), self.config.timer_intra + backoff)

    # --- new-primary recovery (§3.4) ------------------------------------------------

    def begin_recovery(self, eff: Effects) -> None:
        self.recovering = True
        self.recovery_slots = {}
        for seq in range(self.committed_count + 1, self.election_high + 1):
            slot = self.slots.get(seq)
            if slot is not None and slot.status == "committed":
                continue
            rec = RecoverySlot()
            self.recovery_slots[seq] = rec
            rec.responders.add(self.node)
            if slot is not None:
                rs = self.by_digest[slot.digest]
                rec.accepts.append(self.make_accept(rs, seq, request=rs.request))
            else:
                rec.unknowns.add(self.node)
            query = AcceptQuery(sender=self.node, cluster=self.cluster, seq_initiator=seq)
            eff.multicast(self.others(self.members), query)
            eff.set_timer(("recover", seq), self.config.timer_intra * 2)
        if not self.recovery_slots:
            self.finish_recovery(eff)

    def on_committed(self, msg: Committed, eff: Effects) -> None:
        commit = msg.commit
        if commit is None or commit.request is None:
            return
        if commit.auth is None or commit.auth.signer != commit.sender:
            return
        rec = self.recovery_slots.get(msg.seq)
        if rec is not None and not rec.decided:
            rec.committed = msg
            rec.responders.add(msg.sender)
            self.decide_recovery_slot(msg.seq, eff, force=False)
            return
        # an embedded certificate is authoritative wherever it arrives
        if self.cluster in commit.label.clusters():
            self.apply_commit(commit, eff)

    def on_unknown(self, msg: Unknown, eff: Effects) -> None:
        rec = self.recovery_slots.get(msg.seq)
        if rec is None or rec.decided:
            return
        rec.unknowns.add(msg.sender)
        rec.responders.add(msg.sender)
        self.decide_recovery_slot(msg.seq, eff, force=False)

    def recovery_accept(self, msg: Accept, eff: Effects) -> None:
        rec = self.recovery_slots.get(msg.seq_local)
        if rec is None or rec.decided:
            return
        rec.accepts.append(msg)
        rec.responders.add(msg.sender)
        self.decide_recovery_slot(msg.seq_local, eff, force=False)

    def decide_recovery_slot(self, seq: int, eff: Effects, force: bool) -> None:
        rec = self.recovery_slots.get(seq)
        if rec is None or rec.decided:
            return
        if not force and len(rec.responders) < len(self.members):
            if rec.committed is None:
                return
        rec.decided = True
        eff.cancel_timer(("recover", seq))
        if rec.committed is not None:
            commit = rec.committed.commit
            wrapper = Committed(sender=self.node, seq=seq, digest=commit.digest, commit=commit)
            eff.multicast(self.all_involved_nodes(commit.label.clusters()), wrapper)
            self.apply_commit(commit, eff)
        elif rec.accepts:
            self.recover_from_accepts(seq, rec, eff)
        else:
            noop = noop_request(self.cluster, seq, self.promised[0])
            self.repropose_at(seq, noop.digest(), noop, (self.cluster,), eff)
        self.maybe_finish_recovery(eff)

    def recover_from_accepts(self, seq: int, rec: RecoverySlot, eff: Effects) -> None:
        by_digest: dict[bytes, list[Accept]] = {}
        for acc in rec.accepts:
            by_digest.setdefault(acc.digest, []).append(acc)
        digest_, accepts = max(by_digest.items(), key=lambda kv: (len(kv[1]), kv[0]))
        sample = accepts[0]
        request = next((a.request for a in accepts if a.request is not None), None)
        rs = self.by_digest.get(digest_)
        if request is None and rs is not None:
            request = rs.request
        if sample.initiator_cluster != self.cluster:
            # foreign-initiated: re-send our accept; its initiator finishes it
            eff.send(self.current_primary[sample.initiator_cluster],
                     Accept(sender=self.node, initiator_cluster=sample.initiator_cluster,
                            cluster=self.cluster, seq_initiator=sample.seq_initiator,
                            seq_local=seq, digest=digest_))
            return
        if request is None:
            noop = noop_request(self.cluster, seq, self.promised[0])
            self.repropose_at(seq, noop.digest(), noop, (self.cluster,), eff)
            return
        involved = self.involved_of(request)
        self.repropose_at(seq, digest_, request, involved, eff)

    def repropose_at(self, seq: int, d: bytes, request, involved, eff: Effects) -> None:
        """Drive a slot to commitment under our own leadership."""
        rs = self.by_digest.get(d)
        if rs is None:
            rs = RequestState(digest=d, request=request, involved=tuple(involved),
                              initiator_cluster=self.cluster, initiator_node=self.node,
                              initiator_seq=seq, local_seq=None)
            self.by_digest[d] = rs
        rs.initiator_node = self.node
        rs.initiator_cluster = self.cluster
        rs.initiator_seq = seq
        rs.pinned_slot = True
        rs.accept_tally = {}
        rs.super_tally = {}
        rs.super_clusters = set()
        if rs.local_seq is None and self.adopt_slot(seq, d):
            rs.local_seq = seq
        if rs.local_seq == seq:
            rs.accept_tally[(self.cluster, seq)] = {self.node}
        propose = Propose(sender=self.node, initiator_cluster=self.cluster,
                          seq=seq, digest=d, request=request)
        eff.multicast(self.all_involved_nodes(involved), propose)
        eff.set_timer(("req", d), self.timer_for(involved))
        if len(involved) > 1:
            eff.set_timer(("conflict", d), self.config.timer_cross)

    def fill_gaps(self, eff: Effects) -> None:
        if not self.is_primary or self.recovering:
            return
        gap = self.committed_count + 1
        if not self.commit_buffer or gap in self.commit_buffer or gap in self.slots:
            return
        noop = noop_request(self.cluster, gap, self.promised[0])
        self.repropose_at(gap, noop.digest(), noop, (self.cluster,), eff)

    def maybe_finish_recovery(self, eff: Effects) -> None:
        if self.recovering and all(r.decided for r in self.recovery_slots.values()):
            self.finish_recovery(eff)

    def finish_recovery(self, eff: Effects) -> None:
        self.recovering = False
        pending = self.pending_requests
        self.pending_requests = []
        for msg in pending:
            self.dispatch(msg, eff)
