"""Replica state machine for the Byzantine failure model.

Intra-shard ordering is PBFT; cross-shard requests run the flattened
protocol with all-to-all ACCEPT and COMMIT rounds: a request is accepted
once 2f+1 matching ACCEPTs arrive from every involved cluster and
committed once 2f+1 matching COMMITs arrive from every involved cluster.
Clusters advance through numbered views (primary = view mod cluster
size); periodic checkpoints bound the message log, and the view-change
routine rebuilds uncommitted slots from 2f+1 VIEW-CHANGE messages.

Uncommitted slot locks are per view: a slot may be re-proposed with a
different digest only under a strictly higher view, never within one.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .core import (
    ClusterMap,
    MultiSeq,
    SystemConfig,
    digest as digest_of,
    enc_int,
    noop_request,
    sign_sim,
)
from .engine_base import Effects, ReplicaBase, RequestState, client_address
from .ledger import Block, CommitCertificate
from .messages import (
    Accept,
    AcceptQuery,
    Checkpoint,
    Commit,
    Message,
    NewView,
    Propose,
    Reply,
    Request,
    SuperAccept,
    ViewChange,
)
from .workload import AccountStore


@dataclass
class ByzSlot:
    digest: bytes
    status: str      # "accepted" | "committed"
    view: int        # own-cluster view under which the entry was taken


class ByzReplica(ReplicaBase):
    def __init__(self, node: int, config: SystemConfig, cmap: ClusterMap,
                 store: AccountStore, seed: int = 0):
        super().__init__(node, config, cmap, store, seed)
        self.my_view = 0
        self.in_view_change = False
        self.vc_target = 0
        self.vc_msgs: dict[int, dict[int, ViewChange]] = {}
        self.proposed_at: dict[tuple[int, int], bytes] = {}   # (view, seq) -> digest
        self.stable_seq = 0
        self.stable_proof: tuple = ()
        self.checkpoint_tally: dict[tuple[int, bytes], set[int]] = {}
        self.query_tally: dict[tuple[int, bytes], set[int]] = {}
        self.pending_requests: list[Request] = []
        self.now = 0

    # --- helpers -------------------------------------------------------------------

    def quorum(self, cluster: int) -> int:
        return 2 * self.f_of(cluster) + 1

    def primary_of(self, cluster: int, view: int) -> int:
        members = self.cmap.members(cluster)
        return members[view % len(members)]

    @property
    def is_primary(self) -> bool:
        return self.primary_of(self.cluster, self.my_view) == self.node

    def timer_for(self, involved) -> int:
        return self.config.timer_cross if len(involved) > 1 else self.config.timer_intra

    def valid_auth(self, msg: Message) -> bool:
        return msg.auth is not None and msg.auth.signer == msg.sender

    def signed(self, msg: Message) -> Message:
        d = getattr(msg, "digest", b"") or b""
        return replace(msg, auth=sign_sim(self.node, d))

    def slot_view(self, seq: int) -> int:
        slot = self.slots.get(seq)
        return slot.view if isinstance(slot, ByzSlot) else -1

    def take_slot(self, seq: int, d: bytes, view: int) -> bool:
        """Per-view slot lock: a different digest displaces an uncommitted
        occupant only under a strictly higher view."""
        slot = self.slots.get(seq)
        if slot is not None:
            if slot.status == "committed":
                return slot.digest == d
            if slot.digest == d:
                slot.view = max(slot.view, view)
                return True
            if isinstance(slot, ByzSlot) and view > slot.view:
                old = self.by_digest.get(slot.digest)
                if old is not None and old.local_seq == seq:
                    old.local_seq = None
                self.slots[seq] = ByzSlot(d, "accepted", view)
                return True
            return False
        self.slots[seq] = ByzSlot(d, "accepted", view)
        if seq >= self.next_seq:
            self.next_seq = seq + 1
        return True

    def assign_slot(self, d: bytes) -> int:
        seq = self.next_seq
        self.next_seq += 1
        self.slots[seq] = ByzSlot(d, "accepted", self.my_view)
        return seq

    def get_rs(self, d: bytes, **defaults) -> RequestState:
        rs = self.by_digest.get(d)
        if rs is None:
            rs = RequestState(
                digest=d,
                request=defaults.get("request"),
                involved=defaults.get("involved", ()),
                initiator_cluster=defaults.get("initiator_cluster", -1),
                initiator_node=defaults.get("initiator_node", -1),
                initiator_seq=defaults.get("initiator_seq", 0),
            )
            rs.initiator_view = defaults.get("initiator_view", 0)
            self.by_digest[d] = rs
        return rs

    def learn_request(self, rs: RequestState, request, eff: Effects) -> None:
        if rs.request is None and request is not None:
            rs.request = request
            rs.involved = self.involved_of(request)
            self.check_committed(rs, eff)

    # --- dispatch ---------------------------------------------------------------------

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
        elif kind == "vc":
            if self.in_view_change and self.vc_target == key[1]:
                self.start_view_change(key[1] + 1, eff)
        elif kind == "relay":
            d = key[1]
            rs = self.by_digest.get(d)
            if rs is None or (not rs.committed and rs.local_seq is None):
                self.start_view_change(self.my_view + 1, eff)

    # --- client requests -----------------------------------------------------------

    def on_request(self, msg: Request, eff: Effects) -> None:
        request = msg.request
        key = (request.client, request.timestamp)
        if key in self.results:
            d, result = self.results[key]
            eff.send(client_address(request.client),
                     Reply(sender=self.node, result=result, digest=d))
            return
        d = request.digest()
        if not self.is_primary or self.in_view_change:
            eff.send(self.primary_of(self.cluster, self.my_view), msg)
            eff.set_timer(("relay", d), 2 * self.config.timer_intra)
            return
        rs = self.by_digest.get(d)
        if rs is not None and rs.local_seq is not None:
            return  # already in flight
        involved = self.involved_of(request)
        if self.has_blocking_conflict(involved):
            self.blocked.append(msg)
            return
        if self.next_seq > self.stable_seq + self.config.watermark_window:
            self.pending_requests.append(msg)  # outside watermarks: wait for a checkpoint
            return
        self.initiate(request, eff)

    def initiate(self, request, eff: Effects) -> None:
        d = request.digest()
        h_i = self.assign_slot(d)
        self.proposed_at[(self.my_view, h_i)] = d
        propose = self.signed(Propose(
            sender=self.node, initiator_cluster=self.cluster,
            seq=h_i, view=self.my_view, digest=d, request=request,
        ))
        involved = self.involved_of(request)
        eff.multicast(self.all_involved_nodes(involved), propose)
        self.accept_propose(propose, h_i, eff)

    # --- propose / accept ------------------------------------------------------------

    def on_propose(self, msg: Propose, eff: Effects) -> None:
        if self.in_view_change or not self.valid_auth(msg):
            return
        if msg.request is None or msg.request.digest() != msg.digest:
            return
        if msg.sender != self.primary_of(msg.initiator_cluster, msg.view):
            return
        self.process_propose(msg, eff)

    def process_propose(self, msg: Propose, eff: Effects) -> None:
        d = msg.digest
        rs = self.by_digest.get(d)
        if msg.initiator_cluster == self.cluster:
            if msg.view != self.my_view:
                return  # never accept other views without a NEW-VIEW
            if not (self.stable_seq < msg.seq
                    <= self.stable_seq + self.config.watermark_window):
                return  # outside watermarks: malicious-primary symptom
            seen = self.proposed_at.get((msg.view, msg.seq))
            if seen is not None and seen != d:
                return  # equivocation: drop; first proposal wins the slot
            self.proposed_at[(msg.view, msg.seq)] = d
        if rs is not None and rs.committed:
            return
        if rs is not None and rs.local_seq is not None:
            changed = (rs.initiator_seq != msg.seq or rs.initiator_view != msg.view)
            rs.initiator_seq = msg.seq
            rs.initiator_view = msg.view
            rs.initiator_node = msg.sender
            self.learn_request(rs, msg.request, eff)
            if changed:
                self.send_accept(rs, eff)  # re-drive under the new view
                self.try_advance(rs, eff)
            return
        involved = self.involved_of(msg.request)
        if self.has_blocking_conflict(involved):
            self.blocked.append(msg)
            return
        if msg.initiator_cluster == self.cluster:
            if not self.take_slot(msg.seq, d, msg.view):
                return
            h_j = msg.seq
        else:
            h_j = self.assign_slot(d)
        self.accept_propose(msg, h_j, eff)

    def accept_propose(self, msg: Propose, h_j: int, eff: Effects) -> None:
        d = msg.digest
        involved = self.involved_of(msg.request)
        rs = self.get_rs(d)
        rs.request = msg.request
        rs.involved = involved
        rs.initiator_cluster = msg.initiator_cluster
        rs.initiator_node = msg.sender
        rs.initiator_seq = msg.seq
        rs.initiator_view = msg.view
        rs.local_seq = h_j
        self.send_accept(rs, eff)
        eff.set_timer(("req", d), self.timer_for(involved))
        if (len(involved) > 1 and msg.initiator_cluster != self.cluster
                and self.primary_of(self.cluster, self.my_view) == self.node):
            eff.set_timer(("conflict", d), self.config.timer_cross)
        self.try_advance(rs, eff)
        self.check_committed(rs, eff)

    def send_accept(self, rs: RequestState, eff: Effects) -> None:
        accept = self.signed(Accept(
            sender=self.node, initiator_cluster=rs.initiator_cluster,
            cluster=self.cluster, seq_initiator=rs.initiator_seq,
            seq_local=rs.local_seq, view_initiator=rs.initiator_view,
            view_local=self.my_view, digest=rs.digest,
        ))
        eff.multicast(self.all_involved_nodes(rs.involved), accept)
        self.tally_accept(accept, rs)

    @staticmethod
    def accept_key(msg) -> tuple:
        return (msg.cluster, msg.seq_initiator, msg.view_initiator,
                msg.seq_local, msg.view_local)

    def tally_accept(self, msg, rs: RequestState) -> None:
        senders = rs.accept_tally.setdefault(self.accept_key(msg), set())
        if msg.sender in senders:
            return
        senders.add(msg.sender)
        rs.logged_accepts.append(msg)

    def on_accept(self, msg: Accept, eff: Effects) -> None:
        if self.in_view_change or not self.valid_auth(msg):
            return
        if msg.sender not in self.cmap.members(msg.cluster):
            return
        rs = self.get_rs(msg.digest, initiator_cluster=msg.initiator_cluster,
                         initiator_seq=msg.seq_initiator,
                         initiator_view=msg.view_initiator)
        self.learn_request(rs, msg.request, eff)
        if msg.seq_local <= 0:
            return  # bare request-body response, nothing to tally
        self.tally_accept(msg, rs)
        self.try_advance(rs, eff)
        self.check_conflict(rs, eff)

    def on_superaccept(self, msg: SuperAccept, eff: Effects) -> None:
        if self.in_view_change or not self.valid_auth(msg):
            return
        if msg.sender not in self.cmap.members(msg.cluster):
            return
        self.process_super(msg, eff)

    def process_super(self, msg: SuperAccept, eff: Effects) -> None:
        rs = self.get_rs(msg.digest, initiator_cluster=msg.initiator_cluster,
                         initiator_seq=msg.seq_initiator,
                         initiator_view=msg.view_initiator)
        self.learn_request(rs, msg.request, eff)
        self.tally_accept(msg, rs)
        from_cluster_primary = (
            msg.cluster == self.cluster
            and msg.sender == self.primary_of(self.cluster, msg.view_local)
            and msg.sender != self.node
        )
        if from_cluster_primary:
            self.echo_super(msg, rs, eff)
        self.try_advance(rs, eff)

    def echo_super(self, msg: SuperAccept, rs: RequestState, eff: Effects) -> None:
        """Algorithm 4 lines 3-5: adopt the primary's slot unless 2f+1
        plain matching accepts from this cluster are already held."""
        if rs.committed or rs.request is None:
            return
        for (cluster, *_rest), senders in rs.accept_tally.items():
            if cluster == self.cluster and len(senders) >= self.quorum(self.cluster):
                return  # quorum already present; ignore the super-accept
        if rs.local_seq != msg.seq_local:
            if self.has_blocking_conflict(rs.involved):
                self.blocked.append(msg)
                return
            if rs.local_seq is not None and msg.view_local <= self.slot_view(rs.local_seq):
                return  # never move an accepted digest within one view
            if not self.take_slot(msg.seq_local, msg.digest, msg.view_local):
                return
            if rs.local_seq is not None:
                self.release_slot(rs.local_seq, msg.digest)
            rs.local_seq = msg.seq_local
        echo = self.signed(SuperAccept(
            sender=self.node, initiator_cluster=msg.initiator_cluster,
            cluster=self.cluster, seq_initiator=msg.seq_initiator,
            seq_local=msg.seq_local, view_initiator=msg.view_initiator,
            view_local=self.my_view, digest=msg.digest,
        ))
        eff.multicast(self.all_involved_nodes(rs.involved), echo)
        self.tally_accept(echo, rs)

    # --- accepted / committed predicates ------------------------------------------------

    def try_advance(self, rs: RequestState, eff: Effects) -> None:
        if rs.request is None or rs.committed or not rs.involved:
            return
        vector = self.matched_vector(rs)
        if vector is None or vector in rs.commit_emitted:
            return
        rs.commit_emitted.add(vector)
        label = MultiSeq(tuple((c, s) for c, s, _ in vector))
        views = tuple(v for _, _, v in vector)
        commit = self.signed(Commit(
            sender=self.node, label=label, views=views, digest=rs.digest,
        ))
        eff.multicast(self.all_involved_nodes(rs.involved), commit)
        eff.cancel_timer(("conflict", rs.digest))
        self.tally_commit(commit, rs, eff)

    def matched_vector(self, rs: RequestState) -> Optional[tuple]:
        """The accepted() predicate: per-cluster (cluster, seq, view) with a
        2f+1 matching quorum from every involved cluster, else None."""
        out = []
        for c in rs.involved:
            found = None
            for key, senders in rs.accept_tally.items():
                cluster, h_i, v_i, h_j, v_j = key
                if cluster != c or h_i != rs.initiator_seq or v_i != rs.initiator_view:
                    continue
                if len(senders) >= self.quorum(c):
                    found = (c, h_j, v_j)
                    break
            if found is None:
                return None
            out.append(found)
        return tuple(sorted(out))

    def tally_commit(self, msg: Commit, rs: RequestState, eff: Effects) -> None:
        cluster = self.cmap.cluster_of(msg.sender)
        if cluster not in msg.label.clusters():
            return
        key = (msg.label.entries, msg.views)
        votes = rs.commit_votes.setdefault(key, {})
        bucket = votes.setdefault(cluster, {})
        if msg.sender in bucket:
            return
        bucket[msg.sender] = msg
        rs.logged_commits.append(msg)
        self.check_committed(rs, eff)

    def check_committed(self, rs: RequestState, eff: Effects) -> None:
        if rs.committed:
            return
        for (entries, views), votes in rs.commit_votes.items():
            clusters = tuple(c for c, _ in entries)
            if self.cluster not in clusters:
                continue
            if not all(len(votes.get(c, {})) >= self.quorum(c) for c in clusters):
                continue
            if rs.request is None:
                if not rs.fetching:
                    rs.fetching = True
                    self.fetch_request(rs.digest, eff)
                return
            cert_votes = []
            for c in clusters:
                cert_votes.extend(sorted(votes[c].values(), key=lambda m: m.sender)
                                  [: self.quorum(c)])
            block = Block(label=MultiSeq(entries), request=rs.request,
                          request_digest=rs.digest,
                          certificate=CommitCertificate(votes=tuple(cert_votes)))
            self.commit_block(block, eff)
            return

    def on_commit(self, msg: Commit, eff: Effects) -> None:
        if self.in_view_change or not self.valid_auth(msg):
            return
        if msg.label is None or self.cluster not in msg.label.clusters():
            return
        rs = self.get_rs(msg.digest, involved=msg.label.clusters(),
                         initiator_cluster=msg.label.clusters()[0],
                         initiator_seq=msg.label.entries[0][1])
        if not rs.involved:
            rs.involved = msg.label.clusters()
        self.tally_commit(msg, rs, eff)

    # --- conflicts (Algorithm 4) -----------------------------------------------------

    def check_conflict(self, rs: RequestState, eff: Effects) -> None:
        """The cluster primary repairs its own cluster's split accepts."""
        if (rs.committed or rs.request is None
                or self.primary_of(self.cluster, self.my_view) != self.node):
            return
        if len(rs.involved) < 2 or rs.initiator_cluster == self.cluster:
            return
        senders: set[int] = set()
        best = 0
        for key, who in rs.accept_tally.items():
            if key[0] == self.cluster:
                senders |= who
                best = max(best, len(who))
        if len(senders) == len(self.members) and best < self.quorum(self.cluster):
            self.send_super(rs, eff)

    def conflict_timeout(self, d: bytes, eff: Effects) -> None:
        rs = self.by_digest.get(d)
        if rs is None or rs.committed or rs.request is None:
            return
        if self.primary_of(self.cluster, self.my_view) != self.node:
            return
        best = 0
        for key, who in rs.accept_tally.items():
            if key[0] == self.cluster:
                best = max(best, len(who))
        if best < self.quorum(self.cluster):
            self.send_super(rs, eff)
        eff.set_timer(("conflict", d), self.config.timer_cross)

    def send_super(self, rs: RequestState, eff: Effects) -> None:
        if rs.local_seq is None:
            rs.local_seq = self.assign_slot(rs.digest)
        sa = self.signed(SuperAccept(
            sender=self.node, initiator_cluster=rs.initiator_cluster,
            cluster=self.cluster, seq_initiator=rs.initiator_seq,
            seq_local=rs.local_seq, view_initiator=rs.initiator_view,
            view_local=self.my_view, digest=rs.digest,
        ))
        eff.multicast(self.others(self.members), replace(sa, request=rs.request))
        eff.multicast([n for n in self.all_involved_nodes(rs.involved)
                       if n not in self.members], sa)
        self.tally_accept(sa, rs)
        self.try_advance(rs, eff)

    # --- reply / checkpoint hooks ------------------------------------------------------

    def maybe_reply(self, block: Block, result: str, eff: Effects) -> None:
        if block.label.clusters()[0] == self.cluster:
            eff.send(client_address(block.request.client),
                     Reply(sender=self.node, result=result, digest=block.request_digest))

    def after_append(self, block: Block, eff: Effects) -> None:
        if self.committed_count % self.config.checkpoint_period == 0:
            self.emit_checkpoint(eff)

    def fill_gaps(self, eff: Effects) -> None:
        if not self.is_primary or self.in_view_change:
            return
        gap = self.committed_count + 1
        if not self.commit_buffer or gap in self.commit_buffer or gap in self.slots:
            return
        if (self.my_view, gap) in self.proposed_at:
            return  # our own proposal is still in flight there
        noop = noop_request(self.cluster, gap, self.my_view)
        d = noop.digest()
        self.proposed_at[(self.my_view, gap)] = d
        propose = self.signed(Propose(
            sender=self.node, initiator_cluster=self.cluster,
            seq=gap, view=self.my_view, digest=d, request=noop,
        ))
        eff.multicast(self.others(self.members), propose)
        if self.take_slot(gap, d, self.my_view):
            self.accept_propose(propose, gap, eff)

    def state_digest(self) -> bytes:
        return digest_of(self.view.head_digest() + self.store.state_digest()
                         + enc_int(self.committed_count))

    def emit_checkpoint(self, eff: Effects) -> None:
        cp = self.signed(Checkpoint(sender=self.node, cluster=self.cluster,
                                    seq=self.committed_count,
                                    state_digest=self.state_digest()))
        eff.multicast(self.others(self.members), cp)
        self.on_checkpoint(cp, eff)

    def on_checkpoint(self, msg: Checkpoint, eff: Effects) -> None:
        if not self.valid_auth(msg) or msg.sender not in self.members:
            return
        key = (msg.seq, msg.state_digest)
        tally = self.checkpoint_tally.setdefault(key, set())
        tally.add(msg.sender)
        if len(tally) >= self.quorum(self.cluster) and msg.seq > self.stable_seq:
            self.stable_seq = msg.seq
            self.stable_proof = (key, tuple(sorted(tally)))
            self.garbage_collect()

    def garbage_collect(self) -> None:
        for rs in self.by_digest.values():
            if rs.committed and rs.local_seq is not None and rs.local_seq <= self.stable_seq:
                rs.logged_accepts = []
                rs.logged_commits = []
        self.checkpoint_tally = {k: v for k, v in self.checkpoint_tally.items()
                                 if k[0] > self.stable_seq}

    # --- timeouts and the view-change routine (§4.4) ----------------------------------

    def request_timeout(self, d: bytes, eff: Effects) -> None:
        rs = self.by_digest.get(d)
        if rs is None or rs.committed:
            return
        if rs.initiator_cluster == self.cluster:
            if rs.initiator_node == self.node and rs.request is not None:
                propose = self.signed(Propose(
                    sender=self.node, initiator_cluster=self.cluster,
                    seq=rs.initiator_seq, view=rs.initiator_view,
                    digest=d, request=rs.request))
                eff.multicast(self.all_involved_nodes(rs.involved), propose)
                eff.set_timer(("req", d), self.timer_for(rs.involved))
                return
            self.start_view_change(self.my_view + 1, eff)
        elif rs.involved:
            query = self.signed(AcceptQuery(
                sender=self.node, cluster=self.cluster,
                seq_initiator=rs.initiator_seq, seq_local=rs.local_seq or 0,
                digest=d,
            ))
            eff.multicast(self.others(self.cmap.members(rs.initiator_cluster)), query)
            eff.set_timer(("req", d), self.timer_for(rs.involved))

    def on_acceptquery(self, msg: AcceptQuery, eff: Effects) -> None:
        if msg.digest is None or not self.valid_auth(msg):
            return
        if msg.sender not in self.cmap.members(msg.cluster):
            return
        if msg.cluster == self.cluster:
            # missing-data fetch from a peer: answer with the request body
            rs = self.by_digest.get(msg.digest)
            if rs is not None and rs.request is not None:
                eff.send(msg.sender, self.signed(Accept(
                    sender=self.node, initiator_cluster=rs.initiator_cluster,
                    cluster=self.cluster, seq_initiator=rs.initiator_seq,
                    seq_local=0, view_initiator=rs.initiator_view,
                    view_local=self.my_view, digest=msg.digest,
                    request=rs.request)))
            return
        rs = self.by_digest.get(msg.digest)
        if rs is not None and rs.committed:
            return
        tally = self.query_tally.setdefault((msg.cluster, msg.digest), set())
        tally.add(msg.sender)
        if len(tally) >= self.quorum(msg.cluster):
            self.start_view_change(self.my_view + 1, eff)

    def start_view_change(self, target: int, eff: Effects) -> None:
        if target <= self.my_view or (self.in_view_change and self.vc_target >= target):
            return
        self.in_view_change = True
        self.vc_target = target
        accepts: list = []
        commits: list = []
        for rs in self.by_digest.values():
            if rs.local_seq is None or rs.local_seq <= self.stable_seq:
                continue
            accepts.extend(rs.logged_accepts)
            commits.extend(rs.logged_commits)
        vc = self.signed(ViewChange(
            sender=self.node, cluster=self.cluster, new_view=target,
            checkpoint_seq=self.stable_seq,
            checkpoint_proof=self.stable_proof_msgs(),
            accepts=tuple(accepts), commits=tuple(commits),
        ))
        eff.multicast(self.others(self.members), vc)
        self.vc_msgs.setdefault(target, {})[self.node] = vc
        backoff = self.config.timer_intra * (2 ** min(max(target - self.my_view, 1), 6))
        eff.set_timer(("vc", target), backoff)
        self.maybe_new_view(target, eff)

    def stable_proof_msgs(self) -> tuple:
        if not self.stable_proof:
            return ()
        (seq, state_digest), senders = self.stable_proof
        return tuple(Checkpoint(sender=s, cluster=self.cluster, seq=seq,
                                state_digest=state_digest)
                     for s in senders)

    def on_viewchange(self, msg: ViewChange, eff: Effects) -> None:
        if not self.valid_auth(msg) or msg.sender not in self.members:
            return
        if msg.new_view <= self.my_view:
            return
        bucket = self.vc_msgs.setdefault(msg.new_view, {})
        bucket[msg.sender] = msg
        if not self.in_view_change or self.vc_target < msg.new_view:
            if len(bucket) > self.f_of(self.cluster):
                self.start_view_change(msg.new_view, eff)  # join the majority
                return
        self.maybe_new_view(msg.new_view, eff)

    def maybe_new_view(self, target: int, eff: Effects) -> None:
        if not self.in_view_change or self.vc_target != target:
            return
        if self.primary_of(self.cluster, target) != self.node:
            return
        bucket = self.vc_msgs.get(target, {})
        if len(bucket) < self.quorum(self.cluster):
            return
        sigma = tuple(bucket[s] for s in sorted(bucket))[: self.quorum(self.cluster)]
        proposes, commit_sets = self.build_new_view(sigma, target)
        nv = self.signed(NewView(sender=self.node, cluster=self.cluster,
                                 new_view=target, proof=sigma,
                                 proposes=proposes, commit_sets=commit_sets))
        eff.multicast(self.others(self.members), nv)
        self.install_new_view(nv, eff)

    # --- NEW-VIEW construction (deterministic, recomputed by every backup) -------------

    def build_new_view(self, sigma: tuple, target: int):
        new_primary = self.primary_of(self.cluster, target)
        low = 0
        for vc in sigma:
            if vc.checkpoint_seq > low and self.checkpoint_proof_ok(vc):
                low = vc.checkpoint_seq
        high = low
        all_accepts: list = []
        all_commits: list = []
        for vc in sigma:
            all_accepts.extend(vc.accepts)
            all_commits.extend(vc.commits)
        for acc in all_accepts:
            if acc.cluster == self.cluster:
                high = max(high, acc.seq_local)
        for com in all_commits:
            if self.cluster in com.label.clusters():
                high = max(high, com.label.seq_for(self.cluster))
        proposes: list = []
        commit_sets: list = []
        for n in range(low + 1, high + 1):
            entry = self.rebuild_slot(n, all_accepts, all_commits, target, new_primary)
            if isinstance(entry, tuple):
                commit_sets.append(entry)
            elif entry is not None:
                proposes.append(entry)
        return tuple(proposes), tuple(commit_sets)

    def checkpoint_proof_ok(self, vc: ViewChange) -> bool:
        senders = set()
        for cp in vc.checkpoint_proof:
            if cp.seq == vc.checkpoint_seq and cp.sender in self.members:
                senders.add(cp.sender)
        return len(senders) >= self.quorum(self.cluster)

    def rebuild_slot(self, n: int, accepts: list, commits: list, target: int,
                     new_primary: int):
        # bullet 1: a full commit certificate somewhere in Sigma -> C'
        groups: dict[tuple, dict[int, dict]] = {}
        for com in commits:
            if self.cluster not in com.label.clusters():
                continue
            if com.label.seq_for(self.cluster) != n:
                continue
            key = (com.label.entries, com.views, com.digest)
            per = groups.setdefault(key, {})
            per.setdefault(self.cmap.cluster_of(com.sender), {})[com.sender] = com
        for key in sorted(groups, key=repr):
            per = groups[key]
            clusters = tuple(c for c, _ in key[0])
            if all(len(per.get(c, {})) >= self.quorum(c) for c in clusters):
                votes = []
                for c in clusters:
                    votes.extend(sorted(per[c].values(), key=lambda m: m.sender)
                                 [: self.quorum(c)])
                return tuple(votes)
        # bullet 2: 2f+1 matching accepts/super-accepts from this cluster -> re-PROPOSE
        acc_groups: dict[tuple, dict[int, object]] = {}
        for acc in accepts:
            if acc.cluster == self.cluster and acc.seq_local == n:
                key = (acc.digest, acc.initiator_cluster, acc.seq_initiator,
                       acc.view_initiator)
                acc_groups.setdefault(key, {})[acc.sender] = acc
        for key in sorted(acc_groups, key=repr):
            if len(acc_groups[key]) >= self.quorum(self.cluster):
                d, init_cluster, h_i, v_i = key
                request = next((getattr(a, "request", None)
                                for a in acc_groups[key].values()
                                if getattr(a, "request", None) is not None), None)
                return Propose(sender=new_primary, initiator_cluster=self.cluster,
                               seq=n, view=target, digest=d, request=request)
        # bullet 3: non-matching accepts for a cross-shard request from another
        # cluster: the new primary assigns the slot via SUPER-ACCEPT
        candidates: dict[tuple, int] = {}
        requests: dict[tuple, object] = {}
        for acc in accepts:
            if acc.cluster == self.cluster and acc.seq_local == n:
                key = (acc.digest, acc.initiator_cluster, acc.seq_initiator,
                       acc.view_initiator)
                candidates[key] = candidates.get(key, 0) + 1
                req = getattr(acc, "request", None)
                if req is not None:
                    requests[key] = req
        cross = [(count, key) for key, count in candidates.items()
                 if key[1] != self.cluster]
        if cross:
            cross.sort(key=lambda kv: (-kv[0], repr(kv[1])))
            d, init_cluster, h_i, v_i = cross[0][1]
            return SuperAccept(sender=new_primary, initiator_cluster=init_cluster,
                               cluster=self.cluster, seq_initiator=h_i, seq_local=n,
                               view_initiator=v_i, view_local=target, digest=d,
                               request=requests.get(cross[0][1]))
        # bullet 4: nothing known: a no-op propose fills the slot
        noop = noop_request(self.cluster, n, target)
        return Propose(sender=new_primary, initiator_cluster=self.cluster,
                       seq=n, view=target, digest=noop.digest(), request=noop)

    def on_newview(self, msg: NewView, eff: Effects) -> None:
        if not self.valid_auth(msg) or msg.new_view <= self.my_view:
            return
        if msg.sender != self.primary_of(self.cluster, msg.new_view):
            return
        senders = {vc.sender for vc in msg.proof
                   if vc.new_view == msg.new_view and vc.sender in self.members}
        if len(senders) < self.quorum(self.cluster):
            return
        expect_p, expect_c = self.build_new_view(msg.proof, msg.new_view)
        if msg.proposes != expect_p or not self.same_commit_sets(msg.commit_sets, expect_c):
            self.start_view_change(msg.new_view + 1, eff)
            return
        self.install_new_view(msg, eff)

    @staticmethod
    def same_commit_sets(got, want) -> bool:
        strip = lambda vs: tuple((v.sender, v.label.entries, v.views, v.digest)
                                 for v in vs)
        return tuple(strip(vs) for vs in got) == tuple(strip(vs) for vs in want)

    def install_new_view(self, msg: NewView, eff: Effects) -> None:
        self.my_view = msg.new_view
        self.in_view_change = False
        self.vc_target = msg.new_view
        self.vc_msgs = {v: b for v, b in self.vc_msgs.items() if v > msg.new_view}
        self.query_tally = {}
        eff.cancel_timer(("vc", msg.new_view))
        is_new_primary = msg.sender == self.node
        for votes in msg.commit_sets:
            for vote in votes:
                rs = self.get_rs(vote.digest, involved=vote.label.clusters(),
                                 initiator_cluster=vote.label.clusters()[0],
                                 initiator_seq=vote.label.entries[0][1])
                self.tally_commit(vote, rs, eff)
        for entry in msg.proposes:
            if isinstance(entry, Propose):
                self.install_propose(entry, is_new_primary, eff)
            else:
                self.install_super(entry, is_new_primary, eff)
        pending = self.pending_requests
        self.pending_requests = []
        for req in pending:
            self.dispatch(req, eff)

    def install_propose(self, entry: Propose, is_new_primary: bool, eff: Effects) -> None:
        self.proposed_at[(self.my_view, entry.seq)] = entry.digest
        rs = self.get_rs(entry.digest, initiator_cluster=self.cluster,
                         initiator_seq=entry.seq, initiator_view=entry.view)
        request = entry.request if entry.request is not None else rs.request
        if request is None:
            self.fetch_request(entry.digest, eff)
            return
        signed_entry = self.signed(replace(entry, request=request))
        if is_new_primary:
            involved = self.involved_of(request)
            eff.multicast(self.all_involved_nodes(involved), signed_entry)
        if self.take_slot(entry.seq, entry.digest, entry.view):
            self.accept_propose(signed_entry if is_new_primary
                                else replace(entry, request=request), entry.seq, eff)

    def install_super(self, entry: SuperAccept, is_new_primary: bool, eff: Effects) -> None:
        rs = self.get_rs(entry.digest, initiator_cluster=entry.initiator_cluster,
                         initiator_seq=entry.seq_initiator,
                         initiator_view=entry.view_initiator)
        self.learn_request(rs, entry.request, eff)
        if is_new_primary:
            if rs.request is None:
                self.fetch_request(entry.digest, eff)
                return
            if self.take_slot(entry.seq_local, entry.digest, self.my_view):
                if rs.local_seq is not None and rs.local_seq != entry.seq_local:
                    self.release_slot(rs.local_seq, entry.digest)
                rs.local_seq = entry.seq_local
                rs.initiator_seq = entry.seq_initiator
                rs.initiator_view = entry.view_initiator
                self.send_super(rs, eff)
        else:
            self.process_super(entry, eff)

    def fetch_request(self, d: bytes, eff: Effects) -> None:
        """Missing-data fetch: ask cluster peers for the request body."""
        query = self.signed(AcceptQuery(sender=self.node, cluster=self.cluster,
                                        seq_initiator=0, digest=d))
        eff.multicast(self.others(self.members), query)
