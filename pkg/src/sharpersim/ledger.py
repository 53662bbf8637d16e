"""Per-cluster ledger views and their merge into the global DAG.

Each cluster keeps an append-only chain of the blocks it participates in;
cross-shard blocks appear in every involved cluster's chain under that
cluster's local sequence number. Sequence numbers are the canonical
ordering key; parent digests are derived from them and checked, not
stored as authoritative data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import (
    GENESIS_DIGEST,
    ClientRequest,
    ClusterId,
    ClusterMap,
    Decoder,
    FailureModel,
    MultiSeq,
    cluster_quorum,
    digest,
    enc_bytes,
    enc_int,
    enc_seq,
)
from .messages import Commit, decode_message, encode_message


class LedgerError(ValueError):
    pass


class GapInSequence(LedgerError):
    pass


class BadCertificate(LedgerError):
    pass


class WrongCluster(LedgerError):
    pass


class DivergentBlock(LedgerError):
    """Same label, different block digest: a safety-violation detector."""


class CycleDetected(LedgerError):
    pass


@dataclass(frozen=True)
class CommitCertificate:
    """Proof of a block's validity.

    Crash mode: the single initiator-primary-signed COMMIT. Byzantine
    mode: for each involved cluster, 2f+1 matching COMMIT votes from
    distinct nodes of that cluster.
    """

    votes: tuple[Commit, ...]

    def validate(self, label: MultiSeq, req_digest: bytes, cmap: ClusterMap,
                 model: FailureModel) -> None:
        if not self.votes:
            raise BadCertificate("empty certificate")
        for vote in self.votes:
            if vote.label != label or vote.digest != req_digest:
                raise BadCertificate("vote does not match block label/digest")
        if model is FailureModel.CRASH:
            initiator = label.clusters()[0]
            signer = self.votes[0].sender
            if signer not in cmap.members(initiator):
                # recovery may hand leadership to any member; the signer
                # must at least belong to some involved cluster
                if all(signer not in cmap.members(c) for c in label.clusters()):
                    raise BadCertificate("crash commit signed outside involved clusters")
        else:
            by_cluster: dict[ClusterId, set[int]] = {c: set() for c in label.clusters()}
            for vote in self.votes:
                cid = cmap.cluster_of(vote.sender)
                if cid in by_cluster:
                    by_cluster[cid].add(vote.sender)
            for cid, senders in by_cluster.items():
                need = cluster_quorum(cmap, cid, model)
                if len(senders) < need:
                    raise BadCertificate(
                        f"cluster {cid}: {len(senders)} votes < quorum {need}"
                    )

    def to_wire(self) -> bytes:
        return enc_seq(enc_bytes(encode_message(v)) for v in self.votes)

    @staticmethod
    def from_wire(dec: Decoder) -> "CommitCertificate":
        n = dec.count()
        votes = tuple(decode_message(dec.bytes_()) for _ in range(n))
        return CommitCertificate(votes=votes)  # type: ignore[arg-type]


@dataclass(frozen=True)
class Block:
    """One transaction plus its commit certificate.

    Identity covers the label and the request only, so honest nodes that
    collected different (but individually valid) vote subsets still agree
    on the block.
    """

    label: MultiSeq
    request: ClientRequest
    request_digest: bytes
    certificate: CommitCertificate

    def block_digest(self) -> bytes:
        return digest(self.label.to_wire() + enc_bytes(self.request_digest))

    def to_wire(self) -> bytes:
        return (
            self.label.to_wire()
            + self.request.to_wire()
            + enc_bytes(self.request_digest)
            + self.certificate.to_wire()
        )

    @staticmethod
    def from_wire(dec: Decoder) -> "Block":
        label = MultiSeq.from_wire(dec)
        request = ClientRequest.from_wire(dec)
        rd = dec.bytes_()
        cert = CommitCertificate.from_wire(dec)
        return Block(label, request, rd, cert)


@dataclass
class LedgerView:
    """One cluster's append-only chain, local seq starting at 1."""

    cluster: ClusterId
    cmap: ClusterMap
    model: FailureModel
    genesis: bytes = GENESIS_DIGEST
    blocks: list[Block] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blocks)

    def head_digest(self) -> bytes:
        return self.blocks[-1].block_digest() if self.blocks else self.genesis

    def append_block(self, block: Block) -> None:
        try:
            seq = block.label.seq_for(self.cluster)
        except KeyError:
            raise WrongCluster(
                f"block {block.label.label()} does not involve cluster {self.cluster}"
            ) from None
        if seq != len(self.blocks) + 1:
            raise GapInSequence(
                f"cluster {self.cluster}: got seq {seq}, expected {len(self.blocks) + 1}"
            )
        block.certificate.validate(block.label, block.request_digest, self.cmap, self.model)
        self.blocks.append(block)

    def parent_digest(self, index: int) -> bytes:
        """Digest of the block preceding position index (0-based)."""
        return self.genesis if index == 0 else self.blocks[index - 1].block_digest()

    def to_wire(self) -> bytes:
        return (
            enc_int(self.cluster)
            + enc_bytes(self.genesis)
            + enc_seq(enc_bytes(b.to_wire()) for b in self.blocks)
        )

    @staticmethod
    def from_wire(data: bytes, cmap: ClusterMap, model: FailureModel) -> "LedgerView":
        dec = Decoder(data)
        cluster = dec.int_()
        genesis = dec.bytes_()
        n = dec.count()
        blocks = [Block.from_wire(Decoder(dec.bytes_())) for _ in range(n)]
        view = LedgerView(cluster=cluster, cmap=cmap, model=model, genesis=genesis)
        view.blocks = blocks
        return view


@dataclass
class GlobalDag:
    """Union of per-cluster views: blocks keyed by digest, edges per chain."""

    blocks: dict[bytes, Block]
    # edges[d] = children digests, one hop along each involved chain
    edges: dict[bytes, tuple[bytes, ...]]
    chains: dict[ClusterId, tuple[bytes, ...]]

    def topological_order(self) -> list[bytes]:
        indeg = {d: 0 for d in self.blocks}
        for src, dsts in self.edges.items():
            for dst in dsts:
                indeg[dst] += 1
        ready = sorted(d for d, n in indeg.items() if n == 0)
        order: list[bytes] = []
        while ready:
            d = ready.pop(0)
            order.append(d)
            for child in self.edges.get(d, ()):
                indeg[child] -= 1
                if indeg[child] == 0:
                    # stable insertion keeps the order deterministic
                    lo, hi = 0, len(ready)
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if ready[mid] < child:
                            lo = mid + 1
                        else:
                            hi = mid
                    ready.insert(lo, child)
        if len(order) != len(self.blocks):
            raise CycleDetected("ledger DAG contains a cycle")
        return order

    def parent_digests(self, block_digest: bytes) -> dict[ClusterId, bytes]:
        """Per-cluster parent of a block, GENESIS_DIGEST at chain heads."""
        block = self.blocks[block_digest]
        out: dict[ClusterId, bytes] = {}
        for cid, seq in block.label.entries:
            chain = self.chains[cid]
            out[cid] = GENESIS_DIGEST if seq == 1 else chain[seq - 2]
        return out


def merge_views(views: Iterable[LedgerView]) -> GlobalDag:
    """Merge per-cluster views, deduplicating cross-shard blocks by digest.

    Raises DivergentBlock when two views disagree on the block at a label
    and CycleDetected if the result is not acyclic.
    """
    views = list(views)
    seen_clusters = [v.cluster for v in views]
    if len(set(seen_clusters)) != len(seen_clusters):
        raise LedgerError("views must cover distinct clusters")

    blocks: dict[bytes, Block] = {}
    by_label: dict[tuple, bytes] = {}
    by_request: dict[bytes, bytes] = {}
    chains: dict[ClusterId, tuple[bytes, ...]] = {}
    for view in views:
        chain = []
        for i, block in enumerate(view.blocks):
            d = block.block_digest()
            key = block.label.entries
            if key in by_label and by_label[key] != d:
                raise DivergentBlock(f"label {block.label.label()} maps to two digests")
            prior = by_request.get(block.request_digest)
            if prior is not None and prior != d:
                raise DivergentBlock(
                    f"request {block.request_digest.hex()[:12]} committed under two labels"
                )
            by_label[key] = d
            by_request[block.request_digest] = d
            blocks[d] = block
            chain.append(d)
            if block.label.seq_for(view.cluster) != i + 1:
                raise GapInSequence(f"cluster {view.cluster} chain out of order")
        chains[view.cluster] = tuple(chain)

    edges: dict[bytes, list[bytes]] = {d: [] for d in blocks}
    for cid, chain in chains.items():
        for a, b in zip(chain, chain[1:]):
            edges[a].append(b)
    dag = GlobalDag(
        blocks=blocks,
        edges={d: tuple(dict.fromkeys(children)) for d, children in edges.items()},
        chains=chains,
    )
    dag.topological_order()  # acyclicity check
    return dag


def export_dot(dag: GlobalDag) -> str:
    """Graphviz text with blocks labeled by their multi-part sequence."""
    lines = ["digraph ledger {", '  rankdir=LR;', '  genesis [label="\\u03bb"];']
    order = dag.topological_order()
    names = {d: f"b{i}" for i, d in enumerate(order)}
    for d in order:
        block = dag.blocks[d]
        lines.append(f'  {names[d]} [label="{block.label.label()}"];')
    for cid in sorted(dag.chains):
        chain = dag.chains[cid]
        if chain:
            lines.append(f"  genesis -> {names[chain[0]]};")
        for a, b in zip(chain, chain[1:]):
            lines.append(f"  {names[a]} -> {names[b]};")
    lines.append("}")
    return "\n".join(lines) + "\n"
