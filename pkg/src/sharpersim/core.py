"""Identity, configuration, cluster formation and cryptographic primitives.

Everything here is an immutable value object shared read-only by the
engines, the ledger and the simulator.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

NodeId = int
ClusterId = int
ShardId = int
ClientId = int

DIGEST_SIZE = 32
GENESIS_DIGEST = hashlib.sha256(b"").digest()

SIM_TAG = b"sim-auth"


class FailureModel(Enum):
    CRASH = "crash"
    BYZANTINE = "byzantine"


class ConflictMode(Enum):
    PLAIN_PROPOSE = "plain"
    SUPER_PROPOSE_FIRST = "super-first"
    MEGA_PRIMARY = "mega-primary"


class Phase(Enum):
    ACCEPT = "accept"
    COMMIT = "commit"
    VIEW_CHANGE = "view-change"


class ConfigError(ValueError):
    pass


class ConfigTooSmall(ConfigError):
    pass


class UnknownCluster(KeyError):
    pass


def cluster_unit(model: FailureModel, f: int) -> int:
    """Minimum cluster size tolerating f faults under the given model."""
    return 2 * f + 1 if model is FailureModel.CRASH else 3 * f + 1


@dataclass(frozen=True)
class SystemConfig:
    node_count: int
    max_faults: int
    failure_model: FailureModel
    groups: Optional[tuple[tuple[int, int], ...]] = None
    checkpoint_period: int = 100
    watermark_window: int = 1000
    timer_intra: int = 10_000_000   # simulated ns; ~10x mean intra-cluster delay
    timer_cross: int = 160_000_000  # three inter-cluster phases at p99, with slack
    conflict_mode: ConflictMode = ConflictMode.PLAIN_PROPOSE

    def __post_init__(self):
        if self.node_count <= 0:
            raise ConfigError("node_count must be positive")
        if self.max_faults < 0:
            raise ConfigError("max_faults must be non-negative")
        if self.checkpoint_period <= 0 or self.watermark_window <= 0:
            raise ConfigError("checkpoint_period and watermark_window must be positive")
        if self.groups is not None:
            if sum(size for size, _ in self.groups) != self.node_count:
                raise ConfigError("group sizes must sum to node_count")
            for size, gf in self.groups:
                if size < cluster_unit(self.failure_model, gf):
                    raise ConfigTooSmall(
                        f"group of {size} cannot tolerate f={gf} under {self.failure_model.value}"
                    )
        elif self.node_count < cluster_unit(self.failure_model, self.max_faults):
            raise ConfigTooSmall(
                f"{self.node_count} nodes cannot tolerate f={self.max_faults} "
                f"under {self.failure_model.value}"
            )

    @property
    def is_byzantine(self) -> bool:
        return self.failure_model is FailureModel.BYZANTINE


@dataclass(frozen=True)
class ClusterMap:
    """Partition of nodes into consensus clusters, one shard per cluster."""

    clusters: tuple[tuple[ClusterId, tuple[NodeId, ...]], ...]
    cluster_faults: tuple[int, ...]

    def __post_init__(self):
        seen: set[NodeId] = set()
        for _, members in self.clusters:
            if seen & set(members):
                raise ConfigError("clusters must be disjoint")
            seen.update(members)

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    def members(self, cluster: ClusterId) -> tuple[NodeId, ...]:
        try:
            return self.clusters[cluster][1]
        except IndexError:
            raise UnknownCluster(cluster) from None

    def faults(self, cluster: ClusterId) -> int:
        try:
            return self.cluster_faults[cluster]
        except IndexError:
            raise UnknownCluster(cluster) from None

    def cluster_of(self, node: NodeId) -> ClusterId:
        for cid, members in self.clusters:
            if node in members:
                return cid
        raise UnknownCluster(f"node {node} not in any cluster")

    def shard_of_cluster(self, cluster: ClusterId) -> ShardId:
        if not 0 <= cluster < len(self.clusters):
            raise UnknownCluster(cluster)
        return cluster

    def all_nodes(self) -> tuple[NodeId, ...]:
        return tuple(n for _, members in self.clusters for n in members)

    def initial_primary(self, cluster: ClusterId) -> NodeId:
        return self.members(cluster)[0]


def form_clusters(config: SystemConfig) -> ClusterMap:
    """Partition [0, N) into contiguous clusters of 2f+1 / 3f+1 nodes.

    Remainder nodes join the last cluster of their group. With groups,
    clustering runs per group independently and the results concatenate.
    """
    groups = config.groups or ((config.node_count, config.max_faults),)
    clusters: list[tuple[ClusterId, tuple[NodeId, ...]]] = []
    faults: list[int] = []
    base = 0
    for size, gf in groups:
        unit = cluster_unit(config.failure_model, gf)
        count = size // unit
        if count == 0:
            raise ConfigTooSmall(f"group of {size} smaller than cluster unit {unit}")
        for i in range(count):
            start = base + i * unit
            end = start + unit if i < count - 1 else base + size
            clusters.append((len(clusters), tuple(range(start, end))))
            faults.append(gf)
        base += size
    return ClusterMap(clusters=tuple(clusters), cluster_faults=tuple(faults))


def quorum_size(config: SystemConfig, phase: Phase) -> int:
    """Votes needed per cluster to advance: f+1 crash, 2f+1 Byzantine."""
    f = config.max_faults
    return f + 1 if config.failure_model is FailureModel.CRASH else 2 * f + 1


def cluster_quorum(cmap: ClusterMap, cluster: ClusterId, model: FailureModel) -> int:
    f = cmap.faults(cluster)
    return f + 1 if model is FailureModel.CRASH else 2 * f + 1


def mega_primary_of(involved: Iterable[ClusterId], cmap: ClusterMap) -> NodeId:
    """Initiator for a cluster set: the primary of the minimum-id cluster."""
    ids = sorted(set(involved))
    if not ids:
        raise ValueError("involved cluster set must be non-empty")
    return cmap.initial_primary(ids[0])


# --- canonical serialization ------------------------------------------------
#
# Length-prefixed little-endian fields in declaration order. This byte
# stream feeds digests and authenticators and is the snapshot wire format.

def enc_int(value: int) -> bytes:
    return value.to_bytes(8, "little", signed=True)


def enc_bytes(value: bytes) -> bytes:
    return len(value).to_bytes(4, "little") + value


def enc_seq(parts: Iterable[bytes]) -> bytes:
    items = list(parts)
    return len(items).to_bytes(4, "little") + b"".join(items)


class Decoder:
    """Cursor over a canonical byte stream."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def int_(self) -> int:
        return int.from_bytes(self.take(8), "little", signed=True)

    def bytes_(self) -> bytes:
        n = int.from_bytes(self.take(4), "little")
        return self.take(n)

    def count(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def done(self) -> bool:
        return self.pos == len(self.data)


def digest(payload: bytes) -> bytes:
    """32-byte collision-resistant digest of a canonical serialization."""
    return hashlib.sha256(payload).digest()


# --- transactions -----------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    """One transfer leg: amount moves from src to dst account."""

    src: int
    dst: int
    amount: int

    def to_wire(self) -> bytes:
        return enc_int(self.src) + enc_int(self.dst) + enc_int(self.amount)

    @staticmethod
    def from_wire(dec: Decoder) -> "Transfer":
        return Transfer(dec.int_(), dec.int_(), dec.int_())


@dataclass(frozen=True)
class ClientRequest:
    client: ClientId
    timestamp: int
    legs: tuple[Transfer, ...]

    def to_wire(self) -> bytes:
        return (
            enc_int(self.client)
            + enc_int(self.timestamp)
            + enc_seq(leg.to_wire() for leg in self.legs)
        )

    @staticmethod
    def from_wire(dec: Decoder) -> "ClientRequest":
        client = dec.int_()
        ts = dec.int_()
        legs = tuple(Transfer.from_wire(dec) for _ in range(dec.count()))
        return ClientRequest(client, ts, legs)

    def digest(self) -> bytes:
        return digest(self.to_wire())

    def accounts(self) -> set[int]:
        out: set[int] = set()
        for leg in self.legs:
            out.add(leg.src)
            out.add(leg.dst)
        return out

    def involved_shards(self, num_shards: int) -> tuple[ShardId, ...]:
        return tuple(sorted({acct % num_shards for acct in self.accounts()}))

    @property
    def is_noop(self) -> bool:
        return not self.legs


def noop_request(cluster: ClusterId, seq: int, round_: int = 0) -> ClientRequest:
    """No-op filler request; unique per slot so digests never collide."""
    return ClientRequest(client=-1, timestamp=(cluster << 32) | (seq << 8) | round_, legs=())


# --- multi-part sequence numbers --------------------------------------------

@dataclass(frozen=True)
class MultiSeq:
    """Per-cluster order labels jointly identifying one block.

    Entries are (cluster id, local sequence number), strictly ascending
    by cluster id; an intra-shard label has exactly one entry.
    """

    entries: tuple[tuple[ClusterId, int], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("MultiSeq must be non-empty")
        cids = [c for c, _ in self.entries]
        if any(a >= b for a, b in zip(cids, cids[1:])):
            raise ValueError("MultiSeq entries must ascend strictly by cluster id")
        if any(seq <= 0 for _, seq in self.entries):
            raise ValueError("sequence numbers are positive")

    @property
    def is_intra(self) -> bool:
        return len(self.entries) == 1

    def clusters(self) -> tuple[ClusterId, ...]:
        return tuple(c for c, _ in self.entries)

    def seq_for(self, cluster: ClusterId) -> int:
        for c, seq in self.entries:
            if c == cluster:
                return seq
        raise UnknownCluster(cluster)

    def label(self) -> str:
        return "t_{%s}" % ",".join(str(seq) for _, seq in self.entries)

    def to_wire(self) -> bytes:
        return enc_seq(enc_int(c) + enc_int(s) for c, s in self.entries)

    @staticmethod
    def from_wire(dec: Decoder) -> "MultiSeq":
        n = dec.count()
        return MultiSeq(tuple((dec.int_(), dec.int_()) for _ in range(n)))


# --- authenticators ----------------------------------------------------------
#
# Default mode is simulated: the simulator owns pairwise channels, so a
# delivered message's claimed sender is its true sender and forgery is
# impossible by construction. The keyed mode exists for wire-codec tests.

@dataclass(frozen=True)
class Authenticator:
    signer: int
    digest: bytes
    tag: bytes = SIM_TAG

    @property
    def simulated(self) -> bool:
        return self.tag == SIM_TAG


def _key_for(signer: int) -> bytes:
    return hashlib.sha256(b"channel-key:" + enc_int(signer)).digest()


def sign_keyed(signer: int, payload: bytes) -> Authenticator:
    d = digest(payload)
    tag = hmac.new(_key_for(signer), d, hashlib.sha256).digest()
    return Authenticator(signer=signer, digest=d, tag=tag)


def verify_keyed(auth: Authenticator, claimed_signer: int, payload: bytes) -> bool:
    if auth.signer != claimed_signer:
        return False
    d = digest(payload)
    if d != auth.digest:
        return False
    expect = hmac.new(_key_for(claimed_signer), d, hashlib.sha256).digest()
    return hmac.compare_digest(expect, auth.tag)


def sign_sim(signer: int, payload_digest: bytes) -> Authenticator:
    return Authenticator(signer=signer, digest=payload_digest)
