import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpersim.core import (
    GENESIS_DIGEST,
    Authenticator,
    ClientRequest,
    ConfigTooSmall,
    Decoder,
    FailureModel,
    MultiSeq,
    Phase,
    SystemConfig,
    Transfer,
    UnknownCluster,
    digest,
    form_clusters,
    mega_primary_of,
    quorum_size,
    sign_keyed,
    verify_keyed,
)


def cfg(n, f, model, groups=None):
    return SystemConfig(node_count=n, max_faults=f, failure_model=model, groups=groups)


class TestFormClusters:
    def test_sixteen_byzantine_f1_gives_four_clusters_of_four(self):
        cmap = form_clusters(cfg(16, 1, FailureModel.BYZANTINE))
        assert cmap.num_clusters == 4
        assert all(len(m) == 4 for _, m in cmap.clusters)

    def test_twelve_crash_f1_gives_four_clusters_of_three(self):
        cmap = form_clusters(cfg(12, 1, FailureModel.CRASH))
        assert cmap.num_clusters == 4
        assert all(len(m) == 3 for _, m in cmap.clusters)

    def test_grouped_formation(self):
        # groups (7, f=2) and (16, f=1): 7//7 = 1 cluster, 16//4 = 4 clusters
        cmap = form_clusters(cfg(23, 3, FailureModel.BYZANTINE,
                                 groups=((7, 2), (16, 1))))
        assert cmap.num_clusters == 5
        assert len(cmap.members(0)) == 7
        assert all(len(cmap.members(c)) == 4 for c in range(1, 5))
        assert cmap.faults(0) == 2
        assert cmap.faults(1) == 1

    def test_single_cluster_degenerate(self):
        cmap = form_clusters(cfg(3, 1, FailureModel.CRASH))
        assert cmap.num_clusters == 1
        assert cmap.members(0) == (0, 1, 2)

    def test_remainder_joins_last_cluster(self):
        cmap = form_clusters(cfg(8, 1, FailureModel.CRASH))
        assert cmap.num_clusters == 2
        assert cmap.members(1) == (3, 4, 5, 6, 7)

    def test_too_small_rejected(self):
        with pytest.raises(ConfigTooSmall):
            cfg(2, 1, FailureModel.CRASH)
        with pytest.raises(ConfigTooSmall):
            cfg(3, 1, FailureModel.BYZANTINE)

    def test_deterministic(self):
        a = form_clusters(cfg(20, 1, FailureModel.BYZANTINE))
        b = form_clusters(cfg(20, 1, FailureModel.BYZANTINE))
        assert a == b

    @given(
        f=st.integers(min_value=0, max_value=3),
        extra=st.integers(min_value=0, max_value=40),
        byz=st.booleans(),
    )
    @settings(max_examples=60)
    def test_partition_property(self, f, extra, byz):
        model = FailureModel.BYZANTINE if byz else FailureModel.CRASH
        unit = (3 if byz else 2) * f + 1
        n = unit + extra
        cmap = form_clusters(cfg(n, f, model))
        nodes = [node for _, members in cmap.clusters for node in members]
        assert sorted(nodes) == list(range(n))
        for cid, members in cmap.clusters[:-1]:
            assert len(members) == unit
        assert len(cmap.clusters[-1][1]) >= unit


class TestQuorums:
    def test_crash_f1_accept_quorum(self):
        assert quorum_size(cfg(12, 1, FailureModel.CRASH), Phase.ACCEPT) == 2

    def test_byzantine_f1_commit_quorum(self):
        assert quorum_size(cfg(16, 1, FailureModel.BYZANTINE), Phase.COMMIT) == 3

    def test_crash_f0(self):
        for phase in Phase:
            assert quorum_size(cfg(4, 0, FailureModel.CRASH), phase) == 1


class TestDigest:
    def test_empty_payload_is_genesis_constant(self):
        assert digest(b"") == GENESIS_DIGEST
        assert GENESIS_DIGEST == hashlib.sha256(b"").digest()

    def test_same_request_serialized_twice(self):
        r = ClientRequest(client=3, timestamp=7, legs=(Transfer(1, 2, 5),))
        assert r.digest() == ClientRequest(3, 7, (Transfer(1, 2, 5),)).digest()

    def test_timestamp_changes_digest(self):
        a = ClientRequest(client=3, timestamp=7, legs=(Transfer(1, 2, 5),))
        b = ClientRequest(client=3, timestamp=8, legs=(Transfer(1, 2, 5),))
        assert a.digest() != b.digest()


class TestMegaPrimary:
    def setup_method(self):
        self.cmap = form_clusters(cfg(16, 1, FailureModel.BYZANTINE))

    def test_min_of_three(self):
        assert mega_primary_of({0, 1, 2}, self.cmap) == self.cmap.initial_primary(0)

    def test_min_of_two(self):
        assert mega_primary_of({1, 2}, self.cmap) == self.cmap.initial_primary(1)

    def test_singleton(self):
        assert mega_primary_of({3}, self.cmap) == self.cmap.initial_primary(3)

    def test_unknown_cluster(self):
        with pytest.raises(UnknownCluster):
            mega_primary_of({9}, self.cmap)


class TestMultiSeq:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            MultiSeq(((2, 5), (1, 7)))
        with pytest.raises(ValueError):
            MultiSeq(())

    def test_roundtrip_preserves_order(self):
        ms = MultiSeq(((0, 12), (1, 22)))
        assert MultiSeq.from_wire(Decoder(ms.to_wire())) == ms

    @given(st.sets(st.tuples(st.integers(0, 50), st.integers(1, 10_000)),
                   min_size=1, max_size=8))
    @settings(max_examples=60)
    def test_roundtrip_property(self, pairs):
        dedup = {}
        for c, s in sorted(pairs):
            dedup.setdefault(c, s)
        ms = MultiSeq(tuple(sorted(dedup.items())))
        back = MultiSeq.from_wire(Decoder(ms.to_wire()))
        assert back == ms
        cids = back.clusters()
        assert all(a < b for a, b in zip(cids, cids[1:]))


class TestAuthenticators:
    def test_keyed_roundtrip(self):
        auth = sign_keyed(4, b"payload")
        assert verify_keyed(auth, 4, b"payload")

    def test_keyed_rejects_wrong_signer(self):
        auth = sign_keyed(4, b"payload")
        assert not verify_keyed(auth, 5, b"payload")
        forged = Authenticator(signer=5, digest=auth.digest, tag=auth.tag)
        assert not verify_keyed(forged, 5, b"payload")

    def test_keyed_rejects_tampered_payload(self):
        auth = sign_keyed(4, b"payload")
        assert not verify_keyed(auth, 4, b"payloae")
