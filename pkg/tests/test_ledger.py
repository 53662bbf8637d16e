import pytest

from sharpersim.core import (
    GENESIS_DIGEST,
    ClientRequest,
    FailureModel,
    MultiSeq,
    SystemConfig,
    Transfer,
    form_clusters,
    sign_sim,
)
from sharpersim.ledger import (
    Block,
    CommitCertificate,
    DivergentBlock,
    GapInSequence,
    LedgerView,
    WrongCluster,
    export_dot,
    merge_views,
)
from sharpersim.messages import Commit

CFG = SystemConfig(node_count=12, max_faults=1, failure_model=FailureModel.CRASH)
CMAP = form_clusters(CFG)


def make_request(n, shards=(0,)):
    # account k*4+s lives in shard s under the 4-cluster map
    legs = tuple(Transfer(src=n * 8 * 4 + s, dst=(n * 8 + 4) * 4 + s, amount=1)
                 for s in shards)
    return ClientRequest(client=0, timestamp=n, legs=legs)


def make_block(label_entries, n=None):
    label = MultiSeq(tuple(label_entries))
    req = make_request(n if n is not None else label_entries[0][1],
                       shards=label.clusters())
    d = req.digest()
    initiator = label.clusters()[0]
    vote = Commit(sender=CMAP.initial_primary(initiator), auth=sign_sim(0, d),
                  label=label, digest=d, request=req)
    return Block(label=label, request=req, request_digest=d,
                 certificate=CommitCertificate(votes=(vote,)))


def fresh_view(cluster=0):
    return LedgerView(cluster=cluster, cmap=CMAP, model=FailureModel.CRASH)


class TestAppend:
    def test_genesis_successor(self):
        view = fresh_view()
        view.append_block(make_block([(0, 1)]))
        assert len(view) == 1
        assert view.parent_digest(0) == GENESIS_DIGEST

    def test_cross_block_lands_at_local_position(self):
        view = fresh_view(0)
        for i in range(1, 12):
            view.append_block(make_block([(0, i)]))
        cross = make_block([(0, 12), (1, 22)])
        view.append_block(cross)
        assert len(view) == 12
        assert view.blocks[11].label.seq_for(0) == 12

    def test_gap_rejected(self):
        view = fresh_view()
        for i in range(1, 4):
            view.append_block(make_block([(0, i)]))
        with pytest.raises(GapInSequence):
            view.append_block(make_block([(0, 5)]))

    def test_wrong_cluster_rejected(self):
        view = fresh_view(2)
        with pytest.raises(WrongCluster):
            view.append_block(make_block([(0, 1)]))

    def test_snapshot_roundtrip(self):
        view = fresh_view()
        view.append_block(make_block([(0, 1)]))
        view.append_block(make_block([(0, 2), (1, 1)]))
        back = LedgerView.from_wire(view.to_wire(), CMAP, FailureModel.CRASH)
        assert [b.block_digest() for b in back.blocks] == \
            [b.block_digest() for b in view.blocks]


def build_fig2_views():
    """Four views with two cross-shard blocks: one over (p1, p2) and one
    over all four clusters, mirroring the paper's running example shape."""
    views = [fresh_view(c) for c in range(4)]
    cross_12 = make_block([(0, 2), (1, 2)], n=100)
    cross_all = make_block([(0, 5), (1, 5), (2, 3), (3, 3)], n=101)
    plan = {
        0: [make_block([(0, 1)]), cross_12, make_block([(0, 3)], n=3),
            make_block([(0, 4)], n=4), cross_all, make_block([(0, 6)], n=6)],
        1: [make_block([(1, 1)], n=11), cross_12, make_block([(1, 3)], n=13),
            make_block([(1, 4)], n=14), cross_all],
        2: [make_block([(2, 1)], n=21), make_block([(2, 2)], n=22), cross_all],
        3: [make_block([(3, 1)], n=31), make_block([(3, 2)], n=32), cross_all],
    }
    for c, blocks in plan.items():
        for b in blocks:
            views[c].append_block(b)
    return views, cross_12, cross_all


class TestMerge:
    def test_four_views_merge_into_one_dag(self):
        views, cross_12, cross_all = build_fig2_views()
        dag = merge_views(views)
        # 6 + 5 + 3 + 3 appends, two blocks shared
        assert len(dag.blocks) == 6 + 5 + 3 + 3 - 1 - 3
        big = cross_all.block_digest()
        parents = dag.parent_digests(big)
        assert len(parents) == 4
        children = dag.edges[big]
        assert len(children) == 1  # only p1 has a block after it
        order = dag.topological_order()
        assert order.index(cross_12.block_digest()) < order.index(big)

    def test_single_view_is_a_chain(self):
        view = fresh_view()
        for i in range(1, 5):
            view.append_block(make_block([(0, i)]))
        dag = merge_views([view])
        assert len(dag.blocks) == 4
        assert all(len(v) <= 1 for v in dag.edges.values())

    def test_divergent_block_detected(self):
        v0, v1 = fresh_view(0), fresh_view(1)
        good = make_block([(0, 1), (1, 1)], n=50)
        forged = make_block([(0, 1), (1, 1)], n=51)  # same label, other request
        v0.append_block(good)
        v1.append_block(forged)
        with pytest.raises(DivergentBlock):
            merge_views([v0, v1])

    def test_double_commit_detected(self):
        v0, v1 = fresh_view(0), fresh_view(1)
        req = make_request(60, shards=(0, 1))
        d = req.digest()

        def block_at(entries):
            label = MultiSeq(entries)
            vote = Commit(sender=0, auth=sign_sim(0, d), label=label,
                          digest=d, request=req)
            return Block(label=label, request=req, request_digest=d,
                         certificate=CommitCertificate(votes=(vote,)))

        v0.append_block(block_at(((0, 1), (1, 1))))
        v1.append_block(block_at(((0, 2), (1, 1))))  # same request, new label
        with pytest.raises(DivergentBlock):
            merge_views([v0, v1])


class TestDot:
    def test_empty_dag_has_only_genesis(self):
        text = export_dot(merge_views([fresh_view()]))
        assert "genesis" in text
        assert "->" not in text

    def test_fig2_reconstruction_cross_edges(self):
        views, cross_12, _ = build_fig2_views()
        text = export_dot(merge_views(views))
        # the two-cluster cross block is entered from both p1 and p2 chains
        name = [ln for ln in text.splitlines() if "t_{2,2}" in ln][0].split()[0].strip()
        assert sum(1 for ln in text.splitlines() if ln.endswith(f"-> {name};")) == 2

    def test_deterministic_output(self):
        views, _, _ = build_fig2_views()
        assert export_dot(merge_views(views)) == export_dot(merge_views(views))
