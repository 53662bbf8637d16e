import pytest

from sharpersim.core import (
    ClientRequest,
    FailureModel,
    MultiSeq,
    SystemConfig,
    Transfer,
    form_clusters,
    sign_sim,
)
from sharpersim.ledger import Block, CommitCertificate, LedgerView, merge_views
from sharpersim.messages import Commit
from sharpersim.workload import (
    APPLIED,
    INSUFFICIENT_FUNDS,
    AccountStore,
    UnknownAccount,
    WorkloadSpec,
    execute,
    generate,
    genesis_store,
    serial_oracle,
)

CFG = SystemConfig(node_count=12, max_faults=1, failure_model=FailureModel.CRASH)
CMAP = form_clusters(CFG)


class TestExecute:
    def test_simple_transfer(self):
        store = AccountStore(1, {0: 100, 1: 0})
        assert execute(store, ClientRequest(0, 1, (Transfer(0, 1, 30),))) == APPLIED
        assert store.balances == {0: 70, 1: 30}

    def test_insufficient_funds_leaves_state_unchanged(self):
        store = AccountStore(1, {0: 10, 1: 5})
        result = execute(store, ClientRequest(0, 1, (Transfer(0, 1, 30),)))
        assert result == INSUFFICIENT_FUNDS
        assert store.balances == {0: 10, 1: 5}

    def test_multi_leg_is_atomic(self):
        store = AccountStore(1, {0: 10, 1: 0, 2: 40, 3: 0})
        req = ClientRequest(0, 1, (Transfer(0, 1, 5), Transfer(2, 3, 50)))
        assert execute(store, req) == INSUFFICIENT_FUNDS
        assert store.balances == {0: 10, 1: 0, 2: 40, 3: 0}

    def test_combined_debits_checked_together(self):
        store = AccountStore(1, {0: 10, 1: 0, 2: 0})
        req = ClientRequest(0, 1, (Transfer(0, 1, 6), Transfer(0, 2, 6)))
        assert execute(store, req) == INSUFFICIENT_FUNDS

    def test_partial_store_applies_own_legs_only(self):
        # shard 0 of 2: accounts 0 and 2
        store = AccountStore(2, {0: 100, 2: 0})
        req = ClientRequest(0, 1, (Transfer(0, 1, 30),))
        assert execute(store, req) == APPLIED
        assert store.balances == {0: 70, 2: 0}

    def test_noop_applies(self):
        store = AccountStore(1, {0: 1})
        assert execute(store, ClientRequest(-1, 5, ())) == APPLIED
        assert store.balances == {0: 1}


class TestGenerate:
    def test_all_intra(self):
        spec = WorkloadSpec(txn_count=100, cross_pct=0, seed=1)
        reqs = generate(spec, CMAP)
        assert len(reqs) == 100
        assert all(len(r.involved_shards(4)) == 1 for r in reqs)
        # load spreads over all four shards
        counts = [0] * 4
        for r in reqs:
            counts[r.involved_shards(4)[0]] += 1
        assert all(c > 10 for c in counts)

    def test_all_cross_two_shards(self):
        spec = WorkloadSpec(txn_count=80, cross_pct=100, seed=2)
        reqs = generate(spec, CMAP)
        assert all(len(r.involved_shards(4)) == 2 for r in reqs)

    def test_ten_percent_mix(self):
        spec = WorkloadSpec(txn_count=1000, cross_pct=10, seed=3)
        reqs = generate(spec, CMAP)
        cross = sum(1 for r in reqs if len(r.involved_shards(4)) > 1)
        assert cross == 100

    def test_deterministic_under_seed(self):
        spec = WorkloadSpec(txn_count=50, cross_pct=20, seed=9)
        assert generate(spec, CMAP) == generate(spec, CMAP)
        other = WorkloadSpec(txn_count=50, cross_pct=20, seed=10)
        assert generate(other, CMAP) != generate(spec, CMAP)

    def test_timestamps_strictly_increase_per_client(self):
        spec = WorkloadSpec(txn_count=200, cross_pct=30, client_count=5, seed=4)
        seen: dict[int, int] = {}
        for r in generate(spec, CMAP):
            assert r.timestamp > seen.get(r.client, 0)
            seen[r.client] = r.timestamp

    def test_budget_prevents_overdraft_in_any_order(self):
        spec = WorkloadSpec(txn_count=500, cross_pct=50, seed=5)
        reqs = generate(spec, CMAP)
        outgoing: dict[int, int] = {}
        for r in reqs:
            for leg in r.legs:
                outgoing[leg.src] = outgoing.get(leg.src, 0) + leg.amount
        assert all(total <= 10_000 for total in outgoing.values())


def commit_block(req, entries):
    label = MultiSeq(tuple(entries))
    d = req.digest()
    signer = 3 * label.clusters()[0]  # initial primary under 3-node clusters
    vote = Commit(sender=signer, auth=sign_sim(signer, d), label=label,
                  digest=d, request=req)
    return Block(label=label, request=req, request_digest=d,
                 certificate=CommitCertificate(votes=(vote,)))


class TestSerialOracle:
    def test_empty_dag_preserves_genesis(self):
        store = genesis_store(4, 10)
        views = [LedgerView(cluster=c, cmap=CMAP, model=FailureModel.CRASH)
                 for c in range(4)]
        out = serial_oracle(store, merge_views(views))
        assert out.balances == store.balances

    def test_replay_matches_direct_execution(self):
        store = genesis_store(2, 4)
        cfg2 = SystemConfig(node_count=6, max_faults=1, failure_model=FailureModel.CRASH)
        cmap2 = form_clusters(cfg2)
        v0 = LedgerView(cluster=0, cmap=cmap2, model=FailureModel.CRASH)
        v1 = LedgerView(cluster=1, cmap=cmap2, model=FailureModel.CRASH)
        r1 = ClientRequest(0, 1, (Transfer(0, 2, 10),))          # intra shard 0
        r2 = ClientRequest(0, 2, (Transfer(1, 3, 7),))           # intra shard 1
        r3 = ClientRequest(1, 1, (Transfer(2, 5, 4),))           # cross 0 -> 1
        v0.append_block(commit_block(r1, ((0, 1),)))
        v1.append_block(commit_block(r2, ((1, 1),)))
        cross = commit_block(r3, ((0, 2), (1, 2)))
        v0.append_block(cross)
        v1.append_block(cross)
        out = serial_oracle(store, merge_views([v0, v1]))
        expect = store.copy()
        for r in (r1, r2, r3):
            execute(expect, r)
        assert out.balances == expect.balances
        assert out.total() == store.total()

    def test_topological_order_invariance(self):
        # two disjoint chains commute; replaying in either order agrees
        store = genesis_store(2, 4)
        cfg2 = SystemConfig(node_count=6, max_faults=1, failure_model=FailureModel.CRASH)
        cmap2 = form_clusters(cfg2)
        v0 = LedgerView(cluster=0, cmap=cmap2, model=FailureModel.CRASH)
        v1 = LedgerView(cluster=1, cmap=cmap2, model=FailureModel.CRASH)
        v0.append_block(commit_block(ClientRequest(0, 1, (Transfer(0, 2, 10),)), ((0, 1),)))
        v1.append_block(commit_block(ClientRequest(0, 2, (Transfer(1, 3, 7),)), ((1, 1),)))
        dag = merge_views([v0, v1])
        a = serial_oracle(store, dag)
        dag.chains = dict(reversed(list(dag.chains.items())))
        b = serial_oracle(store, dag)
        assert a.balances == b.balances

    def test_unknown_account(self):
        store = AccountStore(1, {0: 5})
        with pytest.raises(UnknownAccount):
            store.balance(99)
