"""Account-based application state, workload generation and the serial oracle.

Accounts map to shards statically (account id mod shard count). The
generator budgets each account's total outgoing amount against its genesis
balance, so generated workloads can never overdraw regardless of commit
order; the overdraft path itself is covered by direct unit tests.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable

from .core import ClientRequest, ClusterMap, Transfer, enc_int, enc_seq, digest
from .ledger import GlobalDag

APPLIED = "applied"
INSUFFICIENT_FUNDS = "insufficient-funds"


class UnknownAccount(KeyError):
    pass


@dataclass
class AccountStore:
    """Balances for one or more shards; nodes hold only their own shard."""

    num_shards: int
    balances: dict[int, int] = field(default_factory=dict)

    def shard_of(self, account: int) -> int:
        return account % self.num_shards

    def balance(self, account: int) -> int:
        try:
            return self.balances[account]
        except KeyError:
            raise UnknownAccount(account) from None

    def total(self) -> int:
        return sum(self.balances.values())

    def restrict(self, shard: int) -> "AccountStore":
        return AccountStore(
            self.num_shards,
            {a: b for a, b in self.balances.items() if a % self.num_shards == shard},
        )

    def copy(self) -> "AccountStore":
        return AccountStore(self.num_shards, dict(self.balances))

    def state_digest(self) -> bytes:
        items = sorted(self.balances.items())
        return digest(enc_seq(enc_int(a) + enc_int(b) for a, b in items))


def genesis_store(num_shards: int, accounts_per_shard: int, balance: int = 10_000) -> AccountStore:
    store = AccountStore(num_shards)
    for acct in range(num_shards * accounts_per_shard):
        store.balances[acct] = balance
    return store


def execute(store: AccountStore, request: ClientRequest) -> str:
    """Apply a committed transfer to the slice of state this store holds.

    The whole transfer applies atomically or not at all. Debit legs whose
    accounts live outside the store are assumed valid (see module note);
    legs touching absent accounts are skipped.
    """
    if request.is_noop:
        return APPLIED
    pending: dict[int, int] = {}
    for leg in request.legs:
        if leg.src in store.balances:
            pending[leg.src] = pending.get(leg.src, 0) - leg.amount
    for acct, delta in pending.items():
        if store.balances[acct] + delta < 0:
            return INSUFFICIENT_FUNDS
    for leg in request.legs:
        if leg.dst in store.balances:
            pending[leg.dst] = pending.get(leg.dst, 0) + leg.amount
    for acct, delta in pending.items():
        store.balances[acct] += delta
    return APPLIED


def serial_oracle(genesis: AccountStore, dag: GlobalDag) -> AccountStore:
    """Replay the whole DAG single-threaded in one topological order.

    execute() is deterministic and per-shard chains fix each account's
    history, so any valid topological order yields the same balances.
    """
    store = genesis.copy()
    for d in dag.topological_order():
        execute(store, dag.blocks[d].request)
    return store


@dataclass(frozen=True)
class WorkloadSpec:
    txn_count: int
    cross_pct: float = 0.0
    shards_per_cross: int = 2
    accounts_per_shard: int = 100
    amount_low: int = 1
    amount_high: int = 10
    client_count: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.cross_pct <= 100:
            raise ValueError("cross_pct must be in [0, 100]")
        if self.shards_per_cross < 2:
            raise ValueError("shards_per_cross must be at least 2")


def generate(spec: WorkloadSpec, cmap: ClusterMap) -> list[ClientRequest]:
    """Deterministic request stream matching the cross-shard percentage.

    Cross-shard requests touch accounts in exactly shards_per_cross
    distinct shards; requests go round-robin to clients and load spreads
    evenly over shards.
    """
    rng = random.Random(f"workload:{spec.seed}")
    num_shards = cmap.num_clusters
    n_cross = round(spec.txn_count * spec.cross_pct / 100.0)
    kinds = [True] * n_cross + [False] * (spec.txn_count - n_cross)
    rng.shuffle(kinds)

    budget: dict[int, int] = {}
    genesis_balance = 10_000

    def account_in(shard: int) -> int:
        idx = rng.randrange(spec.accounts_per_shard)
        return idx * num_shards + shard

    def draw_src(shard: int, amount: int) -> int:
        for _ in range(32):
            acct = account_in(shard)
            if budget.get(acct, 0) + amount <= genesis_balance:
                budget[acct] = budget.get(acct, 0) + amount
                return acct
        raise RuntimeError("account budgets exhausted; lower txn_count or amounts")

    requests: list[ClientRequest] = []
    timestamps = [0] * spec.client_count
    for i, is_cross in enumerate(kinds):
        client = i % spec.client_count
        timestamps[client] += 1
        if num_shards < 2:
            is_cross = False
        if is_cross:
            shards = rng.sample(range(num_shards), k=min(spec.shards_per_cross, num_shards))
            shards.sort()
            legs = []
            src_shard = shards[0]
            for dst_shard in shards[1:]:
                amount = rng.randint(spec.amount_low, spec.amount_high)
                src = draw_src(src_shard, amount)
                legs.append(Transfer(src=src, dst=account_in(dst_shard), amount=amount))
        else:
            shard = rng.randrange(num_shards)
            amount = rng.randint(spec.amount_low, spec.amount_high)
            src = draw_src(shard, amount)
            dst = account_in(shard)
            while dst == src:
                dst = account_in(shard)
            legs = [Transfer(src=src, dst=dst, amount=amount)]
        requests.append(
            ClientRequest(client=client, timestamp=timestamps[client], legs=tuple(legs))
        )
    return requests
