"""Promise table and promise checking.

Feasibility of a predicate set is decided by integer max-flow over a
demand/supply graph: every predicate contributes a demand node whose
weight is its amount, every untaken instance a unit-capacity supply node,
and every pool-backed type a supply node with capacity quantity-on-hand.
An edge means that supply can legally serve that demand. The set is
satisfiable iff the max flow saturates every demand.

Re-solving from scratch on every check is what makes reallocation
implicit: nothing binds an instance to a particular predicate between
checks, so a newly arrived request can displace a tentative pairing as
long as some complete assignment still exists.

The engine assumes external serialization (it runs inside the manager
pipeline); checks on immutable views are pure and may run anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Union

from .catalog import (
    STATUS_AVAILABLE,
    STATUS_PROMISED,
    STATUS_TAKEN,
    AvailabilityView,
    ResourceCatalog,
    SetInstanceStatus,
    UnitToken,
)
from .predicates import (
    InstanceId,
    Named,
    Predicate,
    Quantity,
    amount_of,
    predicate_to_wire,
    satisfies,
)

PROMISE_ACTIVE = "active"
PROMISE_RELEASED = "released"
PROMISE_EXPIRED = "expired"


class UnknownPromiseId(Exception):
    def __init__(self, promise_id: str):
        super().__init__(f"unknown promise id {promise_id!r}")
        self.promise_id = promise_id


@dataclass(frozen=True)
class Rejection:
    """Protocol-level refusal of a grant or exchange. Not an error."""

    reason: str = "unsatisfiable with current promises and availability"


@dataclass(frozen=True)
class PromiseRecord:
    id: str
    predicates: tuple[Predicate, ...]
    granted_at: int
    expires_at: int
    status: str = PROMISE_ACTIVE


# --- feasibility problem ---

@dataclass(frozen=True)
class DemandNode:
    predicate: Predicate
    amount: int


@dataclass(frozen=True)
class SupplyNode:
    key: str       # "pool:<type>" or "inst:<type>/<key>"
    capacity: int


@dataclass(frozen=True)
class FeasibilityProblem:
    demands: tuple[DemandNode, ...]
    supplies: tuple[SupplyNode, ...]
    edges: tuple[tuple[int, ...], ...]  # per demand, indices into supplies

    @property
    def total_demand(self) -> int:
        return sum(d.amount for d in self.demands)


def build_feasibility_problem(predicates: Sequence[Predicate],
                              view: AvailabilityView) -> FeasibilityProblem:
    pool_names = sorted(view.pools)
    supplies = [SupplyNode(f"pool:{name}", view.pools[name]) for name in pool_names]
    pool_index = {name: i for i, name in enumerate(pool_names)}

    usable = [r for r in view.instances if r.status != STATUS_TAKEN]  # sorted by id already
    inst_index = {}
    for r in usable:
        inst_index[r.id] = len(supplies)
        supplies.append(SupplyNode(f"inst:{r.id}", 1))

    demands = []
    edges = []
    for p in predicates:
        demands.append(DemandNode(p, amount_of(p)))
        if isinstance(p, Quantity):
            fan = []
            if p.resource_type in pool_index:
                fan.append(pool_index[p.resource_type])
            fan.extend(inst_index[r.id] for r in usable if r.id.resource_type == p.resource_type)
            edges.append(tuple(fan))
        elif isinstance(p, Named):
            idx = inst_index.get(p.instance)
            edges.append((idx,) if idx is not None else ())
        else:
            edges.append(tuple(inst_index[r.id] for r in usable
                               if satisfies(r, p, view.schema)))
    return FeasibilityProblem(tuple(demands), tuple(supplies), tuple(edges))


class _FlowNet:
    """Dinic max-flow on a small dense-ish graph."""

    def __init__(self, n: int):
        self.n = n
        self.adj: list[list[list[int]]] = [[] for _ in range(n)]  # [to, cap, rev-index]

    def add_edge(self, u: int, v: int, cap: int) -> None:
        self.adj[u].append([v, cap, len(self.adj[v])])
        self.adj[v].append([u, 0, len(self.adj[u]) - 1])

    def max_flow(self, s: int, t: int) -> int:
        flow = 0
        while True:
            level = self._bfs(s, t)
            if level is None:
                return flow
            it = [0] * self.n
            while True:
                pushed = self._dfs(s, t, float("inf"), level, it)
                if not pushed:
                    break
                flow += pushed

    def _bfs(self, s: int, t: int):
        level = [-1] * self.n
        level[s] = 0
        queue = [s]
        for u in queue:
            for e in self.adj[u]:
                if e[1] > 0 and level[e[0]] < 0:
                    level[e[0]] = level[u] + 1
                    queue.append(e[0])
        return level if level[t] >= 0 else None

    def _dfs(self, u: int, t: int, limit, level, it) -> int:
        if u == t:
            return limit  # finite: min over at least one edge capacity
        while it[u] < len(self.adj[u]):
            e = self.adj[u][it[u]]
            v = e[0]
            if e[1] > 0 and level[v] == level[u] + 1:
                pushed = self._dfs(v, t, min(limit, e[1]), level, it)
                if pushed:
                    e[1] -= pushed
                    self.adj[v][e[2]][1] += pushed
                    return pushed
            it[u] += 1
        return 0


def solve_feasibility(problem: FeasibilityProblem) -> bool:
    if not problem.demands:
        return True
    if any(not fan and d.amount > 0 for d, fan in zip(problem.demands, problem.edges)):
        return False
    n_sup = len(problem.supplies)
    n_dem = len(problem.demands)
    # node ids: 0 source, 1..n_sup supplies, n_sup+1..n_sup+n_dem demands, last sink
    net = _FlowNet(n_sup + n_dem + 2)
    sink = n_sup + n_dem + 1
    for i, sup in enumerate(problem.supplies):
        if sup.capacity > 0:
            net.add_edge(0, 1 + i, sup.capacity)
    for j, dem in enumerate(problem.demands):
        net.add_edge(n_sup + 1 + j, sink, dem.amount)
        for i in problem.edges[j]:
            net.add_edge(1 + i, n_sup + 1 + j, dem.amount)
    return net.max_flow(0, sink) == problem.total_demand


def check_satisfiable(predicates: Sequence[Predicate], view: AvailabilityView) -> bool:
    """True iff every predicate can draw its full amount from disjoint supply."""
    return solve_feasibility(build_feasibility_problem(predicates, view))


# --- the engine ---

class PromiseEngine:
    """Promise table plus grant/release/exchange/expiry over a catalog.

    Mutating operations take the active catalog unit token so that the
    instance-status tags they maintain roll back with the rest of the
    request; passing None runs the tag writes in a self-contained unit.
    """

    def __init__(self, catalog: ResourceCatalog):
        self.catalog = catalog
        self.table: dict[str, PromiseRecord] = {}
        self._issued = 0
        self.counters = {"grants": 0, "rejections": 0, "releases": 0, "expiries": 0}

    # --- queries ---

    def record(self, promise_id: str) -> Optional[PromiseRecord]:
        return self.table.get(promise_id)

    def active_records(self, exclude: Iterable[str] = ()) -> list[PromiseRecord]:
        skip = set(exclude)
        return [r for r in self.table.values()
                if r.status == PROMISE_ACTIVE and r.id not in skip]

    def active_predicates(self, exclude: Iterable[str] = ()) -> list[Predicate]:
        preds: list[Predicate] = []
        for rec in self.active_records(exclude):
            preds.extend(rec.predicates)
        return preds

    def snapshot(self) -> dict[str, PromiseRecord]:
        return dict(self.table)

    def restore(self, snapshot: dict[str, PromiseRecord]) -> None:
        self.table = dict(snapshot)

    # --- operations ---

    def grant(self, predicates: Sequence[Predicate], duration: int, now: int,
              unit: Optional[UnitToken] = None) -> Union[PromiseRecord, Rejection]:
        """All-or-nothing: insert a new active record iff the whole active
        set plus the request is satisfiable against current availability."""
        if not predicates:
            raise ValueError("a promise needs at least one predicate")
        if duration <= 0:
            raise ValueError("duration must be positive")
        view = self._view(unit)
        if not check_satisfiable(self.active_predicates() + list(predicates), view):
            self.counters["rejections"] += 1
            return Rejection()
        rec = self._insert(tuple(predicates), duration, now, unit)
        return rec

    def release(self, ids: Sequence[str], unit: Optional[UnitToken] = None) -> None:
        """Mark records released; released/expired ids are a no-op."""
        records = []
        for pid in ids:
            rec = self.table.get(pid)
            if rec is None:
                raise UnknownPromiseId(pid)
            records.append(rec)
        for rec in records:
            if rec.status != PROMISE_ACTIVE:
                continue
            self.table[rec.id] = replace(rec, status=PROMISE_RELEASED)
            self._clear_tags(rec, unit)
            self.counters["releases"] += 1

    def exchange(self, predicates: Sequence[Predicate], duration: int,
                 release_ids: Sequence[str], now: int,
                 unit: Optional[UnitToken] = None
                 ) -> Union[PromiseRecord, None, Rejection]:
        """Atomically release `release_ids` while granting `predicates`.

        On rejection nothing changes and the old promises stay in force.
        With an empty predicate list this degenerates to a release and
        returns None.
        """
        release = list(dict.fromkeys(release_ids))
        for pid in release:
            rec = self.table.get(pid)
            if rec is None or rec.status != PROMISE_ACTIVE:
                raise UnknownPromiseId(pid)
        if predicates and duration <= 0:
            raise ValueError("duration must be positive")
        view = self._view(unit)
        candidate = self.active_predicates(exclude=release) + list(predicates)
        if not check_satisfiable(candidate, view):
            self.counters["rejections"] += 1
            return Rejection()
        self.release(release, unit)
        if not predicates:
            return None
        return self._insert(tuple(predicates), duration, now, unit)

    def expire_sweep(self, now: int, unit: Optional[UnitToken] = None) -> list[str]:
        """Expire every active record with expires_at <= now."""
        expired = []
        for rec in list(self.table.values()):
            if rec.status == PROMISE_ACTIVE and rec.expires_at <= now:
                self.table[rec.id] = replace(rec, status=PROMISE_EXPIRED)
                self._clear_tags(rec, unit)
                self.counters["expiries"] += 1
                expired.append(rec.id)
        return sorted(expired)

    def post_action_check(self, released_ids: Sequence[str], view: AvailabilityView) -> bool:
        """True iff the remaining active promises survive the action's effects.

        Call with the released ids already provisionally marked; a False
        result tells the pipeline to roll the action back.
        """
        for pid in released_ids:
            rec = self.table.get(pid)
            assert rec is None or rec.status != PROMISE_ACTIVE, \
                "released ids must be marked before the post-action check"
        return check_satisfiable(self.active_predicates(), view)

    # --- invariant helpers (used by self-checks, fuzzing and tests) ---

    def named_conflicts(self) -> list[InstanceId]:
        """Instance ids referenced by more than one active promise."""
        seen: dict[InstanceId, int] = {}
        for rec in self.active_records():
            for p in rec.predicates:
                if isinstance(p, Named):
                    seen[p.instance] = seen.get(p.instance, 0) + 1
        return sorted(iid for iid, n in seen.items() if n > 1)

    def pool_overcommit(self, view: AvailabilityView) -> dict[str, tuple[int, int]]:
        """Pure pools where promised quantity exceeds quantity on hand."""
        promised: dict[str, int] = {}
        for p in self.active_predicates():
            if isinstance(p, Quantity) and p.resource_type in view.pools:
                promised[p.resource_type] = promised.get(p.resource_type, 0) + p.amount
        return {rt: (total, view.pools[rt])
                for rt, total in promised.items() if total > view.pools[rt]}

    def dump(self) -> dict:
        """Diagnostic promise-table dump, deterministic field order."""
        rows = []
        for pid in sorted(self.table, key=_id_sort_key):
            rec = self.table[pid]
            rows.append({
                "promise-identifier": rec.id,
                "status": rec.status,
                "granted-at": rec.granted_at,
                "expires-at": rec.expires_at,
                "predicates": [predicate_to_wire(p) for p in rec.predicates],
            })
        return {"promises": rows, "counters": dict(self.counters)}

    # --- internals ---

    def _insert(self, predicates: tuple[Predicate, ...], duration: int, now: int,
                unit: Optional[UnitToken]) -> PromiseRecord:
        self._issued += 1
        rec = PromiseRecord(f"p-{self._issued}", predicates, now, now + duration)
        self.table[rec.id] = rec
        # allocated tag: named instances get marked while the promise lives
        for p in predicates:
            if isinstance(p, Named):
                inst = self.catalog.instance(p.instance)
                if inst is not None and inst.status == STATUS_AVAILABLE:
                    self._set_status(p.instance, STATUS_PROMISED, unit)
        self.counters["grants"] += 1
        return rec

    def _clear_tags(self, rec: PromiseRecord, unit: Optional[UnitToken]) -> None:
        for p in rec.predicates:
            if isinstance(p, Named):
                inst = self.catalog.instance(p.instance)
                if inst is not None and inst.status == STATUS_PROMISED:
                    self._set_status(p.instance, STATUS_AVAILABLE, unit)

    def _set_status(self, iid: InstanceId, status: str, unit: Optional[UnitToken]) -> None:
        if unit is not None:
            self.catalog.apply_mutation(unit, SetInstanceStatus(iid, status))
        else:
            token = self.catalog.begin_unit()
            try:
                self.catalog.apply_mutation(token, SetInstanceStatus(iid, status))
                self.catalog.commit_unit(token)
            except Exception:
                self.catalog.rollback_unit(token)
                raise

    def _view(self, unit: Optional[UnitToken]) -> AvailabilityView:
        return self.catalog.snapshot_availability(unit)


def _id_sort_key(pid: str):
    head, _, tail = pid.partition("-")
    return (head, int(tail)) if tail.isdigit() else (pid, 0)
