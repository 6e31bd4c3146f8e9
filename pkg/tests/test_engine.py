import random

import pytest

from promisekit.catalog import DecrementPool, load_catalog
from promisekit.engine import (
    PromiseEngine,
    Rejection,
    UnknownPromiseId,
    build_feasibility_problem,
    check_satisfiable,
)
from promisekit.oracle import brute_force_satisfiable, random_case
from promisekit.predicates import (
    AT_LEAST_IN_ORDER,
    EQUALS,
    InstanceId,
    Named,
    Property,
    PropertyConstraint,
    Quantity,
)

from conftest import SEAT_DOC, widget_doc


def balance_catalog(amount):
    return load_catalog({"resource-types": [{"name": "balance", "pool": amount}]})


def view_of(catalog):
    return catalog.snapshot_availability()


# --- check_satisfiable ---

def test_two_pool_promises_need_their_sum_on_hand():
    preds = [Quantity("balance", 100), Quantity("balance", 50)]
    assert not check_satisfiable(preds, view_of(balance_catalog(120)))
    assert check_satisfiable(preds, view_of(balance_catalog(150)))


def test_empty_predicate_set_is_vacuously_feasible():
    assert check_satisfiable([], view_of(balance_catalog(0)))


def test_property_demands_share_rooms_without_collision(hotel_catalog):
    # oracle-confirmed: 512 covers floor-5, 610 covers the view demand
    view_pred = Property("room", (PropertyConstraint("view", EQUALS, True),), 1)
    floor5 = Property("room", (PropertyConstraint("floor", EQUALS, 5),), 1)
    view = view_of(hotel_catalog)
    assert brute_force_satisfiable([view_pred, floor5], view)
    assert check_satisfiable([view_pred, floor5], view)
    # two floor-5 demands compete for the single 512
    assert not brute_force_satisfiable([floor5, floor5], view)
    assert not check_satisfiable([floor5, floor5], view)


def test_named_instance_is_excluded_from_anonymous_counting(seat_catalog):
    eng = PromiseEngine(seat_catalog)
    granted = eng.grant([Named(InstanceId("seat", "24G"))], 30, 0)
    assert not isinstance(granted, Rejection)
    # two seats remain unpromised; asking for three must fail even though
    # three untaken seats exist
    outcome = eng.grant([Quantity("seat", 3)], 30, 0)
    assert isinstance(outcome, Rejection)
    assert not isinstance(eng.grant([Quantity("seat", 2)], 30, 0), Rejection)


def test_named_predicate_for_missing_instance_is_infeasible(seat_catalog):
    view = view_of(seat_catalog)
    assert not check_satisfiable([Named(InstanceId("seat", "99Z"))], view)


def test_problem_shape(hotel_catalog):
    floor5 = Property("room", (PropertyConstraint("floor", EQUALS, 5),), 1)
    prob = build_feasibility_problem(
        [Named(InstanceId("room", "512")), floor5, Quantity("room", 1)],
        view_of(hotel_catalog))
    assert [s.key for s in prob.supplies] == ["inst:room/512", "inst:room/610"]
    assert prob.edges[0] == (0,)        # named: exactly one edge
    assert prob.edges[1] == (0,)        # only 512 is on floor 5
    assert prob.edges[2] == (0, 1)      # quantity over the instance-backed type
    assert prob.total_demand == 3


# --- grant ---

def test_grant_with_enough_stock():
    eng = PromiseEngine(load_catalog(widget_doc(10)))
    rec = eng.grant([Quantity("pink-widget", 5)], 30, 0)
    assert rec.status == "active" and rec.expires_at == 30
    assert eng.record(rec.id) is rec


def test_grant_rejected_when_short_and_table_unchanged():
    eng = PromiseEngine(load_catalog(widget_doc(3)))
    before = dict(eng.table)
    assert isinstance(eng.grant([Quantity("pink-widget", 5)], 30, 0), Rejection)
    assert eng.table == before


def test_multi_predicate_grant_is_all_or_nothing():
    cat = load_catalog({"resource-types": [
        {"name": "flight-seat", "pool": 5},
        {"name": "rental-car", "pool": 0},
        {"name": "hotel-room", "pool": 5},
    ]})
    eng = PromiseEngine(cat)
    bundle = [Quantity("flight-seat", 1), Quantity("rental-car", 1), Quantity("hotel-room", 1)]
    assert isinstance(eng.grant(bundle, 60, 0), Rejection)
    assert eng.table == {}
    assert not isinstance(eng.grant(bundle[::2], 60, 0), Rejection)


def test_grant_requires_predicates_and_positive_duration():
    eng = PromiseEngine(load_catalog(widget_doc(1)))
    with pytest.raises(ValueError):
        eng.grant([], 10, 0)
    with pytest.raises(ValueError):
        eng.grant([Quantity("pink-widget", 1)], 0, 0)


def test_rejected_then_smaller_retry_never_errors():
    eng = PromiseEngine(load_catalog(widget_doc(4)))
    eng.grant([Quantity("pink-widget", 3)], 30, 0)
    assert isinstance(eng.grant([Quantity("pink-widget", 2)], 30, 0), Rejection)
    outcome = eng.grant([Quantity("pink-widget", 1)], 30, 0)
    assert not isinstance(outcome, Rejection)


# --- release ---

def test_release_returns_capacity():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    first = eng.grant([Quantity("pink-widget", 5)], 30, 0)
    assert isinstance(eng.grant([Quantity("pink-widget", 5)], 30, 0), Rejection)
    eng.release([first.id])
    assert not isinstance(eng.grant([Quantity("pink-widget", 5)], 30, 0), Rejection)


def test_release_is_idempotent():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    rec = eng.grant([Quantity("pink-widget", 1)], 30, 0)
    eng.release([rec.id])
    eng.release([rec.id])
    assert eng.record(rec.id).status == "released"


def test_release_unknown_id():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    with pytest.raises(UnknownPromiseId):
        eng.release(["p-404"])


def test_release_checks_all_ids_before_mutating():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    rec = eng.grant([Quantity("pink-widget", 1)], 30, 0)
    with pytest.raises(UnknownPromiseId):
        eng.release([rec.id, "p-404"])
    assert eng.record(rec.id).status == "active"


# --- exchange ---

def test_exchange_to_a_stronger_promise_is_rejected_and_old_retained():
    eng = PromiseEngine(balance_catalog(150))
    old = eng.grant([Quantity("balance", 100)], 50, 0)
    outcome = eng.exchange([Quantity("balance", 200)], 50, [old.id], 0)
    assert isinstance(outcome, Rejection)
    assert eng.record(old.id).status == "active"


def test_exchange_to_a_weaker_promise():
    eng = PromiseEngine(balance_catalog(150))
    old = eng.grant([Quantity("balance", 100)], 50, 0)
    new = eng.exchange([Quantity("balance", 50)], 50, [old.id], 0)
    assert not isinstance(new, Rejection) and new is not None
    assert eng.record(old.id).status == "released"
    assert [r.predicates for r in eng.active_records()] == [(Quantity("balance", 50),)]


def test_exchange_with_no_new_predicates_is_a_release():
    eng = PromiseEngine(balance_catalog(150))
    old = eng.grant([Quantity("balance", 100)], 50, 0)
    assert eng.exchange([], 1, [old.id], 0) is None
    assert eng.record(old.id).status == "released"


def test_exchange_of_inactive_or_unknown_id():
    eng = PromiseEngine(balance_catalog(150))
    old = eng.grant([Quantity("balance", 100)], 50, 0)
    eng.release([old.id])
    with pytest.raises(UnknownPromiseId):
        eng.exchange([Quantity("balance", 10)], 50, [old.id], 0)
    with pytest.raises(UnknownPromiseId):
        eng.exchange([Quantity("balance", 10)], 50, ["p-404"], 0)


def test_exchange_may_reuse_capacity_it_releases():
    eng = PromiseEngine(balance_catalog(100))
    old = eng.grant([Quantity("balance", 100)], 50, 0)
    new = eng.exchange([Quantity("balance", 100)], 50, [old.id], 5)
    assert not isinstance(new, Rejection)
    assert eng.record(old.id).status == "released"


# --- expiry ---

def test_sweep_expires_at_the_boundary():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    rec = eng.grant([Quantity("pink-widget", 1)], 10, 0)
    assert eng.expire_sweep(9) == []
    assert eng.expire_sweep(10) == [rec.id]
    assert eng.record(rec.id).status == "expired"


def test_conflicting_grant_succeeds_after_expiry():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    eng.grant([Quantity("pink-widget", 5)], 10, 0)
    assert isinstance(eng.grant([Quantity("pink-widget", 1)], 10, 5), Rejection)
    eng.expire_sweep(10)
    assert not isinstance(eng.grant([Quantity("pink-widget", 1)], 10, 10), Rejection)


def test_releasing_an_expired_promise_is_a_no_op():
    eng = PromiseEngine(load_catalog(widget_doc(5)))
    rec = eng.grant([Quantity("pink-widget", 1)], 10, 0)
    eng.expire_sweep(10)
    eng.release([rec.id])
    assert eng.record(rec.id).status == "expired"


# --- allocated tags for named promises ---

def test_named_grant_tags_and_release_untags(seat_catalog):
    eng = PromiseEngine(seat_catalog)
    iid = InstanceId("seat", "24G")
    rec = eng.grant([Named(iid)], 30, 0)
    assert seat_catalog.instance(iid).status == "promised"
    eng.release([rec.id])
    assert seat_catalog.instance(iid).status == "available"


def test_expiry_untags_named_instances(seat_catalog):
    eng = PromiseEngine(seat_catalog)
    iid = InstanceId("seat", "24G")
    eng.grant([Named(iid)], 10, 0)
    eng.expire_sweep(10)
    assert seat_catalog.instance(iid).status == "available"


def test_double_named_grant_is_rejected(seat_catalog):
    eng = PromiseEngine(seat_catalog)
    iid = InstanceId("seat", "24G")
    eng.grant([Named(iid)], 30, 0)
    assert isinstance(eng.grant([Named(iid)], 30, 0), Rejection)
    assert eng.named_conflicts() == []


# --- post-action check ---

def _consume(catalog, amount, unit):
    catalog.apply_mutation(unit, DecrementPool("pink-widget", amount))


def test_post_action_check_passes_when_remaining_promises_fit():
    cat = load_catalog(widget_doc(10))
    eng = PromiseEngine(cat)
    mine = eng.grant([Quantity("pink-widget", 5)], 30, 0)
    eng.grant([Quantity("pink-widget", 5)], 30, 0)
    unit = cat.begin_unit()
    _consume(cat, 5, unit)
    eng.release([mine.id], unit)
    assert eng.post_action_check([mine.id], cat.snapshot_availability(unit))
    cat.commit_unit(unit)


def test_post_action_check_flags_overconsumption():
    cat = load_catalog(widget_doc(10))
    eng = PromiseEngine(cat)
    mine = eng.grant([Quantity("pink-widget", 5)], 30, 0)
    eng.grant([Quantity("pink-widget", 5)], 30, 0)
    unit = cat.begin_unit()
    _consume(cat, 6, unit)
    eng.release([mine.id], unit)
    assert not eng.post_action_check([mine.id], cat.snapshot_availability(unit))
    cat.rollback_unit(unit)
    assert cat.quantity_on_hand("pink-widget") == 10


def test_actions_touching_nothing_promised_stay_ok():
    cat = load_catalog({"resource-types": [
        {"name": "pink-widget", "pool": 10}, {"name": "blue-widget", "pool": 4}]})
    eng = PromiseEngine(cat)
    eng.grant([Quantity("pink-widget", 10)], 30, 0)
    unit = cat.begin_unit()
    cat.apply_mutation(unit, DecrementPool("blue-widget", 4))
    assert eng.post_action_check([], cat.snapshot_availability(unit))
    cat.commit_unit(unit)


# --- table invariants ---

def test_pool_overcommit_helper():
    eng = PromiseEngine(balance_catalog(100))
    eng.grant([Quantity("balance", 60)], 30, 0)
    eng.grant([Quantity("balance", 40)], 30, 0)
    assert eng.pool_overcommit(view_of(eng.catalog)) == {}


def test_table_stays_feasible_after_random_operations():
    rng = random.Random(7)
    cat = load_catalog({"resource-types": [
        {"name": "bulk", "pool": 5},
        SEAT_DOC["resource-types"][0],
    ]})
    eng = PromiseEngine(cat)
    now = 0
    for _ in range(300):
        op = rng.random()
        if op < 0.5:
            preds = [rng.choice([
                Quantity("bulk", rng.randint(1, 3)),
                Named(InstanceId("seat", rng.choice(["24G", "24H", "2A"]))),
                Property("seat", (PropertyConstraint(
                    "class", AT_LEAST_IN_ORDER,
                    rng.choice(["economy", "business", "first"])),), 1),
            ])]
            eng.grant(preds, rng.randint(1, 10), now)
        elif op < 0.75 and eng.active_records():
            eng.release([rng.choice(eng.active_records()).id])
        elif op < 0.9:
            now += rng.randint(0, 3)
            eng.expire_sweep(now)
        elif eng.active_records():
            eng.exchange([Quantity("bulk", 1)], rng.randint(1, 10),
                         [rng.choice(eng.active_records()).id], now)
        view = view_of(cat)
        preds = eng.active_predicates()
        assert check_satisfiable(preds, view)
        assert brute_force_satisfiable(preds, view)
        assert eng.named_conflicts() == []
        assert eng.pool_overcommit(view) == {}


def test_flow_matches_exhaustive_oracle_on_random_cases():
    rng = random.Random(20240809)
    for _ in range(400):
        preds, view = random_case(rng)
        assert check_satisfiable(preds, view) == brute_force_satisfiable(preds, view)


def test_dump_is_deterministic_and_ordered():
    eng = PromiseEngine(load_catalog(widget_doc(9)))
    for _ in range(3):
        eng.grant([Quantity("pink-widget", 3)], 30, 0)
    dump = eng.dump()
    ids = [row["promise-identifier"] for row in dump["promises"]]
    assert ids == ["p-1", "p-2", "p-3"]
    assert dump["counters"]["grants"] == 3
