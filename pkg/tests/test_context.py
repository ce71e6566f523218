import random

import pytest

from thinkact.context import (
    ContextEntry,
    ContextError,
    ContextStore,
    assemble_prompt,
    close_scope,
    record,
    store_from_json,
    store_to_json,
)
from thinkact.protocol import ActionCall, Scope


def gentry(key, value="v" * 10, **kw):
    return ContextEntry(key=key, value=value, scope=Scope.GLOBAL, **kw)


def lentry(key, call_id, value="local"):
    return ContextEntry(key=key, value=value, scope=Scope.LOCAL, origin_call_id=call_id)


def call(cid):
    return ActionCall.make(cid, "probe", Scope.LOCAL, {})


def test_record_single_global_entry():
    store = record(ContextStore(budget_bytes=100), gentry("k1"))
    assert [e.key for e in store.global_entries] == ["k1"]
    assert store.global_bytes == 10


def test_record_key_collision():
    store = record(ContextStore(budget_bytes=100), gentry("k1"))
    with pytest.raises(ContextError) as err:
        record(store, gentry("k1"))
    assert err.value.code == "KEY_COLLISION"


def test_record_oldest_first_eviction_with_audit():
    store = ContextStore(budget_bytes=20)
    for key in ("e1", "e2", "e3"):
        store = record(store, gentry(key))
    assert [e.key for e in store.global_entries] == ["e2", "e3"]
    assert store.eviction_audit == ("e1",)


def test_record_rejects_unneutralized_value():
    with pytest.raises(ContextError) as err:
        record(ContextStore(budget_bytes=100), gentry("k", value="<act"))
    assert err.value.code == "NOT_NEUTRALIZED"


def test_record_entry_larger_than_budget():
    with pytest.raises(ContextError) as err:
        record(ContextStore(budget_bytes=5), gentry("big"))
    assert err.value.code == "OVER_BUDGET"


def test_local_entry_requires_origin():
    with pytest.raises(ContextError):
        ContextEntry(key="k", value="v", scope=Scope.LOCAL)


def test_local_collision_scoped_to_origin():
    store = record(ContextStore(budget_bytes=100), lentry("k", 1))
    store = record(store, lentry("k", 2))  # same key, different scope: fine
    with pytest.raises(ContextError):
        record(store, lentry("k", 1))


def test_assemble_prompt_includes_current_call_locals_only():
    store = ContextStore(budget_bytes=100)
    store = record(store, gentry("g1", "a"))
    store = record(store, gentry("g2", "b"))
    store = record(store, lentry("l1", 1))
    store = record(store, lentry("l2", 2))
    view = assemble_prompt(store, call(1))
    assert view.included_keys == ((Scope.GLOBAL, "g1"), (Scope.GLOBAL, "g2"),
                                  (Scope.LOCAL, "l1"))
    assert (Scope.LOCAL, "l2") in view.dropped_keys
    assert "l2" not in view.rendered
    assert view.rendered.splitlines()[0] == "[ctx scope=G key=g1]a[/ctx]"


def test_assemble_prompt_without_call_shows_only_globals():
    store = record(ContextStore(budget_bytes=100), gentry("g1", "x"))
    store = record(store, lentry("l1", 1))
    view = assemble_prompt(store)
    assert view.included_keys == ((Scope.GLOBAL, "g1"),)
    assert view.dropped_keys == ((Scope.LOCAL, "l1"),)


def test_assemble_prompt_empty_store():
    view = assemble_prompt(ContextStore(budget_bytes=10))
    assert view.rendered == ""
    assert view.included_keys == ()


def test_assemble_prompt_idempotent():
    store = record(ContextStore(budget_bytes=100), gentry("g1"))
    assert assemble_prompt(store, call(1)) == assemble_prompt(store, call(1))


def test_close_scope_promotes_listed_keys():
    store = record(ContextStore(budget_bytes=100), lentry("a", 2))
    store = record(store, lentry("b", 2))
    store = close_scope(store, 2, promote=["a"])
    assert [e.key for e in store.global_entries] == ["a"]
    assert store.global_entries[0].scope is Scope.GLOBAL
    assert 2 not in store.local_entries


def test_close_scope_empty_promotion_discards():
    store = record(ContextStore(budget_bytes=100), lentry("a", 2))
    store = close_scope(store, 2, promote=[])
    assert store.global_entries == ()
    assert 2 not in store.local_entries


def test_close_scope_unknown_scope():
    with pytest.raises(ContextError) as err:
        close_scope(ContextStore(budget_bytes=10), 99, [])
    assert err.value.code == "UNKNOWN_SCOPE"


def test_close_scope_unknown_key():
    store = record(ContextStore(budget_bytes=100), lentry("a", 2))
    with pytest.raises(ContextError) as err:
        close_scope(store, 2, promote=["zz"])
    assert err.value.code == "UNKNOWN_KEY"


def test_close_scope_promotion_subject_to_budget():
    store = ContextStore(budget_bytes=20)
    store = record(store, gentry("old"))  # 10 bytes
    store = record(store, lentry("p1", 3, value="x" * 15))
    store = close_scope(store, 3, promote=["p1"])
    assert [e.key for e in store.global_entries] == ["p1"]
    assert store.eviction_audit == ("old",)


def test_store_json_round_trip():
    store = ContextStore(budget_bytes=50)
    store = record(store, gentry("g1", "abc"))
    store = record(store, lentry("l1", 4))
    store = record(store, gentry("g2", "d" * 48))  # evicts g1
    restored = store_from_json(store_to_json(store))
    assert restored == store


def test_isolation_property_randomized():
    rng = random.Random(123)
    for _ in range(150):
        store = ContextStore(budget_bytes=rng.randint(40, 200))
        call_ids = list(range(1, rng.randint(2, 5)))
        for cid in call_ids:
            for j in range(rng.randint(1, 3)):
                store = record(store, lentry(f"c{cid}k{j}", cid, value=f"secret{cid}_{j}"))
        for _ in range(rng.randint(0, 4)):
            try:
                store = record(store, gentry(f"g{rng.randrange(10)}",
                                             "w" * rng.randint(1, 30)))
            except ContextError:
                pass
        assert store.global_bytes <= store.budget_bytes
        for cid in call_ids:
            view = assemble_prompt(store, call(cid))
            for other in call_ids:
                if other != cid:
                    assert f"secret{other}_" not in view.rendered


def test_eviction_order_is_prefix_of_insertion():
    rng = random.Random(9)
    store = ContextStore(budget_bytes=25)
    inserted = []
    for i in range(12):
        key = f"k{i}"
        store = record(store, gentry(key, "z" * rng.randint(3, 9)))
        inserted.append(key)
    survivors = [e.key for e in store.global_entries]
    assert list(store.eviction_audit) + survivors == inserted
