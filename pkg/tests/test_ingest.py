import gzip
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prodembed.core import FormatError, IntegrityError
from prodembed.ingest import (
    Event,
    build_lifetime_lists,
    build_sessions,
    load_catalog,
    load_events,
    parse_catalog,
    parse_events,
)


def _ev(u, p, t, s, ts, **kw):
    return json.dumps({"user_id": u, "product_id": p, "event_type": t, "session_id": s, "ts": ts, **kw})


def test_catalog_canonicalizes_and_skips_empty():
    lines = [
        json.dumps({"product_id": "p1", "brand": "  Nike  Air ", "basecolor": "", "fabric": None}),
        "",
        json.dumps({"product_id": "p2", "priceband": 3}),
    ]
    recs = parse_catalog(lines)
    assert recs[0].si == {"brand": "nike air"}
    assert recs[1].si_tokens() == ["priceband=3"]


def test_catalog_duplicate_and_skip_mode():
    lines = [json.dumps({"product_id": "p1"}), "{bad", json.dumps({"product_id": "p1"})]
    with pytest.raises(FormatError) as exc:
        parse_catalog(lines)
    assert exc.value.line == 2
    errors = []
    recs = parse_catalog(lines, on_error="skip", errors=errors)
    assert [r.product_id for r in recs] == ["p1"]
    assert [e[0] for e in errors] == [2, 3]


def test_gzip_detected_by_magic(tmp_path):
    p = tmp_path / "catalog.data"
    with gzip.open(p, "wt") as fh:
        fh.write(json.dumps({"product_id": "p9", "brand": "x"}) + "\n")
    assert load_catalog(p)[0].product_id == "p9"


def test_events_validation():
    with pytest.raises(FormatError):
        parse_events([_ev("u", "p", "view", "s", 1)])
    with pytest.raises(FormatError):
        parse_events([_ev("u", "p", "click", "s", -1)])
    with pytest.raises(FormatError):
        parse_events([json.dumps({"user_id": "u"})])
    ev = parse_events([_ev("u", "p", "click", "s", 1), _ev("u", "q", "purchase", "s", 2, returned=True)],
                      catalog_ids={"q"})
    assert not ev[0].cataloged and ev[1].cataloged and ev[1].returned == 1
    with pytest.raises(FormatError):
        parse_events([_ev("u", "p", "click", "s", 1)], catalog_ids={"q"}, strict=True)


def test_non_utf8_events(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_bytes(b"\xff\xfe\x00garbage\n")
    with pytest.raises(Exception):
        load_events(p)


def test_lifetime_lists_threshold_and_order():
    E = [
        Event("u1", "a", "purchase", "s1", 5),
        Event("u1", "b", "bag", "s1", 1),
        Event("u1", "b", "purchase", "s1", 6),
        Event("u1", "c", "purchase", "s2", 9),
        Event("u1", "x", "click", "s2", 0),
        Event("u2", "a", "purchase", "s3", 1),
        Event("u2", "a", "purchase", "s3", 2),
        Event("u2", "b", "purchase", "s3", 3),
    ]
    lists = build_lifetime_lists(E, min_purchases=3)
    assert len(lists) == 1
    assert lists[0].products() == ["b", "a", "b", "c"]
    assert [u.user_id for u in build_lifetime_lists(E, min_purchases=2)] == ["u1", "u2"]


event_st = st.builds(
    Event,
    user_id=st.sampled_from(["u1", "u2"]),
    product_id=st.sampled_from(["a", "b", "c"]),
    event_type=st.sampled_from(["click", "bag", "purchase"]),
    session_id=st.just("s"),
    timestamp=st.integers(0, 20),
)


@given(st.lists(event_st, max_size=30))
def test_lifetime_lists_are_time_sorted_subsequences(events):
    for ll in build_lifetime_lists(events, min_purchases=1):
        mine = [e for e in events if e.user_id == ll.user_id and e.event_type != "click"]
        assert len(ll.items) == len(mine)
        ts = sorted(e.timestamp for e in mine)
        assert ts == sorted(ts)


def test_sessions_group_sort_and_integrity():
    E = [
        Event("u1", "a", "click", "s1", 3),
        Event("u1", "b", "click", "s1", 1),
        Event("u2", "c", "click", "s2", 2),
    ]
    ss = build_sessions(E)
    assert [s.session_id for s in ss] == ["s1", "s2"]
    assert ss[0].clicks() == ["b", "a"]
    with pytest.raises(IntegrityError):
        build_sessions(E + [Event("u2", "a", "click", "s1", 4)])
