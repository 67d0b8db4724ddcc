"""Catalog and event-log parsing, lifetime lists and sessions."""

from __future__ import annotations

import gzip
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence

from .core import EVENT_TYPES, SI_KEYS, DataError, FormatError, IntegrityError, ProductRecord

log = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True, slots=True)
class Event:
    user_id: str
    product_id: str
    event_type: str
    session_id: str
    timestamp: int
    cataloged: bool = True
    returned: int | None = None


@dataclass(frozen=True)
class LifetimeList:
    user_id: str
    items: tuple[tuple[str, str], ...]

    def products(self) -> list[str]:
        return [p for p, _ in self.items]


@dataclass(frozen=True)
class Session:
    session_id: str
    user_id: str
    events: tuple[Event, ...]

    def clicks(self) -> list[str]:
        return [e.product_id for e in self.events if e.event_type == "click"]


def read_lines(path) -> Iterator[str]:
    """Yield text lines from ``path``, transparently gunzipping by magic bytes."""
    with open(path, "rb") as raw:
        head = raw.read(2)
        raw.seek(0)
        stream: IO[bytes] = gzip.GzipFile(fileobj=raw) if head == GZIP_MAGIC else raw
        for line in io.TextIOWrapper(stream, encoding="utf-8"):
            yield line


def canonical_value(value) -> str:
    return " ".join(str(value).split()).lower()


def _parse_line(line: str | bytes, lineno: int) -> dict | None:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    if not line.strip():
        return None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc.msg}", line=lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("expected a JSON object", line=lineno)
    return obj


def _records(lines: Iterable[str | bytes]) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(lines, start=1):
        obj = _parse_line(line, lineno)
        if obj is not None:
            yield lineno, obj


def parse_catalog(
    lines: Iterable[str | bytes],
    on_error: str = "abort",
    errors: list | None = None,
) -> list[ProductRecord]:
    """Parse catalog JSONL into records with canonical SI values.

    With ``on_error="skip"`` bad lines are dropped and ``(line, message)``
    pairs are appended to ``errors`` when given.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError("on_error must be 'abort' or 'skip'")
    out: list[ProductRecord] = []
    seen: dict[str, int] = {}
    skipped = 0
    for lineno, line in enumerate(lines, start=1):
        try:
            obj = _parse_line(line, lineno)
            if obj is None:
                continue
            pid = obj.get("product_id")
            if not isinstance(pid, str) or not pid or any(c.isspace() for c in pid):
                raise FormatError(f"invalid product_id {pid!r}", line=lineno)
            if pid in seen:
                raise FormatError(
                    f"duplicate product_id {pid!r} (first seen on line {seen[pid]})", line=lineno
                )
            si = {}
            for key in SI_KEYS:
                value = obj.get(key)
                if value is None:
                    continue
                value = canonical_value(value)
                if value:
                    si[key] = value
        except FormatError as exc:
            if on_error == "abort":
                raise
            skipped += 1
            if errors is not None:
                errors.append((lineno, str(exc)))
            continue
        seen[pid] = lineno
        out.append(ProductRecord(pid, si))
    if skipped:
        log.warning("catalog: skipped %d bad lines", skipped)
    return out


def parse_events(
    lines: Iterable[str | bytes],
    catalog_ids: set[str] | None = None,
    strict: bool = False,
) -> list[Event]:
    """Parse event JSONL in file order.

    Events for products missing from ``catalog_ids`` are kept with
    ``cataloged=False`` unless ``strict`` is set, in which case they raise.
    """
    events: list[Event] = []
    unknown = 0
    for lineno, obj in _records(lines):
        try:
            user, pid, etype = obj["user_id"], obj["product_id"], obj["event_type"]
            session, ts = obj["session_id"], obj["ts"]
        except KeyError as exc:
            raise FormatError(f"missing field {exc.args[0]!r}", line=lineno) from None
        if etype not in EVENT_TYPES:
            raise FormatError(f"unknown event_type {etype!r}", line=lineno)
        if not isinstance(ts, int) or isinstance(ts, bool) or ts < 0:
            raise FormatError(f"bad timestamp {ts!r}", line=lineno)
        cataloged = True
        if catalog_ids is not None and pid not in catalog_ids:
            if strict:
                raise FormatError(f"product {pid!r} not in catalog", line=lineno)
            cataloged = False
            unknown += 1
        returned = obj.get("returned")
        if returned is not None:
            returned = int(bool(returned))
        events.append(Event(str(user), str(pid), etype, str(session), ts, cataloged, returned))
    if unknown:
        log.warning("events: %d events reference uncataloged products", unknown)
    return events


def filter_events(events: Iterable[Event], types: Sequence[str]) -> list[Event]:
    keep = set(types)
    return [e for e in events if e.event_type in keep]


def build_lifetime_lists(events: Sequence[Event], min_purchases: int = 3) -> list[LifetimeList]:
    """Per-user timestamp-ordered bag/purchase lists.

    Users with fewer than ``min_purchases`` distinct purchased products are
    dropped. Repeated bags or purchases of one product are kept. Lists are
    returned sorted by user id.
    """
    by_user: dict[str, list[tuple[int, int, str, str]]] = defaultdict(list)
    for pos, e in enumerate(events):
        if e.event_type in ("bag", "purchase"):
            by_user[e.user_id].append((e.timestamp, pos, e.product_id, e.event_type))
    out = []
    for user in sorted(by_user):
        rows = sorted(by_user[user])
        purchased = {p for _, _, p, t in rows if t == "purchase"}
        if len(purchased) < min_purchases:
            continue
        out.append(LifetimeList(user, tuple((p, t) for _, _, p, t in rows)))
    return out


def build_sessions(events: Sequence[Event]) -> list[Session]:
    """Group events by session id (first-appearance order), each sorted by time."""
    grouped: dict[str, list[tuple[int, int, Event]]] = {}
    owner: dict[str, str] = {}
    for pos, e in enumerate(events):
        if e.session_id not in grouped:
            grouped[e.session_id] = []
            owner[e.session_id] = e.user_id
        elif owner[e.session_id] != e.user_id:
            raise IntegrityError(
                f"session {e.session_id!r} spans users {owner[e.session_id]!r} and {e.user_id!r}"
            )
        grouped[e.session_id].append((e.timestamp, pos, e))
    return [
        Session(sid, owner[sid], tuple(e for _, _, e in sorted(rows, key=lambda r: r[:2])))
        for sid, rows in grouped.items()
    ]


def load_catalog(path, on_error: str = "abort") -> list[ProductRecord]:
    return parse_catalog(read_lines(path), on_error=on_error)


def load_events(path, catalog_ids: set[str] | None = None, strict: bool = False) -> list[Event]:
    try:
        return parse_events(read_lines(path), catalog_ids, strict)
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text") from exc
