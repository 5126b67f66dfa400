"""Core domain types for clinical event streams.

A patient history is a chronologically ordered list of (type, value, ts)
events. The cohort file is line-delimited JSON, one patient per line, with
canonical field names patient_id / events / outcomes; see load_cohort and
write_cohort for the exact contract. Loading enforces the record invariants
and replaces rare (type, value) pairs by the unknown glyph before the
vocabulary is built, so every later stage (sampler included) sees the
filtered world.

All types are immutable after load and safe to share read-only across
workers.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from nep.errors import CohortParseError, ValidationError

EVENT_TYPES = ("diagnosis", "medication", "lab", "vital", "procedure", "death")

# Reserved id prefix [0, N_SPECIAL): six control tokens plus the seven
# time-gap bucket tokens owned by nep.serialize.
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID, SEP_ID = range(6)
BUCKET_ID_BASE = 6
N_BUCKETS = 7
N_SPECIAL = BUCKET_ID_BASE + N_BUCKETS

UNK_GLYPH = "<UNK>"

# Glyphs the prompt grammar uses as field separators; codes must not contain
# them (nor control characters) or rendering would stop being injective.
_FORBIDDEN_VALUE_CHARS = frozenset(":[]")


def _valid_value(value: str) -> bool:
    if not value:
        return False
    for ch in value:
        if ch in _FORBIDDEN_VALUE_CHARS or ord(ch) < 0x20 or ch == "\x7f":
            return False
    return True


@dataclass(frozen=True)
class ClinicalEvent:
    """One timestamped clinical observation: (type, code value, day offset)."""

    event_type: str
    value: str
    ts: int

    def __post_init__(self):
        if self.event_type not in EVENT_TYPES:
            raise ValidationError(f"unknown event type {self.event_type!r}")
        if not isinstance(self.ts, int) or isinstance(self.ts, bool) or self.ts < 0:
            raise ValidationError(f"ts must be an integer >= 0, got {self.ts!r}")
        if not isinstance(self.value, str) or not _valid_value(self.value):
            raise ValidationError(
                f"event value {self.value!r} is empty or contains a control "
                "character or one of the reserved glyphs ':[]'"
            )

    @property
    def pair(self) -> tuple[str, str]:
        return (self.event_type, self.value)


@dataclass(frozen=True)
class PatientRecord:
    """A patient's chronologically ordered event series plus outcome labels.

    outcomes maps a task name to either {"label": 0|1} or
    {"time": days, "event": 0|1}. Events must be sorted by ts non-decreasing
    (ties keep input order); at most one death event, and if present it is
    the last event.
    """

    patient_id: str
    events: tuple[ClinicalEvent, ...]
    outcomes: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        self.validate()

    def validate(self):
        if not self.patient_id:
            raise ValidationError("empty patient_id")
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.ts < prev.ts:
                raise ValidationError(
                    f"patient {self.patient_id}: events out of chronological "
                    f"order (ts {prev.ts} followed by {cur.ts})"
                )
        deaths = [i for i, e in enumerate(self.events) if e.event_type == "death"]
        if len(deaths) > 1:
            raise ValidationError(f"patient {self.patient_id}: multiple death events")
        if deaths and deaths[0] != len(self.events) - 1:
            raise ValidationError(
                f"patient {self.patient_id}: death event is not the last event"
            )
        for task, out in self.outcomes.items():
            keys = set(out)
            if keys != {"label"} and keys != {"time", "event"}:
                raise ValidationError(
                    f"patient {self.patient_id}: outcome {task!r} must be "
                    "{label} or {time, event}"
                )


class EventVocabulary:
    """Bijection between token ids and (event_type, value) pairs.

    Ids [0, N_SPECIAL) are reserved for control and time-bucket tokens;
    event pairs occupy [N_SPECIAL, size). encode() maps unknown pairs to
    UNK_ID; decode() of a special or out-of-range id raises.
    """

    def __init__(self, pairs):
        ordered = sorted(set(pairs))
        for etype, value in ordered:
            if etype not in EVENT_TYPES or not _valid_value(value):
                raise ValidationError(f"invalid vocabulary pair {(etype, value)!r}")
            if value == UNK_GLYPH:
                raise ValidationError("the unknown glyph cannot be a vocabulary value")
        self._pairs = tuple(ordered)
        self._index = {p: N_SPECIAL + i for i, p in enumerate(ordered)}

    @property
    def size(self) -> int:
        """Total id count, specials included (model vocab dimension)."""
        return N_SPECIAL + len(self._pairs)

    @property
    def n_events(self) -> int:
        return len(self._pairs)

    @property
    def pairs(self) -> tuple[tuple[str, str], ...]:
        return self._pairs

    def encode(self, pair) -> int:
        return self._index.get(tuple(pair), UNK_ID)

    def decode(self, token_id: int) -> tuple[str, str]:
        if not N_SPECIAL <= token_id < self.size:
            raise ValidationError(f"id {token_id} does not decode to an event pair")
        return self._pairs[token_id - N_SPECIAL]

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._index

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for etype, value in self._pairs:
            h.update(f"{etype}\x00{value}\x00".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class FrequencyTable:
    """Event counts per event type over a cohort (k = number of types seen)."""

    counts: dict

    def __post_init__(self):
        if not self.counts:
            raise ValidationError("frequency table over an empty cohort")
        for etype, count in self.counts.items():
            if etype not in EVENT_TYPES or count < 1:
                raise ValidationError(f"bad frequency entry {etype!r}: {count}")

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def event_type_frequencies(cohort) -> FrequencyTable:
    """Exact per-type event counts across all records."""
    if not cohort:
        raise ValidationError("empty cohort")
    counts = Counter()
    for record in cohort:
        for event in record.events:
            counts[event.event_type] += 1
    return FrequencyTable(dict(sorted(counts.items())))


def _parse_record(obj, line_no):
    if not isinstance(obj, dict):
        raise CohortParseError("patient line is not an object", line_no)
    extra = set(obj) - {"patient_id", "events", "outcomes"}
    if extra:
        raise CohortParseError(f"unknown fields {sorted(extra)}", line_no)
    missing = {"patient_id", "events"} - set(obj)
    if missing:
        raise CohortParseError(f"missing fields {sorted(missing)}", line_no)
    events = []
    for ev in obj["events"]:
        if set(ev) != {"type", "value", "ts"}:
            raise CohortParseError(
                f"event fields must be exactly type/value/ts, got {sorted(ev)}",
                line_no,
            )
        events.append(ClinicalEvent(ev["type"], ev["value"], ev["ts"]))
    outcomes = {}
    for task, out in (obj.get("outcomes") or {}).items():
        if set(out) == {"label"}:
            outcomes[task] = {"label": int(out["label"])}
        elif set(out) == {"time", "event"}:
            outcomes[task] = {"time": float(out["time"]), "event": int(out["event"])}
        else:
            raise CohortParseError(f"outcome {task!r} has fields {sorted(out)}", line_no)
    return PatientRecord(obj["patient_id"], tuple(events), outcomes)


def load_cohort(path, min_count: int = 2):
    """Load and validate a cohort file, building its event vocabulary.

    (type, value) pairs occurring fewer than min_count times cohort-wide are
    replaced by the unknown glyph before the vocabulary is constructed, so
    the vocabulary covers exactly the surviving pairs plus the specials.

    Returns (records, vocab). Raises CohortParseError on malformed lines
    (with the line number), ValidationError on invariant violations,
    duplicate patient ids, or an empty cohort.
    """
    records = []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            record = _parse_record(obj, line_no)
            if record.patient_id in seen_ids:
                raise ValidationError(f"duplicate patient_id {record.patient_id!r}")
            seen_ids.add(record.patient_id)
            records.append(record)
    if not records:
        raise ValidationError(f"empty cohort: {path}")

    pair_counts = Counter(e.pair for r in records for e in r.events)
    keep = {p for p, c in pair_counts.items() if c >= min_count and p[1] != UNK_GLYPH}

    filtered = []
    for record in records:
        events = tuple(
            e if e.pair in keep else ClinicalEvent(e.event_type, UNK_GLYPH, e.ts)
            for e in record.events
        )
        filtered.append(PatientRecord(record.patient_id, events, record.outcomes))
    return filtered, EventVocabulary(keep)


def record_to_obj(record: PatientRecord) -> dict:
    """Canonical JSON-ready form of a record (fixed key order)."""
    return {
        "patient_id": record.patient_id,
        "events": [
            {"type": e.event_type, "value": e.value, "ts": e.ts} for e in record.events
        ],
        "outcomes": {
            task: dict(sorted(out.items())) for task, out in sorted(record.outcomes.items())
        },
    }


def write_cohort(cohort, path):
    """Write the canonical cohort file: UTF-8, LF endings, one patient/line.

    The form is idempotent: loading the written file and writing it again
    yields byte-identical output.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in cohort:
            fh.write(json.dumps(record_to_obj(record), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")
