"""Instruction/response construction for next-event targets.

A selected target becomes one training instance: the window of events
preceding it is rendered through a fixed prompt grammar with discrete
time-gap bucket tokens, and the target event itself is the response.
Tokenization is event-level: every event contributes [bucket id, event id],
and the template scaffolding contributes fixed structural ids (header,
footer, and in the default mode the bucket hinting the gap to the target).

Grammar (default mode), rendered byte-for-byte like this:

    PATIENT HISTORY:
    [+0d] LAB: L003
    [+2-3d] DIAGNOSIS: D007
    PREDICT NEXT EVENT: [+4-7d]

with the response rendered as "LAB: L004". With predict_time enabled the
gap bucket moves from the footer into the response, so the model must also
generate the timing token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from nep.errors import ValidationError
from nep.events import (
    BOS_ID,
    BUCKET_ID_BASE,
    EOS_ID,
    MASK_ID,
    N_BUCKETS,
    N_SPECIAL,
    PAD_ID,
    SEP_ID,
    UNK_GLYPH,
    UNK_ID,
    EventVocabulary,
)

HEADER_TEXT = "PATIENT HISTORY:"
FOOTER_TEXT = "PREDICT NEXT EVENT:"

# Bucket boundaries in days: {0}, {1}, [2,3], [4,7], [8,30], [31,90], [91,inf)
_BUCKET_UPPER = (0, 1, 3, 7, 30, 90)
BUCKET_GLYPHS = ("+0d", "+1d", "+2-3d", "+4-7d", "+8-30d", "+31-90d", "+91d+")

_SPECIAL_GLYPHS = {PAD_ID: "<PAD>", EOS_ID: "<EOS>", UNK_ID: UNK_GLYPH,
                   MASK_ID: "<MASK>"}
_GLYPH_TO_SPECIAL = {g: i for i, g in _SPECIAL_GLYPHS.items()}


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window and token-budget settings."""

    window: int = 32
    max_tokens: int = 512
    stride: int = 1
    predict_time: bool = False
    include_short_history: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if self.stride != 1:
            raise ValidationError("only stride 1 is supported")
        # One event costs two ids (bucket + code); the structural margin is
        # handled by oldest-first truncation when the cap is tight.
        if self.max_tokens < 2 * self.window:
            raise ValidationError("max_tokens too small for the window")
        if self.max_tokens < 8:
            raise ValidationError("max_tokens must fit at least one event")

    def n_structural(self) -> int:
        """Fixed ids in a context: header, footer, plus the gap bucket when
        the response does not carry it."""
        return 2 if self.predict_time else 3


@dataclass(frozen=True)
class TrainingInstance:
    """One instruction/response pair in token-id form.

    loss_mask covers the packed sequence context+response and is True only
    on response positions.
    """

    context_tokens: tuple
    response_tokens: tuple
    loss_mask: tuple
    patient_id: str
    target_index: int

    def __post_init__(self):
        if sum(self.loss_mask) != len(self.response_tokens):
            raise ValidationError("loss_mask must select exactly the response")
        if len(self.loss_mask) != len(self.context_tokens) + len(self.response_tokens):
            raise ValidationError("loss_mask length mismatch")

    @property
    def tokens(self) -> tuple:
        return self.context_tokens + self.response_tokens


def time_bucket(delta_days: int) -> int:
    """Bucket index (0..6) for a non-negative day gap."""
    if delta_days < 0:
        raise ValidationError(f"negative time delta {delta_days}")
    for idx, upper in enumerate(_BUCKET_UPPER):
        if delta_days <= upper:
            return idx
    return N_BUCKETS - 1


def bucket_token_id(delta_days: int) -> int:
    return BUCKET_ID_BASE + time_bucket(delta_days)


def _event_line(vocab: EventVocabulary, token_id: int) -> str:
    if token_id == UNK_ID:
        return UNK_GLYPH
    etype, value = vocab.decode(token_id)
    return f"{etype.upper()}: {value}"


def _parse_event_part(vocab: EventVocabulary, part: str) -> int:
    if part in _GLYPH_TO_SPECIAL:
        return _GLYPH_TO_SPECIAL[part]
    head, sep, value = part.partition(": ")
    if not sep:
        raise ValidationError(f"cannot parse event text {part!r}")
    return vocab.encode((head.lower(), value))


def build_instances(record, vocab: EventVocabulary, config: WindowConfig,
                    selections):
    """Instances for the given target selections within one record.

    Context is the `window` events immediately preceding the target (fewer
    if the history is shorter); the token cap drops oldest events first and
    never touches the response. Buckets are computed between consecutive
    context events (the first is anchored at +0d) and between the last
    context event and the target.
    """
    events = record.events
    instances = []
    for sel in selections:
        ti = sel.target_index if hasattr(sel, "target_index") else int(sel)
        if not 1 <= ti <= len(events) - 1:
            raise ValidationError(
                f"patient {record.patient_id}: target index {ti} out of range"
            )
        target = events[ti]
        start = max(0, ti - config.window)
        window = list(events[start:ti])

        resp_len = 2 if config.predict_time else 1
        budget = config.max_tokens - config.n_structural() - resp_len
        max_events = budget // 2
        window = window[-max_events:]

        ctx = [BOS_ID]
        prev_ts = window[0].ts
        for ev in window:
            ctx.append(bucket_token_id(ev.ts - prev_ts))
            ctx.append(vocab.encode(ev.pair))
            prev_ts = ev.ts
        ctx.append(SEP_ID)
        gap_id = bucket_token_id(target.ts - window[-1].ts)
        if config.predict_time:
            resp = [gap_id, vocab.encode(target.pair)]
        else:
            ctx.append(gap_id)
            resp = [vocab.encode(target.pair)]

        mask = (False,) * len(ctx) + (True,) * len(resp)
        instances.append(
            TrainingInstance(tuple(ctx), tuple(resp), mask,
                             record.patient_id, ti)
        )
    return instances


def exhaustive_selections(record, config: WindowConfig):
    """All sliding-window target indices at stride 1.

    Yields max(0, n - window) full-window positions, plus the up-to
    window-1 short-history positions when include_short_history is set.
    """
    n = len(record.events)
    first = 1 if config.include_short_history else min(config.window, n)
    return list(range(first, n))


def tokenize(vocab: EventVocabulary, text: str):
    """Parse template-rendered text into token ids (line oriented)."""
    ids = []
    for line in text.split("\n"):
        if not line:
            continue
        if line == HEADER_TEXT:
            ids.append(BOS_ID)
        elif line.startswith(FOOTER_TEXT):
            ids.append(SEP_ID)
            rest = line[len(FOOTER_TEXT):]
            if rest:
                glyph = rest.strip()
                if not (glyph.startswith("[") and glyph.endswith("]")):
                    raise ValidationError(f"cannot parse footer {line!r}")
                ids.append(BUCKET_ID_BASE + BUCKET_GLYPHS.index(glyph[1:-1]))
        elif line.startswith("["):
            close = line.index("] ")
            glyph = line[1:close]
            ids.append(BUCKET_ID_BASE + BUCKET_GLYPHS.index(glyph))
            ids.append(_parse_event_part(vocab, line[close + 2:]))
        else:
            ids.append(_parse_event_part(vocab, line))
    return ids


def detokenize(vocab: EventVocabulary, ids) -> str:
    """Canonical text for a token-id sequence (inverse of tokenize on
    well-formed sequences)."""
    lines = []
    i = 0
    ids = list(ids)
    while i < len(ids):
        tok = ids[i]
        if tok == BOS_ID:
            lines.append(HEADER_TEXT)
            i += 1
        elif tok == SEP_ID:
            line = FOOTER_TEXT
            if i + 1 < len(ids) and BUCKET_ID_BASE <= ids[i + 1] < N_SPECIAL:
                line += f" [{BUCKET_GLYPHS[ids[i + 1] - BUCKET_ID_BASE]}]"
                i += 1
            lines.append(line)
            i += 1
        elif BUCKET_ID_BASE <= tok < N_SPECIAL:
            glyph = BUCKET_GLYPHS[tok - BUCKET_ID_BASE]
            if i + 1 < len(ids):
                lines.append(f"[{glyph}] {_event_line(vocab, ids[i + 1])}")
                i += 2
            else:
                lines.append(f"[{glyph}]")
                i += 1
        elif tok in _SPECIAL_GLYPHS:
            lines.append(_SPECIAL_GLYPHS[tok])
            i += 1
        else:
            lines.append(_event_line(vocab, tok))
            i += 1
    return "\n".join(lines)


def render_instance(vocab: EventVocabulary, instance: TrainingInstance) -> str:
    """Full prompt text: rendered context, then the response line(s)."""
    return (detokenize(vocab, instance.context_tokens) + "\n"
            + detokenize(vocab, instance.response_tokens))


def write_instances(instances, path):
    """Structured-text dataset dump, one instance per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ins in instances:
            fh.write(json.dumps(
                {"patient_id": ins.patient_id,
                 "target_index": ins.target_index,
                 "context_tokens": list(ins.context_tokens),
                 "response_tokens": list(ins.response_tokens)},
                separators=(",", ":")))
            fh.write("\n")


def load_instances(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            ctx = tuple(obj["context_tokens"])
            resp = tuple(obj["response_tokens"])
            mask = (False,) * len(ctx) + (True,) * len(resp)
            out.append(TrainingInstance(ctx, resp, mask,
                                        obj["patient_id"],
                                        int(obj["target_index"])))
    return out
