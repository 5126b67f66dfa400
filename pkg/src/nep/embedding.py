"""Frozen-model patient embeddings from final hidden states.

The most recent events (up to the serializer window) are rendered as the
usual prompt minus any response, run through the causal model, and the
final-layer hidden states are mean-pooled over non-pad positions (last-token
pooling is the alternative mode). The model is strictly read-only here: a
parameter checksum is taken before and after each cohort pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from nep.errors import ValidationError
from nep.events import BOS_ID, PAD_ID, SEP_ID, EventVocabulary
from nep.model import ModelParams, forward
from nep.serialize import WindowConfig, bucket_token_id

POOLING_MODES = ("mean", "last")


@dataclass
class EmbeddingMatrix:
    """Per-patient embedding rows plus the provenance needed to reuse them."""

    matrix: np.ndarray
    patient_ids: list
    provenance: dict

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.patient_ids):
            raise ValidationError("embedding rows must match patient ids")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("embeddings contain non-finite values")

    def row(self, patient_id: str) -> np.ndarray:
        return self.matrix[self.patient_ids.index(patient_id)]


def embedding_token_ids(vocab: EventVocabulary, record,
                        config: WindowConfig):
    """Prompt ids for embedding: header, the most recent events with their
    gap buckets, footer; no target and therefore no response."""
    if not record.events:
        raise ValidationError(f"patient {record.patient_id}: no events to embed")
    window = list(record.events[-config.window:])
    max_events = (config.max_tokens - 2) // 2
    window = window[-max_events:]
    ids = [BOS_ID]
    prev_ts = window[0].ts
    for ev in window:
        ids.append(bucket_token_id(ev.ts - prev_ts))
        ids.append(vocab.encode(ev.pair))
        prev_ts = ev.ts
    ids.append(SEP_ID)
    return ids


def _pool(hidden, n_valid, mode):
    if mode == "mean":
        return hidden[:n_valid].mean(axis=0)
    return hidden[n_valid - 1]


def embed_patient(params: ModelParams, vocab: EventVocabulary, record,
                  config: WindowConfig, pooling: str = "mean") -> np.ndarray:
    if pooling not in POOLING_MODES:
        raise ValidationError(f"unknown pooling mode {pooling!r}")
    ids = embedding_token_ids(vocab, record, config)
    result = forward(params, np.asarray(ids, dtype=np.int64), "causal")
    return np.asarray(_pool(result.hidden, len(ids), pooling))


def embed_cohort(params: ModelParams, vocab: EventVocabulary, cohort,
                 config: WindowConfig, pooling: str = "mean",
                 batch_size: int = 128,
                 extra_provenance: dict | None = None) -> EmbeddingMatrix:
    """Embed every record; rows follow cohort order. Batches are
    right-padded, which cannot change any row: pads sit after the content
    under the causal mask and are excluded from pooling."""
    if pooling not in POOLING_MODES:
        raise ValidationError(f"unknown pooling mode {pooling!r}")
    if not cohort:
        raise ValidationError("empty cohort")
    before = params.checksum()

    all_ids = []
    for record in cohort:
        try:
            all_ids.append(embedding_token_ids(vocab, record, config))
        except ValidationError as exc:
            raise ValidationError(f"patient {record.patient_id}: {exc}") from exc

    rows = np.empty((len(cohort), params.config.d_model), dtype=np.float32)
    for lo in range(0, len(all_ids), batch_size):
        chunk = all_ids[lo:lo + batch_size]
        width = max(len(ids) for ids in chunk)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        valid = np.zeros((len(chunk), width), dtype=bool)
        for r, seq in enumerate(chunk):
            ids[r, :len(seq)] = seq
            valid[r, :len(seq)] = True
        result = forward(params, ids, "causal", key_valid=valid)
        for r, seq in enumerate(chunk):
            rows[lo + r] = _pool(result.hidden[r], len(seq), pooling)

    if params.checksum() != before:
        raise ValidationError("model parameters changed during embedding")

    provenance = {
        "checkpoint_id": before[:16],
        "pooling": pooling,
        "d_model": params.config.d_model,
        "count": len(cohort),
        "vocab_fingerprint": vocab.fingerprint(),
    }
    provenance.update(extra_provenance or {})
    return EmbeddingMatrix(rows, [r.patient_id for r in cohort], provenance)


# ---------------------------------------------------------------------------
# file formats: CSV and packed little-endian float32; both readers required.

_MAGIC = b"NEPEMB1\n"


def _header_json(emb: EmbeddingMatrix) -> str:
    import json

    return json.dumps(
        {"d_model": int(emb.matrix.shape[1]), "count": int(emb.matrix.shape[0]),
         "provenance": emb.provenance},
        separators=(",", ":"), sort_keys=True)


def write_embeddings_csv(emb: EmbeddingMatrix, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#nep-embeddings " + _header_json(emb) + "\n")
        for pid, row in zip(emb.patient_ids, emb.matrix):
            cells = ",".join(np.format_float_positional(np.float32(x), unique=True)
                             for x in row)
            fh.write(f"{pid},{cells}\n")


def read_embeddings_csv(path) -> EmbeddingMatrix:
    import json

    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#nep-embeddings "):
            raise ValidationError(f"not an embedding CSV: {path}")
        info = json.loads(header[len("#nep-embeddings "):])
        ids = []
        rows = []
        for line in fh:
            pid, _, rest = line.rstrip("\n").partition(",")
            ids.append(pid)
            rows.append(np.array([np.float32(x) for x in rest.split(",")],
                                 dtype=np.float32))
    matrix = np.vstack(rows)
    if matrix.shape != (info["count"], info["d_model"]):
        raise ValidationError("embedding CSV shape disagrees with its header")
    return EmbeddingMatrix(matrix, ids, info["provenance"])


def write_embeddings_binary(emb: EmbeddingMatrix, path):
    import json

    header = json.dumps(
        {"d_model": int(emb.matrix.shape[1]), "count": int(emb.matrix.shape[0]),
         "provenance": emb.provenance, "patient_ids": emb.patient_ids},
        separators=(",", ":"), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())


def read_embeddings_binary(path) -> EmbeddingMatrix:
    import json

    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValidationError(f"not an embedding binary: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        info = json.loads(fh.read(hlen).decode())
        data = fh.read(info["count"] * info["d_model"] * 4)
    matrix = np.frombuffer(data, dtype="<f4").reshape(info["count"],
                                                      info["d_model"]).copy()
    return EmbeddingMatrix(matrix, list(info["patient_ids"]), info["provenance"])


def read_embeddings(path) -> EmbeddingMatrix:
    """Dispatch on content: binary magic first, CSV otherwise."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
    if magic == _MAGIC:
        return read_embeddings_binary(path)
    return read_embeddings_csv(path)
