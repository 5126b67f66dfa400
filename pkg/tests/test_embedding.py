import numpy as np
import pytest

from nep.embedding import (
    EmbeddingMatrix,
    embed_cohort,
    embed_patient,
    embedding_token_ids,
    read_embeddings,
    read_embeddings_binary,
    read_embeddings_csv,
    write_embeddings_binary,
    write_embeddings_csv,
)
from nep.errors import ValidationError
from nep.events import PAD_ID
from nep.model import ModelConfig, forward, init_params
from nep.serialize import WindowConfig

from conftest import make_record


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(vocab_size=18, n_layers=2, d_model=24,
                                   n_heads=4, max_positions=64), seed=11)


@pytest.fixture(scope="module")
def vocab():
    from nep.events import EventVocabulary

    return EventVocabulary([("lab", f"L{i}") for i in range(3)]
                           + [("diagnosis", f"D{i}") for i in range(2)])


def cohort_of(vocab, n=6, length=8, seed=0):
    rng = np.random.default_rng(seed)
    cohort = []
    pairs = vocab.pairs
    for i in range(n):
        ts = np.cumsum(rng.integers(0, 4, size=length))
        triples = []
        for j in range(length):
            etype, value = pairs[rng.integers(len(pairs))]
            triples.append((etype, value, int(ts[j])))
        cohort.append(make_record(f"P{i}", triples))
    return cohort


window = WindowConfig(window=6, max_tokens=32)


class TestEmbedPatient:
    def test_mean_pooling_is_hidden_mean(self, params, vocab):
        record = cohort_of(vocab, n=1)[0]
        ids = embedding_token_ids(vocab, record, window)
        hidden = forward(params, np.asarray(ids), "causal").hidden
        emb = embed_patient(params, vocab, record, window, pooling="mean")
        assert np.allclose(emb, hidden.mean(axis=0), atol=1e-7)

    def test_last_pooling(self, params, vocab):
        record = cohort_of(vocab, n=1)[0]
        ids = embedding_token_ids(vocab, record, window)
        hidden = forward(params, np.asarray(ids), "causal").hidden
        emb = embed_patient(params, vocab, record, window, pooling="last")
        assert np.allclose(emb, hidden[-1], atol=1e-7)

    def test_pad_does_not_change_embedding(self, params, vocab):
        record = cohort_of(vocab, n=1)[0]
        ids = embedding_token_ids(vocab, record, window)
        padded = np.array(ids + [PAD_ID] * 5)
        valid = np.array([True] * len(ids) + [False] * 5)
        hidden = forward(params, padded, "causal", key_valid=valid).hidden
        emb_padded = hidden[: len(ids)].mean(axis=0)
        emb = embed_patient(params, vocab, record, window)
        assert np.abs(emb - emb_padded).max() < 1e-6

    def test_empty_record_rejected(self, params, vocab):
        from nep.events import PatientRecord

        with pytest.raises(ValidationError):
            embed_patient(params, vocab, PatientRecord("P0", ()), window)

    def test_recency_truncation(self, params, vocab):
        long_record = cohort_of(vocab, n=1, length=30)[0]
        ids = embedding_token_ids(vocab, long_record, window)
        assert len(ids) == 2 + 2 * 6  # header + footer + window events
        recent = embedding_token_ids(
            vocab, make_record("PX", [(e.event_type, e.value, e.ts)
                                      for e in long_record.events[-6:]]),
            window)
        assert ids[3:] == recent[3:]  # same events (first bucket may differ)


class TestEmbedCohort:
    def test_single_matches_embed_patient(self, params, vocab):
        cohort = cohort_of(vocab, n=1)
        matrix = embed_cohort(params, vocab, cohort, window)
        row = embed_patient(params, vocab, cohort[0], window)
        assert np.abs(matrix.matrix[0] - row).max() < 1e-6

    def test_batched_matches_singles(self, params, vocab):
        rng = np.random.default_rng(3)
        cohort = []
        for i, length in enumerate(rng.integers(2, 12, size=9)):
            cohort.append(cohort_of(vocab, n=1, length=int(length), seed=100 + i)[0])
        matrix = embed_cohort(params, vocab, cohort, window, batch_size=4)
        for i, record in enumerate(cohort):
            single = embed_patient(params, vocab, record, window)
            assert np.abs(matrix.matrix[i] - single).max() < 1e-5

    def test_permutation_permutes_rows(self, params, vocab):
        cohort = cohort_of(vocab, n=5)
        base = embed_cohort(params, vocab, cohort, window)
        perm = [cohort[i] for i in (3, 0, 4, 1, 2)]
        permuted = embed_cohort(params, vocab, perm, window)
        for i, j in enumerate((3, 0, 4, 1, 2)):
            assert np.array_equal(permuted.matrix[i], base.matrix[j])
        assert permuted.patient_ids == [f"P{j}" for j in (3, 0, 4, 1, 2)]

    def test_deterministic_and_frozen(self, params, vocab):
        cohort = cohort_of(vocab, n=4)
        before = params.checksum()
        a = embed_cohort(params, vocab, cohort, window)
        b = embed_cohort(params, vocab, cohort, window)
        assert np.array_equal(a.matrix, b.matrix)
        assert params.checksum() == before
        assert a.provenance["checkpoint_id"] == before[:16]

    def test_different_checkpoints_differ(self, vocab, params):
        other = init_params(params.config, seed=999)
        cohort = cohort_of(vocab, n=5)
        a = embed_cohort(params, vocab, cohort, window).matrix
        b = embed_cohort(other, vocab, cohort, window).matrix
        dist = np.linalg.norm(a - b, axis=1)
        assert (dist > 0).all()

    def test_row_count_invariant(self, params, vocab):
        with pytest.raises(ValidationError):
            EmbeddingMatrix(np.zeros((2, 4), dtype=np.float32), ["P0"], {})
        with pytest.raises(ValidationError):
            EmbeddingMatrix(np.full((1, 4), np.nan, dtype=np.float32), ["P0"], {})


class TestEmbeddingIO:
    def make(self, params, vocab):
        cohort = cohort_of(vocab, n=4)
        return embed_cohort(params, vocab, cohort, window,
                            extra_provenance={"serializer_hash": "abc123"})

    def test_csv_round_trip_exact(self, params, vocab, tmp_path):
        emb = self.make(params, vocab)
        path = tmp_path / "emb.csv"
        write_embeddings_csv(emb, path)
        loaded = read_embeddings_csv(path)
        assert np.array_equal(loaded.matrix, emb.matrix)
        assert loaded.patient_ids == emb.patient_ids
        assert loaded.provenance == emb.provenance

    def test_binary_round_trip_exact(self, params, vocab, tmp_path):
        emb = self.make(params, vocab)
        path = tmp_path / "emb.bin"
        write_embeddings_binary(emb, path)
        loaded = read_embeddings_binary(path)
        assert np.array_equal(loaded.matrix, emb.matrix)
        assert loaded.patient_ids == emb.patient_ids
        assert loaded.provenance == emb.provenance

    def test_rewrite_byte_identical(self, params, vocab, tmp_path):
        emb = self.make(params, vocab)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_embeddings_csv(emb, a)
        write_embeddings_csv(emb, b)
        assert a.read_bytes() == b.read_bytes()

    def test_dispatch(self, params, vocab, tmp_path):
        emb = self.make(params, vocab)
        write_embeddings_csv(emb, tmp_path / "e.csv")
        write_embeddings_binary(emb, tmp_path / "e.bin")
        assert np.array_equal(read_embeddings(tmp_path / "e.csv").matrix,
                              read_embeddings(tmp_path / "e.bin").matrix)

    def test_bad_files_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("not an embedding file\n")
        with pytest.raises(ValidationError):
            read_embeddings(bad)
