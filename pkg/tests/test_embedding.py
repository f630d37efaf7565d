import numpy as np
import pytest

from promptseg.embedding import (
    EMBED_DIM,
    SplitMix64,
    embed_batch,
    embed_hashed,
    embed_lookup,
    fnv1a64,
    load_embedding_table,
    save_embedding_table,
    tokenize,
)
from promptseg.errors import BadTableFormat, EmptyPrompt, KeyNotFound


class TestHashPrimitives:
    def test_fnv1a64_known_values(self):
        # classic published FNV-1a test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_splitmix64_known_sequence(self):
        # reference sequence for seed 1234567 (Vigna's splitmix64.c)
        rng = SplitMix64(1234567)
        got = [rng.next_u64() for _ in range(3)]
        assert got == [
            6457827717110365317,
            3203168211198807973,
            9817491932198370423,
        ]

    def test_unit_interval_mapping_range(self):
        rng = SplitMix64(42)
        vals = [rng.next_unit_interval() for _ in range(1000)]
        assert all(-1.0 <= v < 1.0 for v in vals)
        assert abs(float(np.mean(vals))) < 0.1


class TestEmbedHashed:
    def test_deterministic(self):
        a = embed_hashed("liver")
        b = embed_hashed("liver")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        for text in ("liver", "segment the right kidney", "a b c d"):
            assert np.linalg.norm(embed_hashed(text)) == pytest.approx(1.0, abs=1e-12)

    def test_dimension(self):
        assert embed_hashed("stomach").shape == (EMBED_DIM,)

    def test_tokenization_case_and_whitespace(self):
        assert np.array_equal(embed_hashed("Liver  segment"), embed_hashed("liver segment"))

    def test_order_insensitive(self):
        assert np.array_equal(embed_hashed("a b"), embed_hashed("b a"))

    def test_distinct_tokens_distinct_vectors(self):
        assert not np.allclose(embed_hashed("liver"), embed_hashed("spleen"))

    def test_empty_prompt_raises(self):
        with pytest.raises(EmptyPrompt):
            embed_hashed("  ... !!")

    def test_tokenize(self):
        assert tokenize("Segment the liver-region, now!") == [
            "segment", "the", "liver", "region", "now",
        ]


class TestEmbedLookup:
    def make_table(self, tmp_path):
        rng = np.random.default_rng(0)
        table = {"liver": rng.normal(size=8), "spleen": rng.normal(size=8)}
        path = str(tmp_path / "emb.tsv")
        save_embedding_table(table, path)
        return table, path

    def test_present_key(self, tmp_path):
        table, path = self.make_table(tmp_path)
        loaded = load_embedding_table(path)
        got = embed_lookup("liver", loaded)
        want = table["liver"] / np.linalg.norm(table["liver"])
        assert np.allclose(got, want, atol=1e-12)

    def test_absent_key(self, tmp_path):
        _, path = self.make_table(tmp_path)
        with pytest.raises(KeyNotFound):
            embed_lookup("pancreas", load_embedding_table(path))

    def test_norm_two_vector_rescaled(self):
        table = {"x": np.array([2.0, 0.0, 0.0])}
        got = embed_lookup("x", table)
        assert np.array_equal(got, np.array([1.0, 0.0, 0.0]))

    def test_whitespace_normalized_key(self, tmp_path):
        _, path = self.make_table(tmp_path)
        loaded = load_embedding_table(path)
        assert np.array_equal(embed_lookup("  liver ", loaded), embed_lookup("liver", loaded))

    def test_bad_header(self, tmp_path):
        path = str(tmp_path / "bad.tsv")
        with open(path, "w") as fh:
            fh.write("dim 8\nliver\t1 2\n")
        with pytest.raises(BadTableFormat):
            load_embedding_table(path)

    def test_wrong_width_row(self, tmp_path):
        path = str(tmp_path / "bad2.tsv")
        with open(path, "w") as fh:
            fh.write("E=3\nliver\t1 2\n")
        with pytest.raises(BadTableFormat):
            load_embedding_table(path)


class TestEmbedBatch:
    def test_single_row_equals_scalar_call(self):
        batch = embed_batch(["liver"], embed_hashed)
        assert batch.shape == (1, EMBED_DIM)
        assert np.array_equal(batch[0], embed_hashed("liver"))

    def test_duplicates_duplicate(self):
        batch = embed_batch(["liver", "liver"], embed_hashed)
        assert np.array_equal(batch[0], batch[1])

    def test_error_names_failing_index(self):
        with pytest.raises(EmptyPrompt, match="prompt 1"):
            embed_batch(["liver", "!!"], embed_hashed)
