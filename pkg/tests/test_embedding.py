"""Schema, hashing encoder, columnar batches, and the embedding table."""
import numpy as np
import pytest

from priorctr.embedding import (Batch, EmbeddingTable, EmptyMultihot, FieldSpec,
                                IndexOutOfRange, Schema, UnknownField, encode)


def small_schema():
    return Schema([FieldSpec("user", 10), FieldSpec("item", 8),
                   FieldSpec("tags", 6, multi_hot=True)], item_field="item")


class TestSchema:
    def test_offsets_and_total(self):
        s = small_schema()
        assert s.offsets == [0, 10, 18]
        assert s.total_values == 24
        assert s.num_fields == 3
        assert s.item_field_pos == 1

    def test_digest_changes_with_fields(self):
        a = small_schema()
        b = Schema([FieldSpec("user", 11), FieldSpec("item", 8),
                    FieldSpec("tags", 6, multi_hot=True)], item_field="item")
        assert a.digest() != b.digest()
        assert a.digest() == small_schema().digest()

    def test_text_round_trip(self):
        s = small_schema()
        back = Schema.from_text(s.to_text())
        assert back.digest() == s.digest()
        assert back.item_field == "item"
        assert back.fields[2].multi_hot

    def test_indexed_flag_round_trips(self):
        s = Schema([FieldSpec("f0", 5, indexed=True)])
        assert Schema.from_text(s.to_text()).fields[0].indexed

    def test_empty_schema_rejected(self):
        with pytest.raises(ValueError):
            Schema([])

    def test_bad_item_field_rejected(self):
        with pytest.raises(UnknownField):
            Schema([FieldSpec("a", 3)], item_field="missing")

    def test_bad_directive_rejected(self):
        with pytest.raises(ValueError):
            Schema.from_text("bogus line here\n")


class TestEncode:
    def test_deterministic_and_in_range(self):
        s = small_schema()
        raw = {"user": "u1", "item": "i7", "tags": "a|b", "label": 1}
        e1, e2 = encode(raw, s), encode(raw, s)
        assert e1.field_indices == e2.field_indices
        assert e1.label == 1
        for j, idx in enumerate(e1.field_indices):
            lo = s.offsets[j]
            hi = lo + s.fields[j].vocab
            assert all(lo <= i < hi for i in idx)

    def test_item_id_comes_from_item_field(self):
        s = small_schema()
        e = encode({"user": "u", "item": "x", "tags": "t", "label": 0}, s)
        assert e.item_id == e.field_indices[1][0]

    def test_indexed_field_passthrough(self):
        s = Schema([FieldSpec("f0", 5, indexed=True)])
        e = encode({"f0": "3", "label": 0}, s)
        assert e.field_indices[0] == [3]

    def test_indexed_out_of_range(self):
        s = Schema([FieldSpec("f0", 5, indexed=True)])
        with pytest.raises(IndexOutOfRange):
            encode({"f0": "7", "label": 0}, s)

    def test_empty_multihot_rejected(self):
        s = small_schema()
        with pytest.raises(EmptyMultihot):
            encode({"user": "u", "item": "i", "tags": "", "label": 0}, s)

    def test_unknown_column_rejected(self):
        s = small_schema()
        with pytest.raises(UnknownField):
            encode({"user": "u", "item": "i", "tags": "t", "ghost": "x",
                    "label": 0}, s)

    def test_missing_field_rejected(self):
        s = small_schema()
        with pytest.raises(UnknownField):
            encode({"user": "u", "tags": "t", "label": 0}, s)


def random_batch(schema, n, rng, max_tags=3):
    insts = []
    for _ in range(n):
        raw = {"user": f"u{rng.integers(100)}", "item": f"i{rng.integers(100)}",
               "tags": [f"t{rng.integers(50)}"
                        for _ in range(rng.integers(1, max_tags + 1))],
               "label": int(rng.integers(0, 2))}
        insts.append(encode(raw, schema))
    return insts


class TestBatchPooling:
    def test_mean_pooling_matches_instance_loop(self):
        rng = np.random.default_rng(0)
        schema = small_schema()
        insts = random_batch(schema, 32, rng)
        batch = Batch.from_instances(insts)
        table = rng.normal(size=(schema.total_values, 4))
        for j in range(schema.num_fields):
            pooled, _ = batch.pooled(table, j)
            for i, inst in enumerate(insts):
                ref = np.mean([table[k] for k in inst.field_indices[j]], axis=0)
                np.testing.assert_allclose(pooled[i], ref, atol=1e-12)

    def test_one_hot_field_has_no_offsets(self):
        schema = small_schema()
        batch = Batch.from_instances(random_batch(schema, 8,
                                                  np.random.default_rng(1)))
        assert batch.field_offsets[0] is None
        assert batch.field_offsets[1] is None

    def test_labels_and_items(self):
        schema = small_schema()
        insts = random_batch(schema, 8, np.random.default_rng(2))
        batch = Batch.from_instances(insts)
        assert batch.labels.tolist() == [i.label for i in insts]
        assert batch.items.tolist() == [i.item_id for i in insts]


class TestEmbeddingTable:
    def test_lookup_matches_instance_loop(self):
        rng = np.random.default_rng(3)
        schema = small_schema()
        insts = random_batch(schema, 16, rng)
        batch = Batch.from_instances(insts)
        emb = EmbeddingTable(schema, 5, rng)
        out = emb.lookup(batch)
        assert out.shape == (16, 3, 5)
        for i, inst in enumerate(insts):
            for j in range(3):
                ref = np.mean([emb.slot.values[k]
                               for k in inst.field_indices[j]], axis=0)
                np.testing.assert_allclose(out[i, j], ref, atol=1e-12)

    def test_scatter_grad_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        schema = small_schema()
        batch = Batch.from_instances(random_batch(schema, 12, rng))
        emb = EmbeddingTable(schema, 3, rng)
        upstream = rng.normal(size=(12, 3, 3))

        def loss():
            return float(np.sum(emb.lookup(batch) * upstream))

        emb.slot.zero_grad()
        emb.scatter_grad(batch, upstream)
        analytic = emb.slot.dense_grad()
        eps = 1e-6
        flat = emb.slot.values.reshape(-1)
        for c in rng.choice(flat.size, size=40, replace=False):
            orig = flat[c]
            flat[c] = orig + eps
            lp = loss()
            flat[c] = orig - eps
            lm = loss()
            flat[c] = orig
            num = (lp - lm) / (2 * eps)
            assert abs(analytic.reshape(-1)[c] - num) < 1e-6

    def test_out_of_range_index_rejected(self):
        schema = small_schema()
        emb = EmbeddingTable(schema, 2, np.random.default_rng(5))
        bad = Batch([np.array([99])] + [np.array([0])] * 2,
                    [None, None, None], np.array([0.0]), np.array([0]))
        with pytest.raises(IndexOutOfRange):
            emb.lookup(bad)

    def test_dtype_option(self):
        schema = small_schema()
        emb = EmbeddingTable(schema, 2, np.random.default_rng(6),
                             dtype=np.float32)
        assert emb.slot.values.dtype == np.float32
